//! Settings resolution. Precedence, highest first: command-line flags, the
//! TOML config file, then `VIDSCOPE_*` environment variables.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use vidscope::backends::http::{EndpointConfig, OpenAiChat, OpenAiClient, OpenAiEmbedder, ReqwestTransport, RetryPolicy, Transport};
use vidscope::backends::{Backends, ChatBackend, ChatRequest, ChatResponse, Embedder, VisionBackend, VisionRequest};
use vidscope::model::{BuildConfig, FrameRef, QueryConfig};
use vidscope::{Error, Result};

/// Backend roles, as named in the config file and environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Builder,
    Reasoner,
    TextEmbed,
    VisualEmbed,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Builder, Role::Reasoner, Role::TextEmbed, Role::VisualEmbed];

    pub fn key(self) -> &'static str {
        match self {
            Role::Builder => "builder",
            Role::Reasoner => "reasoner",
            Role::TextEmbed => "text_embed",
            Role::VisualEmbed => "visual_embed",
        }
    }

    fn env_prefix(self) -> String {
        format!("VIDSCOPE_{}", self.key().to_ascii_uppercase())
    }
}

/// One endpoint as written in the file; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialEndpoint {
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub dimension: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsSection {
    pub builder: Option<PartialEndpoint>,
    pub reasoner: Option<PartialEndpoint>,
    pub text_embed: Option<PartialEndpoint>,
    pub visual_embed: Option<PartialEndpoint>,
}

impl BackendsSection {
    fn get(&self, role: Role) -> Option<&PartialEndpoint> {
        match role {
            Role::Builder => self.builder.as_ref(),
            Role::Reasoner => self.reasoner.as_ref(),
            Role::TextEmbed => self.text_embed.as_ref(),
            Role::VisualEmbed => self.visual_embed.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub text_dim: usize,
    pub visual_dim: usize,
}

impl Default for MockSection {
    fn default() -> Self {
        Self { text_dim: 64, visual_dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSection {
    pub timeout_s: u64,
    pub max_attempts: u32,
    pub retry_base_delay_ms: u64,
    /// Frames one vision request may carry.
    pub max_frames: usize,
}

impl Default for HttpSection {
    fn default() -> Self {
        Self { timeout_s: 120, max_attempts: 3, retry_base_delay_ms: 1000, max_frames: 50 }
    }
}

/// The config file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub mock: bool,
    pub backends: BackendsSection,
    pub mock_backends: MockSection,
    pub http: HttpSection,
    pub build: BuildConfig,
    pub query: QueryConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::InvalidInput(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Merges the file's endpoint for `role` over the environment's.
pub fn resolve_endpoint(role: Role, file: Option<&PartialEndpoint>, env: &dyn Fn(&str) -> Option<String>) -> PartialEndpoint {
    let prefix = role.env_prefix();
    let var = |name: &str| env(&format!("{prefix}_{name}")).filter(|v| !v.trim().is_empty());
    let file = file.cloned().unwrap_or_default();
    PartialEndpoint {
        base_url: file.base_url.or_else(|| var("BASE_URL")),
        api_key: file.api_key.or_else(|| var("API_KEY")),
        model: file.model.or_else(|| var("MODEL")),
        dimension: file.dimension.or_else(|| var("DIMENSION").and_then(|d| d.parse().ok())),
    }
}

fn complete(role: Role, p: PartialEndpoint) -> Result<EndpointConfig> {
    let missing = |field: &str| {
        Error::InvalidInput(format!(
            "{} backend needs {field}: set backends.{}.{field} in the config file or {}_{}",
            role.key(),
            role.key(),
            role.env_prefix(),
            field.to_ascii_uppercase()
        ))
    };
    let base_url = p.base_url.ok_or_else(|| missing("base_url"))?;
    let model = p.model.ok_or_else(|| missing("model"))?;
    let embeds = matches!(role, Role::TextEmbed | Role::VisualEmbed);
    if embeds && p.dimension.is_none() {
        return Err(missing("dimension"));
    }
    Ok(EndpointConfig { base_url, api_key: p.api_key, model, dimension: p.dimension })
}

/// Stand-in for a role the current command never calls.
struct Unconfigured(Role);

impl Unconfigured {
    fn error(&self) -> Error {
        Error::InvalidInput(format!("the {} backend is not configured", self.0.key()))
    }
}

impl ChatBackend for Unconfigured {
    fn chat(&self, _: &ChatRequest) -> Result<ChatResponse> {
        Err(self.error())
    }
}

impl VisionBackend for Unconfigured {
    fn max_frames(&self) -> usize {
        1
    }
    fn answer(&self, _: &VisionRequest) -> Result<String> {
        Err(self.error())
    }
}

impl Embedder for Unconfigured {
    fn dimension(&self) -> usize {
        0
    }
    fn embed_text(&self, _: &str) -> Result<Vec<f32>> {
        Err(self.error())
    }
    fn embed_frames(&self, _: &[FrameRef]) -> Result<Vec<f32>> {
        Err(self.error())
    }
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub mock: bool,
    pub endpoints: Vec<(Role, PartialEndpoint)>,
    pub mock_backends: MockSection,
    pub http: HttpSection,
    pub build: BuildConfig,
    pub query: QueryConfig,
}

impl Settings {
    pub fn resolve(file: FileConfig, mock_flag: bool, env: &dyn Fn(&str) -> Option<String>) -> Self {
        let endpoints = Role::ALL.iter().map(|&r| (r, resolve_endpoint(r, file.backends.get(r), env))).collect();
        Settings {
            mock: mock_flag || file.mock,
            endpoints,
            mock_backends: file.mock_backends,
            http: file.http,
            build: file.build,
            query: file.query,
        }
    }

    fn endpoint(&self, role: Role) -> PartialEndpoint {
        self.endpoints.iter().find(|(r, _)| *r == role).map(|(_, e)| e.clone()).unwrap_or_default()
    }

    /// Backends for a command that calls the roles in `needed`. In mock mode
    /// the embedders take `dims` when given (to match an existing index).
    pub fn backends(&self, needed: &[Role], dims: Option<(usize, usize)>) -> Result<Backends> {
        if self.mock {
            let (t, v) = dims.unwrap_or((self.mock_backends.text_dim, self.mock_backends.visual_dim));
            return Ok(Backends::mock(t, v, self.http.max_frames));
        }
        let transport: Arc<dyn Transport> = Arc::new(ReqwestTransport::new(Duration::from_secs(self.http.timeout_s))?);
        let retry = RetryPolicy {
            max_attempts: self.http.max_attempts,
            base_delay: Duration::from_millis(self.http.retry_base_delay_ms),
        };
        let client = |role: Role| -> Result<Option<OpenAiClient>> {
            if !needed.contains(&role) {
                return Ok(None);
            }
            Ok(Some(OpenAiClient::new(complete(role, self.endpoint(role))?, transport.clone(), retry)))
        };
        let chat = |role: Role| -> Result<Arc<OpenAiChat>> {
            Ok(Arc::new(OpenAiChat::new(client(role)?.expect("role is needed"), self.http.max_frames)))
        };
        let embedder = |role: Role| -> Result<Arc<dyn Embedder>> {
            Ok(match client(role)? {
                Some(c) => Arc::new(OpenAiEmbedder::new(c)?),
                None => Arc::new(Unconfigured(role)),
            })
        };
        let (builder, captioner): (Arc<dyn ChatBackend>, Arc<dyn VisionBackend>) = if needed.contains(&Role::Builder) {
            let c = chat(Role::Builder)?;
            (c.clone(), c)
        } else {
            (Arc::new(Unconfigured(Role::Builder)), Arc::new(Unconfigured(Role::Builder)))
        };
        let (reasoner, inspector): (Arc<dyn ChatBackend>, Arc<dyn VisionBackend>) = if needed.contains(&Role::Reasoner) {
            let c = chat(Role::Reasoner)?;
            (c.clone(), c)
        } else {
            (Arc::new(Unconfigured(Role::Reasoner)), Arc::new(Unconfigured(Role::Reasoner)))
        };
        let backends = Backends {
            builder,
            reasoner,
            captioner,
            inspector,
            text_embedder: embedder(Role::TextEmbed)?,
            visual_embedder: embedder(Role::VisualEmbed)?,
        };
        if let Some((t, v)) = dims {
            let (bt, bv) = (backends.text_embedder.dimension(), backends.visual_embedder.dimension());
            if (bt, bv) != (t, v) {
                return Err(Error::InvalidInput(format!(
                    "embedders give dimensions {bt}/{bv} but the index was built with {t}/{v}"
                )));
            }
        }
        Ok(backends)
    }
}
