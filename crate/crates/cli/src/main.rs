//! `vidscope`: build video indexes, ask questions, run evaluations.
//!
//! Exit codes: 0 success, 2 input error, 3 backend error, 4 corrupt bundle.

mod config;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing::info;
use vidscope::agent::{Agent, AgentTrace, Termination};
use vidscope::bundle::{load_index, save_index};
use vidscope::eval::{load_qa, run_eval};
use vidscope::index::build_index;
use vidscope::ingestion::SourceManifest;
use vidscope::model::{validate_database, IndexDatabase};
use vidscope::tools::Toolbox;
use vidscope::Error;

use config::{FileConfig, Role, Settings};

const EXIT_INPUT: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_CORRUPT: u8 = 4;

#[derive(Parser)]
#[command(name = "vidscope", version, about = "Hierarchical long-video indexing and agentic question answering")]
struct Cli {
    /// TOML config file. Flags override it; it overrides VIDSCOPE_* variables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the deterministic offline backends instead of HTTP endpoints.
    #[arg(long, global = true)]
    mock: bool,
    /// Log verbosity: -v for info, -vv for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index bundle from a source manifest.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        /// Output bundle directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Average-linkage cosine threshold for entity clustering.
        #[arg(long)]
        cluster_threshold: Option<f64>,
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long)]
        chunk_overlap: Option<usize>,
    },
    /// Answer one question against an index.
    Ask {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        question: String,
        /// Write the step trace here as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        query: QueryFlags,
    },
    /// Answer a multiple-choice QA file and report per-category accuracy.
    Eval {
        /// Line-delimited QA items.
        #[arg(long)]
        qa: PathBuf,
        /// Index bundles; items are routed by the bundle's video id.
        #[arg(long = "index", required = true)]
        indexes: Vec<PathBuf>,
        /// Directory for report.json, table.md, records.jsonl and traces/.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        query: QueryFlags,
    },
    /// Check a bundle's checksums and index invariants.
    Validate {
        #[arg(long)]
        index: PathBuf,
    },
    /// Print a saved trace in readable form.
    DumpTrace { trace: PathBuf },
}

#[derive(Args)]
struct QueryFlags {
    /// Hits per caption or visual search.
    #[arg(long)]
    k: Option<usize>,
    /// Entities kept by the first entity-search stage.
    #[arg(long)]
    k1: Option<usize>,
    /// Re-captions kept by the second entity-search stage.
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Frame cap for visual inspection.
    #[arg(long)]
    max_frames: Option<usize>,
}

impl QueryFlags {
    fn apply(&self, s: &mut Settings) {
        let q = &mut s.query;
        set(&mut q.search_k, self.k);
        set(&mut q.entity_k1, self.k1);
        set(&mut q.entity_k2, self.k2);
        set(&mut q.max_steps, self.max_steps);
        set(&mut q.max_frames, self.max_frames);
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::BackendUnavailable(_) | Error::BackendRefusal(_) => EXIT_BACKEND,
            Error::CorruptBundle(_) | Error::VersionMismatch { .. } => EXIT_CORRUPT,
            _ => EXIT_INPUT,
        };
        Failure { code, message: e.to_string() }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_INPUT, message: message.into() }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| input_error(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| input_error(format!("cannot write {}: {e}", path.display())))
}

fn load(dir: &Path) -> Result<IndexDatabase, Failure> {
    let (db, _) = load_index(dir)?;
    Ok(db)
}

const QUERY_ROLES: [Role; 3] = [Role::Reasoner, Role::TextEmbed, Role::VisualEmbed];

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut settings = Settings::resolve(file, cli.mock, &|k| std::env::var(k).ok());

    match cli.command {
        Command::Build { manifest, out, workers, cluster_threshold, chunk_size, chunk_overlap } => {
            set(&mut settings.build.workers, workers);
            set(&mut settings.build.cluster_threshold, cluster_threshold);
            set(&mut settings.build.chunk_size, chunk_size);
            set(&mut settings.build.chunk_overlap, chunk_overlap);
            let manifest = SourceManifest::load(&manifest)?;
            let backends = settings.backends(&[Role::Builder, Role::TextEmbed, Role::VisualEmbed], None)?;
            let (db, report) = build_index(&manifest, &backends, &settings.build)?;
            save_index(&db, Some(&report), &out)?;
            info!(bundle = %out.display(), "bundle written");
            println!(
                "built {}: {} segments, {} mentions, {} entities, {} scenes, {} fallbacks -> {}",
                db.manifest.video_id,
                db.segments.len(),
                db.mentions.len(),
                db.entities.len(),
                db.scenes.len(),
                report.fallbacks("entities") + report.fallbacks("scenes"),
                out.display()
            );
        }
        Command::Ask { index, question, trace, query } => {
            query.apply(&mut settings);
            let db = load(&index)?;
            let backends = settings.backends(&QUERY_ROLES, Some((db.text_dim, db.visual_dim)))?;
            let toolbox = Toolbox::new(&db, &backends, settings.query.clone())?;
            let result = Agent::new(&toolbox).run(&question);
            if let Some(path) = trace {
                write(&path, &result.to_jsonl())?;
            }
            if result.termination == Termination::BackendError {
                return Err(Failure {
                    code: EXIT_BACKEND,
                    message: format!("agent stopped after {} steps: {}", result.step_count, result.error.unwrap_or_default()),
                });
            }
            println!("{}", result.final_answer);
        }
        Command::Eval { qa, indexes, out, workers, query } => {
            query.apply(&mut settings);
            let items = load_qa(&qa)?;
            let dbs = indexes.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
            let mut by_video: HashMap<String, &IndexDatabase> = HashMap::new();
            for db in &dbs {
                if by_video.insert(db.manifest.video_id.clone(), db).is_some() {
                    return Err(input_error(format!("two indexes for video {}", db.manifest.video_id)));
                }
            }
            if let Some(item) = items.iter().find(|i| !by_video.contains_key(&i.video_id)) {
                return Err(input_error(format!("no index given for video {}", item.video_id)));
            }
            let backend_sets = dbs
                .iter()
                .map(|db| settings.backends(&QUERY_ROLES, Some((db.text_dim, db.visual_dim))))
                .collect::<Result<Vec<_>, _>>()?;
            let mut toolboxes = HashMap::new();
            for (db, backends) in dbs.iter().zip(&backend_sets) {
                toolboxes.insert(db.manifest.video_id.clone(), Toolbox::new(db, backends, settings.query.clone())?);
            }
            let (report, traces) = run_eval(&items, &toolboxes, workers.unwrap_or(settings.build.workers));
            if let Some(dir) = out {
                let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
                write(&dir.join("report.json"), &(json + "\n"))?;
                write(&dir.join("table.md"), &report.table())?;
                write(&dir.join("records.jsonl"), &report.records_jsonl())?;
                for (i, t) in traces.iter().enumerate() {
                    if let Some(t) = t {
                        write(&dir.join("traces").join(format!("{i:05}.jsonl")), &t.to_jsonl())?;
                    }
                }
            }
            print!("{}", report.table());
        }
        Command::Validate { index } => {
            let db = load(&index)?;
            let report = validate_database(&db);
            if !report.is_clean() {
                for v in &report.violations {
                    eprintln!("violation: {v}");
                }
                return Err(Failure {
                    code: EXIT_CORRUPT,
                    message: format!("{} invariant violations", report.violations.len()),
                });
            }
            println!(
                "ok: {} (format {}), {} segments, {} entities, {} scenes",
                db.manifest.video_id,
                db.format_version,
                db.segments.len(),
                db.entities.len(),
                db.scenes.len()
            );
        }
        Command::DumpTrace { trace } => {
            let text = fs::read_to_string(&trace).map_err(|e| input_error(format!("cannot read {}: {e}", trace.display())))?;
            let parsed = AgentTrace::from_jsonl(&text).map_err(|e| input_error(format!("{}: {e}", trace.display())))?;
            print!("{}", parsed.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
