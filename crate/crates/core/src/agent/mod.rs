//! The think-act-observe loop over the tools.

pub mod prompt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tracing::{debug, warn};

use crate::backends::{chat_text, ChatMessage, ChatRequest, ChatResponse, ToolInvocation};
use crate::error::{Error, Result};
use crate::ingestion::span_label;
use crate::prompts;
use crate::time::{render_timecode, TimeRange};
use crate::tools::{self, Toolbox};

use prompt::MemoryBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Finished,
    BudgetExhausted,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 1-based.
    pub step: usize,
    pub thought: String,
    pub tool: String,
    pub arguments: Map<String, Value>,
    pub observation: String,
    pub timestamps: Vec<TimeRange>,
    /// The observation is an error message rather than a tool result.
    #[serde(default)]
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub question: String,
    pub steps: Vec<TraceStep>,
    pub final_answer: String,
    pub step_count: usize,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TraceLine {
    Step(TraceStep),
    Final {
        question: String,
        final_answer: String,
        step_count: usize,
        termination: Termination,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

impl AgentTrace {
    /// One line per step, then one closing line with the outcome.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&TraceLine::Step(s.clone())).expect("trace serializes"));
            out.push('\n');
        }
        let fin = TraceLine::Final {
            question: self.question.clone(),
            final_answer: self.final_answer.clone(),
            step_count: self.step_count,
            termination: self.termination,
            error: self.error.clone(),
        };
        out.push_str(&serde_json::to_string(&fin).expect("trace serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str::<TraceLine>(line)? {
                TraceLine::Step(s) => steps.push(s),
                TraceLine::Final { question, final_answer, step_count, termination, error } => {
                    return Ok(Self { question, steps, final_answer, step_count, termination, error });
                }
            }
            debug!(line = n + 1, "trace step read");
        }
        Err(Error::InvalidInput("trace has no final record".into()))
    }

    /// Plain-text rendering for humans.
    pub fn render(&self) -> String {
        let mut out = format!("Question: {}\n", self.question);
        for s in &self.steps {
            out.push_str(&format!("\nStep {}: {}", s.step, s.tool));
            if !s.arguments.is_empty() {
                out.push_str(&format!(" {}", Value::Object(s.arguments.clone())));
            }
            out.push('\n');
            if !s.thought.is_empty() {
                out.push_str(&format!("  thought: {}\n", s.thought));
            }
            if !s.observation.is_empty() {
                out.push_str(&format!("  observation: {}\n", s.observation.replace('\n', "\n    ")));
            }
        }
        out.push_str(&format!(
            "\nAnswer ({:?}, {} steps): {}\n",
            self.termination, self.step_count, self.final_answer
        ));
        out
    }
}

/// The global summary plus every tool call and its result, append-only.
#[derive(Debug, Clone)]
pub struct ContextMemory {
    summary: String,
    blocks: Vec<MemoryBlock>,
    budget_chars: usize,
}

const TRUNCATED: &str = "[earlier observation omitted]";

impl ContextMemory {
    pub fn new(summary: impl Into<String>, budget_chars: usize) -> Self {
        Self { summary: summary.into(), blocks: Vec::new(), budget_chars }
    }

    pub fn summary(&self) -> &str {
        &self.summary
    }

    /// Entries including the summary.
    pub fn len(&self) -> usize {
        1 + self.blocks.len()
    }

    /// Never true: the summary entry is always present.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn push(&mut self, block: MemoryBlock) {
        self.blocks.push(block);
    }

    /// Serialized steps. Oldest observations are replaced by a marker until
    /// the text fits the budget; the newest one is always kept.
    pub fn render(&self) -> String {
        let mut keep = vec![true; self.blocks.len()];
        let full: Vec<String> = self.blocks.iter().map(|b| b.render(&b.observation)).collect();
        let short: Vec<String> = self.blocks.iter().map(|b| b.render(TRUNCATED)).collect();
        let mut total: usize = full.iter().map(|s| s.chars().count()).sum();
        for i in 0..self.blocks.len().saturating_sub(1) {
            if total <= self.budget_chars {
                break;
            }
            keep[i] = false;
            total = total - full[i].chars().count() + short[i].chars().count();
        }
        let parts: Vec<&str> =
            (0..self.blocks.len()).map(|i| if keep[i] { full[i].as_str() } else { short[i].as_str() }).collect();
        parts.join("\n")
    }
}

fn observation_text(result: &tools::ToolResult) -> String {
    if result.timestamps.is_empty() {
        return result.response.clone();
    }
    let spans: Vec<String> = result.timestamps.iter().map(span_label).collect();
    format!("{}\nTimestamps: {}", result.response, spans.join(", "))
}

const CORRECTION: &str = "Call exactly one of the provided tools. Use finish to give the final answer.";

enum Decision {
    Call(ToolInvocation),
    Fail(String),
}

pub struct Agent<'a> {
    toolbox: &'a Toolbox<'a>,
}

impl<'a> Agent<'a> {
    pub fn new(toolbox: &'a Toolbox<'a>) -> Self {
        Self { toolbox }
    }

    fn whole_range(&self) -> [String; 2] {
        [render_timecode(0.0), render_timecode(self.toolbox.db.duration_s())]
    }

    fn planner_request(&self, question: &str, memory: &ContextMemory) -> ChatRequest {
        let [a, b] = self.whole_range();
        prompt::planner_request(
            self.toolbox.config.max_steps,
            tools::tool_schemas(),
            memory.summary(),
            [&a, &b],
            question,
            &memory.render(),
        )
    }

    fn is_known(name: &str) -> bool {
        tools::tool_schemas().iter().any(|t| t.name == name)
    }

    /// One planner decision, with a single corrective re-prompt.
    fn decide(&self, request: &ChatRequest) -> Result<Decision> {
        let chat = self.toolbox.backends.reasoner.as_ref();
        let mut request = request.clone();
        for attempt in 0..2 {
            let reply = chat.chat(&request)?;
            let problem = match &reply {
                ChatResponse::ToolCall(call) if Self::is_known(&call.name) => return Ok(Decision::Call(call.clone())),
                ChatResponse::ToolCall(call) => format!("unknown tool {}", call.name),
                ChatResponse::Text(_) => "reply without a tool call".to_string(),
            };
            warn!(attempt, %problem, "planner reply rejected");
            if attempt == 1 {
                return Ok(Decision::Fail(problem));
            }
            let said = match &reply {
                ChatResponse::Text(t) => t.clone(),
                ChatResponse::ToolCall(c) => format!("{} {}", c.name, Value::Object(c.arguments.clone())),
            };
            request.messages.push(ChatMessage::assistant(said));
            request.messages.push(ChatMessage::user(format!("{problem}. {CORRECTION}")));
        }
        unreachable!("loop returns on the second attempt")
    }

    fn forced_answer(&self, question: &str, memory: &ContextMemory) -> Result<String> {
        let [a, b] = self.whole_range();
        let request = ChatRequest::new(vec![
            ChatMessage::system(prompts::system_text(prompts::FORCED_ANSWER)),
            ChatMessage::user(prompt::user_message(memory.summary(), [&a, &b], question, &memory.render())),
        ]);
        chat_text(self.toolbox.backends.reasoner.as_ref(), &request)
    }

    pub fn run(&self, question: &str) -> AgentTrace {
        let max_steps = self.toolbox.config.max_steps;
        let mut memory = ContextMemory::new(self.toolbox.db.global_summary.clone(), self.toolbox.config.memory_budget_chars);
        let mut trace = AgentTrace {
            question: question.to_string(),
            steps: Vec::new(),
            final_answer: String::new(),
            step_count: 0,
            termination: Termination::BudgetExhausted,
            error: None,
        };
        let fail = |mut trace: AgentTrace, e: String| {
            trace.termination = Termination::BackendError;
            trace.error = Some(e);
            trace.step_count = trace.steps.len();
            trace
        };

        for step in 1..=max_steps {
            let call = match self.decide(&self.planner_request(question, &memory)) {
                Ok(Decision::Call(c)) => c,
                Ok(Decision::Fail(problem)) => return fail(trace, problem),
                Err(e) => return fail(trace, e.to_string()),
            };
            let thought = call.thought.clone().unwrap_or_default();
            if call.name == tools::FINISH {
                let answer = call.arguments.get("answer").map_or_else(String::new, |v| match v {
                    Value::String(s) => s.trim().to_string(),
                    other => other.to_string(),
                });
                trace.steps.push(TraceStep {
                    step,
                    thought,
                    tool: call.name,
                    arguments: call.arguments,
                    observation: String::new(),
                    timestamps: Vec::new(),
                    failed: false,
                });
                trace.final_answer = answer;
                trace.termination = Termination::Finished;
                trace.step_count = step;
                return trace;
            }
            let (result, failed) = match self.toolbox.execute(&call.name, &call.arguments) {
                Ok(r) => (r, false),
                Err(e @ Error::BackendUnavailable(_)) => return fail(trace, e.to_string()),
                Err(e) => (tools::ToolResult { response: format!("Error: {e}"), ..Default::default() }, true),
            };
            memory.push(MemoryBlock {
                step,
                thought: thought.clone(),
                tool: call.name.clone(),
                arguments: Value::Object(call.arguments.clone()).to_string(),
                observation: observation_text(&result),
            });
            trace.steps.push(TraceStep {
                step,
                thought,
                tool: call.name,
                arguments: call.arguments,
                observation: result.response,
                timestamps: result.timestamps,
                failed,
            });
        }

        trace.step_count = trace.steps.len();
        match self.forced_answer(question, &memory) {
            Ok(a) => trace.final_answer = a,
            Err(e) => return fail(trace, e.to_string()),
        }
        trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{tool_call, ScriptedChat, ScriptedVision};
    use crate::backends::Backends;
    use crate::ingestion::FrameIndex;
    use crate::model::tests::tiny_db;
    use crate::model::{IndexDatabase, QueryConfig};
    use serde_json::json;
    use std::sync::Arc;

    fn db() -> IndexDatabase {
        let mut db = tiny_db(4);
        db.text_dim = 8;
        db.visual_dim = 8;
        for s in &mut db.segments {
            s.text_embedding = vec![1.0; 8];
            s.visual_embedding = vec![1.0; 8];
        }
        db.global_summary = "A four-clip video.".into();
        db
    }

    fn run(chat: ScriptedChat, max_steps: usize) -> (AgentTrace, Arc<ScriptedChat>) {
        let db = db();
        let chat = Arc::new(chat);
        let backends = Backends {
            reasoner: chat.clone(),
            inspector: Arc::new(ScriptedVision::new(50, Vec::<String>::new())),
            ..Backends::mock(8, 8, 50)
        };
        let cfg = QueryConfig { max_steps, ..QueryConfig::default() };
        let tb = Toolbox::with_frames(&db, &backends, cfg, FrameIndex::default()).unwrap();
        (Agent::new(&tb).run("What happens?"), chat)
    }

    fn search() -> ChatResponse {
        tool_call(tools::CAPTION_SEARCH, json!({"query": "clip", "time_ranges": [["00:00:00", "00:02:00"]]}))
    }

    #[test]
    fn search_then_finish() {
        let (trace, _) = run(ScriptedChat::new([search(), tool_call("finish", json!({"answer": "B"}))]), 10);
        assert_eq!(trace.termination, Termination::Finished);
        assert_eq!(trace.step_count, 2);
        assert_eq!(trace.final_answer, "B");
        assert_eq!(trace.steps[0].tool, tools::CAPTION_SEARCH);
        assert!(!trace.steps[0].failed);
    }

    #[test]
    fn unknown_tool_twice_is_backend_error() {
        let bad = || tool_call("teleport", json!({}));
        let (trace, chat) = run(ScriptedChat::new([bad(), bad()]), 10);
        assert_eq!(trace.termination, Termination::BackendError);
        assert!(trace.steps.is_empty());
        assert_eq!(chat.requests().len(), 2);
    }

    #[test]
    fn free_text_gets_one_correction() {
        let (trace, chat) = run(ScriptedChat::new([ChatResponse::Text("hmm".into()), tool_call("finish", json!({"answer": "A"}))]), 10);
        assert_eq!(trace.termination, Termination::Finished);
        assert_eq!(trace.step_count, 1);
        assert!(chat.requests()[1].messages.last().unwrap().content.contains(CORRECTION));
    }

    #[test]
    fn tool_errors_become_observations() {
        let inspect = tool_call(tools::VISUAL_INSPECT, json!({"query": "who", "time_ranges": [["00:00:00", "00:00:30"]]}));
        let (trace, _) = run(ScriptedChat::new([inspect, tool_call("finish", json!({"answer": "x"}))]), 10);
        assert!(trace.steps[0].failed);
        assert!(trace.steps[0].observation.contains("missing frames"));
        assert_eq!(trace.termination, Termination::Finished);
    }

    #[test]
    fn budget_exhaustion_forces_an_answer() {
        let mut replies: Vec<ChatResponse> = (0..10).map(|_| search()).collect();
        replies.push(ChatResponse::Text("best guess".into()));
        let (trace, chat) = run(ScriptedChat::new(replies), 10);
        assert_eq!(trace.step_count, 10);
        assert_eq!(trace.termination, Termination::BudgetExhausted);
        assert_eq!(trace.final_answer, "best guess");
        let reqs = chat.requests();
        assert_eq!(reqs.len(), 11);
        assert!(reqs[10].tools.is_empty());
        for (t, r) in reqs[..10].iter().enumerate() {
            assert_eq!(r.messages[1].content.matches(prompt::STEP_MARKER).count(), t);
        }
    }

    #[test]
    fn unavailable_backend_keeps_partial_trace() {
        let chat = ScriptedChat::new([search()]);
        chat.push_failure("down");
        let (trace, _) = run(chat, 10);
        assert_eq!(trace.termination, Termination::BackendError);
        assert_eq!(trace.step_count, 1);
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let (trace, _) = run(ScriptedChat::new([search(), tool_call("finish", json!({"answer": "B"}))]), 10);
        let text = trace.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(AgentTrace::from_jsonl(&text).unwrap(), trace);
    }

    #[test]
    fn memory_truncates_oldest_first() {
        let mut m = ContextMemory::new("G", 200);
        for step in 1..=3 {
            m.push(MemoryBlock {
                step,
                thought: String::new(),
                tool: "t".into(),
                arguments: "{}".into(),
                observation: "x".repeat(100),
            });
        }
        assert_eq!(m.len(), 4);
        let text = m.render();
        assert_eq!(text.matches(TRUNCATED).count(), 2);
        assert!(text.ends_with(&format!("{}\n", "x".repeat(100))));
        assert_eq!(text.matches(prompt::STEP_MARKER).count(), 3);
    }
}
