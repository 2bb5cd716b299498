//! Multiple-choice evaluation with per-category accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::warn;

use crate::agent::{Agent, AgentTrace, Termination};
use crate::backends::{chat_text, ChatBackend};
use crate::error::{Error, Result};
use crate::ingestion::parallel_map;
use crate::prompts;
use crate::tools::Toolbox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    ER,
    EU,
    KIR,
    TG,
    Rea,
    Sum,
    #[serde(rename = "other")]
    Other,
}

impl Category {
    /// Table columns, in order. `Other` counts toward the overall figure only.
    pub const COLUMNS: [Category; 6] = [Category::ER, Category::EU, Category::KIR, Category::TG, Category::Rea, Category::Sum];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::ER => "ER",
            Category::EU => "EU",
            Category::KIR => "KIR",
            Category::TG => "TG",
            Category::Rea => "Rea",
            Category::Sum => "Sum",
            Category::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub video_id: String,
    pub question: String,
    /// Option label to option text.
    pub options: BTreeMap<String, String>,
    pub answer: String,
    pub category: Category,
}

impl QAItem {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.options.len()) {
            return Err(Error::InvalidInput(format!("{} options; expected 2 to 6", self.options.len())));
        }
        if !self.options.contains_key(&self.answer) {
            return Err(Error::InvalidInput(format!("answer {:?} is not an option label", self.answer)));
        }
        Ok(())
    }

    /// Question followed by one `(X) text` line per option.
    pub fn prompt(&self) -> String {
        let mut out = self.question.trim().to_string();
        for (label, text) in &self.options {
            out.push_str(&format!("\n({label}) {text}"));
        }
        out
    }
}

/// Reads a line-delimited QA file, validating every item.
pub fn load_qa(path: &Path) -> Result<Vec<QAItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let item: QAItem = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        item.validate().map_err(|e| parse_err(e.to_string()))?;
        items.push(item);
    }
    Ok(items)
}

fn marked_label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:\(([A-F])\)|\b(?:option|answer)\s*(?:is\s*)?:?\s*\(?([A-F])\b)").unwrap())
}

/// The single option label an answer selects, if it selects exactly one.
///
/// Accepted forms: the bare label (`B`, `b.`, `(B)`), a label marked as
/// `(B)`, `option B` or `answer: B`, or the exact text of one option.
pub fn extract_label(answer: &str, options: &BTreeMap<String, String>) -> Option<String> {
    let bare = answer.trim().trim_matches(|c: char| matches!(c, '(' | ')' | '.' | ':' | '"' | '\'' | '*') || c.is_whitespace());
    if let Some(label) = options.keys().find(|l| l.eq_ignore_ascii_case(bare)) {
        return Some(label.clone());
    }
    let mut found: Vec<String> = marked_label_re()
        .captures_iter(answer)
        .filter_map(|c| c.get(1).or(c.get(2)).map(|m| m.as_str().to_ascii_uppercase()))
        .filter(|l| options.contains_key(l))
        .collect();
    found.sort();
    found.dedup();
    if found.len() == 1 {
        return found.pop();
    }
    if found.is_empty() {
        let norm = |s: &str| s.trim().trim_end_matches('.').to_lowercase();
        let hits: Vec<&String> = options.iter().filter(|(_, t)| norm(t) == norm(answer)).map(|(l, _)| l).collect();
        if hits.len() == 1 {
            return Some(hits[0].clone());
        }
    }
    None
}

/// Label for a free-form answer, asking the reasoner once when the answer
/// does not name exactly one option. Returns the label and whether a
/// clarification was needed.
pub fn match_answer(chat: &dyn ChatBackend, item: &QAItem, answer: &str) -> (Option<String>, bool) {
    if let Some(l) = extract_label(answer, &item.options) {
        return (Some(l), false);
    }
    let input = json!({"question": item.question, "options": item.options, "answer": answer});
    match chat_text(chat, &prompts::request(prompts::CLARIFY_ANSWER, &input)) {
        Ok(reply) => (extract_label(&reply, &item.options), true),
        Err(e) => {
            warn!(error = %e, "clarification failed");
            (None, true)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item: usize,
    pub video_id: String,
    pub category: Category,
    pub expected: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub iterations: usize,
    pub termination: Option<Termination>,
    pub clarified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub total: usize,
    pub correct: usize,
    pub iterations: usize,
}

impl Tally {
    fn add(&mut self, r: &EvalRecord) {
        self.total += 1;
        self.correct += r.correct as usize;
        self.iterations += r.iterations;
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 }
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.total == 0 { 0.0 } else { self.iterations as f64 / self.total as f64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: BTreeMap<Category, Tally>,
    pub overall: Tally,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let mut per_category: BTreeMap<Category, Tally> = BTreeMap::new();
        let mut overall = Tally::default();
        for r in &records {
            per_category.entry(r.category).or_default().add(r);
            overall.add(r);
        }
        Self { per_category, overall, records }
    }

    /// Markdown table: accuracy (%) and mean iterations per category.
    pub fn table(&self) -> String {
        let cell = |t: Option<&Tally>, f: fn(&Tally) -> String| t.map_or_else(|| "-".to_string(), f);
        let acc = |t: &Tally| format!("{:.1}", 100.0 * t.accuracy());
        let iter = |t: &Tally| format!("{:.2}", t.mean_iterations());
        let mut header = vec!["".to_string()];
        let mut acc_row = vec!["Acc".to_string()];
        let mut iter_row = vec!["iter".to_string()];
        for c in Category::COLUMNS {
            header.push(c.to_string());
            acc_row.push(cell(self.per_category.get(&c), acc));
            iter_row.push(cell(self.per_category.get(&c), iter));
        }
        header.push("Overall".into());
        acc_row.push(acc(&self.overall));
        iter_row.push(iter(&self.overall));
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        let sep = vec!["---".to_string(); header.len()];
        [line(&header), line(&sep), line(&acc_row), line(&iter_row)].concat()
    }

    pub fn records_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
    }
}

/// Answers every item with its video's toolbox on up to `workers` threads.
/// Items whose video has no toolbox count as incorrect.
pub fn run_eval(items: &[QAItem], toolboxes: &HashMap<String, Toolbox<'_>>, workers: usize) -> (EvalReport, Vec<Option<AgentTrace>>) {
    let indexed: Vec<(usize, &QAItem)> = items.iter().enumerate().collect();
    let outcomes = parallel_map(workers, &indexed, |&(i, item)| {
        let base = EvalRecord {
            item: i,
            video_id: item.video_id.clone(),
            category: item.category,
            expected: item.answer.clone(),
            predicted: None,
            correct: false,
            iterations: 0,
            termination: None,
            clarified: false,
            error: None,
        };
        let Some(tb) = toolboxes.get(&item.video_id) else {
            return (EvalRecord { error: Some(format!("no index for video {}", item.video_id)), ..base }, None);
        };
        let trace = Agent::new(tb).run(&item.prompt());
        let (predicted, clarified) = match_answer(tb.backends.reasoner.as_ref(), item, &trace.final_answer);
        let record = EvalRecord {
            correct: predicted.as_deref() == Some(item.answer.as_str()),
            predicted,
            iterations: trace.step_count,
            termination: Some(trace.termination),
            clarified,
            error: trace.error.clone(),
            ..base
        };
        (record, Some(trace))
    });
    let (records, traces): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    (EvalReport::from_records(records), traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::ScriptedChat;

    fn opts(n: usize) -> BTreeMap<String, String> {
        ["A", "B", "C", "D", "E", "F"][..n].iter().enumerate().map(|(i, l)| (l.to_string(), format!("choice number {i}"))).collect()
    }

    #[test]
    fn label_extraction() {
        let o = opts(4);
        for (ans, want) in [
            ("B", Some("B")),
            (" (c). ", Some("C")),
            ("The answer is (D) because", Some("D")),
            ("Option A", Some("A")),
            ("answer: b", Some("B")),
            ("choice number 2", Some("C")),
            ("(A) or (B)", None),
            ("A man walks in", None),
            ("E", None),
            ("", None),
        ] {
            assert_eq!(extract_label(ans, &o).as_deref(), want, "{ans:?}");
        }
    }

    #[test]
    fn ambiguous_answers_get_one_clarification() {
        let item = QAItem { video_id: "v".into(), question: "q".into(), options: opts(3), answer: "C".into(), category: Category::TG };
        let chat = ScriptedChat::from_texts(["C"]);
        assert_eq!(match_answer(&chat, &item, "three people"), (Some("C".into()), true));
        let chat = ScriptedChat::from_texts(["no idea"]);
        assert_eq!(match_answer(&chat, &item, "hmm"), (None, true));
        assert_eq!(chat.requests().len(), 1);
    }

    #[test]
    fn qa_validation() {
        let mut item = QAItem { video_id: "v".into(), question: "q".into(), options: opts(1), answer: "A".into(), category: Category::ER };
        assert!(item.validate().is_err());
        item.options = opts(6);
        item.answer = "G".into();
        assert!(item.validate().is_err());
        item.answer = "F".into();
        assert!(item.validate().is_ok());
        assert!(item.prompt().ends_with("\n(F) choice number 5"));
    }

    #[test]
    fn category_serde_names() {
        assert_eq!(serde_json::to_string(&Category::Rea).unwrap(), "\"Rea\"");
        assert_eq!(serde_json::from_str::<Category>("\"other\"").unwrap(), Category::Other);
    }

    #[test]
    fn tallies_and_table() {
        let rec = |category, correct, iterations| EvalRecord {
            item: 0,
            video_id: "v".into(),
            category,
            expected: "A".into(),
            predicted: None,
            correct,
            iterations,
            termination: None,
            clarified: false,
            error: None,
        };
        let report = EvalReport::from_records(vec![
            rec(Category::ER, true, 2),
            rec(Category::ER, true, 4),
            rec(Category::ER, true, 3),
            rec(Category::ER, false, 3),
            rec(Category::Other, false, 1),
        ]);
        assert_eq!(report.per_category[&Category::ER].accuracy(), 0.75);
        assert_eq!(report.per_category[&Category::ER].mean_iterations(), 3.0);
        assert_eq!(report.overall.accuracy(), 0.6);
        let table = report.table();
        assert!(table.starts_with("|  | ER | EU | KIR | TG | Rea | Sum | Overall |"));
        assert!(table.contains("| Acc | 75.0 | - | - | - | - | - | 60.0 |"));
    }
}
