//! Per-phase counts and fallbacks recorded while building an index.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportEntry {
    Count { phase: String, name: String, value: usize },
    Fallback { phase: String, subject: String, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub entries: Vec<ReportEntry>,
}

impl BuildReport {
    pub fn count(&mut self, phase: &str, name: &str, value: usize) {
        self.entries.push(ReportEntry::Count { phase: phase.into(), name: name.into(), value });
    }

    pub fn fallback(&mut self, phase: &str, subject: impl Into<String>, reason: impl Into<String>) {
        let (subject, reason) = (subject.into(), reason.into());
        warn!(phase, %subject, %reason, "fallback");
        self.entries.push(ReportEntry::Fallback { phase: phase.into(), subject, reason });
    }

    pub fn fallbacks(&self, phase: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e, ReportEntry::Fallback { phase: p, .. } if p == phase))
            .count()
    }

    pub fn get_count(&self, phase: &str, name: &str) -> Option<usize> {
        self.entries.iter().rev().find_map(|e| match e {
            ReportEntry::Count { phase: p, name: n, value } if p == phase && n == name => Some(*value),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("report entries serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { entries })
    }
}

/// Refusals degrade to a logged fallback; every other error aborts the build.
pub(crate) fn soft<T>(
    report: &mut BuildReport,
    phase: &str,
    subject: impl FnOnce() -> String,
    result: Result<T>,
) -> Result<Option<T>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::BackendRefusal(reason)) => {
            report.fallback(phase, subject(), reason);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut r = BuildReport::default();
        r.count("entities", "mentions", 4);
        r.fallback("scenes", "chunk 0", "no JSON");
        let back = BuildReport::from_jsonl(&r.to_jsonl()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.fallbacks("scenes"), 1);
        assert_eq!(back.get_count("entities", "mentions"), Some(4));
    }

    #[test]
    fn soft_only_absorbs_refusals() {
        let mut r = BuildReport::default();
        assert_eq!(soft::<u8>(&mut r, "p", || "s".into(), Err(Error::BackendRefusal("x".into()))).unwrap(), None);
        assert!(soft::<u8>(&mut r, "p", || "s".into(), Err(Error::BackendUnavailable("x".into()))).is_err());
        assert_eq!(r.fallbacks("p"), 1);
    }
}
