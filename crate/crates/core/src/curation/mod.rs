//! SFT data hygiene: exact and near de-duplication, heuristic quality rules,
//! format checks, verifier-based rejection, content blocklists and benchmark
//! decontamination, run as an ordered pipeline with a per-sample log.

mod decontam;
mod dedup;
mod filters;
mod pipeline;
mod verify;

pub use decontam::*;
pub use dedup::*;
pub use filters::*;
pub use pipeline::*;
pub use verify::*;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("record {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("unknown heuristic rule {0:?}")]
    UnknownRule(String),
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid blocklist pattern {pattern:?}: {reason}")]
    BadPattern { pattern: String, reason: String },
    #[error("verifier protocol violation for {id}: {reason}")]
    VerifierProtocol { id: String, reason: String },
}

/// NFC, lowercase, whitespace runs collapsed to one space, trimmed. Shared by
/// every stage that compares text.
pub fn canonicalize(text: &str) -> String {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace tokens of canonical text.
pub fn canonical_tokens(canonical: &str) -> Vec<&str> {
    canonical.split(' ').filter(|t| !t.is_empty()).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedFormat {
    Json,
    Xml,
    #[default]
    None,
}

/// A manifest record prepared for curation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: Option<String>,
    /// All text of the sample (turn contents and reasoning, or `text`).
    pub text: String,
    /// Final assistant content, or the whole text for plain documents.
    pub response: String,
    pub image_paths: Vec<String>,
    pub expected_answer: Option<String>,
    pub expected_format: ExpectedFormat,
    pub record: Value,
}

fn field_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

impl Sample {
    pub fn text(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let id = id.into();
        Self::from_record(serde_json::json!({"id": id, "text": text}), 0).expect("valid record")
    }

    pub fn from_record(record: Value, line: usize) -> Result<Self, CurationError> {
        let bad = |reason: &str| CurationError::BadRecord { line, reason: reason.to_string() };
        let id = match record.get("id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(bad("missing id")),
        };
        let (text, response) = if let Some(turns) = record.get("turns") {
            let turns = turns.as_array().ok_or_else(|| bad("turns must be an array"))?;
            let mut parts = Vec::new();
            let mut response = String::new();
            for t in turns {
                if let Some(r) = t.get("reasoning") {
                    parts.push(field_text(r));
                }
                let content = t.get("content").map(field_text).unwrap_or_default();
                if t.get("role").and_then(Value::as_str) == Some("assistant") {
                    response = content.clone();
                }
                parts.push(content);
            }
            (parts.join("\n"), response)
        } else if let Some(t) = record.get("text") {
            let t = field_text(t);
            (t.clone(), t)
        } else {
            return Err(bad("record needs turns or text"));
        };
        let image_paths = match record.get("image_paths") {
            Some(Value::Array(a)) => a.iter().map(field_text).collect(),
            _ => Vec::new(),
        };
        let expected_format = match record.get("expected_format") {
            None | Some(Value::Null) => ExpectedFormat::None,
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| bad(&format!("expected_format: {e}")))?,
        };
        Ok(Sample {
            id,
            domain: record.get("domain").and_then(Value::as_str).map(str::to_string),
            text,
            response,
            image_paths,
            expected_answer: record.get("expected_answer").filter(|v| !v.is_null()).map(field_text),
            expected_format,
            record,
        })
    }

    /// Canonical text used by dedup and decontamination.
    pub fn canonical(&self) -> String {
        canonicalize(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub stage: String,
    pub pass: bool,
    /// Machine-readable reason; empty for an unremarkable pass.
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Verdict {
    pub fn pass(stage: &str) -> Self {
        Self { stage: stage.into(), pass: true, reason: String::new(), score: None }
    }

    pub fn fail(stage: &str, reason: impl Into<String>) -> Self {
        Self { stage: stage.into(), pass: false, reason: reason.into(), score: None }
    }

    pub fn with_reason(mut self, reason: impl Into<String>) -> Self {
        self.reason = reason.into();
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub sample_id: String,
    pub verdicts: Vec<Verdict>,
    pub surviving: bool,
}
