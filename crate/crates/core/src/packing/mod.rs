//! Chat-template rendering, loss masks, sequence packing and seeded
//! length/domain-stratified sample selection.

mod pack;
mod stratify;
mod template;
mod tokenizer;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, Tensor};

pub use pack::{
    pack, MaskedSample, PackOutput, PackPolicy, PackedSequence, Packer, Rejection, Segment,
    DEFAULT_FFD_WINDOW,
};
pub use stratify::{round_half_up, stratified_subset, stratify_by_length, ManifestEntry};
pub use template::{
    apply_chat_template, loss_mask, loss_mask_with, LossMode, RenderedSample, Role, Span,
    SpanRole, Turn, Vocab,
};
pub use tokenizer::{ByteTokenizer, CommandTokenizer, Tokenizer};

#[derive(Debug, Error)]
pub enum PackingError {
    #[error("malformed turns: {0}")]
    MalformedTurns(String),
    #[error("sample {id}: {reason}")]
    BadRecord { id: String, reason: String },
    #[error("tokenizer failed: {0}")]
    Tokenizer(String),
    #[error("stratum {stratum}: quota {quota} exceeds population {available}")]
    QuotaExceeded {
        stratum: String,
        quota: usize,
        available: usize,
    },
    #[error("invalid strata: {0}")]
    Stratify(String),
    #[error("sample {0} has no domain tag")]
    Untagged(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// How loss bits are chosen when a record does not carry its own
/// `loss_mode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDefault {
    AllTokens,
    ResponseOnly,
    /// Response-only for samples with assistant output, all tokens otherwise.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskPolicy {
    pub default: MaskDefault,
    pub include_reasoning: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self { default: MaskDefault::Auto, include_reasoning: true }
    }
}

impl MaskPolicy {
    pub fn resolve(&self, sample: &RenderedSample, requested: Option<LossMode>) -> LossMode {
        requested.unwrap_or(match self.default {
            MaskDefault::AllTokens => LossMode::AllTokens,
            MaskDefault::ResponseOnly => LossMode::ResponseOnly,
            MaskDefault::Auto if sample.is_instruction() => LossMode::ResponseOnly,
            MaskDefault::Auto => LossMode::AllTokens,
        })
    }

    pub fn apply(&self, sample: RenderedSample, requested: Option<LossMode>) -> MaskedSample {
        let mode = self.resolve(&sample, requested);
        let mask = loss_mask_with(&sample, mode, self.include_reasoning);
        MaskedSample::new(sample, mask)
    }
}

fn record_id(record: &Value) -> String {
    match record.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => String::new(),
    }
}

fn token_field(
    id: &str,
    value: &Value,
    tokenizer: Option<&dyn Tokenizer>,
) -> Result<Vec<u32>, PackingError> {
    let bad = |reason: String| PackingError::BadRecord { id: id.to_string(), reason };
    match value {
        Value::String(text) => tokenizer
            .ok_or_else(|| bad("text content needs a tokenizer".into()))?
            .encode(text),
        Value::Array(items) => items
            .iter()
            .map(|v| {
                v.as_u64()
                    .and_then(|n| u32::try_from(n).ok())
                    .ok_or_else(|| bad(format!("invalid token id {v}")))
            })
            .collect(),
        other => Err(bad(format!("expected text or token ids, got {other}"))),
    }
}

/// Turns one manifest record into a rendered sample.
///
/// Records with `turns` go through the chat template; records with `tokens`
/// or `text` become plain documents. Text fields need a tokenizer. An
/// optional `loss_mode` field is returned alongside.
pub fn render_record(
    record: &Value,
    vocab: &Vocab,
    tokenizer: Option<&dyn Tokenizer>,
) -> Result<(RenderedSample, Option<LossMode>), PackingError> {
    let id = record_id(record);
    let bad = |reason: String| PackingError::BadRecord { id: id.clone(), reason };
    if id.is_empty() {
        return Err(bad("missing id".into()));
    }
    let mode = match record.get("loss_mode") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| bad(e.to_string()))?),
    };
    if let Some(turns) = record.get("turns") {
        let turns = turns.as_array().ok_or_else(|| bad("turns must be an array".into()))?;
        let parsed = turns
            .iter()
            .map(|t| {
                let role: Role = serde_json::from_value(t.get("role").cloned().unwrap_or(Value::Null))
                    .map_err(|e| bad(format!("role: {e}")))?;
                let content = match t.get("content") {
                    Some(v) => token_field(&id, v, tokenizer)?,
                    None => Vec::new(),
                };
                let reasoning = match t.get("reasoning") {
                    None | Some(Value::Null) => None,
                    Some(v) => Some(token_field(&id, v, tokenizer)?),
                };
                Ok(Turn { role, reasoning, content })
            })
            .collect::<Result<Vec<_>, PackingError>>()?;
        return Ok((apply_chat_template(id.clone(), &parsed, vocab)?, mode));
    }
    let field = record
        .get("tokens")
        .or_else(|| record.get("text"))
        .ok_or_else(|| bad("record needs turns, tokens or text".into()))?;
    let tokens = token_field(&id, field, tokenizer)?;
    Ok((RenderedSample::document(id.clone(), tokens), mode))
}

/// Writes packed sequences as a container file with `tokens[N, max_len]` (I32)
/// and `mask[N, max_len]` (U8), padding with `pad_id` / 0.
pub fn write_packed_batch(
    sequences: &[PackedSequence],
    max_len: usize,
    pad_id: u32,
    metadata: &[(&str, String)],
    path: &Path,
) -> Result<(), PackingError> {
    let n = sequences.len();
    let mut tokens = Vec::with_capacity(n * max_len);
    let mut mask = Vec::with_capacity(n * max_len);
    for s in sequences {
        tokens.extend(s.tokens.iter().map(|&t| t as i32));
        tokens.extend(std::iter::repeat(pad_id as i32).take(max_len - s.tokens.len()));
        mask.extend_from_slice(&s.loss_mask);
        mask.extend(std::iter::repeat(0u8).take(max_len - s.loss_mask.len()));
    }
    let mut ckpt = Checkpoint::new();
    ckpt.insert("tokens", Tensor::from_i32(vec![n, max_len], &tokens)?)?;
    ckpt.insert("mask", Tensor::from_u8(vec![n, max_len], mask)?)?;
    ckpt.set_metadata("max_len", max_len.to_string());
    ckpt.set_metadata("pad_id", pad_id.to_string());
    for (k, v) in metadata {
        ckpt.set_metadata(*k, v.clone());
    }
    write_checkpoint(&ckpt, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentIndexEntry {
    pub sequence: usize,
    pub sample_id: String,
    pub start: usize,
    pub end: usize,
}

pub fn write_segment_index(sequences: &[PackedSequence], path: &Path) -> Result<(), PackingError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, s) in sequences.iter().enumerate() {
        for seg in &s.segments {
            let entry = SegmentIndexEntry {
                sequence: i,
                sample_id: seg.sample_id.clone(),
                start: seg.start,
                end: seg.end,
            };
            serde_json::to_writer(&mut w, &entry).expect("entry serializes");
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a packed batch back as `(tokens, mask)` rows of length `max_len`.
pub fn read_packed_batch(path: &Path) -> Result<(Vec<Vec<i32>>, Vec<Vec<u8>>), PackingError> {
    let ckpt = read_checkpoint(path)?;
    let bad = |m: &str| PackingError::BadRecord { id: path.display().to_string(), reason: m.into() };
    let tokens = ckpt.get("tokens").ok_or_else(|| bad("missing tokens tensor"))?;
    let mask = ckpt.get("mask").ok_or_else(|| bad("missing mask tensor"))?;
    let &[_, width] = tokens.shape() else {
        return Err(bad("tokens tensor must be 2-d"));
    };
    let ids = tokens.to_i32_vec().ok_or_else(|| bad("tokens must be I32"))?;
    if width == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    Ok((
        ids.chunks(width).map(<[i32]>::to_vec).collect(),
        mask.data().chunks(width).map(<[u8]>::to_vec).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn renders_records() {
        let v = Vocab::default();
        let rec = json!({"id": "c1", "turns": [
            {"role": "user", "content": [1, 2]},
            {"role": "assistant", "reasoning": [3], "content": [4]}
        ]});
        let (s, mode) = render_record(&rec, &v, None).unwrap();
        assert_eq!(s.sample_id, "c1");
        assert!(s.is_instruction());
        assert_eq!(mode, None);

        let rec = json!({"id": 5, "text": "ab", "loss_mode": "response_only"});
        let (s, mode) = render_record(&rec, &v, Some(&ByteTokenizer)).unwrap();
        assert_eq!((s.sample_id.as_str(), s.tokens.clone()), ("5", vec![97, 98]));
        assert_eq!(mode, Some(LossMode::ResponseOnly));

        assert!(render_record(&json!({"id": "x", "text": "ab"}), &v, None).is_err());
        assert!(render_record(&json!({"text": "ab"}), &v, Some(&ByteTokenizer)).is_err());
        assert!(render_record(&json!({"id": "x"}), &v, None).is_err());
        assert!(render_record(&json!({"id": "x", "tokens": [-1]}), &v, None).is_err());
    }

    #[test]
    fn auto_mask_policy() {
        let p = MaskPolicy::default();
        let doc = RenderedSample::document("d", vec![1, 2]);
        assert_eq!(p.resolve(&doc, None), LossMode::AllTokens);
        let chat = apply_chat_template(
            "c",
            &[Turn::user(vec![1]), Turn::assistant(None, vec![2])],
            &Vocab::default(),
        )
        .unwrap();
        assert_eq!(p.resolve(&chat, None), LossMode::ResponseOnly);
        assert_eq!(p.resolve(&chat, Some(LossMode::AllTokens)), LossMode::AllTokens);
    }

    #[test]
    fn batch_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = MaskPolicy::default();
        let samples = [
            p.apply(RenderedSample::document("a", vec![1, 2, 3]), None),
            p.apply(RenderedSample::document("b", vec![4, 5]), Some(LossMode::ResponseOnly)),
            p.apply(RenderedSample::document("c", vec![6, 7, 8, 9]), None),
        ];
        let out = pack(samples, 6, PackPolicy::Sequential);
        let path = dir.path().join("batch.ckpt");
        write_packed_batch(&out.sequences, 6, 0, &[], &path).unwrap();
        let (tokens, mask) = read_packed_batch(&path).unwrap();
        assert_eq!(tokens, vec![vec![1, 2, 3, 4, 5, 0], vec![6, 7, 8, 9, 0, 0]]);
        assert_eq!(mask, vec![vec![1, 1, 1, 0, 0, 0], vec![1, 1, 1, 1, 0, 0]]);

        let idx = dir.path().join("batch.segments.jsonl");
        write_segment_index(&out.sequences, &idx).unwrap();
        let text = std::fs::read_to_string(idx).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"sequence":0,"sample_id":"a","start":0,"end":3}"#
        );
        assert_eq!(text.lines().count(), 3);
    }
}
