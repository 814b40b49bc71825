use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::PackingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub reasoning: Option<Vec<u32>>,
    pub content: Vec<u32>,
}

impl Turn {
    pub fn system(content: Vec<u32>) -> Self {
        Self { role: Role::System, reasoning: None, content }
    }

    pub fn user(content: Vec<u32>) -> Self {
        Self { role: Role::User, reasoning: None, content }
    }

    pub fn assistant(reasoning: Option<Vec<u32>>, content: Vec<u32>) -> Self {
        Self { role: Role::Assistant, reasoning, content }
    }
}

/// What produced a token range of a rendered sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    Template,
    System,
    User,
    Reasoning,
    Response,
    /// Plain pretraining text with no chat structure.
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub range: Range<usize>,
    pub role: SpanRole,
}

/// A tokenized sample whose spans partition `0..tokens.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedSample {
    pub sample_id: String,
    pub tokens: Vec<u32>,
    pub spans: Vec<Span>,
}

impl RenderedSample {
    /// A plain document: one `Text` span over all tokens.
    pub fn document(sample_id: impl Into<String>, tokens: Vec<u32>) -> Self {
        let spans = if tokens.is_empty() {
            Vec::new()
        } else {
            vec![Span { range: 0..tokens.len(), role: SpanRole::Text }]
        };
        Self { sample_id: sample_id.into(), tokens, spans }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_instruction(&self) -> bool {
        self.spans
            .iter()
            .any(|s| matches!(s.role, SpanRole::Reasoning | SpanRole::Response))
    }

    pub fn span_roles(&self) -> Vec<SpanRole> {
        self.spans.iter().map(|s| s.role).collect()
    }
}

/// Reserved marker token ids of the chat template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    #[serde(rename = "<|system|>")]
    pub system: u32,
    #[serde(rename = "<|user|>")]
    pub user: u32,
    #[serde(rename = "<|assistant|>")]
    pub assistant: u32,
    #[serde(rename = "<|reasoning|>")]
    pub reasoning: u32,
    #[serde(rename = "<|response|>")]
    pub response: u32,
    #[serde(rename = "<|end|>")]
    pub end: u32,
    #[serde(rename = "<|pad|>")]
    pub pad: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            system: 100_000,
            user: 100_001,
            assistant: 100_002,
            reasoning: 100_003,
            response: 100_004,
            end: 100_005,
            pad: 100_006,
        }
    }
}

struct Renderer {
    tokens: Vec<u32>,
    spans: Vec<Span>,
}

impl Renderer {
    fn push(&mut self, role: SpanRole, toks: &[u32]) {
        if toks.is_empty() {
            return;
        }
        let start = self.tokens.len();
        self.tokens.extend_from_slice(toks);
        let end = self.tokens.len();
        match self.spans.last_mut() {
            // adjacent template markers form one span
            Some(last) if last.role == SpanRole::Template && role == SpanRole::Template => {
                last.range.end = end;
            }
            _ => self.spans.push(Span { range: start..end, role }),
        }
    }
}

/// Renders a conversation with the fixed marker template:
///
/// ```text
/// <|system|> ... <|end|>
/// <|user|> ... <|end|>
/// <|assistant|> [<|reasoning|> ...] <|response|> ... <|end|>
/// ```
///
/// The reasoning block is omitted when the assistant turn has no reasoning.
pub fn apply_chat_template(
    sample_id: impl Into<String>,
    turns: &[Turn],
    vocab: &Vocab,
) -> Result<RenderedSample, PackingError> {
    validate_turns(turns)?;
    let mut r = Renderer { tokens: Vec::new(), spans: Vec::new() };
    for turn in turns {
        match turn.role {
            Role::System => {
                r.push(SpanRole::Template, &[vocab.system]);
                r.push(SpanRole::System, &turn.content);
            }
            Role::User => {
                r.push(SpanRole::Template, &[vocab.user]);
                r.push(SpanRole::User, &turn.content);
            }
            Role::Assistant => {
                r.push(SpanRole::Template, &[vocab.assistant]);
                if let Some(reasoning) = turn.reasoning.as_deref().filter(|r| !r.is_empty()) {
                    r.push(SpanRole::Template, &[vocab.reasoning]);
                    r.push(SpanRole::Reasoning, reasoning);
                }
                r.push(SpanRole::Template, &[vocab.response]);
                r.push(SpanRole::Response, &turn.content);
            }
        }
        r.push(SpanRole::Template, &[vocab.end]);
    }
    Ok(RenderedSample { sample_id: sample_id.into(), tokens: r.tokens, spans: r.spans })
}

fn validate_turns(turns: &[Turn]) -> Result<(), PackingError> {
    let bad = |m: String| Err(PackingError::MalformedTurns(m));
    if turns.is_empty() {
        return bad("no turns".into());
    }
    let first_chat = turns.iter().position(|t| t.role != Role::System);
    if let Some(pos) = turns.iter().rposition(|t| t.role == Role::System) {
        if first_chat.is_some_and(|f| pos > f) {
            return bad(format!("system turn at position {pos} after the conversation started"));
        }
    }
    let Some(first) = first_chat else {
        return bad("conversation has no user turn".into());
    };
    let mut expected = Role::User;
    for (i, t) in turns.iter().enumerate().skip(first) {
        if t.role != expected {
            return bad(format!("turn {i} is {:?}, expected {:?}", t.role, expected));
        }
        if t.reasoning.is_some() && t.role != Role::Assistant {
            return bad(format!("turn {i}: reasoning is only allowed on assistant turns"));
        }
        expected = if expected == Role::User { Role::Assistant } else { Role::User };
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    AllTokens,
    ResponseOnly,
}

/// Per-token loss bits.
///
/// `ResponseOnly` sets 1 on reasoning and response spans and on the template
/// token right after each of them (the marker that ends the span). Pass
/// `include_reasoning = false` to supervise the final response only.
pub fn loss_mask_with(sample: &RenderedSample, mode: LossMode, include_reasoning: bool) -> Vec<u8> {
    let mut mask = vec![0u8; sample.tokens.len()];
    match mode {
        LossMode::AllTokens => mask.fill(1),
        LossMode::ResponseOnly => {
            for (i, span) in sample.spans.iter().enumerate() {
                let supervised = match span.role {
                    SpanRole::Response => true,
                    SpanRole::Reasoning => include_reasoning,
                    _ => false,
                };
                if !supervised {
                    continue;
                }
                mask[span.range.clone()].fill(1);
                if let Some(next) = sample.spans.get(i + 1) {
                    if next.role == SpanRole::Template {
                        mask[next.range.start] = 1;
                    }
                }
            }
        }
    }
    mask
}

pub fn loss_mask(sample: &RenderedSample, mode: LossMode) -> Vec<u8> {
    loss_mask_with(sample, mode, true)
}
