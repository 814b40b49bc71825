use std::cmp::Reverse;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::template::RenderedSample;

pub const DEFAULT_FFD_WINDOW: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum PackPolicy {
    /// First-fit-decreasing over consecutive windows of `window` samples.
    GreedyFfd { window: usize },
    /// Fill one sequence at a time in arrival order.
    Sequential,
}

impl PackPolicy {
    pub fn ffd() -> Self {
        PackPolicy::GreedyFfd { window: DEFAULT_FFD_WINDOW }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub sample_id: String,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Samples concatenated into one context. `tokens` holds only real tokens;
/// positions `tokens.len()..max_len` are padding with loss bit 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    pub segments: Vec<Segment>,
    pub loss_mask: Vec<u8>,
}

impl PackedSequence {
    fn empty() -> Self {
        Self { tokens: Vec::new(), segments: Vec::new(), loss_mask: Vec::new() }
    }

    fn push(&mut self, sample: MaskedSample) {
        let start = self.tokens.len();
        self.tokens.extend_from_slice(&sample.sample.tokens);
        self.loss_mask.extend_from_slice(&sample.mask);
        self.segments.push(Segment {
            sample_id: sample.sample.sample_id,
            start,
            end: self.tokens.len(),
        });
    }

    pub fn used(&self) -> usize {
        self.tokens.len()
    }

    pub fn padding(&self, max_len: usize) -> usize {
        max_len - self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub sample_id: String,
    pub length: usize,
}

/// A rendered sample with its loss bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSample {
    pub sample: RenderedSample,
    pub mask: Vec<u8>,
}

impl MaskedSample {
    pub fn new(sample: RenderedSample, mask: Vec<u8>) -> Self {
        assert_eq!(sample.tokens.len(), mask.len(), "mask length must match token count");
        Self { sample, mask }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Incremental packer. Feed samples with [`Packer::push`]; finished
/// sequences come back as soon as the policy closes them.
pub struct Packer {
    max_len: usize,
    policy: PackPolicy,
    current: PackedSequence,
    window: Vec<MaskedSample>,
    rejections: Vec<Rejection>,
}

impl Packer {
    pub fn new(max_len: usize, policy: PackPolicy) -> Self {
        assert!(max_len > 0, "max_len must be positive");
        if let PackPolicy::GreedyFfd { window } = policy {
            assert!(window > 0, "FFD window must be positive");
        }
        Self {
            max_len,
            policy,
            current: PackedSequence::empty(),
            window: Vec::new(),
            rejections: Vec::new(),
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn rejections(&self) -> &[Rejection] {
        &self.rejections
    }

    pub fn push(&mut self, sample: MaskedSample) -> Vec<PackedSequence> {
        if sample.len() > self.max_len {
            let length = sample.len();
            self.rejections.push(Rejection {
                sample_id: sample.sample.sample_id,
                length,
            });
            return Vec::new();
        }
        match self.policy {
            PackPolicy::Sequential => {
                let mut out = Vec::new();
                if self.current.used() + sample.len() > self.max_len {
                    out.push(std::mem::replace(&mut self.current, PackedSequence::empty()));
                }
                self.current.push(sample);
                out
            }
            PackPolicy::GreedyFfd { window } => {
                self.window.push(sample);
                if self.window.len() >= window {
                    self.flush_window()
                } else {
                    Vec::new()
                }
            }
        }
    }

    fn flush_window(&mut self) -> Vec<PackedSequence> {
        let items = std::mem::take(&mut self.window);
        let mut order: Vec<usize> = (0..items.len()).collect();
        // stable: equal lengths keep arrival order
        order.sort_by_key(|&i| Reverse(items[i].len()));
        let mut bins: Vec<(usize, Vec<usize>)> = Vec::new();
        for i in order {
            let len = items[i].len();
            match bins.iter_mut().find(|(used, _)| used + len <= self.max_len) {
                Some((used, members)) => {
                    *used += len;
                    members.push(i);
                }
                None => bins.push((len, vec![i])),
            }
        }
        let mut slots: Vec<Option<MaskedSample>> = items.into_iter().map(Some).collect();
        bins.into_iter()
            .map(|(_, members)| {
                let mut seq = PackedSequence::empty();
                for i in members {
                    seq.push(slots[i].take().unwrap());
                }
                seq
            })
            .collect()
    }

    /// Flushes everything still buffered.
    pub fn finish(mut self) -> (Vec<PackedSequence>, Vec<Rejection>) {
        let mut out = Vec::new();
        match self.policy {
            PackPolicy::Sequential => {
                if !self.current.segments.is_empty() {
                    out.push(std::mem::replace(&mut self.current, PackedSequence::empty()));
                }
            }
            PackPolicy::GreedyFfd { .. } => {
                if !self.window.is_empty() {
                    out = self.flush_window();
                }
            }
        }
        (out, self.rejections)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackOutput {
    pub sequences: Vec<PackedSequence>,
    pub rejections: Vec<Rejection>,
}

impl PackOutput {
    pub fn padding_tokens(&self, max_len: usize) -> usize {
        self.sequences.iter().map(|s| s.padding(max_len)).sum()
    }

    /// Padding as a fraction of all emitted positions (0 when nothing was packed).
    pub fn padding_fraction(&self, max_len: usize) -> f64 {
        if self.sequences.is_empty() {
            return 0.0;
        }
        self.padding_tokens(max_len) as f64 / (self.sequences.len() * max_len) as f64
    }
}

pub fn pack(
    samples: impl IntoIterator<Item = MaskedSample>,
    max_len: usize,
    policy: PackPolicy,
) -> PackOutput {
    let mut packer = Packer::new(max_len, policy);
    let mut sequences = Vec::new();
    for s in samples {
        sequences.extend(packer.push(s));
    }
    let (rest, rejections) = packer.finish();
    sequences.extend(rest);
    PackOutput { sequences, rejections }
}
