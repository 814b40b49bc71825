//! Token-ratio data mixing.
//!
//! Groups are interleaved by a greedy token-deficit rule: the next sample
//! always comes from the group furthest below its target share of the tokens
//! emitted so far (`ratio * total - emitted`), ties going to the group whose
//! name sorts first. The schedule is fully determined by the configuration
//! and the sources' contents.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::stable_hash;

pub const RATIO_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("group ratios sum to {0}, expected 1")]
    RatioSum(f64),
    #[error("group {0} has an invalid ratio {1}")]
    BadRatio(String, f64),
    #[error("group {0} has no sources")]
    EmptyGroup(String),
    #[error("duplicate group name {0}")]
    DuplicateGroup(String),
    #[error("no sources supplied for group {0}")]
    MissingSources(String),
    #[error("group {0} uses the cycle policy but all of its sources are empty")]
    NothingToCycle(String),
    #[error("token budget must be positive")]
    ZeroBudget,
    #[error("sample {id} has no token_count")]
    MissingTokenCount { id: String },
}

pub type Result<T, E = MixtureError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustedPolicy {
    Cycle,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub name: String,
    pub ratio: f64,
    pub sources: Vec<PathBuf>,
    pub exhausted_policy: ExhaustedPolicy,
}

/// Mixture configuration as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub groups: Vec<GroupConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl MixtureSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| MixtureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| MixtureError::BadRecord {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub name: String,
    pub ratio: f64,
    pub exhausted_policy: ExhaustedPolicy,
    pub source_count: usize,
}

/// A validated, serializable mixture schedule. Groups are kept in name order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub spec_hash: String,
    pub seed: u64,
    pub schedule: String,
    pub groups: Vec<GroupPlan>,
}

pub fn build_plan(spec: &MixtureSpec, seed: u64) -> Result<SamplingPlan> {
    let mut names = BTreeSet::new();
    for g in &spec.groups {
        if !names.insert(g.name.as_str()) {
            return Err(MixtureError::DuplicateGroup(g.name.clone()));
        }
        if !(g.ratio.is_finite() && (0.0..=1.0).contains(&g.ratio)) {
            return Err(MixtureError::BadRatio(g.name.clone(), g.ratio));
        }
        if g.sources.is_empty() {
            return Err(MixtureError::EmptyGroup(g.name.clone()));
        }
    }
    let sum: f64 = spec.groups.iter().map(|g| g.ratio).sum();
    if (sum - 1.0).abs() > RATIO_SUM_TOLERANCE {
        return Err(MixtureError::RatioSum(sum));
    }
    let mut groups: Vec<GroupPlan> = spec
        .groups
        .iter()
        .map(|g| GroupPlan {
            name: g.name.clone(),
            ratio: g.ratio,
            exhausted_policy: g.exhausted_policy,
            source_count: g.sources.len(),
        })
        .collect();
    groups.sort_by(|a, b| a.name.cmp(&b.name));
    let canonical = serde_json::to_vec(&(spec, seed)).expect("spec serializes");
    Ok(SamplingPlan {
        spec_hash: format!("{:016x}", stable_hash(&canonical)),
        seed,
        schedule: "max-token-deficit".into(),
        groups,
    })
}

/// One sample drawn from a source manifest. `record` is the original JSON
/// object, carried through untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub token_count: u64,
    pub record: serde_json::Value,
}

pub trait SampleSource: Send {
    fn next_sample(&mut self) -> Result<Option<SampleRecord>>;
    /// Restart from the first sample.
    fn rewind(&mut self) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct VecSource {
    samples: Vec<SampleRecord>,
    cursor: usize,
}

impl VecSource {
    pub fn new(samples: Vec<SampleRecord>) -> Self {
        Self { samples, cursor: 0 }
    }

    /// Samples with the given token counts and ids `<prefix>-<i>`.
    pub fn from_lengths(prefix: &str, lengths: impl IntoIterator<Item = u64>) -> Self {
        Self::new(
            lengths
                .into_iter()
                .enumerate()
                .map(|(i, n)| SampleRecord {
                    id: format!("{prefix}-{i}"),
                    token_count: n,
                    record: serde_json::Value::Null,
                })
                .collect(),
        )
    }
}

impl SampleSource for VecSource {
    fn next_sample(&mut self) -> Result<Option<SampleRecord>> {
        let s = self.samples.get(self.cursor).cloned();
        if s.is_some() {
            self.cursor += 1;
        }
        Ok(s)
    }

    fn rewind(&mut self) -> Result<()> {
        self.cursor = 0;
        Ok(())
    }
}

/// Lazily reads a JSONL manifest; each line needs at least `id` and
/// `token_count` unless a token counter is supplied.
pub struct JsonlSource {
    path: PathBuf,
    lines: Option<std::io::Lines<BufReader<File>>>,
    line_no: usize,
    counter: Option<TokenCounter>,
}

pub type TokenCounter = Box<dyn Fn(&serde_json::Value) -> Option<u64> + Send>;

impl JsonlSource {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let mut s = Self {
            path: path.into(),
            lines: None,
            line_no: 0,
            counter: None,
        };
        s.rewind()?;
        Ok(s)
    }

    /// Uses `counter` for records that lack a `token_count` field.
    pub fn with_counter(mut self, counter: TokenCounter) -> Self {
        self.counter = Some(counter);
        self
    }

    fn parse(&self, line: &str) -> Result<SampleRecord> {
        let bad = |reason: String| MixtureError::BadRecord {
            path: self.path.clone(),
            line: self.line_no,
            reason,
        };
        let record: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let id = match record.get("id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(bad("missing id".into())),
        };
        let token_count = match record.get("token_count").and_then(|v| v.as_u64()) {
            Some(n) => n,
            None => self
                .counter
                .as_ref()
                .and_then(|c| c(&record))
                .ok_or(MixtureError::MissingTokenCount { id: id.clone() })?,
        };
        Ok(SampleRecord {
            id,
            token_count,
            record,
        })
    }
}

impl SampleSource for JsonlSource {
    fn next_sample(&mut self) -> Result<Option<SampleRecord>> {
        loop {
            let Some(lines) = self.lines.as_mut() else {
                return Ok(None);
            };
            match lines.next() {
                None => return Ok(None),
                Some(Err(source)) => {
                    return Err(MixtureError::Io {
                        path: self.path.clone(),
                        source,
                    })
                }
                Some(Ok(line)) => {
                    self.line_no += 1;
                    if line.trim().is_empty() {
                        continue;
                    }
                    return self.parse(&line).map(Some);
                }
            }
        }
    }

    fn rewind(&mut self) -> Result<()> {
        let f = File::open(&self.path).map_err(|source| MixtureError::Io {
            path: self.path.clone(),
            source,
        })?;
        self.lines = Some(BufReader::new(f).lines());
        self.line_no = 0;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Emission {
    Sample {
        group: String,
        sample: SampleRecord,
        token_count: u64,
    },
    /// A `stop`-policy group ran dry before the budget was reached; the
    /// stream ends after this record.
    Exhausted { group: String, emitted_total: u64 },
}

struct GroupState {
    plan: GroupPlan,
    sources: Vec<Box<dyn SampleSource>>,
    dry: Vec<bool>,
    cursor: usize,
    emitted: u64,
}

impl GroupState {
    /// Round-robin over sources; `cycle` rewinds a source that runs out.
    fn next(&mut self) -> Result<Option<SampleRecord>> {
        let n = self.sources.len();
        for attempt in 0..n {
            let idx = (self.cursor + attempt) % n;
            if self.dry[idx] {
                continue;
            }
            let mut sample = self.sources[idx].next_sample()?;
            if sample.is_none() && self.plan.exhausted_policy == ExhaustedPolicy::Cycle {
                self.sources[idx].rewind()?;
                sample = self.sources[idx].next_sample()?;
            }
            match sample {
                Some(s) => {
                    self.cursor = (idx + 1) % n;
                    return Ok(Some(s));
                }
                None => self.dry[idx] = true,
            }
        }
        if self.plan.exhausted_policy == ExhaustedPolicy::Cycle {
            return Err(MixtureError::NothingToCycle(self.plan.name.clone()));
        }
        Ok(None)
    }
}

/// Executes a plan over concrete sources until `token_budget` tokens have
/// been emitted.
pub struct MixStream {
    groups: Vec<GroupState>,
    budget: u64,
    total: u64,
    done: bool,
}

impl MixStream {
    pub fn total_emitted(&self) -> u64 {
        self.total
    }

    pub fn emitted_by_group(&self) -> Vec<(&str, u64)> {
        self.groups
            .iter()
            .map(|g| (g.plan.name.as_str(), g.emitted))
            .collect()
    }

    /// Group with the largest token deficit; ties go to the earliest name.
    fn pick(&self) -> usize {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in self.groups.iter().enumerate() {
            if g.plan.ratio <= 0.0 {
                continue;
            }
            let deficit = g.plan.ratio * self.total as f64 - g.emitted as f64;
            if best.map_or(true, |(_, d)| deficit > d) {
                best = Some((i, deficit));
            }
        }
        best.expect("ratios sum to one, so some group has a positive ratio").0
    }

    fn step(&mut self) -> Result<Option<Emission>> {
        if self.done || self.total >= self.budget {
            return Ok(None);
        }
        let gi = self.pick();
        let g = &mut self.groups[gi];
        match g.next()? {
            Some(sample) => {
                let n = sample.token_count;
                g.emitted += n;
                self.total += n;
                Ok(Some(Emission::Sample {
                    group: g.plan.name.clone(),
                    sample,
                    token_count: n,
                }))
            }
            None => {
                self.done = true;
                Ok(Some(Emission::Exhausted {
                    group: g.plan.name.clone(),
                    emitted_total: self.total,
                }))
            }
        }
    }
}

impl Iterator for MixStream {
    type Item = Result<Emission>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.step() {
            Ok(Some(e)) => Some(Ok(e)),
            Ok(None) => None,
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Starts a mixing stream. `sources` pairs each group name with its sample
/// sources; every group in the plan must be present.
pub fn sample_stream(
    plan: &SamplingPlan,
    mut sources: Vec<(String, Vec<Box<dyn SampleSource>>)>,
    token_budget: u64,
) -> Result<MixStream> {
    if token_budget == 0 {
        return Err(MixtureError::ZeroBudget);
    }
    let mut groups = Vec::with_capacity(plan.groups.len());
    for gp in &plan.groups {
        let pos = sources
            .iter()
            .position(|(name, _)| name == &gp.name)
            .ok_or_else(|| MixtureError::MissingSources(gp.name.clone()))?;
        let (_, srcs) = sources.swap_remove(pos);
        if srcs.is_empty() {
            return Err(MixtureError::EmptyGroup(gp.name.clone()));
        }
        groups.push(GroupState {
            plan: gp.clone(),
            dry: vec![false; srcs.len()],
            sources: srcs,
            cursor: 0,
            emitted: 0,
        });
    }
    Ok(MixStream {
        groups,
        budget: token_budget,
        total: 0,
        done: false,
    })
}

/// Opens every group's JSONL manifests.
pub fn open_sources(
    spec: &MixtureSpec,
    counter: impl Fn() -> Option<TokenCounter>,
) -> Result<Vec<(String, Vec<Box<dyn SampleSource>>)>> {
    spec.groups
        .iter()
        .map(|g| {
            let srcs = g
                .sources
                .iter()
                .map(|p| {
                    let mut s = JsonlSource::open(p)?;
                    if let Some(c) = counter() {
                        s = s.with_counter(c);
                    }
                    Ok(Box::new(s) as Box<dyn SampleSource>)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((g.name.clone(), srcs))
        })
        .collect()
}
