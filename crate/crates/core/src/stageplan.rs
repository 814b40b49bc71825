//! Declarative per-stage training configurations: freeze sets, sequence
//! length, learning-rate schedule, loss mode and checkpoint directives.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StagePlanError {
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error("invalid stage config: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Upscale,
    ProjectorRealign,
    Cpt1,
    Cpt2,
    SftMain,
    SftSubset,
    SftLong,
}

impl StageId {
    pub const ALL: [StageId; 7] = [
        StageId::Upscale,
        StageId::ProjectorRealign,
        StageId::Cpt1,
        StageId::Cpt2,
        StageId::SftMain,
        StageId::SftSubset,
        StageId::SftLong,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::Upscale => "upscale",
            StageId::ProjectorRealign => "projector_realign",
            StageId::Cpt1 => "cpt1",
            StageId::Cpt2 => "cpt2",
            StageId::SftMain => "sft_main",
            StageId::SftSubset => "sft_subset",
            StageId::SftLong => "sft_long",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageId {
    type Err = StagePlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| StagePlanError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Vision,
    Projector,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    LinearDecay,
    CosineDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLoss {
    AllTokens,
    /// Responses only for instruction-response samples.
    ResponseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingRule {
    Equispaced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Averaging {
    pub k: usize,
    pub rule: AveragingRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage_id: StageId,
    pub frozen: BTreeSet<Component>,
    pub seq_len: u64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_fraction: f64,
    pub loss_mode: StageLoss,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging: Option<Averaging>,
    /// Stages whose final weights are averaged in equal proportions with
    /// this stage's final weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_after: Option<Vec<StageId>>,
}

impl StageConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stage configs serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, StagePlanError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[allow(clippy::too_many_arguments)]
fn stage(
    stage_id: StageId,
    frozen: &[Component],
    seq_len: u64,
    lr: f64,
    lr_schedule: LrSchedule,
    warmup_fraction: f64,
    loss_mode: StageLoss,
) -> StageConfig {
    StageConfig {
        stage_id,
        frozen: frozen.iter().copied().collect(),
        seq_len,
        lr,
        lr_schedule,
        warmup_fraction,
        loss_mode,
        epochs: None,
        averaging: None,
        merge_after: None,
    }
}

pub fn builtin_recipe() -> Vec<StageConfig> {
    use Component::*;
    use LrSchedule::*;
    use StageLoss::*;
    let equispaced = |k| Some(Averaging { k, rule: AveragingRule::Equispaced });
    let recipe = vec![
        StageConfig {
            averaging: equispaced(6),
            ..stage(StageId::Upscale, &[Vision, Projector], 8192, 5e-5, LinearDecay, 0.0, AllTokens)
        },
        stage(StageId::ProjectorRealign, &[Vision, Decoder], 8192, 5e-5, LinearDecay, 0.0, AllTokens),
        StageConfig {
            averaging: equispaced(3),
            ..stage(StageId::Cpt1, &[], 32768, 5e-5, CosineDecay, 0.10, AllTokens)
        },
        stage(StageId::Cpt2, &[Vision], 16384, 1e-5, CosineDecay, 0.10, ResponseOnly),
        StageConfig {
            epochs: Some(4),
            ..stage(StageId::SftMain, &[Vision, Projector], 32768, 1e-5, CosineDecay, 0.10, ResponseOnly)
        },
        StageConfig {
            epochs: Some(4),
            ..stage(StageId::SftSubset, &[Vision, Projector], 32768, 1e-5, CosineDecay, 0.10, ResponseOnly)
        },
        StageConfig {
            merge_after: Some(vec![StageId::SftSubset]),
            ..stage(StageId::SftLong, &[Vision, Projector], 49152, 1e-5, CosineDecay, 0.10, ResponseOnly)
        },
    ];
    debug_assert!(validate_recipe(&recipe).pass);
    recipe
}

pub fn builtin_stage(id: StageId) -> StageConfig {
    builtin_recipe().into_iter().find(|s| s.stage_id == id).expect("every stage is built in")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Validation {
    pub pass: bool,
    pub reasons: Vec<String>,
}

impl Validation {
    fn from_reasons(reasons: Vec<String>) -> Self {
        Self { pass: reasons.is_empty(), reasons }
    }
}

fn config_reasons(cfg: &StageConfig) -> Vec<String> {
    let mut reasons = Vec::new();
    if cfg.frozen.len() == 3 {
        reasons.push(format!("{}: nothing trainable", cfg.stage_id));
    }
    if cfg.seq_len == 0 {
        reasons.push(format!("{}: seq_len must be positive", cfg.stage_id));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        reasons.push(format!("{}: lr {} must be positive", cfg.stage_id, cfg.lr));
    }
    if !(0.0..1.0).contains(&cfg.warmup_fraction) {
        reasons.push(format!("{}: warmup_fraction {} outside [0, 1)", cfg.stage_id, cfg.warmup_fraction));
    }
    if cfg.epochs == Some(0) {
        reasons.push(format!("{}: epochs must be positive", cfg.stage_id));
    }
    if let Some(a) = cfg.averaging {
        if a.k == 0 {
            reasons.push(format!("{}: averaging k must be positive", cfg.stage_id));
        }
    }
    if let Some(m) = &cfg.merge_after {
        if m.is_empty() {
            reasons.push(format!("{}: merge_after is empty", cfg.stage_id));
        }
        if m.contains(&cfg.stage_id) {
            reasons.push(format!("{}: merge_after names the stage itself", cfg.stage_id));
        }
    }
    reasons
}

/// Checks one config in isolation.
pub fn validate_config(cfg: &StageConfig) -> Validation {
    Validation::from_reasons(config_reasons(cfg))
}

/// Checks every config plus cross-stage references: stage ids are unique and
/// `merge_after` only names stages in the recipe.
pub fn validate_recipe(recipe: &[StageConfig]) -> Validation {
    let mut reasons: Vec<String> = recipe.iter().flat_map(config_reasons).collect();
    let mut seen = BTreeSet::new();
    for cfg in recipe {
        if !seen.insert(cfg.stage_id) {
            reasons.push(format!("{}: duplicate stage", cfg.stage_id));
        }
    }
    for cfg in recipe {
        for m in cfg.merge_after.iter().flatten() {
            if !seen.contains(m) {
                reasons.push(format!("{}: merge_after references missing stage {m}", cfg.stage_id));
            }
        }
    }
    Validation::from_reasons(reasons)
}
