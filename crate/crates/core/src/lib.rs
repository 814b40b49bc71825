//! Deterministic tooling for staged multimodal mid-training: checkpoint
//! surgery, data-mixture scheduling, sequence packing with loss masks,
//! procedural visual-reasoning samples, SFT data curation and per-stage
//! training configs.

pub mod checkpoint;
pub mod seed;
pub mod surgery;
pub mod mixture;
pub mod packing;
pub mod vision;
pub mod curation;
pub mod stageplan;
