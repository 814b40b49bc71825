//! Procedural scenes and task-centric visual samples (reconstruction,
//! matching, detection, counting) with exact ground truth.

mod dataset;
mod difficulty;
mod scene;
mod tasks;

pub use dataset::*;
pub use difficulty::*;
pub use scene::*;
pub use tasks::*;

#[derive(Debug, thiserror::Error)]
pub enum VisionError {
    #[error("invalid difficulty parameters: {0}")]
    InvalidParams(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("image {width}x{height} is too small for a {mask_w}x{mask_h} mask")]
    ImageTooSmall { width: u32, height: u32, mask_w: u32, mask_h: u32 },
    #[error("matching needs at least 2 candidates, got {0}")]
    NotEnoughCandidates(usize),
    #[error("no distractor patch distinct from the true patch after {0} attempts")]
    NoDistinctDistractor(usize),
    #[error("no anchor crop identifies its source uniquely after {0} attempts")]
    AmbiguousAnchor(usize),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
