use serde::{Deserialize, Serialize};

use super::VisionError;

/// Strength of the photometric/geometric augmentation applied to anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Per-channel gain drawn from `[1 - j, 1 + j]`.
    pub color_jitter: f64,
    /// Standard deviation of additive Gaussian pixel noise (0..255 scale).
    pub noise_std: f64,
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation { rotation_deg: 0.0, color_jitter: 0.0, noise_std: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyParams {
    pub level: f64,
    /// Fraction of the image area hidden in reconstruction tasks.
    pub mask_area_fraction: f64,
    /// Side length of a matching crop as a fraction of the source side.
    /// Harder levels crop smaller, so both ends shrink as the level grows.
    pub crop_scale_range: (f64, f64),
    pub augmentation: Augmentation,
    pub num_distractors: usize,
    pub grid_resolution: u32,
}

// Endpoint table, linearly interpolated by level.
pub const MASK_AREA: (f64, f64) = (0.05, 0.40);
pub const ROTATION_DEG: (f64, f64) = (0.0, 45.0);
pub const COLOR_JITTER: (f64, f64) = (0.0, 0.3);
pub const NOISE_STD: (f64, f64) = (0.0, 12.0);
pub const DISTRACTORS: (usize, usize) = (1, 7);
pub const GRID: (u32, u32) = (2, 8);
pub const CROP_MIN: (f64, f64) = (0.8, 0.4);
pub const CROP_MAX: (f64, f64) = (1.0, 0.7);

fn lerp((a, b): (f64, f64), t: f64) -> f64 {
    a + (b - a) * t
}

fn lerp_round((a, b): (usize, usize), t: f64) -> usize {
    (a as f64 + (b - a) as f64 * t + 0.5).floor() as usize
}

pub fn difficulty_schedule(level: f64) -> Result<DifficultyParams, VisionError> {
    if !(0.0..=1.0).contains(&level) {
        return Err(VisionError::InvalidParams(format!("difficulty level {level} outside [0, 1]")));
    }
    Ok(DifficultyParams {
        level,
        mask_area_fraction: lerp(MASK_AREA, level),
        crop_scale_range: (lerp(CROP_MIN, level), lerp(CROP_MAX, level)),
        augmentation: Augmentation {
            rotation_deg: lerp(ROTATION_DEG, level),
            color_jitter: lerp(COLOR_JITTER, level),
            noise_std: lerp(NOISE_STD, level),
        },
        num_distractors: lerp_round(DISTRACTORS, level),
        grid_resolution: lerp_round((GRID.0 as usize, GRID.1 as usize), level) as u32,
    })
}

impl DifficultyParams {
    pub fn validate(&self) -> Result<(), VisionError> {
        let bad = |m: String| Err(VisionError::InvalidParams(m));
        if !(0.0..1.0).contains(&self.mask_area_fraction) {
            return bad(format!("mask_area_fraction {} must be in [0, 1)", self.mask_area_fraction));
        }
        let (lo, hi) = self.crop_scale_range;
        if hi > 1.0 {
            return bad(format!("crop scale {hi} is larger than the source image"));
        }
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("crop scale range ({lo}, {hi}) is invalid"));
        }
        let a = self.augmentation;
        if !(0.0..=180.0).contains(&a.rotation_deg) {
            return bad(format!("rotation {} outside [0, 180]", a.rotation_deg));
        }
        if !(0.0..=1.0).contains(&a.color_jitter) {
            return bad(format!("color jitter {} outside [0, 1]", a.color_jitter));
        }
        if !(a.noise_std >= 0.0 && a.noise_std.is_finite()) {
            return bad(format!("noise std {} must be non-negative", a.noise_std));
        }
        if self.grid_resolution == 0 {
            return bad("grid resolution must be at least 1".into());
        }
        Ok(())
    }
}
