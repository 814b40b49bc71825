use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{render_scene, SceneSpec, BACKGROUND};
use super::{DifficultyParams, VisionError};
use crate::seed::{derive_rng, derive_seed};

/// Fill color of the hidden region in reconstruction samples.
pub const MASK_FILL: Rgb<u8> = Rgb([128, 128, 128]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Reconstruction,
    Matching,
    Detection,
    Counting,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Reconstruction, Task::Matching, Task::Detection, Task::Counting];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Reconstruction => "reconstruction",
            Task::Matching => "matching",
            Task::Detection => "detection",
            Task::Counting => "counting",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = VisionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| VisionError::InvalidParams(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

pub fn crop(image: &RgbImage, r: Rect) -> RgbImage {
    image::imageops::crop_imm(image, r.x, r.y, r.w, r.h).to_image()
}

/// Recorded augmentation of a matching anchor; applying it to the source
/// candidate reproduces the anchor bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorTransform {
    pub crop: Rect,
    pub rotation_deg: f64,
    pub gains: [f64; 3],
    pub noise_std: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    /// Index into [`Provenance::sources`].
    pub source: usize,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountQuery {
    Total,
    ByCategory(String),
    ByColor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detail {
    Reconstruction { mask: Rect, patches: Vec<PatchOrigin> },
    Matching { transform: AnchorTransform },
    Detection { category: String, grid: u32 },
    Counting { query: CountQuery },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Ids of the input images in the order the generator received them.
    pub sources: Vec<String>,
    /// Ground truth for procedurally generated inputs, parallel to `sources`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scenes: Vec<SceneSpec>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<DifficultyParams>,
    pub detail: Detail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionSample {
    pub task: Task,
    pub question: String,
    pub choices: Option<Vec<String>>,
    pub answer: String,
    /// Images in question order: the query image first, then candidates.
    pub images: Vec<RgbImage>,
    pub difficulty: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pub id: String,
    pub image: RgbImage,
}

impl SourceImage {
    pub fn new(id: impl Into<String>, image: RgbImage) -> Self {
        Self { id: id.into(), image }
    }
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix} {i}")).collect()
}

fn random_rect(rng: &mut impl Rng, (w, h): (u32, u32), (cw, ch): (u32, u32)) -> Rect {
    Rect { x: rng.gen_range(0..=w - cw), y: rng.gen_range(0..=h - ch), w: cw, h: ch }
}

fn scaled_side(side: u32, scale: f64) -> u32 {
    ((side as f64 * scale).round() as u32).clamp(1, side)
}

const DISTRACTOR_ATTEMPTS_PER_PATCH: usize = 64;
const ANCHOR_ATTEMPTS: usize = 64;

/// Masks a rectangle of `image` and asks which candidate patch fills it.
/// Distractors come from `pool` when it is non-empty, otherwise from other
/// locations of `image`.
pub fn gen_reconstruction(
    image: &SourceImage,
    pool: &[SourceImage],
    params: &DifficultyParams,
    seed: u64,
) -> Result<VisionSample, VisionError> {
    params.validate()?;
    let (w, h) = image.image.dimensions();
    let side = params.mask_area_fraction.sqrt();
    let (mw, mh) = (scaled_side(w, side), scaled_side(h, side));
    if mw >= w || mh >= h {
        return Err(VisionError::ImageTooSmall { width: w, height: h, mask_w: mw, mask_h: mh });
    }
    let mut rng = derive_rng(seed, "reconstruction", 0);
    let mask = random_rect(&mut rng, (w, h), (mw, mh));
    let truth = crop(&image.image, mask);

    let usable: Vec<usize> = (0..pool.len())
        .filter(|&j| {
            let (pw, ph) = pool[j].image.dimensions();
            pw >= mw && ph >= mh
        })
        .collect();
    let n = params.num_distractors;
    let mut chosen: Vec<(PatchOrigin, RgbImage)> = Vec::with_capacity(n);
    let budget = DISTRACTOR_ATTEMPTS_PER_PATCH * n.max(1);
    let mut attempts = 0;
    while chosen.len() < n {
        if attempts == budget {
            return Err(VisionError::NoDistinctDistractor(attempts));
        }
        attempts += 1;
        let (source, img) = if usable.is_empty() {
            (0, &image.image)
        } else {
            let j = usable[rng.gen_range(0..usable.len())];
            (j + 1, &pool[j].image)
        };
        let rect = random_rect(&mut rng, img.dimensions(), (mw, mh));
        let patch = crop(img, rect);
        if patch == truth || chosen.iter().any(|(_, p)| *p == patch) {
            continue;
        }
        chosen.push((PatchOrigin { source, rect }, patch));
    }

    let answer_index = rng.gen_range(0..=n);
    chosen.insert(answer_index, (PatchOrigin { source: 0, rect: mask }, truth));

    let mut masked = image.image.clone();
    for y in mask.y..mask.y + mask.h {
        for x in mask.x..mask.x + mask.w {
            masked.put_pixel(x, y, MASK_FILL);
        }
    }
    let (question, choices) = if n == 0 {
        (
            "Part of the image is hidden by a gray rectangle. Which patch restores the hidden region? \
             Answer with the patch label."
                .to_string(),
            None,
        )
    } else {
        (
            format!(
                "Part of the image is hidden by a gray rectangle. Which of the candidate patches \
                 (patch 0 to patch {n}) restores the hidden region? Answer with the patch label."
            ),
            Some(labels("patch", n + 1)),
        )
    };
    let mut sources = vec![image.id.clone()];
    sources.extend(pool.iter().map(|p| p.id.clone()));
    let (patches, patch_images): (Vec<_>, Vec<_>) = chosen.into_iter().unzip();
    let mut images = vec![masked];
    images.extend(patch_images);
    Ok(VisionSample {
        task: Task::Reconstruction,
        question,
        choices,
        answer: format!("patch {answer_index}"),
        images,
        difficulty: params.level,
        provenance: Provenance {
            sources,
            scenes: Vec::new(),
            seed,
            params: Some(*params),
            detail: Detail::Reconstruction { mask, patches },
        },
    })
}

/// Applies a recorded anchor transform to its source image.
pub fn regenerate_anchor(source: &RgbImage, t: &AnchorTransform) -> RgbImage {
    let Rect { x: x0, y: y0, w, h } = t.crop;
    let (sw, sh) = source.dimensions();
    let theta = t.rotation_deg.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let normal = Normal::new(0.0, t.noise_std).expect("noise std validated");
    let mut noise_rng = ChaCha8Rng::seed_from_u64(t.noise_seed);
    RgbImage::from_fn(w, h, |x, y| {
        // inverse rotation about the crop center, nearest neighbour
        let base = if t.rotation_deg == 0.0 {
            *source.get_pixel(x0 + x, y0 + y)
        } else {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = libm::round(x0 as f64 + cx + cos * dx + sin * dy);
            let sy = libm::round(y0 as f64 + cy - sin * dx + cos * dy);
            if sx >= 0.0 && sy >= 0.0 && sx < sw as f64 && sy < sh as f64 {
                *source.get_pixel(sx as u32, sy as u32)
            } else {
                BACKGROUND
            }
        };
        let mut out = [0u8; 3];
        for c in 0..3 {
            let noise = if t.noise_std > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
            out[c] = libm::round(base.0[c] as f64 * t.gains[c] + noise).clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

/// Matching sample whose anchor is taken from a randomly chosen candidate.
pub fn gen_matching(
    candidates: &[SourceImage],
    params: &DifficultyParams,
    seed: u64,
) -> Result<VisionSample, VisionError> {
    if candidates.len() < 2 {
        return Err(VisionError::NotEnoughCandidates(candidates.len()));
    }
    let source_index = derive_rng(seed, "matching-source", 0).gen_range(0..candidates.len());
    gen_matching_from(candidates, source_index, params, seed)
}

/// Matching sample whose anchor is an augmented crop of
/// `candidates[source_index]`.
pub fn gen_matching_from(
    candidates: &[SourceImage],
    source_index: usize,
    params: &DifficultyParams,
    seed: u64,
) -> Result<VisionSample, VisionError> {
    params.validate()?;
    if candidates.len() < 2 {
        return Err(VisionError::NotEnoughCandidates(candidates.len()));
    }
    assert!(source_index < candidates.len(), "source index out of range");
    let source = &candidates[source_index].image;
    let mut rng = derive_rng(seed, "matching", 0);
    let (lo, hi) = params.crop_scale_range;
    let (w, h) = source.dimensions();
    let aug = params.augmentation;
    let mut attempt = 0;
    // A crop of plain background can look the same in several candidates;
    // redraw until the anchor regenerates from its source alone.
    let (transform, anchor) = loop {
        if attempt == ANCHOR_ATTEMPTS {
            return Err(VisionError::AmbiguousAnchor(attempt));
        }
        let scale = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let crop_rect = random_rect(&mut rng, (w, h), (scaled_side(w, scale), scaled_side(h, scale)));
        let rotation_deg = if aug.rotation_deg > 0.0 {
            rng.gen_range(-aug.rotation_deg..=aug.rotation_deg)
        } else {
            0.0
        };
        let mut gains = [1.0; 3];
        if aug.color_jitter > 0.0 {
            for g in &mut gains {
                *g = rng.gen_range(1.0 - aug.color_jitter..=1.0 + aug.color_jitter);
            }
        }
        let transform = AnchorTransform {
            crop: crop_rect,
            rotation_deg,
            gains,
            noise_std: aug.noise_std,
            noise_seed: derive_seed(seed, "matching-noise", attempt as u64),
        };
        let anchor = regenerate_anchor(source, &transform);
        let fits = |c: &SourceImage| {
            let (cw, ch) = c.image.dimensions();
            cw >= crop_rect.x + crop_rect.w && ch >= crop_rect.y + crop_rect.h
        };
        let ambiguous = candidates.iter().enumerate().any(|(j, c)| {
            j != source_index && fits(c) && regenerate_anchor(&c.image, &transform) == anchor
        });
        if !ambiguous {
            break (transform, anchor);
        }
        attempt += 1;
    };
    let n = candidates.len();
    let mut images = vec![anchor];
    images.extend(candidates.iter().map(|c| c.image.clone()));
    Ok(VisionSample {
        task: Task::Matching,
        question: format!(
            "The first image is a cropped and possibly altered view of one of the candidate images \
             (image 0 to image {}). Which candidate was it taken from? Answer with the image label.",
            n - 1
        ),
        choices: Some(labels("image", n)),
        answer: format!("image {source_index}"),
        images,
        difficulty: params.level,
        provenance: Provenance {
            sources: candidates.iter().map(|c| c.id.clone()).collect(),
            scenes: Vec::new(),
            seed,
            params: Some(*params),
            detail: Detail::Matching { transform },
        },
    })
}

/// Grid cell `(row, col)` containing a pixel.
pub fn grid_cell(canvas: (u32, u32), point: (u32, u32), grid: u32) -> (u32, u32) {
    let cell = |p: u32, side: u32| ((p as u64 * grid as u64 / side as u64) as u32).min(grid - 1);
    (cell(point.1, canvas.1), cell(point.0, canvas.0))
}

pub fn detection_answer(spec: &SceneSpec, category: &str, grid: u32) -> String {
    let mut cells: Vec<(u32, u32)> = spec
        .objects
        .iter()
        .filter(|o| o.category == category)
        .map(|o| grid_cell(spec.canvas, o.center, grid))
        .collect();
    cells.sort_unstable();
    cells.dedup();
    let fmt = |(r, c): &(u32, u32)| format!("({r},{c})");
    match cells.as_slice() {
        [] => "not present".to_string(),
        [one] => format!("present, cell {}", fmt(one)),
        many => format!("present, cells {}", many.iter().map(fmt).collect::<Vec<_>>().join(", ")),
    }
}

fn scene_source(spec: &SceneSpec) -> String {
    format!("scene:{}", spec.seed)
}

pub fn gen_detection(spec: &SceneSpec, category: &str, grid: u32) -> Result<VisionSample, VisionError> {
    if grid == 0 {
        return Err(VisionError::InvalidParams("grid resolution must be at least 1".into()));
    }
    let image = render_scene(spec)?;
    Ok(VisionSample {
        task: Task::Detection,
        question: format!(
            "Is there a {category} in the image? If so, give the cell (row,col) of its center on a \
             {grid}x{grid} grid, counting from the top-left cell (0,0)."
        ),
        choices: None,
        answer: detection_answer(spec, category, grid),
        images: vec![image],
        difficulty: 0.0,
        provenance: Provenance {
            sources: vec![scene_source(spec)],
            scenes: vec![spec.clone()],
            seed: spec.seed,
            params: None,
            detail: Detail::Detection { category: category.to_string(), grid },
        },
    })
}

pub fn count_objects(spec: &SceneSpec, query: &CountQuery) -> usize {
    spec.objects
        .iter()
        .filter(|o| match query {
            CountQuery::Total => true,
            CountQuery::ByCategory(c) => &o.category == c,
            CountQuery::ByColor(c) => &o.color == c,
        })
        .count()
}

/// Counting sample. Occluded objects count: the answer is taken from the
/// scene description, not from visible pixels.
pub fn gen_counting(spec: &SceneSpec, query: &CountQuery) -> Result<VisionSample, VisionError> {
    let image = render_scene(spec)?;
    let question = match query {
        CountQuery::Total => "How many objects are in the image? Answer with a number.".to_string(),
        CountQuery::ByCategory(c) => format!("How many {c}s are in the image? Answer with a number."),
        CountQuery::ByColor(c) => format!("How many {c} objects are in the image? Answer with a number."),
    };
    Ok(VisionSample {
        task: Task::Counting,
        question,
        choices: None,
        answer: count_objects(spec, query).to_string(),
        images: vec![image],
        difficulty: 0.0,
        provenance: Provenance {
            sources: vec![scene_source(spec)],
            scenes: vec![spec.clone()],
            seed: spec.seed,
            params: None,
            detail: Detail::Counting { query: query.clone() },
        },
    })
}
