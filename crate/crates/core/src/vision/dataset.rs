use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::scene::{random_scene, render_scene, SceneSpec, Shape, PALETTE};
use super::tasks::*;
use super::{difficulty_schedule, VisionError};
use crate::seed::{derive_rng, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyRamp {
    /// Level grows from 0 at the first sample to 1 at the last.
    Linear,
    Constant(f64),
}

impl FromStr for DifficultyRamp {
    type Err = VisionError;

    /// `linear`, `constant:<level>` or a bare level.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || VisionError::InvalidParams(format!("bad difficulty ramp {s:?}"));
        if s == "linear" {
            return Ok(DifficultyRamp::Linear);
        }
        let level: f64 = s.strip_prefix("constant:").unwrap_or(s).parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&level) {
            return Err(bad());
        }
        Ok(DifficultyRamp::Constant(level))
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub tasks: Vec<Task>,
    pub n: usize,
    pub ramp: DifficultyRamp,
    pub seed: u64,
    pub canvas: (u32, u32),
    /// External images used for reconstruction and matching instead of
    /// rendered scenes when non-empty.
    pub raw_images: Vec<SourceImage>,
}

impl SynthConfig {
    pub fn new(tasks: Vec<Task>, n: usize, ramp: DifficultyRamp, seed: u64) -> Self {
        Self { tasks, n, ramp, seed, canvas: (128, 128), raw_images: Vec::new() }
    }

    pub fn level(&self, index: usize) -> f64 {
        match self.ramp {
            DifficultyRamp::Constant(l) => l,
            DifficultyRamp::Linear if self.n <= 1 => 0.0,
            DifficultyRamp::Linear => index as f64 / (self.n - 1) as f64,
        }
    }

    pub fn sample_id(&self, index: usize) -> String {
        format!("vision-s{}-{index:07}", self.seed)
    }
}

/// The scene a seed stands for; provenance scene seeds regenerate through this.
pub fn scene_from_seed(seed: u64, canvas: (u32, u32), level: f64) -> Result<SceneSpec, VisionError> {
    random_scene(&mut ChaCha8Rng::seed_from_u64(seed), canvas, level, seed)
}

fn scene_source(spec: &SceneSpec) -> Result<SourceImage, VisionError> {
    Ok(SourceImage::new(format!("scene:{}", spec.seed), render_scene(spec)?))
}

const RECONSTRUCTION_RETRIES: u64 = 8;

/// Generates sample `index`. Each index has its own random stream, so the
/// result does not depend on which other samples are generated.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<VisionSample, VisionError> {
    if cfg.tasks.is_empty() {
        return Err(VisionError::InvalidParams("no tasks selected".into()));
    }
    let level = cfg.level(index);
    let params = difficulty_schedule(level)?;
    let task = cfg.tasks[index % cfg.tasks.len()];
    let mut rng = derive_rng(cfg.seed, "synthvision", index as u64);
    let sample_seed: u64 = rng.gen();
    let new_scene = |rng: &mut ChaCha8Rng| scene_from_seed(rng.gen(), cfg.canvas, level);
    let raw = &cfg.raw_images;

    let mut sample = match task {
        Task::Counting => {
            let scene = new_scene(&mut rng)?;
            let query = match rng.gen_range(0..3) {
                0 => CountQuery::Total,
                1 => CountQuery::ByCategory(Shape::ALL[rng.gen_range(0..3)].name().to_string()),
                _ => CountQuery::ByColor(PALETTE[rng.gen_range(0..PALETTE.len())].0.to_string()),
            };
            gen_counting(&scene, &query)?
        }
        Task::Detection => {
            let scene = new_scene(&mut rng)?;
            let category = Shape::ALL[rng.gen_range(0..3)].name();
            gen_detection(&scene, category, params.grid_resolution)?
        }
        Task::Reconstruction => {
            // easy samples draw distractors from a different image
            let want_pool = level < 0.5;
            let (image, pool, scenes) = if raw.is_empty() {
                let main = new_scene(&mut rng)?;
                let mut scenes = vec![main];
                if want_pool {
                    scenes.push(new_scene(&mut rng)?);
                }
                let image = scene_source(&scenes[0])?;
                let pool = scenes[1..].iter().map(scene_source).collect::<Result<Vec<_>, _>>()?;
                (image, pool, scenes)
            } else if want_pool && raw.len() >= 2 {
                let picks = index::sample(&mut rng, raw.len(), 2);
                (raw[picks.index(0)].clone(), vec![raw[picks.index(1)].clone()], Vec::new())
            } else {
                (raw[rng.gen_range(0..raw.len())].clone(), Vec::new(), Vec::new())
            };
            let mut attempt = 0;
            let mut sample = loop {
                let seed = derive_seed(sample_seed, "attempt", attempt);
                match gen_reconstruction(&image, &pool, &params, seed) {
                    Err(VisionError::NoDistinctDistractor(_)) if attempt + 1 < RECONSTRUCTION_RETRIES => {
                        attempt += 1
                    }
                    other => break other?,
                }
            };
            sample.provenance.scenes = scenes;
            sample
        }
        Task::Matching => {
            let k = params.num_distractors + 1;
            let (candidates, scenes) = if raw.is_empty() {
                let scenes = (0..k).map(|_| new_scene(&mut rng)).collect::<Result<Vec<_>, _>>()?;
                let cands = scenes.iter().map(scene_source).collect::<Result<Vec<_>, _>>()?;
                (cands, scenes)
            } else {
                if raw.len() < 2 {
                    return Err(VisionError::NotEnoughCandidates(raw.len()));
                }
                let picks = index::sample(&mut rng, raw.len(), k.min(raw.len()));
                (picks.iter().map(|i| raw[i].clone()).collect(), Vec::new())
            };
            let mut sample = gen_matching(&candidates, &params, sample_seed)?;
            sample.provenance.scenes = scenes;
            sample
        }
    };
    sample.difficulty = level;
    sample.provenance.params = Some(params);
    Ok(sample)
}

/// All `cfg.n` samples in index order, generated in parallel.
pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<VisionSample>, VisionError> {
    (0..cfg.n).into_par_iter().map(|i| generate_sample(cfg, i)).collect()
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, VisionError> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf).write_image(
        image.as_raw(),
        image.width(),
        image.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

/// JSONL record for a sample whose images are stored at `image_paths`.
pub fn sample_record(id: &str, sample: &VisionSample, image_paths: &[String]) -> Result<Value, VisionError> {
    let placeholders = "<image>\n".repeat(sample.images.len());
    let mut record = json!({
        "id": id,
        "domain": format!("vision-{}", sample.task),
        "task": sample.task,
        "question": sample.question,
        "answer": sample.answer,
        "image_paths": image_paths,
        "difficulty": sample.difficulty,
        "provenance": serde_json::to_value(&sample.provenance)?,
        "turns": [
            {"role": "user", "content": format!("{placeholders}{}", sample.question)},
            {"role": "assistant", "content": sample.answer},
        ],
    });
    if let Some(choices) = &sample.choices {
        record["choices"] = json!(choices);
    }
    Ok(record)
}

/// Directory holding the images of a dataset written to `jsonl_path`.
pub fn image_dir_for(jsonl_path: &Path) -> PathBuf {
    let stem = jsonl_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    jsonl_path.with_file_name(format!("{stem}_images"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub images: usize,
}

const WRITE_CHUNK: usize = 512;

/// Generates the dataset and writes `jsonl_path` plus lossless PNGs in
/// [`image_dir_for`]. Image paths in records are relative to the JSONL file.
pub fn write_dataset(cfg: &SynthConfig, jsonl_path: &Path) -> Result<DatasetSummary, VisionError> {
    let image_dir = image_dir_for(jsonl_path);
    fs::create_dir_all(&image_dir)?;
    let dir_name = image_dir.file_name().unwrap().to_string_lossy().into_owned();
    let mut out = BufWriter::new(File::create(jsonl_path)?);
    let mut summary = DatasetSummary::default();
    for start in (0..cfg.n).step_by(WRITE_CHUNK) {
        let end = (start + WRITE_CHUNK).min(cfg.n);
        let chunk = (start..end)
            .into_par_iter()
            .map(|i| {
                let id = cfg.sample_id(i);
                let sample = generate_sample(cfg, i)?;
                let mut files = Vec::with_capacity(sample.images.len());
                let mut paths = Vec::with_capacity(sample.images.len());
                for (k, img) in sample.images.iter().enumerate() {
                    let name = format!("{id}_{k}.png");
                    paths.push(format!("{dir_name}/{name}"));
                    files.push((name, encode_png(img)?));
                }
                let line = serde_json::to_string(&sample_record(&id, &sample, &paths)?)?;
                Ok((line, files))
            })
            .collect::<Result<Vec<_>, VisionError>>()?;
        for (line, files) in chunk {
            for (name, bytes) in files {
                fs::write(image_dir.join(name), bytes)?;
                summary.images += 1;
            }
            writeln!(out, "{line}")?;
            summary.samples += 1;
        }
    }
    out.flush()?;
    Ok(summary)
}

/// Loads every PNG in `dir` (sorted by file name) as a raw source image.
pub fn load_raw_images(dir: &Path) -> Result<Vec<SourceImage>, VisionError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().unwrap().to_string_lossy().into_owned();
            Ok(SourceImage::new(id, image::open(&p)?.to_rgb8()))
        })
        .collect()
}
