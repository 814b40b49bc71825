use std::collections::BTreeSet;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::VisionError;

pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

/// Named colors a scene may use. None of them equals the background or the
/// reconstruction mask fill.
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [235, 200, 30]),
    ("purple", [140, 60, 180]),
    ("orange", [245, 130, 30]),
    ("black", [20, 20, 20]),
    ("cyan", [40, 200, 210]),
];

pub fn palette_rgb(name: &str) -> Option<Rgb<u8>> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| Rgb(*c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: String,
    pub color: String,
    pub shape: Shape,
    /// Center pixel `(x, y)`.
    pub center: (u32, u32),
    /// Diameter / side length in pixels.
    pub size: u32,
    pub z_order: i32,
}

impl SceneObject {
    /// Whether pixel `(px, py)` is inside the object's silhouette.
    pub fn covers(&self, px: u32, py: u32) -> bool {
        let (cx, cy) = (self.center.0 as i64, self.center.1 as i64);
        let (dx, dy) = (px as i64 - cx, py as i64 - cy);
        let r = (self.size / 2) as i64;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // apex at the top, base at the bottom
            Shape::Triangle => dy >= -r && dy <= r && 2 * dx.abs() <= dy + r,
        }
    }

    fn bbox(&self) -> (i64, i64, i64, i64) {
        let r = (self.size / 2) as i64;
        let (cx, cy) = (self.center.0 as i64, self.center.1 as i64);
        (cx - r, cy - r, cx + r, cy + r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: (u32, u32),
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), VisionError> {
        let (w, h) = self.canvas;
        if w == 0 || h == 0 {
            return Err(VisionError::InvalidScene(format!("zero-area canvas {w}x{h}")));
        }
        let mut z = BTreeSet::new();
        for (i, o) in self.objects.iter().enumerate() {
            let (x0, y0, x1, y1) = o.bbox();
            if x0 < 0 || y0 < 0 || x1 >= w as i64 || y1 >= h as i64 {
                return Err(VisionError::InvalidScene(format!("object {i} leaves the canvas")));
            }
            if !z.insert(o.z_order) {
                return Err(VisionError::InvalidScene(format!("duplicate z_order {}", o.z_order)));
            }
            if palette_rgb(&o.color).is_none() {
                return Err(VisionError::InvalidScene(format!("unknown color {:?}", o.color)));
            }
        }
        Ok(())
    }

    /// Object indices from bottom to top.
    fn paint_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.objects.len()).collect();
        order.sort_by_key(|&i| self.objects[i].z_order);
        order
    }

    /// Topmost object index per pixel (row-major), `None` for background.
    pub fn coverage(&self) -> Vec<Option<usize>> {
        let (w, h) = self.canvas;
        let mut top = vec![None; (w * h) as usize];
        for i in self.paint_order() {
            let o = &self.objects[i];
            let (x0, y0, x1, y1) = o.bbox();
            for y in y0.max(0)..=y1.min(h as i64 - 1) {
                for x in x0.max(0)..=x1.min(w as i64 - 1) {
                    if o.covers(x as u32, y as u32) {
                        top[(y as u32 * w + x as u32) as usize] = Some(i);
                    }
                }
            }
        }
        top
    }

    /// Fraction of each object's silhouette hidden by objects above it.
    pub fn occlusion(&self) -> Vec<f64> {
        let (w, _) = self.canvas;
        let top = self.coverage();
        self.objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let (x0, y0, x1, y1) = o.bbox();
                let mut own = 0usize;
                let mut visible = 0usize;
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        if o.covers(x as u32, y as u32) {
                            own += 1;
                            if top[(y as u32 * w + x as u32) as usize] == Some(i) {
                                visible += 1;
                            }
                        }
                    }
                }
                if own == 0 {
                    0.0
                } else {
                    1.0 - visible as f64 / own as f64
                }
            })
            .collect()
    }
}

pub fn render_scene(spec: &SceneSpec) -> Result<RgbImage, VisionError> {
    spec.validate()?;
    let (w, h) = spec.canvas;
    let colors: Vec<Rgb<u8>> = spec
        .objects
        .iter()
        .map(|o| palette_rgb(&o.color).expect("validated"))
        .collect();
    let top = spec.coverage();
    Ok(RgbImage::from_fn(w, h, |x, y| match top[(y * w + x) as usize] {
        Some(i) => colors[i],
        None => BACKGROUND,
    }))
}

/// Above this level scenes may hide objects freely; below it no object may be
/// more than `MAX_LOW_DIFFICULTY_OCCLUSION` occluded.
pub const OCCLUSION_FREE_LEVEL: f64 = 0.5;
pub const MAX_LOW_DIFFICULTY_OCCLUSION: f64 = 0.3;

/// Random scene whose object count grows with `level`. Categories are the
/// shape names so every category question is answerable from pixels.
pub fn random_scene(
    rng: &mut impl Rng,
    canvas: (u32, u32),
    level: f64,
    seed: u64,
) -> Result<SceneSpec, VisionError> {
    let (w, h) = canvas;
    let side = w.min(h);
    if side < 16 {
        return Err(VisionError::InvalidScene(format!("canvas {w}x{h} too small for scenes")));
    }
    let max_objects = 3 + (level * 7.0).round() as usize;
    let (min_size, max_size) = (side / 10, side / 4);
    let mut attempts = 0usize;
    loop {
        attempts += 1;
        // shrink the scene if rejection keeps failing
        let cap = max_objects.saturating_sub(attempts / 25).max(1);
        let n = rng.gen_range(1..=cap);
        let objects = (0..n)
            .map(|i| {
                let size = rng.gen_range(min_size..=max_size);
                let r = size / 2;
                let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
                let color = PALETTE[rng.gen_range(0..PALETTE.len())].0;
                SceneObject {
                    category: shape.name().to_string(),
                    color: color.to_string(),
                    shape,
                    center: (rng.gen_range(r..w - r), rng.gen_range(r..h - r)),
                    size,
                    z_order: i as i32,
                }
            })
            .collect();
        let spec = SceneSpec { canvas, objects, seed };
        if level >= OCCLUSION_FREE_LEVEL
            || spec.occlusion().iter().all(|&o| o <= MAX_LOW_DIFFICULTY_OCCLUSION)
        {
            spec.validate()?;
            return Ok(spec);
        }
    }
}
