//! Structural and arithmetic checkpoint transformations: depth upscaling by
//! layer duplication, equispaced checkpoint selection, weighted averaging and
//! two-model merging.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{
    read_checkpoint, tensor_names_by_pattern, Checkpoint, CheckpointError, DType, Tensor,
    DECODER_LAYER_PREFIX,
};

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid layer plan: {0}")]
    InvalidPlan(String),
    #[error("target layer count {target} is smaller than source {source_layers}; shrinking is not supported")]
    Shrink { source_layers: usize, target: usize },
    #[error("decoder layer {0} is missing")]
    MissingLayer(usize),
    #[error("checkpoint has {found} decoder layers but the plan expects {expected}")]
    LayerCountMismatch { expected: usize, found: usize },
    #[error("decoder layer {layer} has tensor suffixes {found:?}, layer 0 has {expected:?}")]
    SuffixMismatch {
        layer: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("cannot select {k} checkpoints from {available}")]
    NotEnoughCheckpoints { k: usize, available: usize },
    #[error("invalid averaging spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint {index} does not match checkpoint 0: {reason}")]
    Mismatch { index: usize, reason: String },
}

pub type Result<T, E = SurgeryError> = std::result::Result<T, E>;

/// Destination slot `j` of the upscaled decoder copies source layer `mapping[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    #[serde(rename = "source")]
    pub source_layer_count: usize,
    #[serde(rename = "target")]
    pub target_layer_count: usize,
    pub mapping: Vec<usize>,
}

impl LayerPlan {
    pub fn identity(layers: usize) -> Self {
        Self {
            source_layer_count: layers,
            target_layer_count: layers,
            mapping: (0..layers).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SurgeryError::InvalidPlan(m));
        if self.source_layer_count == 0 {
            return bad("source layer count must be positive".into());
        }
        if self.mapping.len() != self.target_layer_count {
            return bad(format!(
                "mapping has {} entries, target is {}",
                self.mapping.len(),
                self.target_layer_count
            ));
        }
        if let Some(&m) = self.mapping.iter().find(|&&m| m >= self.source_layer_count) {
            return bad(format!("source index {m} out of range"));
        }
        if self.mapping.windows(2).any(|w| w[0] > w[1]) {
            return bad("mapping must be non-decreasing".into());
        }
        let seen: BTreeSet<usize> = self.mapping.iter().copied().collect();
        if seen.len() != self.source_layer_count {
            let dropped = (0..self.source_layer_count).find(|i| !seen.contains(i)).unwrap();
            return bad(format!("source layer {dropped} is dropped"));
        }
        Ok(())
    }

    /// Source layers that appear more than once, with their copy counts.
    pub fn duplicated(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &m in &self.mapping {
            *counts.entry(m).or_insert(0usize) += 1;
        }
        counts.retain(|_, c| *c > 1);
        counts
    }
}

/// Default depth-upscaling plan.
///
/// `d = target - source` extra copies are spread over the interior layers
/// `1..=source-2`: copy `i` duplicates interior layer `floor((i + 0.5) * m / d)`
/// where `m = source - 2`. The first and last layers stay unique. With fewer
/// than three source layers there is no interior, so all layers are eligible.
pub fn default_layer_plan(source_layers: usize, target_layers: usize) -> Result<LayerPlan> {
    if source_layers == 0 {
        return Err(SurgeryError::InvalidPlan("source layer count must be positive".into()));
    }
    if target_layers < source_layers {
        return Err(SurgeryError::Shrink {
            source_layers,
            target: target_layers,
        });
    }
    let extra = target_layers - source_layers;
    let (offset, span) = if source_layers >= 3 {
        (1, source_layers - 2)
    } else {
        (0, source_layers)
    };
    let mut copies = vec![1usize; source_layers];
    for i in 0..extra {
        // floor((2i + 1) * span / (2 * extra)) in exact integer arithmetic
        let pos = (2 * i + 1) * span / (2 * extra);
        copies[offset + pos] += 1;
    }
    let mapping = copies
        .iter()
        .enumerate()
        .flat_map(|(layer, &n)| std::iter::repeat(layer).take(n))
        .collect();
    let plan = LayerPlan {
        source_layer_count: source_layers,
        target_layer_count: target_layers,
        mapping,
    };
    plan.validate()?;
    Ok(plan)
}

/// Applies a layer plan to the decoder namespace.
///
/// Every destination tensor is a byte-exact copy of its source; tensors
/// outside `decoder.layers.*` pass through unchanged.
pub fn depth_upscale(ckpt: &Checkpoint, plan: &LayerPlan) -> Result<Checkpoint> {
    plan.validate()?;
    let entries = tensor_names_by_pattern(ckpt, DECODER_LAYER_PREFIX)?;
    let mut by_layer: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (layer, suffix) in entries {
        by_layer.entry(layer).or_default().push(suffix);
    }
    for layer in 0..plan.source_layer_count {
        if !by_layer.contains_key(&layer) {
            return Err(SurgeryError::MissingLayer(layer));
        }
    }
    if by_layer.len() != plan.source_layer_count {
        return Err(SurgeryError::LayerCountMismatch {
            expected: plan.source_layer_count,
            found: by_layer.len(),
        });
    }
    let suffixes = &by_layer[&0];
    for (&layer, s) in &by_layer {
        if s != suffixes {
            return Err(SurgeryError::SuffixMismatch {
                layer,
                expected: suffixes.clone(),
                found: s.clone(),
            });
        }
    }

    let layer_prefix = format!("{DECODER_LAYER_PREFIX}.");
    let mut out = Checkpoint::new();
    for (name, tensor) in ckpt.tensors() {
        if !name.starts_with(&layer_prefix) {
            out.insert(name, tensor.clone())?;
        }
    }
    for (dest, &src) in plan.mapping.iter().enumerate() {
        for suffix in suffixes {
            let tensor = ckpt
                .get(&format!("{DECODER_LAYER_PREFIX}.{src}.{suffix}"))
                .expect("suffix sets checked above");
            out.insert(format!("{DECODER_LAYER_PREFIX}.{dest}.{suffix}"), tensor.clone())?;
        }
    }
    for (k, v) in ckpt.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    out.set_metadata("surgery", "depth_upscale");
    out.set_metadata(
        "layer_plan",
        serde_json::to_string(plan).expect("plan serializes"),
    );
    Ok(out)
}

/// Picks `k` items at index positions `round_half_up(i * (n - 1) / (k - 1))`.
/// `k == 1` returns the last item.
pub fn select_equispaced<T: Clone>(items: &[T], k: usize) -> Result<Vec<T>> {
    let n = items.len();
    if k == 0 || n == 0 || k > n {
        return Err(SurgeryError::NotEnoughCheckpoints { k, available: n });
    }
    Ok(equispaced_indices(n, k)
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}

pub fn equispaced_indices(n: usize, k: usize) -> Vec<usize> {
    if k == 1 {
        return vec![n - 1];
    }
    (0..k)
        .map(|i| (2 * i * (n - 1) + (k - 1)) / (2 * (k - 1)))
        .collect()
}

/// Checkpoint files with weights; weights must be non-negative and sum to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AverageSpec {
    pub inputs: Vec<PathBuf>,
    pub weights: Vec<f64>,
}

impl AverageSpec {
    pub fn equal(inputs: Vec<PathBuf>) -> Self {
        let w = 1.0 / inputs.len().max(1) as f64;
        let weights = vec![w; inputs.len()];
        Self { inputs, weights }
    }
}

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

fn validate_weights(n: usize, weights: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(SurgeryError::InvalidSpec("at least one input is required".into()));
    }
    if weights.len() != n {
        return Err(SurgeryError::InvalidSpec(format!(
            "{} weights for {n} inputs",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(SurgeryError::InvalidSpec(format!("weight {w} is not a non-negative number")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(SurgeryError::InvalidSpec(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

fn check_same_layout(ckpts: &[&Checkpoint]) -> Result<()> {
    let base = ckpts[0];
    for (index, c) in ckpts.iter().enumerate().skip(1) {
        let reason = if c.len() != base.len() || !c.names().eq(base.names()) {
            let a: BTreeSet<_> = base.names().collect();
            let b: BTreeSet<_> = c.names().collect();
            let diff: Vec<_> = a.symmetric_difference(&b).take(3).collect();
            Some(format!("tensor names differ (e.g. {diff:?})"))
        } else {
            base.tensors().zip(c.tensors()).find_map(|((name, x), (_, y))| {
                if x.dtype() != y.dtype() {
                    Some(format!("tensor {name}: dtype {} vs {}", x.dtype(), y.dtype()))
                } else if x.shape() != y.shape() {
                    Some(format!("tensor {name}: shape {:?} vs {:?}", x.shape(), y.shape()))
                } else {
                    None
                }
            })
        };
        if let Some(reason) = reason {
            return Err(SurgeryError::Mismatch { index, reason });
        }
    }
    for (name, t) in base.tensors() {
        if !t.dtype().is_float() {
            return Err(SurgeryError::InvalidSpec(format!(
                "tensor {name} has non-float dtype {}",
                t.dtype()
            )));
        }
    }
    Ok(())
}

/// Element-wise weighted mean of in-memory checkpoints.
///
/// Each output element is `sum(w_i * x_i)` accumulated in `f64` and rounded
/// once (ties to even) to the tensor dtype. The per-element terms are summed
/// in a canonical order, so permuting `(checkpoint, weight)` pairs never
/// changes the result.
pub fn average(ckpts: &[&Checkpoint], weights: &[f64]) -> Result<Checkpoint> {
    validate_weights(ckpts.len(), weights)?;
    check_same_layout(ckpts)?;

    let names: Vec<&str> = ckpts[0].names().collect();
    let averaged: Vec<Tensor> = names
        .par_iter()
        .map(|name| {
            let parts: Vec<&Tensor> = ckpts.iter().map(|c| c.get(name).unwrap()).collect();
            average_tensor(&parts, weights)
        })
        .collect::<Result<_>>()?;

    let mut out = Checkpoint::new();
    for (name, t) in names.into_iter().zip(averaged) {
        out.insert(name, t)?;
    }
    Ok(out)
}

fn average_tensor(parts: &[&Tensor], weights: &[f64]) -> Result<Tensor> {
    let dtype: DType = parts[0].dtype();
    let width = dtype.byte_width();
    let n = parts[0].numel();
    let mut data = Vec::with_capacity(n * width);
    let mut terms = vec![0f64; parts.len()];
    for e in 0..n {
        let at = e * width..(e + 1) * width;
        for (slot, (t, &w)) in terms.iter_mut().zip(parts.iter().zip(weights)) {
            *slot = w * crate::checkpoint::decode_element(dtype, &t.data()[at.clone()]);
        }
        terms.sort_unstable_by(f64::total_cmp);
        let sum: f64 = terms.iter().sum();
        crate::checkpoint::encode_element(dtype, sum, &mut data);
    }
    Ok(Tensor::new(dtype, parts[0].shape().to_vec(), data)?)
}

/// Reads the inputs of `spec` and averages them; the output metadata lists
/// the inputs and their weights.
pub fn average_checkpoints(spec: &AverageSpec) -> Result<Checkpoint> {
    validate_weights(spec.inputs.len(), &spec.weights)?;
    let ckpts = spec
        .inputs
        .iter()
        .map(read_checkpoint)
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Checkpoint> = ckpts.iter().collect();
    let mut out = average(&refs, &spec.weights)?;
    let inputs: Vec<String> = spec.inputs.iter().map(|p| p.display().to_string()).collect();
    out.set_metadata("surgery", "average");
    out.set_metadata("average.inputs", serde_json::to_string(&inputs).unwrap());
    out.set_metadata("average.weights", serde_json::to_string(&spec.weights).unwrap());
    Ok(out)
}

/// Equal-proportion merge of two models.
pub fn merge_models(a: &Checkpoint, b: &Checkpoint) -> Result<Checkpoint> {
    let mut out = average(&[a, b], &[0.5, 0.5])?;
    out.set_metadata("surgery", "merge");
    Ok(out)
}
