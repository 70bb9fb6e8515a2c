//! Three-class patch CNN: junction, terminal or false detection.
//!
//! Four 3×3 convolutions (32, 64, 128, 256 filters, same padding, ReLU) with
//! 2×2 max pooling after the first three, a global max pool, dropout, a
//! 128-unit dense layer and a 3-way softmax.

mod adam;
pub mod layers;
mod model;
mod real;
mod train;
mod weights;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use model::{
    parameter_count, tensor_shapes, CnnModel, Gradients, CLASSES, CONV_CHANNELS, DEFAULT_DROPOUT, HIDDEN,
    MIN_INPUT_SIDE, TENSOR_NAMES,
};
pub use real::Real;
pub use train::{evaluate, stratified_split, train, EpochMetrics, TrainConfig, TrainReport};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, MAGIC, VERSION};

use crate::error::{arg_err, Result};
use crate::templates::DefectClass;

pub const PATCH_SIDE: usize = 50;
/// Parameter count stated for the reference network.
pub const REFERENCE_PARAMETER_COUNT: usize = 422_608;

/// Square single-channel classifier input with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    data: Vec<f32>,
}

impl Patch {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if side == 0 || data.len() != side * side {
            return arg_err(format!("patch of side {side} needs {} values, got {}", side * side, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return arg_err(format!("patch contains non-finite value {v}"));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.side + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "junction")]
    Junction,
    #[serde(rename = "terminal")]
    Terminal,
    #[serde(rename = "false")]
    FalseDetection,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Junction, Label::Terminal, Label::FalseDetection];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Junction => "junction",
            Label::Terminal => "terminal",
            Label::FalseDetection => "false",
        }
    }

    pub fn one_hot(self) -> [f32; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    /// The defect class, if this is not a false detection.
    pub fn defect(self) -> Option<DefectClass> {
        match self {
            Label::Junction => Some(DefectClass::Junction),
            Label::Terminal => Some(DefectClass::Terminal),
            Label::FalseDetection => None,
        }
    }
}

impl From<DefectClass> for Label {
    fn from(c: DefectClass) -> Self {
        match c {
            DefectClass::Junction => Label::Junction,
            DefectClass::Terminal => Label::Terminal,
        }
    }
}

impl std::str::FromStr for Label {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "junction" => Ok(Label::Junction),
            "terminal" => Ok(Label::Terminal),
            "false" => Ok(Label::FalseDetection),
            _ => arg_err(format!("unknown label {s:?}")),
        }
    }
}

/// Index of the largest value; the earliest index wins ties.
pub fn argmax<R: Real>(p: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Rotates a square image counter-clockwise by `turns` quarter turns:
/// one turn maps `(x, y)` to `(y, side - 1 - x)`.
pub fn rotate<R: Copy>(data: &[R], side: usize, turns: u8, out: &mut Vec<R>) {
    out.clear();
    out.extend_from_slice(data);
    let mut tmp = Vec::with_capacity(data.len());
    for _ in 0..turns % 4 {
        tmp.clear();
        // out'(x', y') = in(side - 1 - y', x')
        for y in 0..side {
            for x in 0..side {
                tmp.push(out[x * side + side - 1 - y]);
            }
        }
        std::mem::swap(out, &mut tmp);
    }
}

/// Rotation by a uniformly drawn multiple of 90°.
pub fn augment(patch: &Patch, rng: &mut impl Rng) -> Patch {
    rotate_patch(patch, rng.random_range(0..4))
}

pub fn rotate_patch(patch: &Patch, turns: u8) -> Patch {
    let mut data = Vec::new();
    rotate(&patch.data, patch.side, turns, &mut data);
    Patch { side: patch.side, data }
}

/// Inference-mode class probabilities for a batch.
pub fn forward(model: &CnnModel<f32>, batch: &[Patch]) -> Result<Vec<[f32; 3]>> {
    if let Some(p) = batch.iter().find(|p| p.side != model.input_side()) {
        return arg_err(format!("patch side {} does not match model input {}", p.side, model.input_side()));
    }
    batch.par_iter().map(|p| model.predict(&p.data)).collect()
}

/// Train-mode probabilities with dropout, one seed per patch.
pub fn forward_train(model: &CnnModel<f32>, batch: &[Patch], seeds: &[u64]) -> Result<Vec<[f32; 3]>> {
    if seeds.len() != batch.len() {
        return arg_err("one dropout seed per patch required");
    }
    if let Some(p) = batch.iter().find(|p| p.side != model.input_side()) {
        return arg_err(format!("patch side {} does not match model input {}", p.side, model.input_side()));
    }
    Ok(batch
        .iter()
        .zip(seeds)
        .map(|(p, &s)| model.forward_sample(&p.data, Some(s), &mut model::Cache::default()))
        .collect())
}

/// Mean cross-entropy loss and gradients of a labeled batch, dropout off.
pub fn loss_and_grads(model: &CnnModel<f32>, batch: &[Patch], labels: &[Label]) -> Result<(f32, Gradients<f32>)> {
    let inputs: Vec<&[f32]> = batch.iter().map(|p| p.data.as_slice()).collect();
    let labels: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    model.loss_and_grads(&inputs, &labels, None)
}

/// Predicted label (ties to the earlier class) and probabilities.
pub fn classify(model: &CnnModel<f32>, patch: &Patch) -> Result<(Label, [f32; 3])> {
    let p = model.predict(&patch.data)?;
    Ok((Label::ALL[argmax(&p)], p))
}
