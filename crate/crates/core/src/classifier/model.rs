//! The patch classifier network and its backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::*;
use super::real::Real;
use crate::error::{arg_err, Result};

/// Output channels of the four convolutions.
pub const CONV_CHANNELS: [usize; 4] = [32, 64, 128, 256];
pub const HIDDEN: usize = 128;
pub const CLASSES: usize = 3;
pub const DEFAULT_DROPOUT: f64 = 0.5;
/// Smallest input side that survives three 2×2 poolings.
pub const MIN_INPUT_SIDE: usize = 8;

pub const TENSOR_NAMES: [&str; 12] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "conv4.weight",
    "conv4.bias",
    "dense1.weight",
    "dense1.bias",
    "dense2.weight",
    "dense2.bias",
];

/// Shapes of every parameter tensor, in [`TENSOR_NAMES`] order.
pub fn tensor_shapes() -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    let mut c_in = 1;
    for &o in &CONV_CHANNELS {
        shapes.push(vec![o, c_in, KERNEL, KERNEL]);
        shapes.push(vec![o]);
        c_in = o;
    }
    shapes.push(vec![HIDDEN, c_in]);
    shapes.push(vec![HIDDEN]);
    shapes.push(vec![CLASSES, HIDDEN]);
    shapes.push(vec![CLASSES]);
    shapes
}

/// Total learnable parameters of the architecture.
pub fn parameter_count() -> usize {
    tensor_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
}

/// Convolutional classifier over square single-channel inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<R: Real = f32> {
    input_side: usize,
    dropout: f64,
    /// Parameter tensors in [`TENSOR_NAMES`] order, flat row-major.
    tensors: Vec<Vec<R>>,
}

/// Per-tensor gradients, laid out like [`CnnModel::tensors`].
pub type Gradients<R> = Vec<Vec<R>>;

impl<R: Real> CnnModel<R> {
    /// He-initialized weights (normal, std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(seed: u64, input_side: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = tensor_shapes()
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                if shape.len() == 1 {
                    return vec![R::ZERO; n];
                }
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        R::from_f64(z * std)
                    })
                    .collect()
            })
            .collect();
        let model = Self::from_tensors(input_side, DEFAULT_DROPOUT, tensors)?;
        log::info!("initialized classifier with {} parameters", parameter_count());
        Ok(model)
    }

    pub fn zeros(input_side: usize) -> Result<Self> {
        let tensors = tensor_shapes()
            .iter()
            .map(|s| vec![R::ZERO; s.iter().product()])
            .collect();
        Self::from_tensors(input_side, DEFAULT_DROPOUT, tensors)
    }

    pub fn from_tensors(input_side: usize, dropout: f64, tensors: Vec<Vec<R>>) -> Result<Self> {
        if input_side < MIN_INPUT_SIDE {
            return arg_err(format!("input side {input_side} is below {MIN_INPUT_SIDE}"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return arg_err(format!("dropout rate {dropout} outside [0, 1)"));
        }
        let shapes = tensor_shapes();
        if tensors.len() != shapes.len() {
            return arg_err(format!("expected {} tensors, got {}", shapes.len(), tensors.len()));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(TENSOR_NAMES) {
            if t.len() != s.iter().product::<usize>() {
                return arg_err(format!("tensor {name} has {} values, expected shape {s:?}", t.len()));
            }
        }
        Ok(Self {
            input_side,
            dropout,
            tensors,
        })
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return arg_err(format!("dropout rate {rate} outside [0, 1)"));
        }
        self.dropout = rate;
        Ok(())
    }

    pub fn tensors(&self) -> &[Vec<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<R>] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn zero_gradients(&self) -> Gradients<R> {
        self.tensors.iter().map(|t| vec![R::ZERO; t.len()]).collect()
    }

    /// Same weights in another precision.
    pub fn convert<S: Real>(&self) -> CnnModel<S> {
        CnnModel {
            input_side: self.input_side,
            dropout: self.dropout,
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|v| S::from_f64(v.to_f64())).collect())
                .collect(),
        }
    }

    /// Forward pass of one sample. `dropout_seed` enables train-mode dropout.
    pub(crate) fn forward_sample(&self, input: &[R], dropout_seed: Option<u64>, cache: &mut Cache<R>) -> [R; CLASSES] {
        debug_assert_eq!(input.len(), self.input_side * self.input_side);
        let mut side = self.input_side;
        let mut c_in = 1;
        cache.sides.clear();
        for layer in 0..4 {
            cache.sides.push(side);
            let src: &[R] = if layer == 0 { input } else { &cache.pooled[layer - 1] };
            conv_relu_forward(
                src,
                c_in,
                side,
                side,
                &self.tensors[2 * layer],
                &self.tensors[2 * layer + 1],
                &mut cache.cols[layer],
                &mut cache.conv[layer],
            );
            c_in = CONV_CHANNELS[layer];
            if layer < 3 {
                let (conv, pooled) = (&cache.conv[layer], &mut cache.pooled[layer]);
                maxpool_forward(conv, c_in, side, side, pooled, &mut cache.pool_arg[layer]);
                side /= 2;
            }
        }
        global_maxpool_forward(&cache.conv[3], c_in, side * side, &mut cache.features, &mut cache.global_arg);

        cache.drop_mask.clear();
        if let Some(seed) = dropout_seed.filter(|_| self.dropout > 0.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 - self.dropout;
            let scale = R::from_f64(1.0 / keep);
            cache.drop_mask.extend((0..c_in).map(|_| {
                if rand::Rng::random::<f64>(&mut rng) < keep {
                    scale
                } else {
                    R::ZERO
                }
            }));
            for (f, &m) in cache.features.iter_mut().zip(&cache.drop_mask) {
                *f *= m;
            }
        }

        dense_forward(&cache.features, &self.tensors[8], &self.tensors[9], &mut cache.hidden);
        for v in &mut cache.hidden {
            *v = v.max(R::ZERO);
        }
        dense_forward(&cache.hidden, &self.tensors[10], &self.tensors[11], &mut cache.logits);
        let p = softmax(&cache.logits);
        cache.probs = [p[0], p[1], p[2]];
        cache.probs
    }

    /// Backpropagates `scale · CE(label)` through the cached forward pass,
    /// accumulating into `grads`.
    pub(crate) fn backward_sample(&self, label: usize, scale: R, cache: &mut Cache<R>, grads: &mut Gradients<R>) {
        let d_logits: Vec<R> = softmax_ce_grad(&cache.probs, label).into_iter().map(|g| g * scale).collect();
        let [.., g_w2, g_b2] = &mut grads[..] else { unreachable!() };
        dense_backward(&cache.hidden, &d_logits, &self.tensors[10], g_w2, g_b2, Some(&mut cache.d_hidden));
        for (d, &h) in cache.d_hidden.iter_mut().zip(&cache.hidden) {
            if h <= R::ZERO {
                *d = R::ZERO;
            }
        }
        let (g_w1, g_b1) = pair_mut(grads, 8);
        dense_backward(&cache.features, &cache.d_hidden, &self.tensors[8], g_w1, g_b1, Some(&mut cache.d_features));
        if !cache.drop_mask.is_empty() {
            for (d, &m) in cache.d_features.iter_mut().zip(&cache.drop_mask) {
                *d *= m;
            }
        }

        // global max pool
        let mut side = cache.sides[3];
        cache.d_conv.clear();
        cache.d_conv.resize(CONV_CHANNELS[3] * side * side, R::ZERO);
        pool_backward(&cache.d_features, &cache.global_arg, &mut cache.d_conv);

        for layer in (0..4).rev() {
            side = cache.sides[layer];
            let c_in = if layer == 0 { 1 } else { CONV_CHANNELS[layer - 1] };
            let want_input = layer > 0;
            cache.d_input.clear();
            if want_input {
                cache.d_input.resize(c_in * side * side, R::ZERO);
            }
            let (g_w, g_b) = pair_mut(grads, 2 * layer);
            conv_relu_backward(
                &cache.conv[layer],
                &mut cache.d_conv,
                &cache.cols[layer],
                c_in,
                side,
                side,
                &self.tensors[2 * layer],
                g_w,
                g_b,
                &mut cache.scratch,
                want_input.then_some(&mut cache.d_input[..]),
            );
            if want_input {
                // through the preceding 2×2 pool
                let prev = cache.sides[layer - 1];
                cache.d_conv.clear();
                cache.d_conv.resize(c_in * prev * prev, R::ZERO);
                pool_backward(&cache.d_input, &cache.pool_arg[layer - 1], &mut cache.d_conv);
            }
        }
    }

    /// Class probabilities of one sample in inference mode.
    pub fn predict(&self, input: &[R]) -> Result<[R; CLASSES]> {
        if input.len() != self.input_side * self.input_side {
            return arg_err(format!(
                "input has {} values, model expects {}×{}",
                input.len(),
                self.input_side,
                self.input_side
            ));
        }
        Ok(self.forward_sample(input, None, &mut Cache::default()))
    }

    /// Mean cross-entropy and its gradients over a batch. `dropout_seeds`
    /// enables dropout with one seed per sample.
    pub fn loss_and_grads(
        &self,
        inputs: &[&[R]],
        labels: &[usize],
        dropout_seeds: Option<&[u64]>,
    ) -> Result<(R, Gradients<R>)> {
        if inputs.len() != labels.len() || inputs.is_empty() {
            return arg_err(format!("batch of {} inputs with {} labels", inputs.len(), labels.len()));
        }
        if dropout_seeds.is_some_and(|s| s.len() != inputs.len()) {
            return arg_err("one dropout seed per sample required");
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= CLASSES) {
            return arg_err(format!("label {l} out of range"));
        }
        let area = self.input_side * self.input_side;
        if let Some(bad) = inputs.iter().find(|i| i.len() != area) {
            return arg_err(format!("input has {} values, model expects {area}", bad.len()));
        }
        let scale = R::ONE / R::from_f64(inputs.len() as f64);
        let mut grads = self.zero_gradients();
        let mut cache = Cache::default();
        let mut loss = R::ZERO;
        for (i, (input, &label)) in inputs.iter().zip(labels).enumerate() {
            let probs = self.forward_sample(input, dropout_seeds.map(|s| s[i]), &mut cache);
            loss += cross_entropy(&probs, label) * scale;
            self.backward_sample(label, scale, &mut cache, &mut grads);
        }
        Ok((loss, grads))
    }
}

fn pair_mut<R>(grads: &mut [Vec<R>], i: usize) -> (&mut [R], &mut [R]) {
    let (a, b) = grads[i..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

/// Intermediate activations of one forward pass, reused across samples.
#[derive(Debug, Default)]
pub(crate) struct Cache<R> {
    sides: Vec<usize>,
    cols: [Vec<R>; 4],
    conv: [Vec<R>; 4],
    pooled: [Vec<R>; 3],
    pool_arg: [Vec<u32>; 3],
    global_arg: Vec<u32>,
    features: Vec<R>,
    drop_mask: Vec<R>,
    hidden: Vec<R>,
    logits: Vec<R>,
    probs: [R; CLASSES],
    d_hidden: Vec<R>,
    d_features: Vec<R>,
    d_conv: Vec<R>,
    d_input: Vec<R>,
    scratch: Vec<R>,
}
