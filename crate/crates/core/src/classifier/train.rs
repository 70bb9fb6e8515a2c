//! Mini-batch training with Adam, rotation augmentation and a stratified
//! validation split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::layers::cross_entropy;
use super::model::{CnnModel, Cache, Gradients, CLASSES};
use super::{argmax, rotate, Label, Patch, PATCH_SIDE};
use crate::error::{arg_err, Error, Result};

/// Samples per gradient work unit. Units are reduced in index order, so
/// results do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub validation_fraction: f64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
            augment: true,
            validation_fraction: 0.1,
            dropout: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return arg_err("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return arg_err(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return arg_err("batch size must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return arg_err(format!("validation fraction {} outside (0, 1)", self.validation_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return arg_err(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss, measured in train mode during the epoch.
    pub train_loss: f64,
    /// Training accuracy, measured in train mode during the epoch.
    pub train_accuracy: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub parameter_count: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch (1-based) whose weights were returned.
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn best(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Per-class shuffled split; each class keeps at least one sample on both
/// sides.
pub fn stratified_split(labels: &[Label], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in Label::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Inference-mode mean loss and accuracy.
pub fn evaluate(model: &CnnModel<f32>, samples: &[(Patch, Label)], indices: &[usize]) -> (f64, f64) {
    let results: Vec<(f64, bool)> = indices
        .par_iter()
        .map_init(Cache::default, |cache, &i| {
            let (patch, label) = &samples[i];
            let p = model.forward_sample(patch.data(), None, cache);
            (cross_entropy(&p, label.index()) as f64, argmax(&p) == label.index())
        })
        .collect();
    let n = results.len().max(1) as f64;
    (
        results.iter().map(|r| r.0).sum::<f64>() / n,
        results.iter().filter(|r| r.1).count() as f64 / n,
    )
}

struct ChunkResult {
    grads: Gradients<f32>,
    loss: f64,
    correct: usize,
}

/// Trains a fresh model. Returns the weights from the epoch with the best
/// validation accuracy (lower validation loss breaks ties).
pub fn train(samples: &[(Patch, Label)], config: &TrainConfig) -> Result<(CnnModel<f32>, TrainReport)> {
    config.validate()?;
    for class in Label::ALL {
        let n = samples.iter().filter(|s| s.1 == class).count();
        if n < 2 {
            return Err(Error::Dataset(format!(
                "class {} has {n} samples, at least 2 are required",
                class.as_str()
            )));
        }
    }
    if let Some((p, _)) = samples.iter().find(|(p, _)| p.side() != PATCH_SIDE) {
        return arg_err(format!("patch side {} differs from {PATCH_SIDE}", p.side()));
    }
    let labels: Vec<Label> = samples.iter().map(|s| s.1).collect();
    let (train_idx, val_idx) = stratified_split(&labels, config.validation_fraction, config.seed);

    let mut model = CnnModel::<f32>::init(config.seed, PATCH_SIDE)?;
    model.set_dropout(config.dropout)?;
    let mut adam = AdamState::new(&model, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, f64, usize, CnnModel<f32>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(config.batch_size) {
            // augmentation turns and dropout seeds, drawn in sample order
            let plan: Vec<(usize, u8, u64)> = batch
                .iter()
                .map(|&i| (i, if config.augment { rng.random_range(0..4) } else { 0 }, rng.random()))
                .collect();
            let scale = 1.0 / batch.len() as f32;
            let parts: Vec<ChunkResult> = plan
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grads = model.zero_gradients();
                    let mut cache = Cache::default();
                    let (mut loss, mut correct) = (0.0, 0);
                    let mut turned = Vec::new();
                    for &(i, turns, seed) in chunk {
                        let (patch, label) = &samples[i];
                        let input = if turns == 0 {
                            patch.data()
                        } else {
                            rotate(patch.data(), PATCH_SIDE, turns, &mut turned);
                            &turned
                        };
                        let p = model.forward_sample(input, Some(seed), &mut cache);
                        loss += cross_entropy(&p, label.index()) as f64;
                        correct += usize::from(argmax(&p) == label.index());
                        model.backward_sample(label.index(), scale, &mut cache, &mut grads);
                    }
                    ChunkResult { grads, loss, correct }
                })
                .collect();
            let mut grads = model.zero_gradients();
            for part in parts {
                for (g, p) in grads.iter_mut().zip(&part.grads) {
                    g.iter_mut().zip(p).for_each(|(a, b)| *a += *b);
                }
                loss_sum += part.loss;
                correct += part.correct;
            }
            adam_step(&mut model, &grads, &mut adam, config.learning_rate)?;
            if !model.all_finite() {
                return Err(Error::Dataset(format!("non-finite weights after step {}", adam.step())));
            }
        }
        let (validation_loss, validation_accuracy) = evaluate(&model, samples, &val_idx);
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: correct as f64 / train_idx.len() as f64,
            validation_loss,
            validation_accuracy,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.4} val loss {:.4} val acc {:.4}",
            metrics.train_loss,
            metrics.train_accuracy,
            validation_loss,
            validation_accuracy
        );
        history.push(metrics);
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => {
                validation_accuracy > *acc || (validation_accuracy == *acc && validation_loss < *loss)
            }
        };
        if better {
            best = Some((validation_accuracy, validation_loss, epoch, model.clone()));
        }
    }
    let (_, _, best_epoch, best_model) = best.expect("at least one epoch");
    let report = TrainReport {
        parameter_count: best_model.parameter_count(),
        train_samples: train_idx.len(),
        validation_samples: val_idx.len(),
        epochs: history,
        best_epoch,
    };
    Ok((best_model, report))
}

const _: () = assert!(CLASSES == 3);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<Label> = (0..100).map(|i| Label::ALL[i % 3]).collect();
        let (train, val) = stratified_split(&labels, 0.1, 3);
        assert_eq!(train.len() + val.len(), 100);
        for class in Label::ALL {
            assert!(val.iter().any(|&i| labels[i] == class));
        }
        assert!(train.iter().all(|i| !val.contains(i)));
    }

    #[test]
    fn config_validation() {
        assert_eq!(TrainConfig::default().epochs, 20);
        let bad = TrainConfig {
            validation_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_class_is_a_dataset_error() {
        let p = Patch::new(PATCH_SIDE, vec![0.5; 2500]).unwrap();
        let samples = vec![(p.clone(), Label::Junction), (p, Label::Junction)];
        assert!(matches!(train(&samples, &TrainConfig::default()), Err(Error::Dataset(_))));
    }
}
