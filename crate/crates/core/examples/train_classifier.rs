//! Builds a patch dataset the way a reviewer would from generated images:
//! template matching proposals labeled by the ground truth they overlap
//! (false when none), missed points added at their true position, and
//! negatives mined from lower-threshold peaks. Then trains the classifier
//! and saves the weights. A few small images give a quick but rough model;
//! validation accuracy keeps improving with more images.
//!
//! ```text
//! cargo run --release -p tmcnn --example train_classifier -- [images] [epochs] [out.tmcw]
//! ```

use std::collections::BTreeMap;

use tmcnn::classifier::{save_weights, train, Label, TrainConfig};
use tmcnn::dataset::{balance, label_by_truth, mine_negatives, ClassCounts};
use tmcnn::eval::box_iou;
use tmcnn::matching::{extract_peaks, Candidate, CorrelationMap, NccEngine};
use tmcnn::pipeline::extract_patch;
use tmcnn::synth::{generate_labyrinth, skeleton_ground_truth, Phase, SkeletonConfig, SynthConfig};
use tmcnn::templates::build_bank;
use tmcnn::{TemplateBank, TemplateConfig};

const BOX_SIDE: usize = 21;

/// Peaks over a range of thresholds, one per position.
fn pooled_peaks(map: &CorrelationMap, bank: &TemplateBank, thresholds: &[f64]) -> tmcnn::Result<Vec<Candidate>> {
    let mut pooled = BTreeMap::new();
    for &t in thresholds {
        for c in extract_peaks(map, bank, t)? {
            pooled.entry((c.x, c.y)).or_insert(c);
        }
    }
    Ok(pooled.into_values().collect())
}

fn main() -> tmcnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let images: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(6);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let out = args.next().unwrap_or_else(|| "classifier.tmcw".into());

    let bank = build_bank(&TemplateConfig::default())?;
    let proposal_range: Vec<f64> = (0..=18).map(|i| (900 + 5 * i) as f64 / 1000.0).collect();
    let mining_range: Vec<f64> = (0..20).map(|i| (800 + 9 * i) as f64 / 1000.0).collect();
    let mut samples = Vec::new();
    for seed in 0..images {
        let cfg = SynthConfig {
            width: 640,
            height: 480,
            seed,
            ..SynthConfig::default()
        };
        let lab = generate_labyrinth(&cfg)?;
        let truth = skeleton_ground_truth(&lab.field, Phase::Dark, &SkeletonConfig::for_wavelength(cfg.wavelength)).points;
        let img = tmcnn::image::preprocess(&lab.image, None)?;
        let map = NccEngine::new(&img)?.correlate_bank(&bank)?;

        let proposals = pooled_peaks(&map, &bank, &proposal_range)?;
        let labels = label_by_truth(&proposals, &truth, BOX_SIDE, 0.5);
        for (c, &label) in proposals.iter().zip(&labels) {
            samples.push((extract_patch(&img, c.x, c.y), label));
        }
        let missed: Vec<_> = truth
            .iter()
            .filter(|p| !proposals.iter().any(|c| box_iou((c.x, c.y), (p.x, p.y), BOX_SIDE) > 0.5))
            .collect();
        for p in &missed {
            samples.push((extract_patch(&img, p.x, p.y), Label::from(p.class)));
        }
        let positives: Vec<(usize, usize)> = truth.iter().map(|p| (p.x, p.y)).collect();
        let low = pooled_peaks(&map, &bank, &mining_range)?;
        let mined = mine_negatives(&low, &positives, BOX_SIDE as f64 / 2.0, usize::MAX, seed);
        for c in &mined {
            samples.push((extract_patch(&img, c.x, c.y), Label::FalseDetection));
        }
        let rejected = labels.iter().filter(|&&l| l == Label::FalseDetection).count();
        println!(
            "image {seed}: {} proposals ({rejected} false), {} missed points added, {} mined negatives",
            proposals.len(),
            missed.len(),
            mined.len()
        );
    }

    let counts = ClassCounts::of(samples.iter().map(|s| s.1));
    let per_class = Label::ALL.iter().map(|&l| counts.get(l)).min().unwrap_or(0);
    let samples = balance(samples, per_class, 0);
    println!("training on {per_class} patches per class");

    let config = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let (model, report) = train(&samples, &config)?;
    for e in &report.epochs {
        println!(
            "epoch {:>2}: train loss {:.4}, validation accuracy {:.3}",
            e.epoch, e.train_loss, e.validation_accuracy
        );
    }
    save_weights(&model, &out)?;
    println!("best epoch {} saved to {out}", report.best_epoch);
    Ok(())
}
