//! Scores template matching against skeleton ground truth on a generated
//! image over a threshold sweep, then shows the matching at the best one.
//!
//! ```text
//! cargo run --release -p tmcnn --example evaluate -- [seed]
//! ```

use tmcnn::eval::{match_detections, prf, sweep_prepared, MatchConfig, SweepImage};
use tmcnn::matching::NccEngine;
use tmcnn::pipeline::detect_with_map;
use tmcnn::synth::{generate_labyrinth, skeleton_ground_truth, Phase, SkeletonConfig, SynthConfig};
use tmcnn::templates::build_bank;
use tmcnn::TemplateConfig;

fn main() -> tmcnn::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let cfg = SynthConfig {
        width: 400,
        height: 300,
        seed,
        ..SynthConfig::default()
    };
    let lab = generate_labyrinth(&cfg)?;
    let truth = skeleton_ground_truth(&lab.field, Phase::Dark, &SkeletonConfig::for_wavelength(cfg.wavelength)).points;
    let image = tmcnn::image::preprocess(&lab.image, None)?;
    let bank = build_bank(&TemplateConfig::default())?;
    let map = NccEngine::new(&image)?.correlate_bank(&bank)?;

    // ground truth is not extracted within half a wavelength of the border
    let match_cfg = MatchConfig {
        border_margin: cfg.wavelength / 2.0,
        ..MatchConfig::default()
    };
    let grid: Vec<f64> = (0..=18).map(|i| (900 + 5 * i) as f64 / 1000.0).collect();
    let item = SweepImage {
        image: image.clone(),
        map: map.clone(),
        truth: truth.clone(),
    };
    let sweep = sweep_prepared(std::slice::from_ref(&item), &bank, None, &grid, &match_cfg)?;
    print!("{}", sweep.to_csv());

    let set = detect_with_map(&image, &map, &bank, sweep.best_threshold, None)?;
    let assignment = match_detections(&set, &truth, &match_cfg)?;
    let m = prf(&assignment);
    println!(
        "best t = {:.3}: tp {} fp {} fn {} precision {:.3} recall {:.3} F1 {:.3}",
        sweep.best_threshold, m.tp, m.fp, m.fn_, m.precision, m.recall, m.f1
    );
    Ok(())
}
