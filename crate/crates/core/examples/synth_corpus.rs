//! Generates a labyrinth image, extracts junction and terminal ground truth
//! from its skeleton, and saves both.
//!
//! ```text
//! cargo run --release -p tmcnn --example synth_corpus -- [seed] [out_dir]
//! ```

use tmcnn::synth::{generate_labyrinth, skeleton_ground_truth, Phase, SkeletonConfig, SynthConfig};
use tmcnn::DefectClass;

fn main() -> tmcnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "synth_out".into()));
    std::fs::create_dir_all(&out)?;

    let cfg = SynthConfig {
        width: 400,
        height: 300,
        seed,
        ..SynthConfig::default()
    };
    let lab = generate_labyrinth(&cfg)?;
    let truth = skeleton_ground_truth(&lab.field, Phase::Dark, &SkeletonConfig::for_wavelength(cfg.wavelength));

    let set = truth.to_detection_set(&format!("synth_{seed}"), cfg.width, cfg.height);
    lab.image.save_png(out.join(format!("synth_{seed}.png")))?;
    set.save(out.join(format!("synth_{seed}.gt.json")))?;
    println!(
        "seed {seed}: {} junctions, {} terminals written to {}",
        set.count(DefectClass::Junction),
        set.count(DefectClass::Terminal),
        out.display()
    );
    Ok(())
}
