//! Masked NCC on a small synthetic image: one template through the direct
//! FFT path, then the whole bank fused by per-pixel maximum and reduced to
//! candidates by flood-fill suppression.
//!
//! ```text
//! cargo run --release -p tmcnn --example ncc_matching -- [threshold]
//! ```

use std::time::Instant;

use tmcnn::matching::{extract_peaks, masked_ncc_map, NccEngine};
use tmcnn::synth::{generate_labyrinth, SynthConfig};
use tmcnn::templates::build_bank;
use tmcnn::{DefectClass, TemplateConfig};

fn main() -> tmcnn::Result<()> {
    let t: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.95);
    let lab = generate_labyrinth(&SynthConfig {
        width: 320,
        height: 240,
        seed: 3,
        ..SynthConfig::default()
    })?;
    let img = tmcnn::image::preprocess(&lab.image, None)?;
    let bank = build_bank(&TemplateConfig::default())?;

    let (tpl, mask) = bank.entry(0);
    let single = masked_ncc_map(&img, tpl, mask)?;
    let best = single.scores.iter().cloned().fold(f64::MIN, f64::max);
    println!("entry 0 alone: best score {best:.4}");

    let started = Instant::now();
    let fused = NccEngine::new(&img)?.correlate_bank(&bank)?;
    println!("{} entries fused in {:.2?}", bank.len(), started.elapsed());

    let candidates = extract_peaks(&fused, &bank, t)?;
    let junctions = candidates.iter().filter(|c| c.tentative_label == DefectClass::Junction).count();
    println!(
        "{} candidates at t = {t}: {junctions} junction-like, {} terminal-like",
        candidates.len(),
        candidates.len() - junctions
    );
    for c in candidates.iter().take(5) {
        println!("  ({:>3}, {:>3}) score {:.4} entry {} {:?}", c.x, c.y, c.score, c.entry, c.tentative_label);
    }
    Ok(())
}
