//! Runs the detector on a PNG (or a generated image when no path is given)
//! and writes the detections as JSON plus an overlay.
//!
//! ```text
//! cargo run --release -p tmcnn --example detect_image -- [image.png] [threshold] [weights.tmcw]
//! ```

use std::path::PathBuf;

use tmcnn::classifier::load_weights;
use tmcnn::pipeline::{detect, save_overlay};
use tmcnn::synth::{generate_labyrinth, SynthConfig};
use tmcnn::templates::build_bank;
use tmcnn::{DefectClass, TemplateConfig};

fn main() -> tmcnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let input = args.next().filter(|a| a != "-");
    let t: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.95);
    let model = args.next().map(load_weights).transpose()?;

    let (name, raw) = match &input {
        Some(path) => {
            let stem = PathBuf::from(path).file_stem().map(|s| s.to_string_lossy().into_owned());
            (stem.unwrap_or_else(|| "image".into()), tmcnn::image::load_image(path)?)
        }
        None => {
            let cfg = SynthConfig {
                width: 320,
                height: 240,
                seed: 11,
                ..SynthConfig::default()
            };
            ("generated".to_string(), generate_labyrinth(&cfg)?.image)
        }
    };
    let img = tmcnn::image::preprocess(&raw, None)?;
    let bank = build_bank(&TemplateConfig::default())?;
    let mut set = detect(&img, &bank, t, model.as_ref())?;
    set.image = name.clone();

    set.save(format!("{name}.json"))?;
    save_overlay(&img, &set, format!("{name}.overlay.png"))?;
    println!(
        "{name}: {} junctions, {} terminals, {} rejected (t = {t}, {})",
        set.count(DefectClass::Junction),
        set.count(DefectClass::Terminal),
        set.detections.iter().filter(|d| !d.is_defect()).count(),
        if model.is_some() { "template matching + CNN" } else { "template matching only" }
    );
    Ok(())
}
