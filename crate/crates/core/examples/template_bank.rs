//! Builds the default template bank, prints how it was enumerated and writes
//! a contact sheet of a few templates and their masks.
//!
//! ```text
//! cargo run --release -p tmcnn --example template_bank -- [out.png]
//! ```

use tmcnn::templates::{build_bank, enumerate_junction_params, enumerate_terminal_params, GapRule, TEMPLATE_SIDE};
use tmcnn::{GrayImage, TemplateConfig};

fn main() -> tmcnn::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "template_bank.png".into());
    let bank = build_bank(&TemplateConfig::default())?;
    let meta = bank.metadata();
    println!("junction angle triples (two-gap rule): {}", enumerate_junction_params(GapRule::TwoGap).len());
    println!("junction angle triples (three-gap rule): {}", enumerate_junction_params(GapRule::ThreeGap).len());
    println!("terminal orientations: {}", enumerate_terminal_params().len());
    println!("bank entries: {} ({})", bank.len(), meta.note);

    // one row per sampled entry: template on the left, mask on the right
    let picks: Vec<usize> = (0..8).map(|i| i * bank.len() / 8).collect();
    let cell = TEMPLATE_SIDE + 2;
    let sheet = GrayImage::from_fn(2 * cell, picks.len() * cell, |x, y| {
        let (row, col) = (y / cell, x / cell);
        let (px, py) = (x % cell, y % cell);
        if px >= TEMPLATE_SIDE || py >= TEMPLATE_SIDE {
            return 0.0;
        }
        let (tpl, mask) = bank.entry(picks[row]);
        match col {
            0 => tpl.get(px, py),
            _ => f64::from(mask.considered(py * TEMPLATE_SIDE + px) as u8),
        }
    })?;
    sheet.save_png(&out)?;
    println!("wrote {out} (entries {picks:?})");
    Ok(())
}
