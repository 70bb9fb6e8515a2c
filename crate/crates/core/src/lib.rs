//! Two-stage detector for junctions and terminals in labyrinthine stripe
//! images.
//!
//! 1. **Templates** – a rotation-swept bank of 21×21 junction/terminal
//!    templates, each paired with don't-care masks.
//! 2. **Matching** – masked normalized cross-correlation of every bank entry,
//!    fused by per-pixel maximum, then flood-fill non-maximum suppression.
//! 3. **Classifier** – a small CNN that labels 50×50 patches around each
//!    candidate as junction, terminal or false detection.
//!
//! [`synth`] generates labyrinth images with skeleton-derived ground truth and
//! [`eval`] scores detections against it.

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod matching;
pub mod pipeline;
pub mod synth;
pub mod templates;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use templates::{DefectClass, TemplateBank, TemplateConfig};
