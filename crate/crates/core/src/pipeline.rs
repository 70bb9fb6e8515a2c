//! End-to-end detection: correlate, suppress, crop patches and classify.

use std::collections::HashSet;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, CnnModel, Label, Patch, PATCH_SIDE};
use crate::error::{arg_err, Error, Result};
use crate::image::GrayImage;
use crate::matching::{correlate_bank, extract_peaks, Candidate, CorrelationMap};
use crate::templates::{DefectClass, TemplateBank};

/// Who produced a detection's final label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Tm,
    Cnn,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: u64,
    pub x: usize,
    pub y: usize,
    /// Fused NCC score at the peak; `None` for points added by hand.
    pub score: Option<f64>,
    /// Class of the best-matching template; `None` for points added by hand.
    pub tm_label: Option<DefectClass>,
    #[serde(rename = "label")]
    pub final_label: Label,
    pub probs: [f64; 3],
    pub source: Source,
}

impl Detection {
    /// Counts as a defect (not a rejected candidate).
    pub fn is_defect(&self) -> bool {
        self.final_label != Label::FalseDetection
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub threshold: f64,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(image: impl Into<String>, width: usize, height: usize, threshold: f64) -> Self {
        Self {
            image: image.into(),
            width,
            height,
            threshold,
            detections: Vec::new(),
        }
    }

    /// Checks id uniqueness, coordinates and probability vectors.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for d in &self.detections {
            if !ids.insert(d.id) {
                return arg_err(format!("duplicate detection id {}", d.id));
            }
            if d.x >= self.width || d.y >= self.height {
                return arg_err(format!(
                    "detection {} at ({}, {}) lies outside {}×{}",
                    d.id, d.x, d.y, self.width, self.height
                ));
            }
            if d.source != Source::Human {
                let sum: f64 = d.probs.iter().sum();
                if (sum - 1.0).abs() > 1e-6 || d.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return arg_err(format!("detection {} has probabilities {:?}", d.id, d.probs));
                }
            }
        }
        Ok(())
    }

    pub fn next_id(&self) -> u64 {
        self.detections.iter().map(|d| d.id + 1).max().unwrap_or(0)
    }

    /// Defects of `class` whose final label is not a false detection.
    pub fn count(&self, class: DefectClass) -> usize {
        self.detections
            .iter()
            .filter(|d| d.final_label.defect() == Some(class))
            .count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Offset of the patch center from its top-left corner: the window spans
/// `[-25, +24]` around the point.
pub const PATCH_CENTER: usize = PATCH_SIDE / 2;

/// 50×50 window around `(x, y)`, borders filled by edge replication.
pub fn extract_patch(img: &GrayImage, x: usize, y: usize) -> Patch {
    let mut data = Vec::with_capacity(PATCH_SIDE * PATCH_SIDE);
    for py in 0..PATCH_SIDE {
        for px in 0..PATCH_SIDE {
            let sx = x as isize + px as isize - PATCH_CENTER as isize;
            let sy = y as isize + py as isize - PATCH_CENTER as isize;
            data.push(img.get_clamped(sx, sy) as f32);
        }
    }
    Patch::new(PATCH_SIDE, data).expect("patch has the right size")
}

fn one_hot(label: Label) -> [f64; 3] {
    let mut p = [0.0; 3];
    p[label.index()] = 1.0;
    p
}

/// Turns candidates into detections, classifying each patch when a model is
/// given (otherwise the template label is final).
pub fn label_candidates(
    img: &GrayImage,
    candidates: &[Candidate],
    model: Option<&CnnModel<f32>>,
) -> Result<Vec<Detection>> {
    let labels: Vec<(Label, [f64; 3], Source)> = match model {
        None => candidates
            .iter()
            .map(|c| {
                let l = Label::from(c.tentative_label);
                (l, one_hot(l), Source::Tm)
            })
            .collect(),
        Some(m) => {
            if m.input_side() != PATCH_SIDE {
                return arg_err(format!("model input side {} is not {PATCH_SIDE}", m.input_side()));
            }
            candidates
                .par_iter()
                .map(|c| {
                    let patch = extract_patch(img, c.x, c.y);
                    let p = m.predict(patch.data())?;
                    let probs = [p[0] as f64, p[1] as f64, p[2] as f64];
                    Ok((Label::ALL[argmax(&p)], probs, Source::Cnn))
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(candidates
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (c, (label, probs, source)))| Detection {
            id: i as u64,
            x: c.x,
            y: c.y,
            score: Some(c.score),
            tm_label: Some(c.tentative_label),
            final_label: label,
            probs,
            source,
        })
        .collect())
}

/// Detection on an already computed correlation map.
pub fn detect_with_map(
    img: &GrayImage,
    cm: &CorrelationMap,
    bank: &TemplateBank,
    t: f64,
    model: Option<&CnnModel<f32>>,
) -> Result<DetectionSet> {
    if (cm.width, cm.height) != img.dims() {
        return arg_err("correlation map and image sizes differ");
    }
    let candidates = extract_peaks(cm, bank, t)?;
    let mut set = DetectionSet::new("", img.width(), img.height(), t);
    set.detections = label_candidates(img, &candidates, model)?;
    Ok(set)
}

/// Full detection on a preprocessed image. Without a model this is the
/// template-matching-only detector.
pub fn detect(img: &GrayImage, bank: &TemplateBank, t: f64, model: Option<&CnnModel<f32>>) -> Result<DetectionSet> {
    let cm = correlate_bank(img, bank)?;
    detect_with_map(img, &cm, bank, t, model)
}

pub const JUNCTION_COLOR: [u8; 3] = [0, 255, 0];
pub const TERMINAL_COLOR: [u8; 3] = [0, 255, 255];
pub const FALSE_COLOR: [u8; 3] = [255, 0, 0];
const DOT_RADIUS: isize = 3;

/// Image with a colored dot per detection: green junction, cyan terminal,
/// red false detection.
pub fn render_overlay(img: &GrayImage, set: &DetectionSet) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let mut out = img.to_rgb();
    let (w, h) = (img.width() as isize, img.height() as isize);
    for d in &set.detections {
        let color = match d.final_label {
            Label::Junction => JUNCTION_COLOR,
            Label::Terminal => TERMINAL_COLOR,
            Label::FalseDetection => FALSE_COLOR,
        };
        for dy in -DOT_RADIUS..=DOT_RADIUS {
            for dx in -DOT_RADIUS..=DOT_RADIUS {
                let (x, y) = (d.x as isize + dx, d.y as isize + dy);
                if dx * dx + dy * dy <= DOT_RADIUS * DOT_RADIUS && x >= 0 && y >= 0 && x < w && y < h {
                    out.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }
    out
}

pub fn save_overlay(img: &GrayImage, set: &DetectionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    render_overlay(img, set).save(path).map_err(|e| Error::Encode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| ((x * 7 + y * 13) % 101) as f64 / 100.0).unwrap()
    }

    #[test]
    fn interior_patch_is_a_copy() {
        let img = gradient(100, 100);
        let p = extract_patch(&img, 50, 50);
        assert_eq!(p.side(), 50);
        for py in 0..50 {
            for px in 0..50 {
                assert_eq!(p.get(px, py), img.get(25 + px, 25 + py) as f32);
            }
        }
        assert_eq!(p.get(PATCH_CENTER, PATCH_CENTER), img.get(50, 50) as f32);
    }

    #[test]
    fn corner_patch_replicates_edges() {
        let img = gradient(100, 100);
        let p = extract_patch(&img, 0, 0);
        for py in 0..50 {
            for px in 0..50 {
                let sx = (px as isize - 25).max(0) as usize;
                let sy = (py as isize - 25).max(0) as usize;
                assert_eq!(p.get(px, py), img.get(sx, sy) as f32);
            }
        }
        // the whole top-left quadrant is the corner pixel
        assert_eq!(p.get(0, 0), img.get(0, 0) as f32);
        assert_eq!(p.get(25, 25), img.get(0, 0) as f32);
    }

    #[test]
    fn detection_set_json_round_trip() {
        let mut set = DetectionSet::new("a.png", 10, 10, 0.55);
        set.detections.push(Detection {
            id: 3,
            x: 4,
            y: 9,
            score: Some(0.1 + 0.2),
            tm_label: Some(DefectClass::Terminal),
            final_label: Label::FalseDetection,
            probs: [1.0 / 3.0, 0.2, 1.0 - 1.0 / 3.0 - 0.2],
            source: Source::Cnn,
        });
        let text = set.to_json().unwrap();
        assert!(text.contains("\"label\": \"false\"") && text.contains("\"source\": \"cnn\""));
        assert_eq!(DetectionSet::from_json(&text).unwrap(), set);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut set = DetectionSet::new("a", 10, 10, 0.5);
        let d = Detection {
            id: 1,
            x: 0,
            y: 0,
            score: Some(0.9),
            tm_label: Some(DefectClass::Junction),
            final_label: Label::Junction,
            probs: [1.0, 0.0, 0.0],
            source: Source::Tm,
        };
        set.detections = vec![d.clone(), d];
        assert!(set.validate().is_err());
    }

    #[test]
    fn overlay_colors() {
        let img = GrayImage::filled(20, 20, 0.5).unwrap();
        let mut set = DetectionSet::new("a", 20, 20, 0.5);
        for (i, label) in Label::ALL.iter().enumerate() {
            set.detections.push(Detection {
                id: i as u64,
                x: 4 + 6 * i,
                y: 10,
                score: None,
                tm_label: None,
                final_label: *label,
                probs: one_hot(*label),
                source: Source::Human,
            });
        }
        let out = render_overlay(&img, &set);
        assert_eq!(out.get_pixel(4, 10).0, JUNCTION_COLOR);
        assert_eq!(out.get_pixel(10, 10).0, TERMINAL_COLOR);
        assert_eq!(out.get_pixel(16, 10).0, FALSE_COLOR);
        assert_eq!(out.get_pixel(0, 0).0, [128, 128, 128]);
    }
}
