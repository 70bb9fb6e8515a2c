//! Labeled patch datasets: building them from reviewed detections, mining
//! extra negatives, and the on-disk layout used by `train`.
//!
//! A dataset directory holds `manifest.json` plus one 8-bit grayscale PNG
//! per patch under `patches/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{Label, Patch, PATCH_SIDE};
use crate::error::{arg_err, Error, Result};
use crate::eval::box_iou;
use crate::image::{load_image, GrayImage};
use crate::matching::Candidate;
use crate::pipeline::{extract_patch, Detection};
use crate::synth::GtPoint;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PATCH_DIR: &str = "patches";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub junction: usize,
    pub terminal: usize,
    #[serde(rename = "false")]
    pub false_detection: usize,
}

impl ClassCounts {
    pub fn of(labels: impl IntoIterator<Item = Label>) -> Self {
        let mut c = Self::default();
        for l in labels {
            c.add(l);
        }
        c
    }

    pub fn add(&mut self, label: Label) {
        match label {
            Label::Junction => self.junction += 1,
            Label::Terminal => self.terminal += 1,
            Label::FalseDetection => self.false_detection += 1,
        }
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Junction => self.junction,
            Label::Terminal => self.terminal,
            Label::FalseDetection => self.false_detection,
        }
    }

    pub fn total(&self) -> usize {
        self.junction + self.terminal + self.false_detection
    }
}

/// A patch with its label and where it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub image: String,
    pub x: usize,
    pub y: usize,
    pub label: Label,
    pub patch: Patch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset directory.
    pub file: String,
    pub label: Label,
    pub image: String,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub patch_side: usize,
    pub counts: ClassCounts,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Checks that the counts agree with the entries.
    pub fn validate(&self) -> Result<()> {
        if self.patch_side != PATCH_SIDE {
            return Err(Error::Dataset(format!(
                "patch side {} is not {PATCH_SIDE}",
                self.patch_side
            )));
        }
        let actual = ClassCounts::of(self.entries.iter().map(|e| e.label));
        if actual != self.counts {
            return Err(Error::Dataset(format!(
                "manifest counts {:?} disagree with its {} entries {:?}",
                self.counts,
                self.entries.len(),
                actual
            )));
        }
        Ok(())
    }
}

/// Patches for every detection of one image, labeled with its current label.
pub fn patches_from_detections(image_id: &str, img: &GrayImage, detections: &[Detection]) -> Vec<LabeledPatch> {
    detections
        .iter()
        .map(|d| LabeledPatch {
            image: image_id.to_string(),
            x: d.x,
            y: d.y,
            label: d.final_label,
            patch: extract_patch(img, d.x, d.y),
        })
        .collect()
}

fn patch_to_image(patch: &Patch) -> Result<GrayImage> {
    GrayImage::new(patch.side(), patch.side(), patch.data().iter().map(|&v| v as f64).collect())
}

fn file_stem(image: &str) -> String {
    image
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes patches and the manifest into `dir` (created if needed). Entry
/// order follows `patches`.
pub fn write_dataset(dir: impl AsRef<Path>, patches: &[LabeledPatch]) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join(PATCH_DIR))?;
    let mut entries = Vec::with_capacity(patches.len());
    for (i, p) in patches.iter().enumerate() {
        if p.patch.side() != PATCH_SIDE {
            return arg_err(format!("patch {i} has side {}", p.patch.side()));
        }
        let file = format!(
            "{PATCH_DIR}/{i:06}_{}_{}_{}_{}.png",
            file_stem(&p.image),
            p.x,
            p.y,
            p.label.as_str()
        );
        patch_to_image(&p.patch)?.save_png(dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            label: p.label,
            image: p.image.clone(),
            x: p.x,
            y: p.y,
        });
    }
    let manifest = DatasetManifest {
        patch_side: PATCH_SIDE,
        counts: ClassCounts::of(patches.iter().map(|p| p.label)),
        entries,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads every patch listed in the manifest, ready for training.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<(Patch, Label)>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.file);
            let img = load_image(&path)?;
            if img.dims() != (PATCH_SIDE, PATCH_SIDE) {
                return Err(Error::Dataset(format!(
                    "{} is {}×{}, expected {PATCH_SIDE}×{PATCH_SIDE}",
                    path.display(),
                    img.width(),
                    img.height()
                )));
            }
            let patch = Patch::new(PATCH_SIDE, img.data().iter().map(|&v| v as f32).collect())?;
            Ok((patch, e.label))
        })
        .collect()
}

/// Samples up to `count` candidates lying at least `min_distance`
/// (Euclidean) from every positive. The sample is uniform without
/// replacement, seeded, and returned in candidate order.
pub fn mine_negatives(
    candidates: &[Candidate],
    positives: &[(usize, usize)],
    min_distance: f64,
    count: usize,
    seed: u64,
) -> Vec<Candidate> {
    let min_sq = min_distance * min_distance;
    let eligible: Vec<&Candidate> = candidates
        .iter()
        .filter(|c| {
            positives.iter().all(|&(px, py)| {
                let dx = c.x as f64 - px as f64;
                let dy = c.y as f64 - py as f64;
                dx * dx + dy * dy >= min_sq
            })
        })
        .collect();
    let n = count.min(eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, eligible.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| eligible[i].clone()).collect()
}

/// Reviewer stand-in for synthetic images: each candidate takes the class of
/// the ground-truth point it overlaps best (IoU above `iou_threshold`, lowest
/// index on ties), or `FalseDetection` when none does.
pub fn label_by_truth(candidates: &[Candidate], truth: &[GtPoint], box_side: usize, iou_threshold: f64) -> Vec<Label> {
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let cell = box_side.max(1);
    for (i, g) in truth.iter().enumerate() {
        cells.entry((g.x / cell, g.y / cell)).or_default().push(i);
    }
    candidates
        .iter()
        .map(|c| {
            let (cx, cy) = (c.x / cell, c.y / cell);
            let mut best: Option<(f64, usize)> = None;
            for gx in cx.saturating_sub(1)..=cx + 1 {
                for gy in cy.saturating_sub(1)..=cy + 1 {
                    for &i in cells.get(&(gx, gy)).into_iter().flatten() {
                        let iou = box_iou((c.x, c.y), (truth[i].x, truth[i].y), box_side);
                        let better = match best {
                            None => true,
                            Some((b, j)) => iou > b || (iou == b && i < j),
                        };
                        if iou > iou_threshold && better {
                            best = Some((iou, i));
                        }
                    }
                }
            }
            best.map_or(Label::FalseDetection, |(_, i)| Label::from(truth[i].class))
        })
        .collect()
}

/// Draws at most `per_class` samples of each label (seeded, order kept).
pub fn balance(samples: Vec<(Patch, Label)>, per_class: usize, seed: u64) -> Vec<(Patch, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; samples.len()];
    for label in Label::ALL {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].1 == label).collect();
        for k in sample(&mut rng, idx.len(), per_class.min(idx.len())) {
            keep[idx[k]] = true;
        }
    }
    samples.into_iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s).collect()
}
