//! On-disk annotation project: images, their editable detection sets, the
//! proposal snapshots and an append-only audit log.
//!
//! ```text
//! <root>/project.json          image records and statuses
//! <root>/images/*.png          source images (registered on open)
//! <root>/detections/<id>.json  current DetectionSet per image
//! <root>/proposals/<id>-<n>.json  machine detections of the n-th proposal
//! <root>/audit.jsonl           one event per line
//! ```

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tmcnn::classifier::{CnnModel, Label};
use tmcnn::dataset::{mine_negatives, patches_from_detections, write_dataset, DatasetManifest};
use tmcnn::image::{load_image, preprocess};
use tmcnn::matching::{extract_peaks, CorrelationMap};
use tmcnn::pipeline::{detect_with_map, Detection, DetectionSet, Source};
use tmcnn::{GrayImage, TemplateBank};

use crate::error::ServiceError;

pub const PROJECT_FILE: &str = "project.json";
pub const IMAGE_DIR: &str = "images";
pub const DETECTION_DIR: &str = "detections";
pub const PROPOSAL_DIR: &str = "proposals";
pub const AUDIT_FILE: &str = "audit.jsonl";

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Unreviewed,
    InReview,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Relative to the project root.
    pub path: String,
    pub status: Status,
    /// Number of proposals made so far; names the next snapshot.
    #[serde(default)]
    pub proposals: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Manifest {
    images: Vec<ImageRecord>,
}

/// One line of `audit.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    pub image: String,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Machine detections replaced by the snapshot in `snapshot`.
    Propose { snapshot: String, threshold: f64 },
    Relabel { detection: u64, old_label: Label, new_label: Label },
    Add { detection: Detection },
    /// Machine detection removed.
    Remove { detection: u64, old_label: Label },
    Mine { detections: Vec<Detection> },
    Status { old: Status, new: Status },
}

/// Settings fixed for the lifetime of a running service.
pub struct ProjectConfig {
    pub bank: Arc<TemplateBank>,
    pub model: Option<Arc<CnnModel<f32>>>,
    /// Threshold used when a request does not give one.
    pub default_threshold: f64,
    /// Resize target applied before the median filter.
    pub resize: Option<(usize, usize)>,
    pub box_side: usize,
}

pub struct Project {
    root: PathBuf,
    manifest: Manifest,
    config: ProjectConfig,
    images: HashMap<String, Arc<GrayImage>>,
    maps: HashMap<String, Arc<CorrelationMap>>,
    sets: HashMap<String, DetectionSet>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Write-to-temp then rename, so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png")
    )
}

impl Project {
    /// Opens (or initializes) a project, registering any new PNG under
    /// `images/` with status unreviewed.
    pub fn open(root: impl Into<PathBuf>, config: ProjectConfig) -> Result<Self> {
        let root = root.into();
        for dir in [IMAGE_DIR, DETECTION_DIR, PROPOSAL_DIR] {
            std::fs::create_dir_all(root.join(dir))?;
        }
        let manifest_path = root.join(PROJECT_FILE);
        let mut manifest: Manifest = if manifest_path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?
        } else {
            Manifest::default()
        };
        let mut found: Vec<PathBuf> = std::fs::read_dir(root.join(IMAGE_DIR))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image(p))
            .collect();
        found.sort();
        for path in found {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if !id.is_empty() && !manifest.images.iter().any(|r| r.id == id) {
                let file = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
                manifest.images.push(ImageRecord {
                    id,
                    path: format!("{IMAGE_DIR}/{file}"),
                    status: Status::Unreviewed,
                    proposals: 0,
                });
            }
        }
        let project = Self {
            root,
            manifest,
            config,
            images: HashMap::new(),
            maps: HashMap::new(),
            sets: HashMap::new(),
        };
        project.save_manifest()?;
        Ok(project)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ProjectConfig {
        &self.config
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.manifest.images
    }

    pub fn record(&self, id: &str) -> Result<&ImageRecord> {
        self.manifest
            .images
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| ServiceError::NotFound(format!("image {id:?}")))
    }

    fn record_mut(&mut self, id: &str) -> Result<&mut ImageRecord> {
        self.manifest
            .images
            .iter_mut()
            .find(|r| r.id == id)
            .ok_or_else(|| ServiceError::NotFound(format!("image {id:?}")))
    }

    fn save_manifest(&self) -> Result<()> {
        write_atomic(
            &self.root.join(PROJECT_FILE),
            serde_json::to_string_pretty(&self.manifest)?.as_bytes(),
        )
    }

    fn append_audit(&self, image: &str, action: Action) -> Result<()> {
        let event = AuditEvent {
            timestamp_ms: now_ms(),
            image: image.to_string(),
            action,
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join(AUDIT_FILE))?;
        writeln!(f, "{}", serde_json::to_string(&event)?)?;
        Ok(())
    }

    /// The preprocessed image; detection coordinates refer to it.
    pub fn image(&mut self, id: &str) -> Result<Arc<GrayImage>> {
        if let Some(img) = self.images.get(id) {
            return Ok(img.clone());
        }
        let path = self.root.join(&self.record(id)?.path);
        let img = Arc::new(preprocess(&load_image(&path)?, self.config.resize)?);
        self.images.insert(id.to_string(), img.clone());
        Ok(img)
    }

    pub fn cached_map(&self, id: &str) -> Option<Arc<CorrelationMap>> {
        self.maps.get(id).cloned()
    }

    pub fn store_map(&mut self, id: &str, map: Arc<CorrelationMap>) {
        self.maps.insert(id.to_string(), map);
    }

    fn detection_path(&self, id: &str) -> PathBuf {
        self.root.join(DETECTION_DIR).join(format!("{id}.json"))
    }

    /// Current detections; an empty set before the first proposal.
    pub fn detections(&mut self, id: &str) -> Result<DetectionSet> {
        self.load_set(id)?;
        Ok(self.sets[id].clone())
    }

    fn load_set(&mut self, id: &str) -> Result<()> {
        if self.sets.contains_key(id) {
            return Ok(());
        }
        let path = self.detection_path(id);
        let set = if path.exists() {
            DetectionSet::load(&path)?
        } else {
            let img = self.image(id)?;
            DetectionSet::new(id, img.width(), img.height(), self.config.default_threshold)
        };
        self.sets.insert(id.to_string(), set);
        Ok(())
    }

    fn save_set(&self, id: &str) -> Result<()> {
        write_atomic(&self.detection_path(id), self.sets[id].to_json()?.as_bytes())
    }

    fn set_mut(&mut self, id: &str) -> Result<&mut DetectionSet> {
        self.load_set(id)?;
        Ok(self.sets.get_mut(id).expect("loaded"))
    }

    /// Replaces machine detections with a fresh proposal computed on `map`.
    /// Human-sourced detections are kept, and new ids never reuse old ones.
    pub fn apply_proposal(&mut self, id: &str, map: &CorrelationMap, threshold: f64, use_model: bool) -> Result<DetectionSet> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(ServiceError::Invalid(format!("threshold {threshold} outside (0, 1)")));
        }
        let model = match (use_model, &self.config.model) {
            (false, _) => None,
            (true, Some(m)) => Some(m.clone()),
            (true, None) => return Err(ServiceError::Invalid("no model loaded; start the service with weights".into())),
        };
        let img = self.image(id)?;
        let proposal = detect_with_map(&img, map, &self.config.bank, threshold, model.as_deref())?;
        let number = {
            let rec = self.record_mut(id)?;
            rec.proposals += 1;
            rec.proposals
        };
        let set = self.set_mut(id)?;
        set.detections.retain(|d| d.source == Source::Human);
        set.threshold = threshold;
        let mut next = set.next_id();
        let mut fresh = Vec::with_capacity(proposal.detections.len());
        for mut d in proposal.detections {
            if set.detections.iter().any(|h| (h.x, h.y) == (d.x, d.y)) {
                continue;
            }
            d.id = next;
            next += 1;
            fresh.push(d);
        }
        set.detections.extend(fresh.iter().cloned());
        let snapshot = format!("{PROPOSAL_DIR}/{id}-{number}.json");
        let mut snap = DetectionSet::new(id, img.width(), img.height(), threshold);
        snap.detections = fresh;
        write_atomic(&self.root.join(&snapshot), snap.to_json()?.as_bytes())?;
        self.save_set(id)?;
        self.save_manifest()?;
        self.append_audit(id, Action::Propose { snapshot, threshold })?;
        self.detections(id)
    }

    pub fn relabel(&mut self, id: &str, detection: u64, label: Label) -> Result<Detection> {
        let set = self.set_mut(id)?;
        let d = set
            .detections
            .iter_mut()
            .find(|d| d.id == detection)
            .ok_or_else(|| ServiceError::NotFound(format!("detection {detection} of image {id:?}")))?;
        let old_label = d.final_label;
        d.final_label = label;
        d.source = Source::Human;
        let out = d.clone();
        self.save_set(id)?;
        self.append_audit(
            id,
            Action::Relabel {
                detection,
                old_label,
                new_label: label,
            },
        )?;
        Ok(out)
    }

    /// A missed defect added by hand: no score, no template label.
    pub fn add(&mut self, id: &str, x: usize, y: usize, label: Label) -> Result<Detection> {
        let set = self.set_mut(id)?;
        if x >= set.width || y >= set.height {
            return Err(ServiceError::Invalid(format!(
                "({x}, {y}) lies outside {}×{}",
                set.width, set.height
            )));
        }
        let d = Detection {
            id: set.next_id(),
            x,
            y,
            score: None,
            tm_label: None,
            final_label: label,
            probs: label.one_hot().map(f64::from),
            source: Source::Human,
        };
        set.detections.push(d.clone());
        self.save_set(id)?;
        self.append_audit(id, Action::Add { detection: d.clone() })?;
        Ok(d)
    }

    /// Removes a machine detection. Human detections are relabeled false
    /// instead, so the reviewer's trail survives; that entry is returned.
    pub fn delete(&mut self, id: &str, detection: u64) -> Result<Option<Detection>> {
        let set = self.set_mut(id)?;
        let pos = set
            .detections
            .iter()
            .position(|d| d.id == detection)
            .ok_or_else(|| ServiceError::NotFound(format!("detection {detection} of image {id:?}")))?;
        if set.detections[pos].source == Source::Human {
            return self.relabel(id, detection, Label::FalseDetection).map(Some);
        }
        let removed = set.detections.remove(pos);
        self.save_set(id)?;
        self.append_audit(
            id,
            Action::Remove {
                detection,
                old_label: removed.final_label,
            },
        )?;
        Ok(None)
    }

    pub fn set_status(&mut self, id: &str, status: Status) -> Result<ImageRecord> {
        let rec = self.record_mut(id)?;
        let old = rec.status;
        rec.status = status;
        let out = rec.clone();
        self.save_manifest()?;
        self.append_audit(id, Action::Status { old, new: status })?;
        Ok(out)
    }

    /// Samples extra false detections from peaks at `t_low`, away from every
    /// current positive, and appends them to the image's set.
    pub fn mine(&mut self, id: &str, map: &CorrelationMap, t_low: f64, count: usize, seed: u64) -> Result<Vec<Detection>> {
        let threshold = self.detections(id)?.threshold;
        if !(t_low > 0.0 && t_low < threshold) {
            return Err(ServiceError::Invalid(format!(
                "t_low {t_low} must lie in (0, {threshold}), below the proposal threshold"
            )));
        }
        let peaks = extract_peaks(map, &self.config.bank, t_low)?;
        let box_side = self.config.box_side;
        let set = self.set_mut(id)?;
        let positives: Vec<(usize, usize)> = set
            .detections
            .iter()
            .filter(|d| d.is_defect())
            .map(|d| (d.x, d.y))
            .collect();
        let taken: Vec<(usize, usize)> = set.detections.iter().map(|d| (d.x, d.y)).collect();
        let peaks: Vec<_> = peaks.into_iter().filter(|c| !taken.contains(&(c.x, c.y))).collect();
        let mut next = set.next_id();
        let mined: Vec<Detection> = mine_negatives(&peaks, &positives, box_side as f64, count, seed)
            .into_iter()
            .map(|c| {
                let d = Detection {
                    id: next,
                    x: c.x,
                    y: c.y,
                    score: Some(c.score),
                    tm_label: Some(c.tentative_label),
                    final_label: Label::FalseDetection,
                    probs: Label::FalseDetection.one_hot().map(f64::from),
                    source: Source::Tm,
                };
                next += 1;
                d
            })
            .collect();
        set.detections.extend(mined.iter().cloned());
        self.save_set(id)?;
        self.append_audit(id, Action::Mine { detections: mined.clone() })?;
        Ok(mined)
    }

    /// Writes one patch per detection of every done image.
    pub fn export(&mut self, out_dir: &Path) -> Result<DatasetManifest> {
        let done: Vec<String> = self
            .manifest
            .images
            .iter()
            .filter(|r| r.status == Status::Done)
            .map(|r| r.id.clone())
            .collect();
        if done.is_empty() {
            return Err(ServiceError::Precondition("no image is marked done".into()));
        }
        let mut patches = Vec::new();
        for id in &done {
            let img = self.image(id)?;
            let set = self.detections(id)?;
            patches.extend(patches_from_detections(id, &img, &set.detections));
        }
        let out = if out_dir.is_absolute() {
            out_dir.to_path_buf()
        } else {
            self.root.join(out_dir)
        };
        Ok(write_dataset(out, &patches)?)
    }
}

/// Reads every audit event in file order.
pub fn read_audit(root: &Path) -> Result<Vec<AuditEvent>> {
    let path = root.join(AUDIT_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Rebuilds an image's detections from the audit log and the proposal
/// snapshots it references.
pub fn replay(root: &Path, image: &str) -> Result<Vec<Detection>> {
    let mut dets: Vec<Detection> = Vec::new();
    for event in read_audit(root)?.into_iter().filter(|e| e.image == image) {
        match event.action {
            Action::Propose { snapshot, .. } => {
                dets.retain(|d| d.source == Source::Human);
                dets.extend(DetectionSet::load(root.join(snapshot))?.detections);
            }
            Action::Relabel { detection, new_label, .. } => {
                if let Some(d) = dets.iter_mut().find(|d| d.id == detection) {
                    d.final_label = new_label;
                    d.source = Source::Human;
                }
            }
            Action::Add { detection } => dets.push(detection),
            Action::Remove { detection, .. } => dets.retain(|d| d.id != detection),
            Action::Mine { detections } => dets.extend(detections),
            Action::Status { .. } => {}
        }
    }
    Ok(dets)
}
