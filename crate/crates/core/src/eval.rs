//! Scoring against ground truth and defect-count statistics over
//! demagnetization steps.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{CnnModel, Label};
use crate::error::{arg_err, Result};
use crate::image::GrayImage;
use crate::matching::{correlate_bank, extract_peaks, CorrelationMap};
use crate::pipeline::{label_candidates, Detection, DetectionSet};
use crate::synth::GtPoint;
use crate::templates::{DefectClass, TemplateBank};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// A match needs IoU strictly above this.
    pub iou_threshold: f64,
    /// Side of the square box drawn around every point.
    pub box_side: usize,
    pub class_aware: bool,
    /// Predictions closer than this to an edge are ignored (ground truth is
    /// expected to be cut the same way).
    pub border_margin: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            box_side: 21,
            class_aware: true,
            border_margin: 0.0,
        }
    }
}

/// IoU of two axis-aligned `side × side` boxes centered on integer points.
pub fn box_iou(a: (usize, usize), b: (usize, usize), side: usize) -> f64 {
    let s = side as f64;
    let ix = (s - a.0.abs_diff(b.0) as f64).max(0.0);
    let iy = (s - a.1.abs_diff(b.1) as f64).max(0.0);
    let inter = ix * iy;
    inter / (2.0 * s * s - inter)
}

/// Outcome of matching one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(detection id, ground-truth index)` pairs.
    pub matches: Vec<(u64, usize)>,
    pub unmatched_predictions: Vec<u64>,
    pub unmatched_truth: Vec<usize>,
}

impl Assignment {
    pub fn tp(&self) -> usize {
        self.matches.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_predictions.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_truth.len()
    }
}

fn inside(x: usize, y: usize, w: usize, h: usize, margin: f64) -> bool {
    let (x, y) = (x as f64, y as f64);
    x >= margin && y >= margin && (w - 1) as f64 - x >= margin && (h - 1) as f64 - y >= margin
}

/// Greedy matching in descending prediction score. Each prediction takes
/// the unmatched ground-truth point of highest IoU (lowest index on ties).
pub fn match_detections(pred: &DetectionSet, gt: &[GtPoint], cfg: &MatchConfig) -> Result<Assignment> {
    if cfg.box_side == 0 {
        return arg_err("box side must be positive");
    }
    let mut preds: Vec<&Detection> = pred
        .detections
        .iter()
        .filter(|d| d.is_defect() && inside(d.x, d.y, pred.width.max(1), pred.height.max(1), cfg.border_margin))
        .collect();
    // unscored (hand-added) points rank last
    let key = |d: &Detection| d.score.unwrap_or(f64::NEG_INFINITY);
    preds.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.id.cmp(&b.id)));

    // bucket ground truth on a box-sized grid
    let cell = cfg.box_side;
    let mut grid: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (i, g) in gt.iter().enumerate() {
        grid.entry((g.x / cell, g.y / cell)).or_default().push(i);
    }
    let mut taken = vec![false; gt.len()];
    let mut out = Assignment::default();
    for d in preds {
        let (cx, cy) = (d.x / cell, d.y / cell);
        let mut best: Option<(f64, usize)> = None;
        for gy in cy.saturating_sub(1)..=cy + 1 {
            for gx in cx.saturating_sub(1)..=cx + 1 {
                for &i in grid.get(&(gx, gy)).map(Vec::as_slice).unwrap_or(&[]) {
                    let g = &gt[i];
                    if taken[i] || (cfg.class_aware && d.final_label.defect() != Some(g.class)) {
                        continue;
                    }
                    let iou = box_iou((d.x, d.y), (g.x, g.y), cfg.box_side);
                    if iou <= cfg.iou_threshold {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((b, j)) => iou > b || (iou == b && i < j),
                    };
                    if better {
                        best = Some((iou, i));
                    }
                }
            }
        }
        match best {
            Some((_, i)) => {
                taken[i] = true;
                out.matches.push((d.id, i));
            }
            None => out.unmatched_predictions.push(d.id),
        }
    }
    out.unmatched_truth = (0..gt.len()).filter(|&i| !taken[i]).collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    /// Pools counts over several images.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a Metrics>) -> Self {
        let (tp, fp, fn_) = parts
            .into_iter()
            .fold((0, 0, 0), |(a, b, c), m| (a + m.tp, b + m.fp, c + m.fn_));
        Self::from_counts(tp, fp, fn_)
    }
}

pub fn prf(assignment: &Assignment) -> Metrics {
    Metrics::from_counts(assignment.tp(), assignment.fp(), assignment.fn_())
}

/// One image prepared for a threshold sweep: its fused correlation map is
/// computed once and reused for every threshold.
pub struct SweepImage {
    pub image: GrayImage,
    pub map: CorrelationMap,
    pub truth: Vec<GtPoint>,
}

impl SweepImage {
    pub fn new(image: GrayImage, bank: &TemplateBank, truth: Vec<GtPoint>) -> Result<Self> {
        let map = correlate_bank(&image, bank)?;
        Ok(Self { image, map, truth })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Rows in ascending threshold order.
    pub rows: Vec<SweepRow>,
    pub best_threshold: f64,
    pub best: Metrics,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,tp,fp,fn,precision,recall,f1\n");
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6}\n",
                r.threshold, m.tp, m.fp, m.fn_, m.precision, m.recall, m.f1
            ));
        }
        out
    }
}

/// Pooled metrics per threshold. With a model, each distinct candidate
/// position is classified once and reused across thresholds.
pub fn sweep_prepared(
    images: &[SweepImage],
    bank: &TemplateBank,
    model: Option<&CnnModel<f32>>,
    thresholds: &[f64],
    cfg: &MatchConfig,
) -> Result<SweepResult> {
    if thresholds.is_empty() {
        return arg_err("at least one threshold is required");
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return arg_err(format!("threshold {t} outside (0, 1)"));
    }
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();

    let mut per_t = vec![Vec::with_capacity(images.len()); ts.len()];
    for item in images {
        let mut cache: HashMap<(usize, usize), (Label, [f64; 3])> = HashMap::new();
        for (k, &t) in ts.iter().enumerate() {
            let candidates = extract_peaks(&item.map, bank, t)?;
            let mut detections = label_candidates(&item.image, &candidates, None)?;
            if let Some(m) = model {
                let fresh: Vec<_> = candidates
                    .iter()
                    .filter(|c| !cache.contains_key(&(c.x, c.y)))
                    .cloned()
                    .collect();
                for d in label_candidates(&item.image, &fresh, Some(m))? {
                    cache.insert((d.x, d.y), (d.final_label, d.probs));
                }
                for d in &mut detections {
                    let (label, probs) = cache[&(d.x, d.y)];
                    d.final_label = label;
                    d.probs = probs;
                    d.source = crate::pipeline::Source::Cnn;
                }
            }
            let mut set = DetectionSet::new("", item.image.width(), item.image.height(), t);
            set.detections = detections;
            per_t[k].push(prf(&match_detections(&set, &item.truth, cfg)?));
        }
    }
    let rows: Vec<SweepRow> = ts
        .iter()
        .zip(&per_t)
        .map(|(&threshold, parts)| SweepRow {
            threshold,
            metrics: Metrics::pooled(parts),
        })
        .collect();
    // first maximum, so ties go to the lower threshold
    let best = rows
        .iter()
        .fold(&rows[0], |b, r| if r.metrics.f1 > b.metrics.f1 { r } else { b });
    Ok(SweepResult {
        best_threshold: best.threshold,
        best: best.metrics,
        rows,
    })
}

/// Threshold sweep over raw images: correlates each image once, then
/// re-extracts peaks per threshold.
pub fn sweep_threshold(
    images: &[(GrayImage, Vec<GtPoint>)],
    bank: &TemplateBank,
    model: Option<&CnnModel<f32>>,
    thresholds: &[f64],
    cfg: &MatchConfig,
) -> Result<SweepResult> {
    let prepared = images
        .iter()
        .map(|(img, gt)| SweepImage::new(img.clone(), bank, gt.clone()))
        .collect::<Result<Vec<_>>>()?;
    sweep_prepared(&prepared, bank, model, thresholds, cfg)
}

/// Threshold sweep over saved detections: each threshold keeps the
/// detections scoring at least that much. Points without a score (added by
/// hand) are always kept. Use detections produced at or below the lowest
/// threshold; peaks that only appear at a higher threshold are not recovered.
pub fn sweep_detections(pairs: &[(DetectionSet, Vec<GtPoint>)], thresholds: &[f64], cfg: &MatchConfig) -> Result<SweepResult> {
    if thresholds.is_empty() {
        return arg_err("at least one threshold is required");
    }
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let rows = ts
        .iter()
        .map(|&threshold| {
            let parts = pairs
                .iter()
                .map(|(pred, gt)| {
                    let mut kept = pred.clone();
                    kept.detections.retain(|d| d.score.is_none_or(|s| s >= threshold));
                    Ok(prf(&match_detections(&kept, gt, cfg)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                threshold,
                metrics: Metrics::pooled(&parts),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .fold(&rows[0], |b, r| if r.metrics.f1 > b.metrics.f1 { r } else { b });
    Ok(SweepResult {
        best_threshold: best.threshold,
        best: best.metrics,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub runs: usize,
    pub junction_mean: f64,
    pub junction_std: f64,
    pub terminal_mean: f64,
    pub terminal_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSeries {
    pub steps: Vec<StepStats>,
}

impl StepSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,junction_mean,junction_std,terminal_mean,terminal_std\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.step, s.junction_mean, s.junction_std, s.terminal_mean, s.terminal_std
            ));
        }
        out
    }
}

/// Mean and sample standard deviation (n - 1; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-step statistics from `(junctions, terminals)` counts, one map of
/// step to counts per run.
pub fn step_series_from_counts(runs: &[Vec<(usize, (usize, usize))>]) -> Result<StepSeries> {
    if runs.is_empty() {
        return arg_err("at least one run is required");
    }
    let steps_of = |run: &Vec<(usize, (usize, usize))>| run.iter().map(|r| r.0).collect::<BTreeSet<_>>();
    let steps = steps_of(&runs[0]);
    for (i, run) in runs.iter().enumerate() {
        if steps_of(run) != steps || run.len() != steps.len() {
            return arg_err(format!("run {i} covers different steps than run 0"));
        }
    }
    let stats = steps
        .iter()
        .map(|&step| {
            let counts: Vec<(usize, usize)> = runs
                .iter()
                .map(|run| run.iter().find(|r| r.0 == step).expect("checked coverage").1)
                .collect();
            let j: Vec<f64> = counts.iter().map(|c| c.0 as f64).collect();
            let t: Vec<f64> = counts.iter().map(|c| c.1 as f64).collect();
            let (junction_mean, junction_std) = mean_std(&j);
            let (terminal_mean, terminal_std) = mean_std(&t);
            StepStats {
                step,
                runs: runs.len(),
                junction_mean,
                junction_std,
                terminal_mean,
                terminal_std,
            }
        })
        .collect();
    Ok(StepSeries { steps: stats })
}

/// Step statistics from detection sets; false detections are not counted.
pub fn step_series(runs: &[Vec<(usize, DetectionSet)>]) -> Result<StepSeries> {
    let counts: Vec<Vec<(usize, (usize, usize))>> = runs
        .par_iter()
        .map(|run| {
            run.iter()
                .map(|(step, set)| (*step, (set.count(DefectClass::Junction), set.count(DefectClass::Terminal))))
                .collect()
        })
        .collect();
    step_series_from_counts(&counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Source;

    fn det(id: u64, x: usize, y: usize, score: f64, label: Label) -> Detection {
        let mut probs = [0.0; 3];
        probs[label.index()] = 1.0;
        Detection {
            id,
            x,
            y,
            score: Some(score),
            tm_label: label.defect(),
            final_label: label,
            probs,
            source: Source::Tm,
        }
    }

    fn set(dets: Vec<Detection>) -> DetectionSet {
        let mut s = DetectionSet::new("t", 200, 200, 0.5);
        s.detections = dets;
        s
    }

    fn gt(x: usize, y: usize, class: DefectClass) -> GtPoint {
        GtPoint { x, y, class }
    }

    #[test]
    fn offset_seven_is_exactly_half() {
        let iou = box_iou((50, 50), (57, 50), 21);
        // 14·21 / (2·441 − 294)
        assert_eq!(iou, 294.0 / 588.0);
        assert_eq!(iou, 0.5);
        let a = match_detections(
            &set(vec![det(0, 57, 50, 0.9, Label::Junction)]),
            &[gt(50, 50, DefectClass::Junction)],
            &MatchConfig::default(),
        )
        .unwrap();
        assert_eq!(a.tp(), 0);
        assert_eq!(box_iou((50, 50), (56, 50), 21), 315.0 / 567.0);
    }

    #[test]
    fn exact_hit_far_miss_and_class_confusion() {
        let truth = [gt(50, 50, DefectClass::Junction)];
        let cfg = MatchConfig::default();
        let hit = match_detections(&set(vec![det(0, 50, 50, 0.9, Label::Junction)]), &truth, &cfg).unwrap();
        assert_eq!((hit.tp(), hit.fp(), hit.fn_()), (1, 0, 0));
        let far = match_detections(&set(vec![det(0, 100, 50, 0.9, Label::Junction)]), &truth, &cfg).unwrap();
        assert_eq!((far.tp(), far.fp(), far.fn_()), (0, 1, 1));
        let wrong = set(vec![det(0, 50, 50, 0.9, Label::Terminal)]);
        assert_eq!(match_detections(&wrong, &truth, &cfg).unwrap().tp(), 0);
        let agnostic = MatchConfig {
            class_aware: false,
            ..cfg
        };
        assert_eq!(match_detections(&wrong, &truth, &agnostic).unwrap().tp(), 1);
    }

    #[test]
    fn false_detections_are_ignored() {
        let a = match_detections(
            &set(vec![det(0, 50, 50, 0.9, Label::FalseDetection)]),
            &[gt(50, 50, DefectClass::Junction)],
            &MatchConfig::default(),
        )
        .unwrap();
        assert_eq!((a.tp(), a.fp(), a.fn_()), (0, 0, 1));
    }

    #[test]
    fn higher_score_claims_first() {
        let truth = [gt(50, 50, DefectClass::Terminal)];
        let dets = vec![det(0, 52, 50, 0.6, Label::Terminal), det(1, 53, 50, 0.8, Label::Terminal)];
        let a = match_detections(&set(dets), &truth, &MatchConfig::default()).unwrap();
        assert_eq!(a.matches, vec![(1, 0)]);
        assert_eq!(a.unmatched_predictions, vec![0]);
    }

    #[test]
    fn prf_formulas() {
        let m = Metrics::from_counts(9, 1, 1);
        assert!((m.precision - 0.9).abs() < 1e-12 && (m.recall - 0.9).abs() < 1e-12 && (m.f1 - 0.9).abs() < 1e-12);
        let none = Metrics::from_counts(0, 0, 5);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert_eq!(Metrics::from_counts(4, 0, 0).f1, 1.0);
        assert!(serde_json::to_string(&m).unwrap().contains("\"fn\":1"));
    }

    #[test]
    fn two_sample_step_stats() {
        let runs = vec![vec![(0, (700, 10))], vec![(0, (800, 10))]];
        let s = step_series_from_counts(&runs).unwrap();
        assert_eq!(s.steps[0].junction_mean, 750.0);
        assert!((s.steps[0].junction_std - 70.710678).abs() < 1e-3);
        assert_eq!(s.steps[0].terminal_std, 0.0);
        let single = step_series_from_counts(&runs[..1]).unwrap();
        assert_eq!(single.steps[0].junction_std, 0.0);
        assert!(s.to_csv().starts_with("step,junction_mean,junction_std,terminal_mean,terminal_std\n0,750,"));
        let uneven = vec![vec![(0, (1, 1))], vec![(1, (1, 1))]];
        assert!(step_series_from_counts(&uneven).is_err());
    }

    #[test]
    fn non_positive_box_rejected() {
        let cfg = MatchConfig {
            box_side: 0,
            ..MatchConfig::default()
        };
        assert!(match_detections(&set(vec![]), &[], &cfg).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn matching_invariants(
            preds in proptest::collection::vec((0usize..120, 0usize..120, 0.0f64..1.0, 0usize..3), 0..25),
            truth in proptest::collection::vec((0usize..120, 0usize..120, proptest::bool::ANY), 0..25),
            rot in 0usize..25,
        ) {
            let dets: Vec<Detection> = preds
                .iter()
                .enumerate()
                .map(|(i, &(x, y, s, l))| det(i as u64, x, y, s, Label::ALL[l]))
                .collect();
            let pts: Vec<GtPoint> = truth
                .iter()
                .map(|&(x, y, j)| gt(x, y, if j { DefectClass::Junction } else { DefectClass::Terminal }))
                .collect();
            let cfg = MatchConfig::default();
            let a = match_detections(&set(dets.clone()), &pts, &cfg).unwrap();
            let m = prf(&a);
            for v in [m.precision, m.recall, m.f1] {
                proptest::prop_assert!((0.0..=1.0).contains(&v));
            }
            // permuting ground truth keeps the counts
            let mut rotated = pts.clone();
            if !rotated.is_empty() {
                let k = rot % rotated.len();
                rotated.rotate_left(k);
            }
            let b = match_detections(&set(dets.clone()), &rotated, &cfg).unwrap();
            proptest::prop_assert_eq!((a.tp(), a.fp(), a.fn_()), (b.tp(), b.fp(), b.fn_()));
            // class-agnostic never loses matches
            let agnostic = MatchConfig { class_aware: false, ..cfg };
            proptest::prop_assert!(match_detections(&set(dets.clone()), &pts, &agnostic).unwrap().tp() >= a.tp());
            // duplicating a matched prediction adds exactly one false positive,
            // provided no other free point could take the copy
            let isolated = |id: u64| {
                let d = &dets[id as usize];
                a.unmatched_truth.iter().all(|&i| box_iou((d.x, d.y), (pts[i].x, pts[i].y), 21) <= 0.5)
            };
            if let Some(&(id, _)) = a.matches.iter().find(|m| isolated(m.0)) {
                let mut more = dets.clone();
                let mut dup = dets[id as usize].clone();
                dup.id = 1000;
                more.push(dup);
                let c = match_detections(&set(more), &pts, &cfg).unwrap();
                proptest::prop_assert_eq!(c.fp(), a.fp() + 1);
                proptest::prop_assert_eq!(c.tp(), a.tp());
            }
        }
    }

    #[test]
    fn score_sweep_keeps_unscored_points() {
        let truth = vec![gt(50, 50, DefectClass::Junction), gt(120, 50, DefectClass::Junction)];
        let mut hand = det(2, 120, 50, 0.0, Label::Junction);
        hand.score = None;
        let pred = set(vec![
            det(0, 50, 50, 0.9, Label::Junction),
            det(1, 150, 150, 0.6, Label::Junction),
            hand,
        ]);
        let r = sweep_detections(&[(pred, truth)], &[0.95, 0.5, 0.7], &MatchConfig::default()).unwrap();
        let ts: Vec<f64> = r.rows.iter().map(|r| r.threshold).collect();
        assert_eq!(ts, [0.5, 0.7, 0.95]);
        let counts: Vec<_> = r.rows.iter().map(|r| (r.metrics.tp, r.metrics.fp, r.metrics.fn_)).collect();
        assert_eq!(counts, [(2, 1, 0), (2, 0, 0), (1, 0, 1)]);
        assert_eq!(r.best_threshold, 0.7);
    }
}
