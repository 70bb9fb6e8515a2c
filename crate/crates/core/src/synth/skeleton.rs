//! Thinning-based defect oracle: skeleton endpoints are terminals, branch
//! pixels are junctions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{BinaryField, Phase};
use crate::classifier::Label;
use crate::pipeline::{Detection, DetectionSet, Source};
use crate::templates::DefectClass;

/// Neighbor offsets clockwise from north: P2..P9 in Zhang–Suen notation.
const RING: [(isize, isize); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtPoint {
    pub x: usize,
    pub y: usize,
    pub class: DefectClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub phase: Phase,
    pub points: Vec<GtPoint>,
}

impl GroundTruth {
    pub fn count(&self, class: DefectClass) -> usize {
        self.points.iter().filter(|p| p.class == class).count()
    }

    /// Detection-set form with human-sourced, one-hot labeled entries.
    pub fn to_detection_set(&self, image: &str, width: usize, height: usize) -> DetectionSet {
        let mut set = DetectionSet::new(image, width, height, 0.0);
        set.detections = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let label = Label::from(p.class);
                let mut probs = [0.0; 3];
                probs[label.index()] = 1.0;
                Detection {
                    id: i as u64,
                    x: p.x,
                    y: p.y,
                    score: None,
                    tm_label: None,
                    final_label: label,
                    probs,
                    source: Source::Human,
                }
            })
            .collect();
        set
    }

    /// Defect points of a detection set; false detections are skipped.
    pub fn from_detection_set(set: &DetectionSet, phase: Phase) -> Self {
        Self {
            phase,
            points: set
                .detections
                .iter()
                .filter_map(|d| d.final_label.defect().map(|class| GtPoint { x: d.x, y: d.y, class }))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonConfig {
    /// Points closer than this to any image edge are dropped.
    pub border_margin: f64,
    /// Junction pixels within this distance are merged to their centroid.
    pub merge_radius: f64,
    /// Merged junctions closer than this are merged again.
    pub junction_separation: f64,
    /// End branches of at most this many pixels are pruned as spurs.
    pub spur_length: usize,
}

impl SkeletonConfig {
    pub fn for_wavelength(wavelength: f64) -> Self {
        Self {
            border_margin: wavelength / 2.0,
            merge_radius: wavelength / 4.0,
            junction_separation: wavelength / 2.0,
            spur_length: (wavelength / 4.0).round() as usize,
        }
    }
}

struct Grid<'a> {
    px: &'a [bool],
    w: usize,
    h: usize,
}

impl Grid<'_> {
    #[inline]
    fn at(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h && self.px[y as usize * self.w + x as usize]
    }

    fn ring(&self, x: usize, y: usize) -> [bool; 8] {
        RING.map(|(dx, dy)| self.at(x as isize + dx, y as isize + dy))
    }
}

/// Skeleton pixels among the 8 neighbors of `(x, y)`.
pub fn neighbor_count(skel: &[bool], w: usize, h: usize, x: usize, y: usize) -> usize {
    Grid { px: skel, w, h }.ring(x, y).iter().filter(|&&b| b).count()
}

/// 0→1 transitions around the ring (Zhang–Suen `A`).
fn transitions(n: &[bool; 8]) -> usize {
    (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count()
}

/// Yokoi connectivity number for 8-connectivity; 1 means removing the
/// pixel preserves topology.
fn yokoi8(n: &[bool; 8]) -> usize {
    // Yokoi indexes from east counter-clockwise; RING starts north clockwise
    let x = |k: usize| -> i32 {
        let ring_index = [2, 1, 0, 7, 6, 5, 4, 3][k % 8];
        i32::from(!n[ring_index])
    };
    [0, 2, 4, 6]
        .iter()
        .map(|&k| x(k) - x(k) * x(k + 1) * x(k + 2))
        .sum::<i32>() as usize
}

/// Zhang–Suen thinning followed by removal of non-end simple pixels, which
/// strips the staircase corners Zhang–Suen leaves on diagonals.
pub fn thin(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut px = mask.to_vec();
    let mut remove = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            remove.clear();
            let g = Grid { px: &px, w, h };
            for y in 0..h {
                for x in 0..w {
                    if !px[y * w + x] {
                        continue;
                    }
                    let n = g.ring(x, y);
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) || transitions(&n) != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        remove.push(y * w + x);
                    }
                }
            }
            changed |= !remove.is_empty();
            for &i in &remove {
                px[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
    remove_simple_points(&mut px, w, h);
    px
}

fn remove_simple_points(px: &mut [bool], w: usize, h: usize) {
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if !px[y * w + x] {
                    continue;
                }
                let n = Grid { px, w, h }.ring(x, y);
                if n.iter().filter(|&&v| v).count() >= 2 && yokoi8(&n) == 1 {
                    px[y * w + x] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

fn neighbors(w: usize, h: usize, x: usize, y: usize) -> impl Iterator<Item = (usize, usize)> {
    RING.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h).then_some((nx as usize, ny as usize))
    })
}

/// Removes end branches of at most `max_len` pixels that run into a branch
/// pixel, then re-thins the junction they leave behind.
pub fn prune_spurs(skel: &[bool], w: usize, h: usize, max_len: usize) -> Vec<bool> {
    let mut out = skel.to_vec();
    if max_len == 0 {
        return out;
    }
    let count = |px: &[bool], x, y| neighbor_count(px, w, h, x, y);
    let mut doomed = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !skel[y * w + x] || count(skel, x, y) != 1 {
                continue;
            }
            let mut path = vec![(x, y)];
            let (mut cx, mut cy) = (x, y);
            let reached_branch = loop {
                let next: Vec<(usize, usize)> = neighbors(w, h, cx, cy)
                    .filter(|&(nx, ny)| skel[ny * w + nx] && !path.contains(&(nx, ny)))
                    .collect();
                if next.len() != 1 {
                    break false;
                }
                let (nx, ny) = next[0];
                if count(skel, nx, ny) >= 3 {
                    break true;
                }
                path.push((nx, ny));
                if path.len() > max_len {
                    break false;
                }
                (cx, cy) = (nx, ny);
            };
            if reached_branch && path.len() <= max_len {
                doomed.extend(path);
            }
        }
    }
    for (x, y) in doomed {
        out[y * w + x] = false;
    }
    remove_simple_points(&mut out, w, h);
    out
}

/// Groups of branch pixels (3+ skeleton neighbors) linked within `radius`.
pub fn junction_clusters(skel: &[bool], w: usize, h: usize, radius: f64) -> Vec<Vec<(usize, usize)>> {
    let mut branch = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            branch[y * w + x] = skel[y * w + x] && neighbor_count(skel, w, h, x, y) >= 3;
        }
    }
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    let mut seen = vec![false; w * h];
    let mut clusters = Vec::new();
    for start in 0..w * h {
        if !branch[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut cluster = Vec::new();
        let mut queue = VecDeque::from([(start % w, start / w)]);
        while let Some((x, y)) = queue.pop_front() {
            cluster.push((x, y));
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h || ((dx * dx + dy * dy) as f64) > r2 {
                        continue;
                    }
                    let i = ny as usize * w + nx as usize;
                    if branch[i] && !seen[i] {
                        seen[i] = true;
                        queue.push_back((nx as usize, ny as usize));
                    }
                }
            }
        }
        cluster.sort_unstable_by_key(|&(x, y)| (y, x));
        clusters.push(cluster);
    }
    clusters
}

/// Number of skeleton branches leaving a pixel cluster: 8-connected groups
/// of skeleton pixels that touch the cluster from outside.
pub fn branch_count(skel: &[bool], w: usize, h: usize, cluster: &[(usize, usize)]) -> usize {
    let inside = |x: usize, y: usize| cluster.contains(&(x, y));
    let mut rim: Vec<(usize, usize)> = cluster
        .iter()
        .flat_map(|&(x, y)| neighbors(w, h, x, y))
        .filter(|&(x, y)| skel[y * w + x] && !inside(x, y))
        .collect();
    rim.sort_unstable();
    rim.dedup();
    let mut groups = 0;
    let mut done = vec![false; rim.len()];
    for s in 0..rim.len() {
        if done[s] {
            continue;
        }
        groups += 1;
        done[s] = true;
        let mut stack = vec![s];
        while let Some(i) = stack.pop() {
            for j in 0..rim.len() {
                let adjacent = rim[i].0.abs_diff(rim[j].0) <= 1 && rim[i].1.abs_diff(rim[j].1) <= 1;
                if !done[j] && adjacent {
                    done[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    groups
}

fn centroid(pts: &[(f64, f64, usize)]) -> (f64, f64, usize) {
    let n: usize = pts.iter().map(|p| p.2).sum();
    let sx: f64 = pts.iter().map(|p| p.0 * p.2 as f64).sum();
    let sy: f64 = pts.iter().map(|p| p.1 * p.2 as f64).sum();
    (sx / n as f64, sy / n as f64, n)
}

/// Replaces points closer than `dist` by their weighted centroid until no
/// such pair remains.
fn merge_close(points: &mut Vec<(f64, f64, usize)>, dist: f64) {
    let d2 = dist * dist;
    loop {
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut changed = false;
        let mut i = 0;
        while i < points.len() {
            let mut j = i + 1;
            while j < points.len() && points[j].0 - points[i].0 <= dist {
                let (a, b) = (points[i], points[j]);
                if (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2) <= d2 {
                    points[i] = centroid(&[a, b]);
                    points.remove(j);
                    changed = true;
                } else {
                    j += 1;
                }
            }
            i += 1;
        }
        if !changed {
            break;
        }
    }
}

/// Ground-truth defects of `phase`: thinned skeleton, spur pruning,
/// endpoints as terminals, merged branch-pixel clusters as junctions, and a
/// border margin.
pub fn skeleton_ground_truth(field: &BinaryField, phase: Phase, cfg: &SkeletonConfig) -> GroundTruth {
    let (w, h) = (field.width, field.height);
    let skel = thin(&field.phase_mask(phase), w, h);
    let skel = prune_spurs(&skel, w, h, cfg.spur_length);

    // (x, y, pixel weight) per junction, merged until well separated
    let mut junctions: Vec<(f64, f64, usize)> = junction_clusters(&skel, w, h, cfg.merge_radius)
        .iter()
        .map(|c| centroid(&c.iter().map(|&(x, y)| (x as f64, y as f64, 1)).collect::<Vec<_>>()))
        .collect();
    merge_close(&mut junctions, cfg.junction_separation);

    let inside = |x: f64, y: f64| {
        x >= cfg.border_margin
            && y >= cfg.border_margin
            && (w - 1) as f64 - x >= cfg.border_margin
            && (h - 1) as f64 - y >= cfg.border_margin
    };
    let mut points = Vec::new();
    for (x, y, _) in junctions {
        if inside(x, y) {
            points.push(GtPoint {
                x: x.round() as usize,
                y: y.round() as usize,
                class: DefectClass::Junction,
            });
        }
    }
    // ends of tiny dot-like segments coincide; merge them like junctions
    let mut ends: Vec<(f64, f64, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if skel[y * w + x] && neighbor_count(&skel, w, h, x, y) == 1 {
                ends.push((x as f64, y as f64, 1));
            }
        }
    }
    merge_close(&mut ends, cfg.merge_radius);
    for (x, y, _) in ends {
        if inside(x, y) {
            points.push(GtPoint {
                x: x.round() as usize,
                y: y.round() as usize,
                class: DefectClass::Terminal,
            });
        }
    }
    points.sort_by_key(|p| (p.y, p.x, p.class as u8));
    GroundTruth { phase, points }
}
