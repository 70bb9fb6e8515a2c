//! Masked normalized cross-correlation, per-pixel fusion over the template
//! bank and flood-fill non-maximum suppression.
//!
//! For a window with mask support `M` (`n = |M|` pixels) the score is
//!
//! ```text
//!            sum_M T~ I~
//! score = -----------------------    T~ = T - mean_M T,  I~ = I - mean_M I
//!         sqrt(sum_M T~^2 sum_M I~^2)
//! ```
//!
//! Since `sum_M T~ = 0`, the numerator equals `sum_M T~ I`, and
//! `sum_M I~^2 = sum_M I^2 - (sum_M I)^2 / n`. All three window sums come
//! from FFT correlations (see [`fft`]).

pub mod fft;

use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::image::GrayImage;
use crate::templates::{DefectClass, Mask, Template, TemplateBank, TEMPLATE_SIDE};
use fft::{Tap, TilePlan, Workspace, DEFAULT_TILE};

/// Window variance (`sum_M I~^2`) below which a window counts as flat.
pub const FLAT_EPSILON: f64 = 1e-9;
/// Score assigned where no full window fits.
pub const MARGIN_SCORE: f64 = -1.0;
/// Fraction of the detection threshold that bounds the flood fill.
pub const REGION_FRACTION: f64 = 0.8;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
}

impl ScoreMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.scores[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub width: usize,
    pub height: usize,
    pub best_score: Vec<f64>,
    pub best_entry: Vec<u32>,
}

impl CorrelationMap {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            best_score: vec![f64::NEG_INFINITY; width * height],
            best_entry: vec![0; width * height],
        }
    }

    pub fn score(&self, x: usize, y: usize) -> f64 {
        self.best_score[y * self.width + x]
    }

    /// Folds `map` (bank entry `entry`) in. Earlier entries win ties when
    /// maps are folded in increasing entry order.
    fn fold(&mut self, map: &[f64], entry: u32) {
        for ((best, idx), &s) in self.best_score.iter_mut().zip(self.best_entry.iter_mut()).zip(map) {
            if s > *best {
                *best = s;
                *idx = entry;
            }
        }
    }

    fn fold_run(&mut self, start: usize, run: &[f64], entry: u32) {
        let best = &mut self.best_score[start..start + run.len()];
        let idx = &mut self.best_entry[start..start + run.len()];
        for ((b, i), &s) in best.iter_mut().zip(idx.iter_mut()).zip(run) {
            if s > *b {
                *b = s;
                *i = entry;
            }
        }
    }

    /// Merges a partial result covering strictly higher entry indices.
    fn merge_later(&mut self, later: &CorrelationMap) {
        for i in 0..self.best_score.len() {
            if later.best_score[i] > self.best_score[i] {
                self.best_score[i] = later.best_score[i];
                self.best_entry[i] = later.best_entry[i];
            }
        }
    }

    /// 16-bit PNG with scores mapped linearly from `[-1, 1]` to `[0, 65535]`.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let pixels: Vec<u16> = self
            .best_score
            .iter()
            .map(|&s| (((s.clamp(-1.0, 1.0) + 1.0) / 2.0) * 65535.0).round() as u16)
            .collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, pixels)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::Encode {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Per-pixel maximum over `maps`; ties go to the lowest index.
pub fn fuse_maps(maps: &[ScoreMap]) -> Result<CorrelationMap> {
    let Some(first) = maps.first() else {
        return arg_err("cannot fuse an empty list of score maps");
    };
    if maps.iter().any(|m| (m.width, m.height) != (first.width, first.height)) {
        return arg_err("score maps differ in size");
    }
    let mut cm = CorrelationMap::new(first.width, first.height);
    for (i, m) in maps.iter().enumerate() {
        cm.fold(&m.scores, i as u32);
    }
    Ok(cm)
}

/// Kernel data for one (template, mask) pair.
#[derive(Debug, Clone)]
struct PreparedEntry {
    /// (ky, kx, mask weight, zero-mean masked template value)
    taps: Vec<(usize, usize, f64, f64)>,
    support: f64,
    template_energy: f64,
}

impl PreparedEntry {
    fn new(tpl: &Template, mask: &Mask) -> Result<Self> {
        let side = TEMPLATE_SIDE;
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..side * side {
            if mask.considered(i) {
                sum += tpl.data()[i];
                n += 1;
            }
        }
        if n == 0 {
            return arg_err("mask has no considered pixels");
        }
        let mean = sum / n as f64;
        let mut taps = Vec::with_capacity(n);
        let mut energy = 0.0;
        for i in 0..side * side {
            if mask.considered(i) {
                let t = tpl.data()[i] - mean;
                energy += t * t;
                taps.push((i / side, i % side, 1.0, t));
            }
        }
        if energy <= 0.0 {
            return arg_err("template is constant over its mask");
        }
        Ok(Self {
            taps,
            support: n as f64,
            template_energy: energy,
        })
    }

    fn sums_kernel(&self) -> Vec<Tap> {
        self.taps
            .iter()
            .map(|&(ky, kx, m, t)| Tap {
                ky,
                kx,
                value: Complex64::new(m, t),
            })
            .collect()
    }

    #[inline]
    fn score(&self, sum_i: f64, sum_ti: f64, sum_i2: f64) -> f64 {
        let var = sum_i2 - sum_i * sum_i / self.support;
        if var < FLAT_EPSILON {
            return 0.0;
        }
        (sum_ti / (self.template_energy * var).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Correlates one image against bank entries through tiled FFTs.
pub struct NccEngine {
    plan: TilePlan,
    width: usize,
    height: usize,
    image_spec: Vec<Complex64>,
    square_spec: Vec<Complex64>,
}

struct Buffers {
    ws: Workspace,
    ka: Vec<Complex64>,
    kb: Vec<Complex64>,
    kq: Vec<Complex64>,
    prod: Vec<Complex64>,
    sums_a: Vec<Complex64>,
    sums_b: Vec<Complex64>,
    row: Vec<f64>,
}

impl NccEngine {
    pub fn new(img: &GrayImage) -> Result<Self> {
        Self::with_tile(img, DEFAULT_TILE)
    }

    pub fn with_tile(img: &GrayImage, tile: usize) -> Result<Self> {
        let (w, h) = img.dims();
        if w < TEMPLATE_SIDE || h < TEMPLATE_SIDE {
            return arg_err(format!("image {w}x{h} smaller than the {TEMPLATE_SIDE}px template"));
        }
        if tile <= TEMPLATE_SIDE {
            return arg_err(format!("tile side {tile} must exceed the template side"));
        }
        let plan = TilePlan::new(w, h, TEMPLATE_SIDE, tile);
        let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
        // centered values keep the variance subtraction well conditioned
        let packed: Vec<Complex64> = img
            .data()
            .iter()
            .map(|&v| {
                let c = v - mean;
                Complex64::new(c, c * c)
            })
            .collect();
        let mut ws = plan.workspace();
        let z = plan.forward_tiles(&packed, w, h, &mut ws);
        let n = plan.spectrum_len();
        let mut image_spec = vec![Complex64::new(0.0, 0.0); z.len()];
        let mut square_spec = vec![Complex64::new(0.0, 0.0); z.len()];
        for t in 0..plan.origins.len() {
            let base = t * n;
            for k in 0..n {
                let m = z[base + plan.mirror(k)].conj();
                image_spec[base + k] = (z[base + k] + m) * 0.5;
                square_spec[base + k] = (z[base + k] - m) * Complex64::new(0.0, -0.5);
            }
        }
        Ok(Self {
            plan,
            width: w,
            height: h,
            image_spec,
            square_spec,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn buffers(&self) -> Buffers {
        Buffers {
            ws: self.plan.workspace(),
            ka: Vec::new(),
            kb: Vec::new(),
            kq: Vec::new(),
            prod: Vec::new(),
            sums_a: Vec::new(),
            sums_b: Vec::new(),
            row: Vec::new(),
        }
    }

    /// Scores one or two entries. `sink(k, y, x0, row)` receives each run of
    /// scores for entry `k` (0 = `a`, 1 = `b`) starting at pixel `(x0, y)`.
    fn correlate_pair(
        &self,
        a: &PreparedEntry,
        b: Option<&PreparedEntry>,
        bufs: &mut Buffers,
        mut sink: impl FnMut(usize, usize, usize, &[f64]),
    ) {
        let plan = &self.plan;
        let n = plan.spectrum_len();
        let tile = plan.tile;
        let r = TEMPLATE_SIDE / 2;
        let norm = plan.norm();
        plan.forward_kernel(&a.sums_kernel(), &mut bufs.ws, &mut bufs.ka);
        if let Some(b) = b {
            plan.forward_kernel(&b.sums_kernel(), &mut bufs.ws, &mut bufs.kb);
        }
        // mask-only spectra are the real-kernel parts of ka / kb
        bufs.kq.clear();
        bufs.kq.resize(n, Complex64::new(0.0, 0.0));
        let half = Complex64::new(0.5 * norm, 0.0);
        for row in 0..tile {
            let mrow = (tile - row) % tile;
            for col in 0..tile {
                let k = row * tile + col;
                let mk = mrow * tile + (tile - col) % tile;
                let ma = bufs.ka[k] + bufs.ka[mk].conj();
                let mb = match b {
                    Some(_) => bufs.kb[k] + bufs.kb[mk].conj(),
                    None => Complex64::new(0.0, 0.0),
                };
                bufs.kq[k] = (ma + Complex64::new(-mb.im, mb.re)) * half;
            }
        }
        for v in bufs.ka.iter_mut().chain(bufs.kb.iter_mut()) {
            *v *= norm;
        }

        for (t, o) in plan.origins.iter().enumerate() {
            let spec_i = &self.image_spec[t * n..(t + 1) * n];
            let spec_q = &self.square_spec[t * n..(t + 1) * n];

            bufs.prod.clear();
            bufs.prod.extend(bufs.ka.iter().zip(spec_i).map(|(k, s)| k * s));
            let out = plan.inverse(&mut bufs.prod, o.h, &mut bufs.ws);
            copy_block(out, tile, o.w, o.h, &mut bufs.sums_a);

            if b.is_some() {
                bufs.prod.clear();
                bufs.prod.extend(bufs.kb.iter().zip(spec_i).map(|(k, s)| k * s));
                let out = plan.inverse(&mut bufs.prod, o.h, &mut bufs.ws);
                copy_block(out, tile, o.w, o.h, &mut bufs.sums_b);
            }

            bufs.prod.clear();
            bufs.prod.extend(bufs.kq.iter().zip(spec_q).map(|(k, s)| k * s));
            let squares = plan.inverse(&mut bufs.prod, o.h, &mut bufs.ws);

            for y in 0..o.h {
                let sq = &squares[y * tile..y * tile + o.w];
                let sums = &bufs.sums_a[y * o.w..(y + 1) * o.w];
                bufs.row.clear();
                bufs.row
                    .extend(sums.iter().zip(sq).map(|(s, q)| a.score(s.re, s.im, q.re)));
                sink(0, o.y + y + r, o.x + r, &bufs.row);
                if let Some(b) = b {
                    let sums = &bufs.sums_b[y * o.w..(y + 1) * o.w];
                    bufs.row.clear();
                    bufs.row
                        .extend(sums.iter().zip(sq).map(|(s, q)| b.score(s.re, s.im, q.im)));
                    sink(1, o.y + y + r, o.x + r, &bufs.row);
                }
            }
        }
    }

    fn blank_map(&self) -> ScoreMap {
        ScoreMap {
            width: self.width,
            height: self.height,
            scores: vec![MARGIN_SCORE; self.width * self.height],
        }
    }

    /// Score map of a single (template, mask) pair.
    pub fn score_map(&self, tpl: &Template, mask: &Mask) -> Result<ScoreMap> {
        let e = PreparedEntry::new(tpl, mask)?;
        let mut bufs = self.buffers();
        let mut map = self.blank_map();
        let w = self.width;
        self.correlate_pair(&e, None, &mut bufs, |_, y, x0, row| {
            map.scores[y * w + x0..y * w + x0 + row.len()].copy_from_slice(row)
        });
        Ok(map)
    }

    /// Score maps for the listed bank entries, in the listed order.
    pub fn entry_maps(&self, bank: &TemplateBank, entries: &[usize]) -> Result<Vec<ScoreMap>> {
        let prepared = entries
            .iter()
            .map(|&i| {
                let (t, m) = bank.entry(i);
                PreparedEntry::new(t, m)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut bufs = self.buffers();
        let mut maps = Vec::with_capacity(prepared.len());
        let w = self.width;
        for pair in prepared.chunks(2) {
            let mut local = [self.blank_map(), self.blank_map()];
            self.correlate_pair(&pair[0], pair.get(1), &mut bufs, |k, y, x0, row| {
                local[k].scores[y * w + x0..y * w + x0 + row.len()].copy_from_slice(row)
            });
            let [m0, m1] = local;
            maps.push(m0);
            if pair.len() == 2 {
                maps.push(m1);
            }
        }
        Ok(maps)
    }

    /// Fused correlation map over the whole bank. Work is split into
    /// contiguous entry ranges that are merged back in index order, so the
    /// result does not depend on the thread count.
    pub fn correlate_bank(&self, bank: &TemplateBank) -> Result<CorrelationMap> {
        let prepared = (0..bank.len())
            .map(|i| {
                let (t, m) = bank.entry(i);
                PreparedEntry::new(t, m)
            })
            .collect::<Result<Vec<_>>>()?;
        let workers = rayon::current_num_threads().max(1);
        let pairs = prepared.len().div_ceil(2);
        let per_chunk = pairs.div_ceil(workers).max(1) * 2;
        let (w, h) = (self.width, self.height);
        let partials: Vec<CorrelationMap> = prepared
            .par_chunks(per_chunk)
            .enumerate()
            .map(|(c, chunk)| {
                let base = c * per_chunk;
                let mut cm = CorrelationMap::new(w, h);
                let mut bufs = self.buffers();
                for (p, pair) in chunk.chunks(2).enumerate() {
                    let first = (base + 2 * p) as u32;
                    self.correlate_pair(&pair[0], pair.get(1), &mut bufs, |k, y, x0, row| {
                        cm.fold_run(y * w + x0, row, first + k as u32)
                    });
                }
                cm
            })
            .collect();
        let mut iter = partials.into_iter();
        let mut fused = iter.next().unwrap_or_else(|| CorrelationMap::new(w, h));
        for later in iter {
            fused.merge_later(&later);
        }
        // pixels without a full window
        for s in fused.best_score.iter_mut() {
            if *s == f64::NEG_INFINITY {
                *s = MARGIN_SCORE;
            }
        }
        Ok(fused)
    }
}

fn copy_block(src: &[Complex64], stride: usize, w: usize, h: usize, dst: &mut Vec<Complex64>) {
    dst.clear();
    for y in 0..h {
        dst.extend_from_slice(&src[y * stride..y * stride + w]);
    }
}

/// Masked NCC of `tpl` over `img`; see the module docs for the formula.
pub fn masked_ncc_map(img: &GrayImage, tpl: &Template, mask: &Mask) -> Result<ScoreMap> {
    if tpl.side() != mask.side() {
        return arg_err("template and mask sizes differ");
    }
    NccEngine::new(img)?.score_map(tpl, mask)
}

/// Fused map `corr(x, y) = max_i NCC_i(x, y)` over every bank entry.
pub fn correlate_bank(img: &GrayImage, bank: &TemplateBank) -> Result<CorrelationMap> {
    if bank.is_empty() {
        return arg_err("template bank is empty");
    }
    NccEngine::new(img)?.correlate_bank(bank)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub x: usize,
    pub y: usize,
    pub score: f64,
    pub tentative_label: DefectClass,
    pub entry: usize,
}

/// Breadth-first non-maximum suppression over a working copy of the map.
/// Returns the candidates (in discovery order) and the residual map.
pub fn extract_peaks_with_residual(
    cm: &CorrelationMap,
    bank: &TemplateBank,
    t: f64,
) -> Result<(Vec<Candidate>, Vec<f64>)> {
    if !(t > 0.0 && t < 1.0) {
        return arg_err(format!("threshold must lie in (0, 1), got {t}"));
    }
    let (w, h) = (cm.width, cm.height);
    let low = REGION_FRACTION * t;
    let mut work = cm.best_score.clone();
    let mut out = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    let mut region = Vec::new();
    for start in 0..w * h {
        if work[start] <= t {
            continue;
        }
        let mut best = start;
        queue.clear();
        region.clear();
        queue.push_back(start);
        region.push(start);
        let mut best_value = work[start];
        // visited pixels hold a sentinel below `low` until the region is zeroed
        work[start] = f64::NEG_INFINITY;
        while let Some(p) = queue.pop_front() {
            let (px, py) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (px + dx, py + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    let v = work[q];
                    if v > low {
                        if v > best_value {
                            best_value = v;
                            best = q;
                        }
                        work[q] = f64::NEG_INFINITY;
                        queue.push_back(q);
                        region.push(q);
                    }
                }
            }
        }
        for &p in &region {
            work[p] = 0.0;
        }
        let entry = cm.best_entry[best] as usize;
        out.push(Candidate {
            x: best % w,
            y: best / w,
            score: best_value,
            tentative_label: bank.class_of(entry),
            entry,
        });
    }
    Ok((out, work))
}

/// Candidates at threshold `t`, discovered in row-major order.
pub fn extract_peaks(cm: &CorrelationMap, bank: &TemplateBank, t: f64) -> Result<Vec<Candidate>> {
    extract_peaks_with_residual(cm, bank, t).map(|(c, _)| c)
}
