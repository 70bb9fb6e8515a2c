//! Procedural junction/terminal templates, their don't-care masks and the
//! full rotation-swept bank.
//!
//! Angles are in degrees, counter-clockwise from the +x axis as seen on
//! screen (pixel rows grow downward, so a ray at 90° points up). All
//! geometry is measured from the center pixel `(10, 10)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TEMPLATE_SIDE: usize = 21;
const CENTER: f64 = (TEMPLATE_SIDE / 2) as f64;
/// Subsamples per axis used for coverage estimates.
const SUPERSAMPLE: usize = 8;
/// Long enough to leave the 21×21 grid from the center in any direction.
const RAY_LENGTH: f64 = 16.0;

/// Template counts quoted for the original bank.
pub const REFERENCE_JUNCTION_COUNT: usize = 439;
pub const REFERENCE_TERMINAL_COUNT: usize = 120;
pub const REFERENCE_BANK_SIZE: usize = 1917;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectClass {
    Junction,
    Terminal,
}

impl DefectClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DefectClass::Junction => "junction",
            DefectClass::Terminal => "terminal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JunctionParams {
    pub alpha: u16,
    pub beta: u16,
    pub gamma: u16,
}

impl JunctionParams {
    pub fn angles(&self) -> [u16; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    /// The two in-order gaps followed by the wrap-around gap.
    pub fn gaps(&self) -> [u16; 3] {
        [
            self.beta - self.alpha,
            self.gamma - self.beta,
            360 + self.alpha - self.gamma,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TerminalParams {
    pub alpha: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "lowercase")]
pub enum Params {
    Junction(JunctionParams),
    Terminal(TerminalParams),
}

impl Params {
    pub fn class(&self) -> DefectClass {
        match self {
            Params::Junction(_) => DefectClass::Junction,
            Params::Terminal(_) => DefectClass::Terminal,
        }
    }

    fn label(&self) -> String {
        match self {
            Params::Junction(p) => format!("junction({}, {}, {})", p.alpha, p.beta, p.gamma),
            Params::Terminal(p) => format!("terminal({})", p.alpha),
        }
    }
}

/// Which junction gaps the 70°–190° constraint applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapRule {
    /// Only `beta - alpha` and `gamma - beta`.
    #[default]
    TwoGap,
    /// Also the wrap-around gap `360 + alpha - gamma`.
    ThreeGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JunctionMaskType {
    /// Background band parallel to the strips.
    A,
    /// Background wedges between the strips.
    B,
}

/// Band widths of one mask, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub w_bg: i32,
    pub w_bs: u32,
    pub w_sp: u32,
    #[serde(default)]
    pub r_bg: Option<u32>,
    #[serde(default)]
    pub r_bs: Option<u32>,
    /// Present for junction masks only.
    #[serde(default)]
    pub mask_type: Option<JunctionMaskType>,
}

impl MaskSpec {
    pub const fn junction(w_bg: i32, w_bs: u32, w_sp: u32, mask_type: JunctionMaskType) -> Self {
        Self {
            w_bg,
            w_bs,
            w_sp,
            r_bg: None,
            r_bs: None,
            mask_type: Some(mask_type),
        }
    }

    pub const fn terminal(w_bg: i32, w_bs: u32, w_sp: u32, r_bg: u32, r_bs: u32) -> Self {
        Self {
            w_bg,
            w_bs,
            w_sp,
            r_bg: Some(r_bg),
            r_bs: Some(r_bs),
            mask_type: None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.w_sp < 1 {
            return Err("w_sp must be at least 1".into());
        }
        if let (Some(bg), Some(bs)) = (self.r_bg, self.r_bs) {
            if bg < bs {
                return Err(format!("r_bg {bg} smaller than r_bs {bs}"));
            }
        }
        Ok(())
    }
}

/// The three junction masks of the default table.
pub const DEFAULT_JUNCTION_MASKS: [MaskSpec; 3] = [
    MaskSpec::junction(1, 7, 3, JunctionMaskType::A),
    MaskSpec::junction(3, 5, 2, JunctionMaskType::A),
    MaskSpec::junction(-6, 6, 2, JunctionMaskType::B),
];

/// The five terminal masks of the default table: `(w_bg, w_bs, w_sp, r_bg, r_bs)`.
pub const DEFAULT_TERMINAL_MASKS: [MaskSpec; 5] = [
    MaskSpec::terminal(2, 3, 2, 5, 2),
    MaskSpec::terminal(1, 5, 2, 5, 3),
    MaskSpec::terminal(0, 4, 2, 7, 4),
    MaskSpec::terminal(1, 6, 2, 10, 8),
    MaskSpec::terminal(0, 7, 2, 8, 4),
];

/// Mask table as stored on disk (`--masks` option of the CLI).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskTable {
    pub junction: Vec<MaskSpec>,
    pub terminal: Vec<MaskSpec>,
}

impl Default for MaskTable {
    fn default() -> Self {
        Self {
            junction: DEFAULT_JUNCTION_MASKS.to_vec(),
            terminal: DEFAULT_TERMINAL_MASKS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateConfig {
    /// Line width used when drawing template strips.
    pub stroke: f64,
    pub gap_rule: GapRule,
    pub masks: MaskTable,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            stroke: 3.0,
            gap_rule: GapRule::TwoGap,
            masks: MaskTable::default(),
        }
    }
}

/// All junction angle triples on the 15° grid satisfying the gap rule,
/// in lexicographic order.
pub fn enumerate_junction_params(rule: GapRule) -> Vec<JunctionParams> {
    let ok = |gap: u16| (70..=190).contains(&gap);
    let mut out = Vec::new();
    for alpha in (0..360).step_by(15) {
        for beta in (alpha + 15..360).step_by(15) {
            for gamma in (beta + 15..360).step_by(15) {
                let p = JunctionParams { alpha, beta, gamma };
                let [g1, g2, wrap] = p.gaps();
                if ok(g1) && ok(g2) && (rule == GapRule::TwoGap || ok(wrap)) {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// `[0, 3, 6, ..., 357]`.
pub fn enumerate_terminal_params() -> Vec<TerminalParams> {
    (0..360).step_by(3).map(|alpha| TerminalParams { alpha }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    data: Vec<f64>,
    params: Params,
}

impl Template {
    pub fn side(&self) -> usize {
        TEMPLATE_SIDE
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn params(&self) -> Params {
        self.params
    }

    pub fn class(&self) -> DefectClass {
        self.params.class()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * TEMPLATE_SIDE + x]
    }
}

/// Role of a mask pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Strip,
    Background,
    Discarded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    bands: Vec<Band>,
    spec: MaskSpec,
}

impl Mask {
    pub fn side(&self) -> usize {
        TEMPLATE_SIDE
    }

    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    #[inline]
    pub fn considered(&self, idx: usize) -> bool {
        self.bands[idx] != Band::Discarded
    }

    /// 1 for considered pixels, 0 for don't care.
    pub fn weights(&self) -> Vec<f64> {
        (0..self.bands.len()).map(|i| if self.considered(i) { 1.0 } else { 0.0 }).collect()
    }

    pub fn considered_count(&self) -> usize {
        self.bands.iter().filter(|b| **b != Band::Discarded).count()
    }

    /// A mask that considers every pixel (plain NCC).
    pub fn full() -> Self {
        Self {
            bands: vec![Band::Background; TEMPLATE_SIDE * TEMPLATE_SIDE],
            spec: MaskSpec::junction(0, 0, 1, JunctionMaskType::A),
        }
    }
}

#[inline]
fn direction(deg: u16) -> (f64, f64) {
    // exact for the quarter turns so mirrored templates stay bit-identical
    let (c, s) = match deg % 360 {
        0 => (1.0, 0.0),
        90 => (0.0, 1.0),
        180 => (-1.0, 0.0),
        270 => (0.0, -1.0),
        d => {
            let r = (d as f64).to_radians();
            (r.cos(), r.sin())
        }
    };
    (c, -s)
}

/// Distance from `(px, py)` (relative to the center) to the segment running
/// from the center along `dir`.
#[inline]
fn ray_distance(px: f64, py: f64, dir: (f64, f64)) -> f64 {
    let t = (px * dir.0 + py * dir.1).clamp(0.0, RAY_LENGTH);
    let (dx, dy) = (px - t * dir.0, py - t * dir.1);
    (dx * dx + dy * dy).sqrt()
}

fn subsample_offsets() -> [f64; SUPERSAMPLE] {
    let mut out = [0.0; SUPERSAMPLE];
    for (k, o) in out.iter_mut().enumerate() {
        *o = (k as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
    }
    out
}

/// Renders `1 - coverage(ink)` on the 21×21 grid.
fn render(ink: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    let offsets = subsample_offsets();
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut data = Vec::with_capacity(TEMPLATE_SIDE * TEMPLATE_SIDE);
    for y in 0..TEMPLATE_SIDE {
        for x in 0..TEMPLATE_SIDE {
            let mut hits = 0usize;
            for oy in offsets {
                for ox in offsets {
                    if ink(x as f64 - CENTER + ox, y as f64 - CENTER + oy) {
                        hits += 1;
                    }
                }
            }
            data.push(1.0 - hits as f64 / total);
        }
    }
    data
}

pub fn render_junction_template(p: JunctionParams, stroke: f64) -> Template {
    let dirs = p.angles().map(direction);
    let half = stroke / 2.0;
    let data = render(|x, y| dirs.iter().any(|&d| ray_distance(x, y, d) <= half));
    Template {
        data,
        params: Params::Junction(p),
    }
}

/// Single strip leaving the center along `alpha`, with a round cap of radius
/// `ceil(stroke / 2)` at the center (the stripe tip).
pub fn render_terminal_template(p: TerminalParams, stroke: f64) -> Template {
    let dir = direction(p.alpha);
    let half = stroke / 2.0;
    let cap = half.ceil();
    let data = render(|x, y| ray_distance(x, y, dir) <= half || (x * x + y * y).sqrt() <= cap);
    Template {
        data,
        params: Params::Terminal(p),
    }
}

/// Classifies each subsample with `band` and thresholds the considered
/// coverage at one half.
fn rasterize_mask(band: impl Fn(f64, f64) -> Band) -> Vec<Band> {
    let offsets = subsample_offsets();
    let half = (SUPERSAMPLE * SUPERSAMPLE) / 2;
    let mut out = Vec::with_capacity(TEMPLATE_SIDE * TEMPLATE_SIDE);
    for y in 0..TEMPLATE_SIDE {
        for x in 0..TEMPLATE_SIDE {
            let (mut strip, mut bg) = (0usize, 0usize);
            for oy in offsets {
                for ox in offsets {
                    match band(x as f64 - CENTER + ox, y as f64 - CENTER + oy) {
                        Band::Strip => strip += 1,
                        Band::Background => bg += 1,
                        Band::Discarded => {}
                    }
                }
            }
            out.push(if strip + bg < half {
                Band::Discarded
            } else if strip >= bg {
                Band::Strip
            } else {
                Band::Background
            });
        }
    }
    out
}

fn junction_mask(p: JunctionParams, spec: MaskSpec) -> Result<Mask> {
    let gen_err = |detail: String| Error::Generation {
        params: Params::Junction(p).label(),
        detail,
    };
    spec.validate().map_err(gen_err)?;
    let dirs = p.angles().map(direction);
    let strip_edge = spec.w_sp as f64 / 2.0;
    let discard_edge = strip_edge + spec.w_bs as f64;
    let kind = spec.mask_type.unwrap_or(JunctionMaskType::A);
    let reach = discard_edge + spec.w_bg.unsigned_abs() as f64;
    let bands = rasterize_mask(|x, y| {
        let d = dirs.iter().map(|&dir| ray_distance(x, y, dir)).fold(f64::INFINITY, f64::min);
        if d <= strip_edge {
            return Band::Strip;
        }
        if d <= discard_edge {
            return Band::Discarded;
        }
        let background = match kind {
            JunctionMaskType::A => d <= reach,
            // wedges between the strips, clear of the discarded band and
            // limited to radius `reach` from the center
            JunctionMaskType::B => (x * x + y * y).sqrt() <= reach,
        };
        if background {
            Band::Background
        } else {
            Band::Discarded
        }
    });
    finish_mask(bands, spec, Params::Junction(p))
}

fn terminal_mask(p: TerminalParams, spec: MaskSpec) -> Result<Mask> {
    let gen_err = |detail: String| Error::Generation {
        params: Params::Terminal(p).label(),
        detail,
    };
    spec.validate().map_err(gen_err)?;
    let (Some(r_bg), Some(r_bs)) = (spec.r_bg, spec.r_bs) else {
        return Err(gen_err("terminal masks need both r_bg and r_bs".into()));
    };
    let dir = direction(p.alpha);
    let strip_edge = spec.w_sp as f64 / 2.0;
    let discard_edge = strip_edge + spec.w_bs as f64;
    let bg_edge = discard_edge + spec.w_bg.max(0) as f64;
    let (r_bg, r_bs) = (r_bg as f64, r_bs as f64);
    let bands = rasterize_mask(|x, y| {
        let r = (x * x + y * y).sqrt();
        if ray_distance(x, y, dir) <= strip_edge {
            return Band::Strip;
        }
        // side bands run alongside the strip only; the region ahead of the
        // tip is shaped by the two circles
        let along = x * dir.0 + y * dir.1;
        let side = if along >= 0.0 {
            (x * dir.1 - y * dir.0).abs()
        } else {
            f64::INFINITY
        };
        if side <= discard_edge || r <= r_bs {
            Band::Discarded
        } else if side <= bg_edge || r <= r_bg {
            Band::Background
        } else {
            Band::Discarded
        }
    });
    finish_mask(bands, spec, Params::Terminal(p))
}

fn finish_mask(bands: Vec<Band>, spec: MaskSpec, params: Params) -> Result<Mask> {
    let mask = Mask { bands, spec };
    let strip = mask.bands.iter().filter(|b| **b == Band::Strip).count();
    let bg = mask.bands.iter().filter(|b| **b == Band::Background).count();
    let detail = if strip + bg < 9 {
        Some(format!("only {} considered pixels", strip + bg))
    } else if strip == 0 || bg == 0 {
        Some(format!("considered region lacks a band (strip {strip}, background {bg})"))
    } else {
        None
    };
    match detail {
        Some(detail) => Err(Error::Generation {
            params: params.label(),
            detail,
        }),
        None => Ok(mask),
    }
}

pub fn build_junction_masks(p: JunctionParams, specs: &[MaskSpec]) -> Result<Vec<Mask>> {
    specs.iter().map(|&s| junction_mask(p, s)).collect()
}

pub fn build_terminal_masks(p: TerminalParams, specs: &[MaskSpec]) -> Result<Vec<Mask>> {
    specs.iter().map(|&s| terminal_mask(p, s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub template: usize,
    pub mask_index: usize,
    pub mask: Mask,
}

/// Enumeration counts recorded alongside a bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMetadata {
    pub gap_rule: GapRule,
    pub stroke: f64,
    pub junction_templates: usize,
    pub terminal_templates: usize,
    pub junction_masks: usize,
    pub terminal_masks: usize,
    pub entries: usize,
    pub reference_junction_templates: usize,
    pub reference_terminal_templates: usize,
    pub reference_entries: usize,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    templates: Vec<Template>,
    entries: Vec<BankEntry>,
    metadata: BankMetadata,
}

impl TemplateBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn entry(&self, i: usize) -> (&Template, &Mask) {
        let e = &self.entries[i];
        (&self.templates[e.template], &e.mask)
    }

    pub fn class_of(&self, i: usize) -> DefectClass {
        self.templates[self.entries[i].template].class()
    }

    pub fn metadata(&self) -> &BankMetadata {
        &self.metadata
    }

    /// A bank holding exactly the given pairs; metadata counts are derived
    /// from the templates.
    pub fn from_pairs(pairs: Vec<(Template, Mask)>) -> Self {
        let mut templates = Vec::new();
        let mut entries = Vec::new();
        for (t, m) in pairs {
            let idx = match templates.iter().position(|x: &Template| *x == t) {
                Some(i) => i,
                None => {
                    templates.push(t);
                    templates.len() - 1
                }
            };
            let mask_index = entries.iter().filter(|e: &&BankEntry| e.template == idx).count();
            entries.push(BankEntry {
                template: idx,
                mask_index,
                mask: m,
            });
        }
        let j = templates.iter().filter(|t| t.class() == DefectClass::Junction).count();
        let metadata = BankMetadata {
            gap_rule: GapRule::TwoGap,
            stroke: 0.0,
            junction_templates: j,
            terminal_templates: templates.len() - j,
            junction_masks: 0,
            terminal_masks: 0,
            entries: entries.len(),
            reference_junction_templates: REFERENCE_JUNCTION_COUNT,
            reference_terminal_templates: REFERENCE_TERMINAL_COUNT,
            reference_entries: REFERENCE_BANK_SIZE,
            note: "custom bank".into(),
        };
        Self {
            templates,
            entries,
            metadata,
        }
    }

    /// Keeps every `stride`-th template (with all of its masks). Used for
    /// quick previews; detection quality drops accordingly.
    pub fn thinned(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let keep: Vec<usize> = (0..self.templates.len()).filter(|i| i % stride == 0).collect();
        let templates = keep.iter().map(|&i| self.templates[i].clone()).collect();
        let entries = self
            .entries
            .iter()
            .filter_map(|e| {
                keep.iter().position(|&k| k == e.template).map(|t| BankEntry {
                    template: t,
                    ..e.clone()
                })
            })
            .collect::<Vec<_>>();
        let mut metadata = self.metadata.clone();
        metadata.entries = entries.len();
        metadata.note = format!("{} (thinned by {stride})", metadata.note);
        Self {
            templates,
            entries,
            metadata,
        }
    }
}

/// Builds every template and mask. Entry order: junction params × junction
/// masks, then terminal params × terminal masks.
pub fn build_bank(config: &TemplateConfig) -> Result<TemplateBank> {
    let junctions = enumerate_junction_params(config.gap_rule);
    let terminals = enumerate_terminal_params();
    let jm = &config.masks.junction;
    let tm = &config.masks.terminal;

    let built: Vec<(Template, Vec<Mask>)> = junctions
        .par_iter()
        .map(|&p| Ok((render_junction_template(p, config.stroke), build_junction_masks(p, jm)?)))
        .chain(
            terminals
                .par_iter()
                .map(|&p| Ok((render_terminal_template(p, config.stroke), build_terminal_masks(p, tm)?))),
        )
        .collect::<Result<_>>()?;

    let mut templates = Vec::with_capacity(built.len());
    let mut entries = Vec::new();
    for (idx, (template, masks)) in built.into_iter().enumerate() {
        templates.push(template);
        for (mask_index, mask) in masks.into_iter().enumerate() {
            entries.push(BankEntry {
                template: idx,
                mask_index,
                mask,
            });
        }
    }

    let j = junctions.len();
    let note = if j == REFERENCE_JUNCTION_COUNT {
        "junction count matches the reference".to_string()
    } else {
        format!(
            "{:?} enumeration yields {j} junction templates; reference count is {REFERENCE_JUNCTION_COUNT} ({:+})",
            config.gap_rule,
            j as i64 - REFERENCE_JUNCTION_COUNT as i64
        )
    };
    let metadata = BankMetadata {
        gap_rule: config.gap_rule,
        stroke: config.stroke,
        junction_templates: j,
        terminal_templates: terminals.len(),
        junction_masks: jm.len(),
        terminal_masks: tm.len(),
        entries: entries.len(),
        reference_junction_templates: REFERENCE_JUNCTION_COUNT,
        reference_terminal_templates: REFERENCE_TERMINAL_COUNT,
        reference_entries: REFERENCE_BANK_SIZE,
        note,
    };
    log::info!("template bank: {} entries ({})", metadata.entries, metadata.note);
    Ok(TemplateBank {
        templates,
        entries,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_junction_count(wrap: bool) -> usize {
        let mut n = 0;
        for a in 0..360u32 {
            for b in 0..360u32 {
                for c in 0..360u32 {
                    if a % 15 != 0 || b % 15 != 0 || c % 15 != 0 || !(a < b && b < c) {
                        continue;
                    }
                    let g = |x: u32| (70..=190).contains(&x);
                    if g(b - a) && g(c - b) && (!wrap || g(360 + a - c)) {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    #[test]
    fn junction_enumeration_matches_brute_force() {
        let two = enumerate_junction_params(GapRule::TwoGap);
        let three = enumerate_junction_params(GapRule::ThreeGap);
        assert_eq!(two.len(), brute_force_junction_count(false));
        assert_eq!(three.len(), brute_force_junction_count(true));
        assert_eq!(two.len(), 448);
        assert_eq!(three.len(), 368);
        assert!(two.contains(&JunctionParams { alpha: 60, beta: 180, gamma: 300 }));
        assert!(!two.contains(&JunctionParams { alpha: 0, beta: 15, gamma: 30 }));
        assert!(two.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn terminal_enumeration() {
        let t = enumerate_terminal_params();
        assert_eq!(t.len(), 120);
        assert_eq!(t[0].alpha, 0);
        assert_eq!(t[11].alpha, 33);
        assert!(t.iter().any(|p| p.alpha == 30));
        assert!(t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn junction_template_center_is_strip() {
        let t = render_junction_template(JunctionParams { alpha: 60, beta: 180, gamma: 300 }, 3.0);
        assert_eq!(t.get(10, 10), 0.0);
        assert_eq!(t.side(), 21);
        let again = render_junction_template(JunctionParams { alpha: 60, beta: 180, gamma: 300 }, 3.0);
        assert_eq!(t, again);
    }

    #[test]
    fn terminal_half_turn_is_grid_flip() {
        let a = render_terminal_template(TerminalParams { alpha: 0 }, 3.0);
        let b = render_terminal_template(TerminalParams { alpha: 180 }, 3.0);
        for y in 0..21 {
            for x in 0..21 {
                assert_eq!(a.get(x, y), b.get(20 - x, 20 - y));
            }
        }
        assert_eq!(a.get(10, 10), 0.0);
    }

    #[test]
    fn junction_masks_have_disjoint_bands_and_both_roles() {
        let p = JunctionParams { alpha: 60, beta: 180, gamma: 300 };
        let masks = build_junction_masks(p, &DEFAULT_JUNCTION_MASKS).unwrap();
        assert_eq!(masks.len(), 3);
        assert_eq!(masks[0].spec().w_bg, 1);
        assert_eq!(masks[2].spec().w_bg, -6);
        for m in &masks {
            let n = m.considered_count();
            assert!(n > 9 && n < 441, "considered {n}");
        }
    }

    #[test]
    fn terminal_masks_keep_tip_center() {
        let masks = build_terminal_masks(TerminalParams { alpha: 30 }, &DEFAULT_TERMINAL_MASKS).unwrap();
        assert_eq!(masks.len(), 5);
        for m in &masks {
            assert_eq!(m.bands()[10 * 21 + 10], Band::Strip);
        }
        assert_eq!(masks[3].spec().r_bg, Some(10));
    }

    #[test]
    fn empty_mask_is_rejected() {
        let spec = MaskSpec::junction(0, 20, 2, JunctionMaskType::A);
        let err = build_junction_masks(JunctionParams { alpha: 0, beta: 120, gamma: 240 }, &[spec]).unwrap_err();
        assert!(err.to_string().contains("junction(0, 120, 240)"));
    }
}
