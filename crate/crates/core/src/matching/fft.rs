//! Tiled (overlap-save) frequency-domain correlation of one image against
//! many small real kernels.
//!
//! The image is cut into square tiles of side `tile`, overlapping by
//! `kernel - 1` pixels, so every valid window lies wholly inside one tile and
//! circular correlation inside the tile is exact. Kernel spectra are only
//! `tile × tile`, and each tile transform stays in cache.
//!
//! Two real correlations share one complex transform: a kernel `K1 + i K2`
//! correlated with a real image yields `corr(K1) + i corr(K2)`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const DEFAULT_TILE: usize = 128;

/// Non-zero kernel tap at `(ky, kx)` with complex weight.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub ky: usize,
    pub kx: usize,
    pub value: Complex64,
}

/// Position of one tile in valid-output coordinates.
#[derive(Debug, Clone, Copy)]
pub struct TileOrigin {
    pub x: usize,
    pub y: usize,
    /// Valid outputs produced by this tile (clipped at the image edge).
    pub w: usize,
    pub h: usize,
}

pub struct TilePlan {
    pub tile: usize,
    /// Valid outputs per tile along each axis.
    pub step: usize,
    pub out_w: usize,
    pub out_h: usize,
    pub origins: Vec<TileOrigin>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch_len: usize,
}

impl TilePlan {
    /// Plan for correlating a `width × height` image with `kernel × kernel`
    /// kernels; valid outputs are `(width - kernel + 1) × (height - kernel + 1)`.
    pub fn new(width: usize, height: usize, kernel: usize, tile: usize) -> Self {
        assert!(tile > kernel && width >= kernel && height >= kernel);
        let step = tile - kernel + 1;
        let out_w = width - kernel + 1;
        let out_h = height - kernel + 1;
        let mut origins = Vec::new();
        for y in (0..out_h).step_by(step) {
            for x in (0..out_w).step_by(step) {
                origins.push(TileOrigin {
                    x,
                    y,
                    w: step.min(out_w - x),
                    h: step.min(out_h - y),
                });
            }
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(tile);
        let inv = planner.plan_fft_inverse(tile);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Self {
            tile,
            step,
            out_w,
            out_h,
            origins,
            fwd,
            inv,
            scratch_len,
        }
    }

    pub fn spectrum_len(&self) -> usize {
        self.tile * self.tile
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            buf: vec![ZERO; self.tile * self.tile],
            scratch: vec![ZERO; self.scratch_len],
        }
    }

    /// Spectrum of every tile of a row-major complex image
    /// (`width × height`), zero-padded past the image edge. Output is one
    /// transposed-layout spectrum per tile, concatenated.
    pub fn forward_tiles(&self, data: &[Complex64], width: usize, height: usize, ws: &mut Workspace) -> Vec<Complex64> {
        let n = self.tile;
        let mut out = vec![ZERO; self.origins.len() * n * n];
        for (t, o) in self.origins.iter().enumerate() {
            ws.buf.fill(ZERO);
            let rows = n.min(height - o.y);
            let cols = n.min(width - o.x);
            for r in 0..rows {
                let src = &data[(o.y + r) * width + o.x..][..cols];
                ws.buf[r * n..r * n + cols].copy_from_slice(src);
            }
            let dst = &mut out[t * n * n..(t + 1) * n * n];
            self.forward_in_place(ws, dst);
        }
        out
    }

    /// Spectrum of a kernel stored flipped, so that `inverse(K · I)` is the
    /// correlation `out(y, x) = sum K(ky, kx) I(y + ky, x + kx)`.
    pub fn forward_kernel(&self, taps: &[Tap], ws: &mut Workspace, out: &mut Vec<Complex64>) {
        let n = self.tile;
        ws.buf.fill(ZERO);
        for t in taps {
            let r = (n - t.ky) % n;
            let c = (n - t.kx) % n;
            ws.buf[r * n + c] += t.value;
        }
        out.clear();
        out.resize(n * n, ZERO);
        self.forward_in_place(ws, out);
    }

    /// Row transform of `ws.buf`, then column transform written to `dst` in
    /// transposed layout.
    fn forward_in_place(&self, ws: &mut Workspace, dst: &mut [Complex64]) {
        let n = self.tile;
        self.fwd.process_with_scratch(&mut ws.buf, &mut ws.scratch);
        transpose(&ws.buf, dst, n);
        self.fwd.process_with_scratch(dst, &mut ws.scratch);
    }

    /// Inverts a transposed-layout product spectrum (destroyed) and returns
    /// the row-major tile in `ws.buf`; only the first `rows` rows are valid.
    /// The result is scaled by `tile²`; fold [`Self::norm`] into a kernel to
    /// undo it.
    pub fn inverse<'a>(&self, spectrum: &mut [Complex64], rows: usize, ws: &'a mut Workspace) -> &'a [Complex64] {
        let n = self.tile;
        self.inv.process_with_scratch(spectrum, &mut ws.scratch);
        transpose_rows(spectrum, &mut ws.buf, n, rows);
        self.inv
            .process_with_scratch(&mut ws.buf[..rows * n], &mut ws.scratch);
        &ws.buf
    }

    pub fn norm(&self) -> f64 {
        1.0 / (self.tile * self.tile) as f64
    }

    /// Index of the spectral bin mirrored through the origin.
    #[inline]
    pub fn mirror(&self, idx: usize) -> usize {
        let n = self.tile;
        let (a, b) = (idx / n, idx % n);
        ((n - a) % n) * n + (n - b) % n
    }
}

pub struct Workspace {
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

const BLOCK: usize = 16;

fn transpose(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    for r0 in (0..n).step_by(BLOCK) {
        for c0 in (0..n).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(n) {
                for c in c0..(c0 + BLOCK).min(n) {
                    dst[c * n + r] = src[r * n + c];
                }
            }
        }
    }
}

/// Writes the first `rows` rows of the transpose of `src`.
fn transpose_rows(src: &[Complex64], dst: &mut [Complex64], n: usize, rows: usize) {
    for c0 in (0..n).step_by(BLOCK) {
        for r0 in (0..rows).step_by(BLOCK) {
            for c in c0..(c0 + BLOCK).min(n) {
                for r in r0..(r0 + BLOCK).min(rows) {
                    dst[r * n + c] = src[c * n + r];
                }
            }
        }
    }
}
