//! Forward and backward kernels for the individual layer types. Tensors are
//! flat channel-major slices (`C × H × W`), one sample at a time.

use super::real::Real;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Unfolds a `c × h × w` input into a `(c·9) × (h·w)` matrix for a 3×3
/// "same" convolution with zero padding.
pub fn im2col<R: Real>(input: &[R], c: usize, h: usize, w: usize, cols: &mut Vec<R>) {
    let hw = h * w;
    cols.clear();
    cols.resize(c * TAPS * hw, R::ZERO);
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((ci * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    // dst[x] = src[x + kx - 1]
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input.
pub fn col2im<R: Real>(cols: &[R], c: usize, h: usize, w: usize, d_input: &mut [R]) {
    let hw = h * w;
    d_input[..c * hw].iter_mut().for_each(|v| *v = R::ZERO);
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((ci * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut d_input[ci * hw + sy as usize * w..][..w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

/// 3×3 same-padded convolution followed by ReLU. `weight` is
/// `out × (c·9)`; `cols` receives the unfolded input for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv_relu_forward<R: Real>(
    input: &[R],
    c: usize,
    h: usize,
    w: usize,
    weight: &[R],
    bias: &[R],
    cols: &mut Vec<R>,
    out: &mut Vec<R>,
) {
    let o = bias.len();
    let hw = h * w;
    im2col(input, c, h, w, cols);
    out.clear();
    out.resize(o * hw, R::ZERO);
    R::gemm(o, c * TAPS, hw, weight, false, cols, false, R::ZERO, out);
    for (oi, &b) in bias.iter().enumerate() {
        for v in &mut out[oi * hw..(oi + 1) * hw] {
            *v = (*v + b).max(R::ZERO);
        }
    }
}

/// Backward pass of [`conv_relu_forward`]. `d_out` holds the gradient with
/// respect to the ReLU output and is masked in place. Parameter gradients
/// are accumulated; `d_input` is overwritten when given.
#[allow(clippy::too_many_arguments)]
pub fn conv_relu_backward<R: Real>(
    out: &[R],
    d_out: &mut [R],
    cols: &[R],
    c: usize,
    h: usize,
    w: usize,
    weight: &[R],
    d_weight: &mut [R],
    d_bias: &mut [R],
    scratch: &mut Vec<R>,
    d_input: Option<&mut [R]>,
) {
    let o = d_bias.len();
    let hw = h * w;
    for (d, &y) in d_out.iter_mut().zip(out) {
        if y <= R::ZERO {
            *d = R::ZERO;
        }
    }
    for (oi, db) in d_bias.iter_mut().enumerate() {
        *db += d_out[oi * hw..(oi + 1) * hw].iter().copied().sum::<R>();
    }
    R::gemm(o, hw, c * TAPS, d_out, false, cols, true, R::ONE, d_weight);
    if let Some(d_input) = d_input {
        scratch.clear();
        scratch.resize(c * TAPS * hw, R::ZERO);
        R::gemm(c * TAPS, o, hw, weight, true, d_out, false, R::ZERO, scratch);
        col2im(scratch, c, h, w, d_input);
    }
}

/// 2×2 stride-2 max pooling; odd trailing rows/columns are dropped. `arg`
/// records the flat input index of each maximum (first one on ties).
pub fn maxpool_forward<R: Real>(input: &[R], c: usize, h: usize, w: usize, out: &mut Vec<R>, arg: &mut Vec<u32>) {
    let (ph, pw) = (h / 2, w / 2);
    out.clear();
    arg.clear();
    for ci in 0..c {
        let base = ci * h * w;
        for py in 0..ph {
            for px in 0..pw {
                let mut best = base + 2 * py * w + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * py + dy) * w + 2 * px + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
}

/// Routes pooled gradients back to the recorded maxima.
pub fn pool_backward<R: Real>(d_out: &[R], arg: &[u32], d_input: &mut [R]) {
    d_input.iter_mut().for_each(|v| *v = R::ZERO);
    for (&d, &i) in d_out.iter().zip(arg) {
        d_input[i as usize] += d;
    }
}

/// Per-channel maximum over the whole plane.
pub fn global_maxpool_forward<R: Real>(input: &[R], c: usize, hw: usize, out: &mut Vec<R>, arg: &mut Vec<u32>) {
    out.clear();
    arg.clear();
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate().skip(1) {
            if v > plane[best] {
                best = i;
            }
        }
        out.push(plane[best]);
        arg.push((ci * hw + best) as u32);
    }
}

/// `out = weight · input + bias`, `weight` being `out × in`.
pub fn dense_forward<R: Real>(input: &[R], weight: &[R], bias: &[R], out: &mut Vec<R>) {
    let n_in = input.len();
    out.clear();
    out.extend(
        bias.iter()
            .enumerate()
            .map(|(o, &b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(&w, &x)| w * x).sum::<R>()),
    );
}

/// Accumulates dense parameter gradients and writes the input gradient.
pub fn dense_backward<R: Real>(
    input: &[R],
    d_out: &[R],
    weight: &[R],
    d_weight: &mut [R],
    d_bias: &mut [R],
    d_input: Option<&mut Vec<R>>,
) {
    let n_in = input.len();
    for (o, &d) in d_out.iter().enumerate() {
        d_bias[o] += d;
        for (dw, &x) in d_weight[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
            *dw += d * x;
        }
    }
    if let Some(d_input) = d_input {
        d_input.clear();
        d_input.resize(n_in, R::ZERO);
        for (o, &d) in d_out.iter().enumerate() {
            for (di, &w) in d_input.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
                *di += d * w;
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax<R: Real>(logits: &[R]) -> Vec<R> {
    let m = logits.iter().copied().fold(logits[0], R::max);
    let e: Vec<R> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: R = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Cross-entropy of `probs` against class `label`, probabilities clamped
/// at [`PROB_FLOOR`].
pub fn cross_entropy<R: Real>(probs: &[R], label: usize) -> R {
    -probs[label].max(R::from_f64(PROB_FLOOR)).ln()
}

/// Gradient of softmax + cross-entropy with respect to the logits.
pub fn softmax_ce_grad<R: Real>(probs: &[R], label: usize) -> Vec<R> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == label { p - R::ONE } else { p })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-4;

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks `grad` against central differences of `loss` for every index.
    fn check(x: &mut [f64], grad: &[f64], loss: impl Fn(&[f64]) -> f64) {
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + H;
            let up = loss(x);
            x[i] = orig - H;
            let down = loss(x);
            x[i] = orig;
            let num = (up - down) / (2.0 * H);
            assert!(rel_err(grad[i], num) <= 1e-3, "index {i}: analytic {} numeric {num}", grad[i]);
        }
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, h, w, o) = (2, 5, 4, 3);
        let x = random(&mut rng, c * h * w);
        let wt = random(&mut rng, o * c * 9);
        let b = vec![0.0; o];
        let (mut cols, mut out) = (Vec::new(), Vec::new());
        conv_relu_forward(&x, c, h, w, &wt, &b, &mut cols, &mut out);
        for oi in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    s += wt[oi * c * 9 + ci * 9 + ky * 3 + kx] * x[ci * h * w + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                    assert!((out[oi * h * w + y * w + xx] - s.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, h, w, o) = (2, 4, 5, 3);
        let mut x = random(&mut rng, c * h * w);
        let mut wt = random(&mut rng, o * c * 9);
        let mut b = random(&mut rng, o);
        let r = random(&mut rng, o * h * w);
        let loss = |x: &[f64], wt: &[f64], b: &[f64]| {
            let (mut cols, mut out) = (Vec::new(), Vec::new());
            conv_relu_forward(x, c, h, w, wt, b, &mut cols, &mut out);
            out.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut cols, mut out) = (Vec::new(), Vec::new());
        conv_relu_forward(&x, c, h, w, &wt, &b, &mut cols, &mut out);
        let mut d_out = r.clone();
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; o];
        let mut dx = vec![0.0; x.len()];
        let mut scratch = Vec::new();
        conv_relu_backward(&out, &mut d_out, &cols, c, h, w, &wt, &mut dw, &mut db, &mut scratch, Some(&mut dx));
        let (wt0, b0) = (wt.clone(), b.clone());
        check(&mut x, &dx, |x| loss(x, &wt0, &b0));
        let x0 = x.clone();
        check(&mut wt, &dw, |w| loss(&x0, w, &b0));
        check(&mut b, &db, |b| loss(&x0, &wt0, b));
    }

    #[test]
    fn pooling_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (2, 5, 7);
        let mut x = random(&mut rng, c * h * w);
        let r = random(&mut rng, c * (h / 2) * (w / 2));
        let loss = |x: &[f64]| {
            let (mut out, mut arg) = (Vec::new(), Vec::new());
            maxpool_forward(x, c, h, w, &mut out, &mut arg);
            out.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut out, mut arg) = (Vec::new(), Vec::new());
        maxpool_forward(&x, c, h, w, &mut out, &mut arg);
        assert_eq!(out.len(), c * 2 * 3);
        let mut dx = vec![0.0; x.len()];
        pool_backward(&r, &arg, &mut dx);
        check(&mut x, &dx, loss);

        let r = random(&mut rng, c);
        let loss = |x: &[f64]| {
            let (mut out, mut arg) = (Vec::new(), Vec::new());
            global_maxpool_forward(x, c, h * w, &mut out, &mut arg);
            out.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut out, mut arg) = (Vec::new(), Vec::new());
        global_maxpool_forward(&x, c, h * w, &mut out, &mut arg);
        pool_backward(&r, &arg, &mut dx);
        check(&mut x, &dx, loss);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n_in, n_out) = (6, 4);
        let mut x = random(&mut rng, n_in);
        let mut wt = random(&mut rng, n_in * n_out);
        let mut b = random(&mut rng, n_out);
        let r = random(&mut rng, n_out);
        let loss = |x: &[f64], wt: &[f64], b: &[f64]| {
            let mut out = Vec::new();
            dense_forward(x, wt, b, &mut out);
            out.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; n_out];
        let mut dx = Vec::new();
        dense_backward(&x, &r, &wt, &mut dw, &mut db, Some(&mut dx));
        let (wt0, b0) = (wt.clone(), b.clone());
        check(&mut x, &dx, |x| loss(x, &wt0, &b0));
        let x0 = x.clone();
        check(&mut wt, &dw, |w| loss(&x0, w, &b0));
        check(&mut b, &db, |b| loss(&x0, &wt0, b));
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for label in 0..3 {
            let mut z = random(&mut rng, 3);
            let g = softmax_ce_grad(&softmax(&z), label);
            check(&mut z, &g, |z| cross_entropy(&softmax(z), label));
        }
    }

    #[test]
    fn uniform_prediction_costs_ln3() {
        let p = softmax(&[0.0f64; 3]);
        assert!((cross_entropy(&p, 1) - 3f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[0.0f64, 1.0, 0.0], 1) <= 1e-6);
        assert!((cross_entropy(&[0.0f64, 1.0, 0.0], 0) - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }
}
