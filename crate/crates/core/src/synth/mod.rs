//! Synthetic labyrinth images with skeleton-derived ground truth.
//!
//! White noise is band-passed around the stripe wavenumber, relaxed by a few
//! rounds of saturation and re-filtering (which straightens the blobs of a
//! raw Gaussian field into long stripes of even width), thresholded at zero
//! into two phases, and rendered with blur and sensor noise. Defects of one
//! phase are then read off its thinned skeleton.

mod skeleton;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

pub use skeleton::{
    branch_count, junction_clusters, neighbor_count, prune_spurs, skeleton_ground_truth, thin, GroundTruth, GtPoint,
    SkeletonConfig,
};

use crate::error::{arg_err, Result};
use crate::image::{gaussian_blur, GrayImage};

/// Render intensity of the dark phase.
pub const DARK_LEVEL: f64 = 0.2;
/// Render intensity of the bright phase.
pub const BRIGHT_LEVEL: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Stripe period in pixels (one dark plus one bright stripe).
    pub wavelength: f64,
    /// Width of the annular pass band as a fraction of `1 / wavelength`.
    pub bandwidth: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Rounds of `tanh` saturation followed by band-pass filtering.
    pub relax_iterations: usize,
    /// Gain applied to the standardized field inside `tanh`.
    pub saturation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 1300,
            height: 972,
            wavelength: 12.0,
            bandwidth: 0.25,
            noise_sigma: 0.03,
            blur_sigma: 1.0,
            relax_iterations: 10,
            saturation: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength >= 6.0 && self.wavelength.is_finite()) {
            return arg_err(format!("wavelength {} must be at least 6", self.wavelength));
        }
        let min = 4.0 * self.wavelength;
        if (self.width as f64) < min || (self.height as f64) < min {
            return arg_err(format!(
                "image {}×{} is smaller than 4 wavelengths ({min})",
                self.width, self.height
            ));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return arg_err(format!("bandwidth {} must be positive", self.bandwidth));
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma >= 0.0) {
            return arg_err("noise and blur sigmas must be non-negative");
        }
        if !(self.saturation > 0.0 && self.saturation.is_finite()) {
            return arg_err(format!("saturation {} must be positive", self.saturation));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dark,
    Bright,
}

impl Phase {
    pub fn other(self) -> Self {
        match self {
            Phase::Dark => Phase::Bright,
            Phase::Bright => Phase::Dark,
        }
    }
}

/// Two-phase field; `true` marks the dark phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryField {
    pub width: usize,
    pub height: usize,
    pub dark: Vec<bool>,
}

impl BinaryField {
    pub fn new(width: usize, height: usize, dark: Vec<bool>) -> Result<Self> {
        if dark.len() != width * height {
            return arg_err(format!("field of {}×{} needs {} cells, got {}", width, height, width * height, dark.len()));
        }
        Ok(Self { width, height, dark })
    }

    pub fn is_dark(&self, x: usize, y: usize) -> bool {
        self.dark[y * self.width + x]
    }

    /// Membership mask of `phase`.
    pub fn phase_mask(&self, phase: Phase) -> Vec<bool> {
        match phase {
            Phase::Dark => self.dark.clone(),
            Phase::Bright => self.dark.iter().map(|d| !d).collect(),
        }
    }

    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            dark: self.dark.iter().map(|d| !d).collect(),
        }
    }

    pub fn dark_fraction(&self) -> f64 {
        self.dark.iter().filter(|&&d| d).count() as f64 / self.dark.len() as f64
    }

    /// Black for dark, white for bright.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| if self.is_dark(x, y) { 0.0 } else { 1.0 })
            .expect("non-empty field")
    }
}

#[derive(Debug, Clone)]
pub struct Labyrinth {
    pub image: GrayImage,
    pub field: BinaryField,
}

/// In-place 2-D FFT of a row-major `width × height` buffer.
fn fft2(data: &mut [Complex64], width: usize, height: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    row.process(data);
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = data[y * width + x];
        }
        col.process(&mut column);
        for y in 0..height {
            data[y * width + x] = column[y];
        }
    }
}

/// Signed frequency (cycles per pixel) of DFT bin `k` of an `n`-point axis.
fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}

/// Gaussian annulus around `1 / wavelength`, zero at DC.
fn bandpass_gain(cfg: &SynthConfig) -> Vec<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let f0 = 1.0 / cfg.wavelength;
    let sigma = cfg.bandwidth * f0;
    let mut gain = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = bin_frequency(y, h);
        for x in 0..w {
            let fx = bin_frequency(x, w);
            let r = (fx * fx + fy * fy).sqrt();
            gain.push(if r == 0.0 {
                0.0
            } else {
                (-(r - f0).powi(2) / (2.0 * sigma * sigma)).exp()
            });
        }
    }
    gain
}

fn filter(data: &mut [Complex64], gain: &[f64], w: usize, h: usize) {
    fft2(data, w, h, false);
    for (v, g) in data.iter_mut().zip(gain) {
        *v *= g;
    }
    fft2(data, w, h, true);
    for v in data.iter_mut() {
        *v = Complex64::new(v.re, 0.0);
    }
}

/// Zero-mean band-passed and relaxed field before thresholding.
pub fn bandpass_noise(cfg: &SynthConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data: Vec<Complex64> = (0..w * h)
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    let gain = bandpass_gain(cfg);
    filter(&mut data, &gain, w, h);
    for _ in 0..cfg.relax_iterations {
        let rms = (data.iter().map(|v| v.re * v.re).sum::<f64>() / data.len() as f64).sqrt();
        if rms == 0.0 {
            break;
        }
        let k = cfg.saturation / rms;
        for v in data.iter_mut() {
            *v = Complex64::new((k * v.re).tanh(), 0.0);
        }
        filter(&mut data, &gain, w, h);
    }
    Ok(data.into_iter().map(|c| c.re).collect())
}

/// Band-passed labyrinth and its rendering.
pub fn generate_labyrinth(cfg: &SynthConfig) -> Result<Labyrinth> {
    let noise = bandpass_noise(cfg)?;
    let field = BinaryField::new(cfg.width, cfg.height, noise.iter().map(|&v| v < 0.0).collect())?;
    let image = render(&field, cfg)?;
    Ok(Labyrinth { image, field })
}

/// Grayscale rendering: flat phase levels, blur, additive noise, clipped.
pub fn render(field: &BinaryField, cfg: &SynthConfig) -> Result<GrayImage> {
    let flat = GrayImage::from_fn(field.width, field.height, |x, y| {
        if field.is_dark(x, y) {
            DARK_LEVEL
        } else {
            BRIGHT_LEVEL
        }
    })?;
    let blurred = gaussian_blur(&flat, cfg.blur_sigma)?;
    if cfg.noise_sigma == 0.0 {
        return Ok(blurred);
    }
    // separate stream from the field noise
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| crate::Error::Argument(e.to_string()))?;
    let data = blurred
        .data()
        .iter()
        .map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(field.width, field.height, data)
}

/// Radial frequency (cycles per pixel) with the largest mean power.
pub fn dominant_frequency(img: &GrayImage) -> f64 {
    let (w, h) = img.dims();
    let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
    let mut data: Vec<Complex64> = img.data().iter().map(|&v| Complex64::new(v - mean, 0.0)).collect();
    fft2(&mut data, w, h, false);
    let step = 1.0 / w.max(h) as f64;
    let bins = (0.75 / step) as usize + 1;
    let mut power = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for y in 0..h {
        let fy = bin_frequency(y, h);
        for x in 0..w {
            let fx = bin_frequency(x, w);
            let b = ((fx * fx + fy * fy).sqrt() / step).round() as usize;
            if b > 0 && b < bins {
                power[b] += data[y * w + x].norm_sqr();
                counts[b] += 1;
            }
        }
    }
    let best = (1..bins)
        .filter(|&b| counts[b] > 0)
        .max_by(|&a, &b| (power[a] / counts[a] as f64).total_cmp(&(power[b] / counts[b] as f64)))
        .unwrap_or(1);
    best as f64 * step
}
