//! Grayscale image container, PNG I/O and the preprocessing filters.
//!
//! Intensities are stored as `f64` in `[0, 1]`; quantization to 8 bits only
//! happens on export.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{arg_err, Error, Result};

/// Width and height the microscope frames are reduced to before detection.
pub const WORKING_SIZE: (usize, usize) = (1300, 972);

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    /// Wraps row-major data. Every value must be finite and inside `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return arg_err(format!("image dimensions must be positive, got {width}x{height}"));
        }
        if data.len() != width * height {
            return arg_err(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return arg_err(format!("pixel {bad} has out-of-range value {}", data[bad]));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)`; values are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Pixel lookup with edge replication for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    /// Applies `f` to every pixel, clamping the result into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Quantizes to 8 bits with round-half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn to_png_buffer(&self) -> ImageBuffer<Luma<u8>, Vec<u8>> {
        ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_png_buffer().save(path).map_err(|e| Error::Encode {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Encodes as 8-bit grayscale PNG bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_png_buffer()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Encode {
                path: "<memory>".into(),
                detail: e.to_string(),
            })?;
        Ok(out.into_inner())
    }

    /// Converts to an RGB buffer for overlay drawing.
    pub fn to_rgb(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = quantize_u8(self.get(x as usize, y as usize));
            Rgb([v, v, v])
        })
    }
}

#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Reads an 8-bit grayscale or RGB(A) PNG. RGB is reduced with
/// `0.299 R + 0.587 G + 0.114 B`.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let decode_err = |detail: String| Error::Decode {
        path: path.to_path_buf(),
        detail,
    };
    let dynamic = image::open(path).map_err(|e| decode_err(e.to_string()))?;
    from_dynamic(dynamic).map_err(|detail| decode_err(detail))
}

/// Decodes PNG bytes held in memory.
pub fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let dynamic = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| {
        Error::Decode {
            path: "<memory>".into(),
            detail: e.to_string(),
        }
    })?;
    from_dynamic(dynamic).map_err(|detail| Error::Decode {
        path: "<memory>".into(),
        detail,
    })
}

fn from_dynamic(dynamic: DynamicImage) -> std::result::Result<GrayImage, String> {
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let data: Vec<f64> = match dynamic {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect(),
        DynamicImage::ImageRgba8(buf) => buf.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect(),
        other => return Err(format!("unsupported pixel format {:?}", other.color())),
    };
    GrayImage::new(w, h, data).map_err(|e| e.to_string())
}

#[inline]
fn luma(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

/// k×k median filter with edge replication.
pub fn median_filter(img: &GrayImage, k: usize) -> Result<GrayImage> {
    if k == 0 || k % 2 == 0 {
        return arg_err(format!("median window must be odd and positive, got {k}"));
    }
    if k == 1 {
        return Ok(img.clone());
    }
    let r = (k / 2) as isize;
    let mid = k * k / 2;
    let mut window = Vec::with_capacity(k * k);
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    window.push(img.get_clamped(x + dx, y + dy));
                }
            }
            let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            data.push(*m);
        }
    }
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        data,
    })
}

/// Separable Gaussian blur with edge replication; the kernel is truncated at
/// `ceil(3 sigma)`.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return arg_err(format!("blur sigma must be non-negative, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (img.width, img.height);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * row[clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    Ok(GrayImage { width: w, height: h, data })
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    if width == 0 || height == 0 {
        return arg_err(format!("resize target must be positive, got {width}x{height}"));
    }
    let taps_x = bilinear_taps(img.width, width);
    let taps_y = bilinear_taps(img.height, height);
    let mut data = Vec::with_capacity(width * height);
    for &(y0, y1, fy) in &taps_y {
        for &(x0, x1, fx) in &taps_x {
            let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
            let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
            data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    Ok(GrayImage { width, height, data })
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// The fixed preprocessing chain: optional resize, then a 3×3 median filter.
pub fn preprocess(img: &GrayImage, target: Option<(usize, usize)>) -> Result<GrayImage> {
    let resized = match target {
        Some((w, h)) if (w, h) != img.dims() => resize(img, w, h)?,
        _ => img.clone(),
    };
    median_filter(&resized, 3)
}
