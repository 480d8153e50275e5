//! Grayscale image container, file loading and the preprocessing steps
//! applied to every map before it reaches a front-end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Windows whose standard deviation falls below this are treated as flat.
const FLAT_WINDOW_STD: f64 = 1e-9;

/// Row-major single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Integer pixel position, `x` is the column and `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelPos {
    pub x: usize,
    pub y: usize,
}

impl PixelPos {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn chebyshev(self, other: PixelPos) -> usize {
        self.x.abs_diff(other.x).max(self.y.abs_diff(other.y))
    }

    pub fn euclidean(self, other: PixelPos) -> f64 {
        let dx = self.x.abs_diff(other.x) as f64;
        let dy = self.y.abs_diff(other.y) as f64;
        dx.hypot(dy)
    }
}

impl GrayImage {
    /// Wraps row-major intensities, rejecting mismatched lengths and values
    /// outside `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("zero-size image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dimension(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    /// Image with every pixel set to `value` (clamped into range).
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "zero-size image");
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Builds an image from a per-pixel function; results are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "zero-size image");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Copies the `width`x`height` region whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<GrayImage> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Dimension(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.row(y)[x0..x0 + width]);
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Preprocessing applied to both maps of a pair after loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patchnorm_radius: Option<usize>,
    #[serde(default = "default_true")]
    pub convert_grayscale: bool,
}

fn default_true() -> bool {
    true
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_width == 0 {
            return Err(Error::Config("target_width must be at least 1".into()));
        }
        if self.patchnorm_radius == Some(0) {
            return Err(Error::Config("patchnorm_radius must be at least 1".into()));
        }
        Ok(())
    }

    /// Downsamples to the target width, then optionally patch-normalizes.
    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        self.validate()?;
        let resized = downsample_to_width(img, self.target_width);
        Ok(match self.patchnorm_radius {
            Some(r) => patch_normalize(&resized, r),
            None => resized,
        })
    }
}

/// Loads an 8-bit PGM or PNG image, converting RGB to luminance.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    load_image_with(path, true)
}

pub(crate) fn load_image_with(path: impl AsRef<Path>, convert_grayscale: bool) -> Result<GrayImage> {
    let path = path.as_ref();
    let load_err = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| load_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| load_err(e.to_string()))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Pnm) => {}
        Some(other) => return Err(load_err(format!("unsupported format {other:?}"))),
        None => return Err(load_err("unrecognized image format".into())),
    }
    let decoded = reader.decode().map_err(|e| load_err(e.to_string()))?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    if width == 0 || height == 0 {
        return Err(load_err("zero-size image".into()));
    }
    let data: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) if !convert_grayscale => {
            return Err(load_err("color image with grayscale conversion disabled".into()));
        }
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| luminance(p.0[0], p.0[1], p.0[2])).collect(),
        DynamicImage::ImageRgba8(buf) => buf.pixels().map(|p| luminance(p.0[0], p.0[1], p.0[2])).collect(),
        other => return Err(load_err(format!("unsupported pixel layout {:?}", other.color()))),
    };
    GrayImage::new(width, height, data)
}

fn luminance(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

/// Writes a binary (P5) PGM, quantizing intensities to 8 bits.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Rounds an intensity to its nearest 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Resamples to `target_width` columns, keeping the aspect ratio.
///
/// Shrinking averages over the covered source area (box filter); enlarging
/// interpolates bilinearly. Each axis is handled independently.
pub fn downsample_to_width(img: &GrayImage, target_width: usize) -> GrayImage {
    assert!(target_width >= 1, "target width must be at least 1");
    if target_width == img.width {
        return img.clone();
    }
    let scaled = img.height as f64 * target_width as f64 / img.width as f64;
    let target_height = (scaled.round() as usize).max(1);

    let cols = axis_weights(img.width, target_width);
    let rows = axis_weights(img.height, target_height);

    let mut horizontal = vec![0.0; target_width * img.height];
    for y in 0..img.height {
        let src = img.row(y);
        let dst = &mut horizontal[y * target_width..(y + 1) * target_width];
        for (out, taps) in dst.iter_mut().zip(&cols) {
            *out = taps.iter().map(|&(k, w)| src[k] * w).sum();
        }
    }

    let mut data = vec![0.0; target_width * target_height];
    for (ty, taps) in rows.iter().enumerate() {
        let dst = &mut data[ty * target_width..(ty + 1) * target_width];
        for &(k, w) in taps {
            let src = &horizontal[k * target_width..(k + 1) * target_width];
            for (out, &v) in dst.iter_mut().zip(src) {
                *out += v * w;
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    GrayImage {
        width: target_width,
        height: target_height,
        data,
    }
}

/// Source taps `(index, weight)` for each destination sample along one axis.
fn axis_weights(src_len: usize, dst_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src_len as f64 / dst_len as f64;
    if dst_len == src_len {
        (0..dst_len).map(|i| vec![(i, 1.0)]).collect()
    } else if dst_len < src_len {
        (0..dst_len)
            .map(|i| {
                let lo = i as f64 * scale;
                let hi = ((i + 1) as f64 * scale).min(src_len as f64);
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(src_len);
                (first..last)
                    .filter_map(|k| {
                        let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                        (overlap > 0.0).then_some((k, overlap / scale))
                    })
                    .collect()
            })
            .collect()
    } else {
        (0..dst_len)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let k = pos.floor() as usize;
                let frac = pos - k as f64;
                if k + 1 < src_len && frac > 0.0 {
                    vec![(k, 1.0 - frac), (k + 1, frac)]
                } else {
                    vec![(k, 1.0)]
                }
            })
            .collect()
    }
}

/// Local contrast normalization over a `(2r+1)^2` window clipped at borders.
///
/// Each pixel becomes `0.5 + (v - mean) / (6 * std)` clamped to `[0, 1]`, or
/// 0.5 where the window is flat.
pub fn patch_normalize(img: &GrayImage, radius: usize) -> GrayImage {
    assert!(radius >= 1, "patch normalization radius must be at least 1");
    let (w, h) = (img.width, img.height);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let y0 = y.saturating_sub(radius);
        let y1 = (y + radius).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(radius);
            let x1 = (x + radius).min(w - 1);
            let n = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
            let mut sum = 0.0;
            for yy in y0..=y1 {
                sum += img.row(yy)[x0..=x1].iter().sum::<f64>();
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for yy in y0..=y1 {
                sq += img.row(yy)[x0..=x1].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            let std = (sq / n).sqrt();
            let out = if std < FLAT_WINDOW_STD {
                0.5
            } else {
                (0.5 + (img.get(x, y) - mean) / (6.0 * std)).clamp(0.0, 1.0)
            };
            data.push(out);
        }
    }
    GrayImage { width: w, height: h, data }
}
