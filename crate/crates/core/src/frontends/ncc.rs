//! Zero-normalized cross-correlation front-end.
//!
//! Window means and variances come from summed-area tables. The cross term
//! is either accumulated directly or taken from an FFT correlation of the
//! zero-mean patch against the map, whichever is cheaper for the geometry.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{round_half_up, FrontEnd, Patch, PreparedMap, ScoreBounds, ScoreField};
use crate::error::Result;
use crate::imaging::GrayImage;
use crate::integral::WindowSums;

/// Below this standard deviation a patch or window scores 0.
const DEGENERATE_STD: f64 = 1e-12;

/// Windows with a variance below this are recomputed exactly; the
/// summed-area difference loses relative precision on near-flat windows.
const EXACT_VARIANCE_GUARD: f64 = 1e-4;

/// Direct accumulation is chosen while its multiply-adds stay below this
/// many times `n log2 n` for the padded FFT size.
const DIRECT_COST_FACTOR: f64 = 2.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NccMethod {
    #[default]
    Auto,
    Direct,
    Fft,
}

/// Zero-normalized cross-correlation; scores lie in `[-1, 1]`.
#[derive(Clone, Debug, Default)]
pub struct NccFrontEnd {
    method: NccMethod,
}

impl NccFrontEnd {
    pub fn with_method(method: NccMethod) -> Self {
        Self { method }
    }

    pub fn method(&self) -> NccMethod {
        self.method
    }
}

impl FrontEnd for NccFrontEnd {
    fn name(&self) -> &'static str {
        "ncc"
    }

    fn score_bounds(&self) -> ScoreBounds {
        ScoreBounds { k0: -1.0, k1: 1.0 }
    }

    fn check_radius(&self, _radius: usize) -> Result<()> {
        Ok(())
    }

    fn snap_radius(&self, radius: f64) -> usize {
        (round_half_up(radius) as usize).max(1)
    }

    fn prepare<'a>(&'a self, map: &'a GrayImage) -> Box<dyn PreparedMap + 'a> {
        Box::new(NccMap::new(map, self.method))
    }
}

struct NccMap<'a> {
    map: &'a GrayImage,
    method: NccMethod,
    /// Map intensities minus the global mean.
    centered: Vec<f64>,
    sums: WindowSums,
    spectrum: OnceLock<MapSpectrum>,
}

impl<'a> NccMap<'a> {
    fn new(map: &'a GrayImage, method: NccMethod) -> Self {
        let mean = map.mean();
        let centered: Vec<f64> = map.data().iter().map(|v| v - mean).collect();
        let sums = WindowSums::new(&centered, map.width(), map.height());
        Self {
            map,
            method,
            centered,
            sums,
            spectrum: OnceLock::new(),
        }
    }

    fn use_fft(&self, side: usize, placements: usize) -> bool {
        match self.method {
            NccMethod::Direct => false,
            NccMethod::Fft => true,
            NccMethod::Auto => {
                let (pw, ph) = (fast_len(self.map.width()), fast_len(self.map.height()));
                let n = (pw * ph) as f64;
                let direct = (side * side * placements) as f64;
                direct > DIRECT_COST_FACTOR * n * n.log2()
            }
        }
    }

    fn spectrum(&self) -> &MapSpectrum {
        self.spectrum
            .get_or_init(|| MapSpectrum::new(&self.centered, self.map.width(), self.map.height()))
    }

    /// `sum((p - mean_p) * w)` for the window at `(x, y)`, accumulated in
    /// row order.
    fn direct_cross(&self, zero_mean_patch: &[f64], side: usize, x: usize, y: usize) -> f64 {
        let w = self.map.width();
        let mut acc = 0.0;
        for j in 0..side {
            let prow = &zero_mean_patch[j * side..(j + 1) * side];
            let start = (y + j) * w + x;
            let mrow = &self.centered[start..start + side];
            acc += prow.iter().zip(mrow).map(|(p, m)| p * m).sum::<f64>();
        }
        acc
    }

    /// Two-pass window variance, used where the table is imprecise.
    fn exact_window_variance(&self, side: usize, x: usize, y: usize) -> f64 {
        let w = self.map.width();
        let n = (side * side) as f64;
        let mut sum = 0.0;
        for j in 0..side {
            let start = (y + j) * w + x;
            sum += self.centered[start..start + side].iter().sum::<f64>();
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for j in 0..side {
            let start = (y + j) * w + x;
            sq += self.centered[start..start + side]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        sq / n
    }
}

impl PreparedMap for NccMap<'_> {
    fn map(&self) -> &GrayImage {
        self.map
    }

    fn score_field(&self, patch: &Patch) -> Result<ScoreField> {
        let mut field = ScoreField::for_geometry(self.map.width(), self.map.height(), patch.radius)?;
        let side = patch.side();
        let n = (side * side) as f64;

        let pixels = patch.pixels.data();
        let patch_mean = pixels.iter().sum::<f64>() / n;
        let zero_mean: Vec<f64> = pixels.iter().map(|v| v - patch_mean).collect();
        let patch_std = (zero_mean.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if patch_std < DEGENERATE_STD {
            return Ok(field);
        }

        let (fw, fh) = (field.width(), field.height());
        // A low-contrast patch amplifies the FFT's absolute error.
        let cross = if patch_std * patch_std >= EXACT_VARIANCE_GUARD && self.use_fft(side, fw * fh) {
            Some(self.spectrum().correlate(&zero_mean, side))
        } else {
            None
        };

        let scores = field.scores_mut();
        for y in 0..fh {
            for x in 0..fw {
                let (s1, s2) = self.sums.window(x, y, side, side);
                let mut var = (s2 - s1 * s1 / n) / n;
                let mut num = match &cross {
                    Some(c) => c.at(x, y),
                    None => self.direct_cross(&zero_mean, side, x, y),
                };
                if var < EXACT_VARIANCE_GUARD {
                    var = self.exact_window_variance(side, x, y);
                    if cross.is_some() {
                        num = self.direct_cross(&zero_mean, side, x, y);
                    }
                }
                let window_std = var.max(0.0).sqrt();
                scores[y * fw + x] = if window_std < DEGENERATE_STD {
                    0.0
                } else {
                    (num / (n * patch_std * window_std)).clamp(-1.0, 1.0)
                };
            }
        }
        Ok(field)
    }
}

/// Smallest length `>= n` whose only prime factors are 2, 3 and 5.
fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// 2-D spectrum of the centered map on a zero-padded grid. Stored
/// column-major (transposed) after the forward pass.
struct MapSpectrum {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    data: Vec<Complex<f64>>,
}

struct Correlation {
    width: usize,
    values: Vec<f64>,
}

impl Correlation {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

impl MapSpectrum {
    fn new(values: &[f64], map_w: usize, map_h: usize) -> Self {
        let (width, height) = (fast_len(map_w), fast_len(map_h));
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(width);
        let row_inv = planner.plan_fft_inverse(width);
        let col_fwd = planner.plan_fft_forward(height);
        let col_inv = planner.plan_fft_inverse(height);
        let mut spectrum = Self {
            width,
            height,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            data: Vec::new(),
        };
        let mut buf = vec![Complex::new(0.0, 0.0); width * height];
        for y in 0..map_h {
            for x in 0..map_w {
                buf[y * width + x] = Complex::new(values[y * map_w + x], 0.0);
            }
        }
        spectrum.data = spectrum.forward(buf, map_h);
        spectrum
    }

    /// Row transforms over the first `rows` rows (the rest are zero), then
    /// column transforms on the transposed buffer.
    fn forward(&self, mut buf: Vec<Complex<f64>>, rows: usize) -> Vec<Complex<f64>> {
        let (w, h) = (self.width, self.height);
        self.row_fwd.process(&mut buf[..rows * w]);
        let mut t = vec![Complex::new(0.0, 0.0); w * h];
        for y in 0..rows {
            for x in 0..w {
                t[x * h + y] = buf[y * w + x];
            }
        }
        self.col_fwd.process(&mut t);
        t
    }

    /// Circular cross-correlation `c(u, v) = sum p(i, j) * m(u + i, v + j)`
    /// of a `side`x`side` patch with the map; exact for valid placements.
    fn correlate(&self, patch: &[f64], side: usize) -> Correlation {
        let (w, h) = (self.width, self.height);
        let mut buf = vec![Complex::new(0.0, 0.0); w * h];
        for j in 0..side {
            for i in 0..side {
                buf[j * w + i] = Complex::new(patch[j * side + i], 0.0);
            }
        }
        let mut t = self.forward(buf, side);
        for (p, m) in t.iter_mut().zip(&self.data) {
            *p = p.conj() * m;
        }
        self.col_inv.process(&mut t);
        let mut out = vec![Complex::new(0.0, 0.0); w * h];
        for x in 0..w {
            for y in 0..h {
                out[y * w + x] = t[x * h + y];
            }
        }
        self.row_inv.process(&mut out);
        let scale = 1.0 / (w * h) as f64;
        Correlation {
            width: w,
            values: out.into_iter().map(|c| c.re * scale).collect(),
        }
    }
}
