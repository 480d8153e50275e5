//! Seeded synthetic surfaces and aligned reference/query pairs.
//!
//! Surfaces are multi-octave value noise. Part of the area can be replaced
//! by a repeated motif to create perceptual aliasing, and query maps get
//! brightness, contrast, noise and occlusion perturbations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::AlignedPair;
use crate::error::{Error, Result};
use crate::imaging::GrayImage;

const MIN_SIDE: usize = 64;

// Independent streams of the surface seed.
const STREAM_NOISE: u64 = 0;
const STREAM_BLOCKS: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceSpec {
    pub width: usize,
    pub height: usize,
    /// Lattice spacing of the coarsest noise octave, in pixels.
    pub texture_scale: f64,
    /// Fraction of the area left free of the repeated motif.
    pub uniqueness: f64,
    pub seed: u64,
    #[serde(default = "default_motif")]
    pub motif_size: usize,
    #[serde(default = "default_octaves")]
    pub octaves: u32,
}

fn default_motif() -> usize {
    16
}

fn default_octaves() -> u32 {
    3
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            texture_scale: 8.0,
            uniqueness: 1.0,
            seed: 1,
            motif_size: default_motif(),
            octaves: default_octaves(),
        }
    }
}

impl SurfaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_SIDE || self.height < MIN_SIDE {
            return Err(Error::Config(format!(
                "surface {}x{} smaller than {MIN_SIDE}x{MIN_SIDE}",
                self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.uniqueness) {
            return Err(Error::Config(format!("uniqueness {} outside [0, 1]", self.uniqueness)));
        }
        if !(self.texture_scale >= 1.0) || !self.texture_scale.is_finite() {
            return Err(Error::Config(format!("texture_scale {} below 1", self.texture_scale)));
        }
        if self.motif_size < 2 || self.motif_size > self.width.min(self.height) {
            return Err(Error::Config(format!("motif_size {} out of range", self.motif_size)));
        }
        if self.octaves == 0 {
            return Err(Error::Config("octaves must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSpec {
    pub noise_sigma: f64,
    pub brightness_shift: f64,
    pub contrast_gain: f64,
    pub occlusion_count: usize,
    pub occlusion_size: usize,
    pub seed: u64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            brightness_shift: 0.0,
            contrast_gain: 1.0,
            occlusion_count: 0,
            occlusion_size: 0,
            seed: 0,
        }
    }
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if !self.brightness_shift.is_finite() || !(self.contrast_gain > 0.0) || !self.contrast_gain.is_finite() {
            return Err(Error::Config("brightness_shift must be finite and contrast_gain > 0".into()));
        }
        Ok(())
    }
}

/// Multi-octave value noise stretched to span `[0, 1]`, with a
/// `1 - uniqueness` share of motif-sized blocks replaced by one motif.
pub fn generate_surface(spec: &SurfaceSpec) -> Result<GrayImage> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_NOISE);
    let mut values = value_noise(w, h, spec.texture_scale, spec.octaves, &mut rng);

    let m = spec.motif_size;
    let (bx, by) = (w.div_ceil(m), h.div_ceil(m));
    let total = bx * by;
    let tiled = ((1.0 - spec.uniqueness) * total as f64).round() as usize;
    if tiled > 0 {
        let motif: Vec<f64> = (0..m * m).map(|k| values[(k / m) * w + k % m]).collect();
        let mut blocks: Vec<usize> = (0..total).collect();
        let mut block_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        block_rng.set_stream(STREAM_BLOCKS);
        blocks.shuffle(&mut block_rng);
        for &b in &blocks[..tiled] {
            let (x0, y0) = ((b % bx) * m, (b / bx) * m);
            for y in y0..(y0 + m).min(h) {
                for x in x0..(x0 + m).min(w) {
                    values[y * w + x] = motif[(y % m) * m + x % m];
                }
            }
        }
    }

    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let data = values
        .into_iter()
        .map(|v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.5 })
        .collect();
    GrayImage::new(w, h, data)
}

/// Lattice noise: uniform values on a grid per octave, bilinearly
/// interpolated; octave `o` has spacing `scale / 2^o` and weight `2^-o`.
fn value_noise(w: usize, h: usize, scale: f64, octaves: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let mut weight_total = 0.0;
    for o in 0..octaves {
        let spacing = (scale / (1u64 << o) as f64).max(1.0);
        let amp = 0.5f64.powi(o as i32);
        weight_total += amp;
        let lw = (w as f64 / spacing).ceil() as usize + 2;
        let lh = (h as f64 / spacing).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..lw * lh).map(|_| rng.gen()).collect();
        for y in 0..h {
            let fy = y as f64 / spacing;
            let (iy, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..w {
                let fx = x as f64 / spacing;
                let (ix, tx) = (fx.floor() as usize, fx.fract());
                let at = |i: usize, j: usize| lattice[j * lw + i];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                out[y * w + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    for v in &mut out {
        *v /= weight_total;
    }
    out
}

/// Independent uniform intensities, for tests and degenerate baselines.
pub fn uniform_noise(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(width, height, |_, _| rng.gen())
}

/// Builds a pixel-aligned pair from a surface: the reference is the surface
/// and the query is `clip(gain * s + shift + noise)` with constant-filled
/// occlusion squares drawn on top.
///
/// Random draws happen in a fixed order from the perturbation seed: one
/// normal sample per pixel in row-major order (only when `noise_sigma > 0`),
/// then per occlusion its left edge, top edge and fill value.
pub fn make_aligned_pair(name: &str, surface: &GrayImage, perturb: &PerturbSpec) -> Result<AlignedPair> {
    perturb.validate()?;
    let (w, h) = (surface.width(), surface.height());
    let mut rng = ChaCha8Rng::seed_from_u64(perturb.seed);
    let noise = if perturb.noise_sigma > 0.0 {
        Some(Normal::new(0.0, perturb.noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut data: Vec<f64> = surface
        .data()
        .iter()
        .map(|&v| {
            let mut q = perturb.contrast_gain * v + perturb.brightness_shift;
            if let Some(dist) = &noise {
                q += dist.sample(&mut rng);
            }
            q.clamp(0.0, 1.0)
        })
        .collect();

    let size = perturb.occlusion_size;
    for _ in 0..perturb.occlusion_count {
        if size == 0 {
            break;
        }
        let x0 = rng.gen_range(0..=w.saturating_sub(size));
        let y0 = rng.gen_range(0..=h.saturating_sub(size));
        let fill: f64 = rng.gen();
        for y in y0..(y0 + size).min(h) {
            for x in x0..(x0 + size).min(w) {
                data[y * w + x] = fill;
            }
        }
    }

    Ok(AlignedPair {
        name: name.to_string(),
        reference: surface.clone(),
        query: GrayImage::new(w, h, data)?,
        offset: (0, 0),
        provenance: format!(
            "synthetic: noise_sigma={} brightness_shift={} contrast_gain={} occlusions={}x{} seed={}",
            perturb.noise_sigma,
            perturb.brightness_shift,
            perturb.contrast_gain,
            perturb.occlusion_count,
            perturb.occlusion_size,
            perturb.seed
        ),
    })
}

/// Surface plus perturbation in one step.
pub fn synthetic_pair(name: &str, surface: &SurfaceSpec, perturb: &PerturbSpec) -> Result<AlignedPair> {
    let base = generate_surface(surface)?;
    let mut pair = make_aligned_pair(name, &base, perturb)?;
    pair.provenance = format!(
        "{}; surface {}x{} scale={} uniqueness={} seed={}",
        pair.provenance, surface.width, surface.height, surface.texture_scale, surface.uniqueness, surface.seed
    );
    Ok(pair)
}
