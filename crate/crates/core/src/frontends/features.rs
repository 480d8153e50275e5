//! Local-feature front-end with sub-patch comparison.
//!
//! A patch is tiled into square sub-patches. Each sub-patch is compared with
//! the sub-patch at the same offset inside the candidate map window: corners
//! are detected in both, binary descriptors matched by Hamming distance, and
//! a match counts as an inlier when the two keypoints sit within
//! `inlier_tol` pixels of each other in sub-patch coordinates (the
//! displacement the placement itself implies is zero). A placement scores
//! the mean inlier ratio over its sub-patches.
//!
//! Placements are evaluated on a stride grid extended by the field's last
//! row and column. Every other cell copies the sample at or above-left of
//! it, so the field stays dense and its argmax lands on an evaluated sample.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{round_half_up, FrontEnd, Patch, PreparedMap, ScoreBounds, ScoreField};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;

/// Half-width of the square region sampled by a descriptor.
pub const DESCRIPTOR_RADIUS: usize = 7;
const DESCRIPTOR_BITS: usize = 256;
const DESCRIPTOR_WORDS: usize = DESCRIPTOR_BITS / 64;
const PAIR_TABLE_SEED: u64 = 0x6272_6965_665f_7061;
const HARRIS_K: f64 = 0.04;
/// Half-width of the structure-tensor window.
const TENSOR_RADIUS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Side length of the square sub-patches, in pixels.
    #[serde(default = "default_subpatch")]
    pub subpatch_size: usize,
    /// Spacing of evaluated placements, in pixels.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Largest keypoint displacement still counted as an inlier, in pixels.
    #[serde(default = "default_inlier_tol")]
    pub inlier_tol: f64,
    /// Minimum Harris response for a corner.
    #[serde(default = "default_detector_threshold")]
    pub detector_threshold: f64,
    /// Strongest corners kept per sub-patch.
    #[serde(default = "default_max_keypoints")]
    pub max_keypoints: usize,
    /// Largest Hamming distance accepted as a descriptor match.
    #[serde(default = "default_max_hamming")]
    pub max_hamming: u32,
}

fn default_subpatch() -> usize {
    40
}
fn default_stride() -> usize {
    20
}
fn default_inlier_tol() -> f64 {
    5.0
}
fn default_detector_threshold() -> f64 {
    1e-6
}
fn default_max_keypoints() -> usize {
    24
}
fn default_max_hamming() -> u32 {
    32
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            subpatch_size: default_subpatch(),
            stride: default_stride(),
            inlier_tol: default_inlier_tol(),
            detector_threshold: default_detector_threshold(),
            max_keypoints: default_max_keypoints(),
            max_hamming: default_max_hamming(),
        }
    }
}

impl FeatureConfig {
    /// Smallest sub-patch that leaves room for a described corner.
    pub const MIN_SUBPATCH: usize = 2 * (DESCRIPTOR_RADIUS + 1) + 1;

    pub fn validate(&self) -> Result<()> {
        if self.subpatch_size < Self::MIN_SUBPATCH {
            return Err(Error::Config(format!(
                "subpatch_size {} below the minimum {}",
                self.subpatch_size,
                Self::MIN_SUBPATCH
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if !(self.inlier_tol >= 0.0) || !(self.detector_threshold >= 0.0) {
            return Err(Error::Config("inlier_tol and detector_threshold must be non-negative".into()));
        }
        if self.max_keypoints == 0 {
            return Err(Error::Config("max_keypoints must be at least 1".into()));
        }
        Ok(())
    }

    /// Radii whose patches tile exactly into sub-patches are multiples of this.
    pub fn radius_unit(&self) -> usize {
        if self.subpatch_size.is_multiple_of(2) {
            self.subpatch_size / 2
        } else {
            self.subpatch_size
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Descriptor(pub [u64; DESCRIPTOR_WORDS]);

impl Descriptor {
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    pub fn bit(&self, k: usize) -> bool {
        self.0[k / 64] >> (k % 64) & 1 == 1
    }
}

/// Corners of one sub-patch with their descriptors, in matching order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubpatchFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

type PairTable = Vec<((i32, i32), (i32, i32))>;

fn pair_table() -> &'static PairTable {
    static TABLE: OnceLock<PairTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PAIR_TABLE_SEED);
        let r = DESCRIPTOR_RADIUS as i32;
        (0..DESCRIPTOR_BITS)
            .map(|_| {
                let mut pick = || (rng.gen_range(-r..=r), rng.gen_range(-r..=r));
                (pick(), pick())
            })
            .collect()
    })
}

/// Harris corners that are strict local maxima, strongest first, each with
/// an intensity-comparison descriptor over a 3x3 box-smoothed image.
pub fn detect_and_describe(img: &GrayImage, cfg: &FeatureConfig) -> SubpatchFeatures {
    let (w, h) = (img.width(), img.height());
    let margin = DESCRIPTOR_RADIUS + 1;
    if w < 2 * margin + 1 || h < 2 * margin + 1 {
        return SubpatchFeatures::default();
    }

    // Central-difference gradients, zero on the outer ring.
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = 0.5 * (img.get(x + 1, y) - img.get(x - 1, y));
            let gy = 0.5 * (img.get(x, y + 1) - img.get(x, y - 1));
            let k = y * w + x;
            ixx[k] = gx * gx;
            iyy[k] = gy * gy;
            ixy[k] = gx * gy;
        }
    }

    // Harris response wherever the tensor window sees only valid gradients.
    let lo = 1 + TENSOR_RADIUS;
    let mut response = vec![f64::NEG_INFINITY; w * h];
    for y in lo..h - lo {
        for x in lo..w - lo {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for yy in y - TENSOR_RADIUS..=y + TENSOR_RADIUS {
                for xx in x - TENSOR_RADIUS..=x + TENSOR_RADIUS {
                    let k = yy * w + xx;
                    a += ixx[k];
                    b += iyy[k];
                    c += ixy[k];
                }
            }
            response[y * w + x] = a * b - c * c - HARRIS_K * (a + b) * (a + b);
        }
    }

    let mut corners = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let r = response[y * w + x];
            if r <= cfg.detector_threshold {
                continue;
            }
            let is_peak = (y - 1..=y + 1)
                .flat_map(|yy| (x - 1..=x + 1).map(move |xx| (xx, yy)))
                .filter(|&(xx, yy)| (xx, yy) != (x, y))
                .all(|(xx, yy)| r > response[yy * w + xx]);
            if is_peak {
                corners.push((r, Keypoint { x, y }));
            }
        }
    }
    corners.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1.y, a.1.x).cmp(&(b.1.y, b.1.x))));
    corners.truncate(cfg.max_keypoints);

    let smooth = box3(img);
    let pairs = pair_table();
    let mut out = SubpatchFeatures::default();
    for (_, kp) in corners {
        let mut words = [0u64; DESCRIPTOR_WORDS];
        for (k, ((ax, ay), (bx, by))) in pairs.iter().enumerate() {
            let at = |dx: i32, dy: i32| {
                let x = (kp.x as i32 + dx) as usize;
                let y = (kp.y as i32 + dy) as usize;
                smooth[y * w + x]
            };
            if at(*ax, *ay) < at(*bx, *by) {
                words[k / 64] |= 1 << (k % 64);
            }
        }
        out.keypoints.push(kp);
        out.descriptors.push(Descriptor(words));
    }
    out
}

/// 3x3 mean filter with windows clipped at the border.
fn box3(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    s += img.get(xx, yy);
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

/// Nearest-neighbour matching from `query` into `reference`.
///
/// Returns `(inliers, matches)`: a query descriptor matches its closest
/// reference descriptor (lowest index on ties) when the Hamming distance is
/// at most `max_hamming`, and the match is an inlier when the keypoints are
/// within `inlier_tol` pixels of each other along both axes.
pub fn match_subpatches(
    query: &SubpatchFeatures,
    reference: &SubpatchFeatures,
    cfg: &FeatureConfig,
) -> (usize, usize) {
    let mut inliers = 0;
    let mut matches = 0;
    for (qk, qd) in query.keypoints.iter().zip(&query.descriptors) {
        let mut best: Option<(u32, usize)> = None;
        for (idx, rd) in reference.descriptors.iter().enumerate() {
            let d = qd.hamming(rd);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, idx));
            }
        }
        let Some((dist, idx)) = best else { continue };
        if dist > cfg.max_hamming {
            continue;
        }
        matches += 1;
        let rk = reference.keypoints[idx];
        let shift = qk.x.abs_diff(rk.x).max(qk.y.abs_diff(rk.y));
        if shift as f64 <= cfg.inlier_tol {
            inliers += 1;
        }
    }
    (inliers, matches)
}

/// Sub-patch keypoint-inlier front-end; scores lie in `[0, 1]`.
#[derive(Clone, Debug, Default)]
pub struct FeatureFrontEnd {
    cfg: FeatureConfig,
}

impl FeatureFrontEnd {
    pub fn new(cfg: FeatureConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }
}

impl FrontEnd for FeatureFrontEnd {
    fn name(&self) -> &'static str {
        "feature"
    }

    fn score_bounds(&self) -> ScoreBounds {
        ScoreBounds { k0: 0.0, k1: 1.0 }
    }

    fn check_radius(&self, radius: usize) -> Result<()> {
        let s = self.cfg.subpatch_size;
        if radius == 0 || !(2 * radius).is_multiple_of(s) {
            return Err(Error::Constraint(format!(
                "patch diameter {} is not a positive multiple of the sub-patch size {s}",
                2 * radius
            )));
        }
        Ok(())
    }

    fn snap_radius(&self, radius: f64) -> usize {
        let unit = self.cfg.radius_unit() as f64;
        let k = round_half_up(radius / unit).max(1.0);
        (k * unit) as usize
    }

    fn prepare<'a>(&'a self, map: &'a GrayImage) -> Box<dyn PreparedMap + 'a> {
        Box::new(FeatureMap::new(map, &self.cfg))
    }
}

/// Evaluated coordinates along one field axis (every `stride`-th cell plus
/// the last one) and, per cell, the index of the sample at or before it.
fn sample_axis(len: usize, stride: usize) -> (Vec<usize>, Vec<usize>) {
    let mut coords: Vec<usize> = (0..len).step_by(stride).collect();
    if coords.last() != Some(&(len - 1)) {
        coords.push(len - 1);
    }
    let owner = (0..len).map(|c| coords.partition_point(|&v| v <= c) - 1).collect();
    (coords, owner)
}

struct FeatureMap<'a> {
    map: &'a GrayImage,
    cfg: &'a FeatureConfig,
    cols: usize,
    /// Lazily computed features per sub-patch origin.
    cache: Vec<OnceLock<SubpatchFeatures>>,
}

impl<'a> FeatureMap<'a> {
    fn new(map: &'a GrayImage, cfg: &'a FeatureConfig) -> Self {
        let s = cfg.subpatch_size;
        let (cols, rows) = if map.width() >= s && map.height() >= s {
            (map.width() - s + 1, map.height() - s + 1)
        } else {
            (0, 0)
        };
        Self {
            map,
            cfg,
            cols,
            cache: (0..cols * rows).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Features of the map sub-patch with top-left `(x, y)`.
    fn reference(&self, x: usize, y: usize) -> &SubpatchFeatures {
        self.cache[y * self.cols + x].get_or_init(|| {
            let s = self.cfg.subpatch_size;
            let sub = self.map.crop(x, y, s, s).expect("sub-patch inside map");
            detect_and_describe(&sub, self.cfg)
        })
    }
}

impl PreparedMap for FeatureMap<'_> {
    fn map(&self) -> &GrayImage {
        self.map
    }

    fn score_field(&self, patch: &Patch) -> Result<ScoreField> {
        let s = self.cfg.subpatch_size;
        if patch.radius == 0 || !(2 * patch.radius).is_multiple_of(s) {
            return Err(Error::Constraint(format!(
                "patch diameter {} is not a positive multiple of the sub-patch size {s}",
                2 * patch.radius
            )));
        }
        let mut field = ScoreField::for_geometry(self.map.width(), self.map.height(), patch.radius)?;
        let tiles = 2 * patch.radius / s;
        let query: Vec<SubpatchFeatures> = (0..tiles * tiles)
            .map(|k| {
                let (kx, ky) = (k % tiles, k / tiles);
                let sub = patch.pixels.crop(kx * s, ky * s, s, s).expect("tile inside patch");
                detect_and_describe(&sub, self.cfg)
            })
            .collect();

        let (fw, fh) = (field.width(), field.height());
        let (sx, col_of) = sample_axis(fw, self.cfg.stride);
        let (sy, row_of) = sample_axis(fh, self.cfg.stride);
        let mut samples = vec![0.0; sx.len() * sy.len()];
        for (j, &gy) in sy.iter().enumerate() {
            for (i, &gx) in sx.iter().enumerate() {
                let mut total = 0.0;
                for (k, q) in query.iter().enumerate() {
                    let (kx, ky) = (k % tiles, k / tiles);
                    let r = self.reference(gx + kx * s, gy + ky * s);
                    let (inliers, matches) = match_subpatches(q, r, self.cfg);
                    total += inliers as f64 / matches.max(1) as f64;
                }
                samples[j * sx.len() + i] = total / query.len() as f64;
            }
        }

        let scores = field.scores_mut();
        for y in 0..fh {
            let row = &samples[row_of[y] * sx.len()..];
            for x in 0..fw {
                scores[y * fw + x] = row[col_of[x]];
            }
        }
        Ok(field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontends::{extract_patch, localize};
    use crate::imaging::PixelPos;
    use crate::synthdata::{generate_surface, SurfaceSpec};

    fn textured(size: usize, seed: u64) -> GrayImage {
        let side = size.max(64);
        generate_surface(&SurfaceSpec {
            width: side,
            height: side,
            texture_scale: 6.0,
            uniqueness: 1.0,
            seed,
            ..SurfaceSpec::default()
        })
        .unwrap()
        .crop(0, 0, size, size)
        .unwrap()
    }

    #[test]
    fn descriptor_bits_and_hamming() {
        let a = Descriptor([0b1011, 0, 0, 1 << 63]);
        let b = Descriptor([0b0001, 0, 0, 0]);
        assert_eq!(a.hamming(&b), 3);
        assert!(a.bit(0) && a.bit(1) && !a.bit(2) && a.bit(255));
    }

    #[test]
    fn radius_constraint() {
        let fe = FeatureFrontEnd::default();
        assert!(fe.check_radius(20).is_ok());
        assert!(fe.check_radius(40).is_ok());
        assert!(matches!(fe.check_radius(15), Err(Error::Constraint(_))));
        assert!(fe.check_radius(0).is_err());
        assert_eq!(fe.snap_radius(27.0), 20);
        assert_eq!(fe.snap_radius(30.0), 40);
        assert_eq!(fe.snap_radius(3.0), 20);
    }

    #[test]
    fn inadmissible_patch_is_a_constraint_error() {
        let map = textured(96, 1);
        let patch = extract_patch(&map, PixelPos::new(48, 48), 15).unwrap();
        let fe = FeatureFrontEnd::default();
        assert!(matches!(fe.score_field(&patch, &map), Err(Error::Constraint(_))));
    }

    #[test]
    fn featureless_patch_scores_zero() {
        let map = GrayImage::filled(120, 120, 0.5);
        let patch = extract_patch(&map, PixelPos::new(60, 60), 20).unwrap();
        let field = FeatureFrontEnd::default().score_field(&patch, &map).unwrap();
        assert!(field.scores().iter().all(|&s| s == 0.0));
        assert!(detect_and_describe(&patch.pixels, &FeatureConfig::default()).keypoints.is_empty());
    }

    #[test]
    fn textured_subpatch_has_corners() {
        let map = textured(40, 2);
        let f = detect_and_describe(&map, &FeatureConfig::default());
        assert!(!f.keypoints.is_empty());
        assert!(f.keypoints.len() <= FeatureConfig::default().max_keypoints);
        for kp in &f.keypoints {
            assert!(kp.x > DESCRIPTOR_RADIUS && kp.x < 40 - DESCRIPTOR_RADIUS - 1);
        }
    }

    #[test]
    fn self_match_wins() {
        let map = textured(160, 3);
        let fe = FeatureFrontEnd::default();
        // Center on the stride grid: cell (40, 40) is a sample.
        let center = PixelPos::new(40 + 40, 40 + 40);
        let patch = extract_patch(&map, center, 40).unwrap();
        let loc = localize(&fe, &patch, &map).unwrap();
        let (ti, tj) = loc.field.cell_of(center).unwrap();
        let truth = loc.field.get(ti, tj);
        assert!(truth > 0.5, "self-match score {truth}");
        for j in 0..loc.field.height() {
            for i in 0..loc.field.width() {
                let far = loc.field.map_pos(i, j).euclidean(center) > fe.config().inlier_tol;
                if far {
                    assert!(truth >= loc.field.get(i, j));
                }
            }
        }
        assert_eq!(loc.best, center);
    }

    #[test]
    fn field_scores_within_bounds() {
        let map = textured(140, 4);
        let query = textured(140, 5);
        let patch = extract_patch(&query, PixelPos::new(70, 70), 40).unwrap();
        let fe = FeatureFrontEnd::default();
        let field = fe.score_field(&patch, &map).unwrap();
        assert!(field.scores().iter().all(|&s| fe.score_bounds().contains(s)));
    }

    #[test]
    fn off_stride_cells_copy_their_sample() {
        let map = textured(140, 6);
        let patch = extract_patch(&map, PixelPos::new(70, 70), 20).unwrap();
        let field = FeatureFrontEnd::default().score_field(&patch, &map).unwrap();
        let (fw, fh) = (field.width(), field.height());
        let owner = |c: usize, last: usize| if c == last { c } else { c - c % 20 };
        for j in 0..fh {
            for i in 0..fw {
                assert_eq!(field.get(i, j), field.get(owner(i, fw - 1), owner(j, fh - 1)));
            }
        }
    }

    /// All-pairs matching over a full distance matrix, no caching.
    fn oracle_ratio(query: &GrayImage, window: &GrayImage, cfg: &FeatureConfig) -> f64 {
        let q = detect_and_describe(query, cfg);
        let r = detect_and_describe(window, cfg);
        let dist: Vec<Vec<u32>> = q
            .descriptors
            .iter()
            .map(|a| r.descriptors.iter().map(|b| a.0.iter().zip(&b.0).map(|(x, y)| (x ^ y).count_ones()).sum()).collect())
            .collect();
        let (mut inliers, mut matches) = (0usize, 0usize);
        for (qi, row) in dist.iter().enumerate() {
            let Some(&best) = row.iter().min() else { continue };
            if best > cfg.max_hamming {
                continue;
            }
            let ri = row.iter().position(|&d| d == best).unwrap();
            matches += 1;
            let (a, b) = (q.keypoints[qi], r.keypoints[ri]);
            let d = (a.x as f64 - b.x as f64).abs().max((a.y as f64 - b.y as f64).abs());
            if d <= cfg.inlier_tol {
                inliers += 1;
            }
        }
        inliers as f64 / matches.max(1) as f64
    }

    #[test]
    fn matches_all_pairs_oracle() {
        let map = textured(160, 7);
        let query = textured(160, 8);
        let cfg = FeatureConfig::default();
        let fe = FeatureFrontEnd::new(cfg.clone());
        let s = cfg.subpatch_size;
        for (src, center) in [(&map, PixelPos::new(70, 90)), (&query, PixelPos::new(80, 80))] {
            let patch = extract_patch(src, center, 40).unwrap();
            assert_eq!(patch.side(), 81);
            let field = fe.score_field(&patch, &map).unwrap();
            let axis = |len: usize| (0..len).step_by(cfg.stride).chain([len - 1]);
            for gy in axis(field.height()) {
                for gx in axis(field.width()) {
                    let mut total = 0.0;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let q = patch.pixels.crop(kx * s, ky * s, s, s).unwrap();
                            let w = map.crop(gx + kx * s, gy + ky * s, s, s).unwrap();
                            total += oracle_ratio(&q, &w, &cfg);
                        }
                    }
                    assert_eq!(field.get(gx, gy), total / 4.0, "placement ({gx}, {gy})");
                }
            }
        }
    }
}

