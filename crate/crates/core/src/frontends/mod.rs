//! Localization front-ends: given a query patch and a reference map they
//! produce a dense field of match scores, one per valid patch placement.
//!
//! Two front-ends are provided. [`NccFrontEnd`] scores placements by
//! zero-normalized cross-correlation. [`FeatureFrontEnd`] tiles the patch
//! into sub-patches and scores the mean keypoint inlier ratio. The
//! calibration layer only sees the [`FrontEnd`] trait.

mod features;
mod ncc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, PixelPos};

pub use features::{
    detect_and_describe, match_subpatches, Descriptor, FeatureConfig, FeatureFrontEnd, Keypoint,
    SubpatchFeatures, DESCRIPTOR_RADIUS,
};
pub use ncc::{NccFrontEnd, NccMethod};

/// Numerical limits `[k0, k1]` of a front-end's score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBounds {
    pub k0: f64,
    pub k1: f64,
}

impl ScoreBounds {
    pub fn contains(&self, score: f64) -> bool {
        (self.k0..=self.k1).contains(&score)
    }
}

/// Square query window of side `2 * radius + 1` cut from a map.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: GrayImage,
    pub center: PixelPos,
    pub radius: usize,
}

impl Patch {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }
}

/// Copies the patch of `radius` centered on `center`.
pub fn extract_patch(map: &GrayImage, center: PixelPos, radius: usize) -> Result<Patch> {
    let fits = center.x >= radius
        && center.y >= radius
        && center.x + radius < map.width()
        && center.y + radius < map.height();
    if !fits {
        return Err(Error::Bounds {
            x: center.x,
            y: center.y,
            radius,
            width: map.width(),
            height: map.height(),
        });
    }
    let side = 2 * radius + 1;
    let pixels = map.crop(center.x - radius, center.y - radius, side, side)?;
    Ok(Patch {
        pixels,
        center,
        radius,
    })
}

/// Scores for every placement of a patch inside a map.
///
/// Grid cell `(i, j)` is the placement whose patch center sits at map pixel
/// `(i, j) + origin_offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    width: usize,
    height: usize,
    scores: Vec<f64>,
    origin_offset: PixelPos,
}

impl ScoreField {
    pub fn new(width: usize, height: usize, scores: Vec<f64>, origin_offset: PixelPos) -> Self {
        assert_eq!(scores.len(), width * height);
        Self {
            width,
            height,
            scores,
            origin_offset,
        }
    }

    /// Field for a patch of `radius` over a `map_width`x`map_height` map.
    pub(crate) fn for_geometry(map_width: usize, map_height: usize, radius: usize) -> Result<Self> {
        let side = 2 * radius + 1;
        if side > map_width || side > map_height {
            return Err(Error::Dimension(format!(
                "patch side {side} exceeds {map_width}x{map_height} map"
            )));
        }
        let (w, h) = (map_width - 2 * radius, map_height - 2 * radius);
        Ok(Self::new(w, h, vec![0.0; w * h], PixelPos::new(radius, radius)))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub(crate) fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    pub fn origin_offset(&self) -> PixelPos {
        self.origin_offset
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[j * self.width + i]
    }

    /// Map position of grid cell `(i, j)`.
    pub fn map_pos(&self, i: usize, j: usize) -> PixelPos {
        PixelPos::new(i + self.origin_offset.x, j + self.origin_offset.y)
    }

    /// Grid cell of a map position, if that position is a valid placement.
    pub fn cell_of(&self, pos: PixelPos) -> Option<(usize, usize)> {
        let i = pos.x.checked_sub(self.origin_offset.x)?;
        let j = pos.y.checked_sub(self.origin_offset.y)?;
        (i < self.width && j < self.height).then_some((i, j))
    }

    /// Best-scoring placement in map coordinates. Ties go to the smallest
    /// row, then the smallest column.
    pub fn argmax(&self) -> (PixelPos, f64) {
        let mut best = 0;
        for (k, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = k;
            }
        }
        (self.map_pos(best % self.width, best / self.width), self.scores[best])
    }
}

/// A map that has been preprocessed for repeated scoring by one front-end.
pub trait PreparedMap: Send + Sync {
    fn map(&self) -> &GrayImage;

    fn score_field(&self, patch: &Patch) -> Result<ScoreField>;
}

/// Localization technique producing bounded scores for patch placements.
pub trait FrontEnd: Send + Sync {
    fn name(&self) -> &'static str;

    fn score_bounds(&self) -> ScoreBounds;

    /// Fails when the front-end cannot use patches of this radius.
    fn check_radius(&self, radius: usize) -> Result<()>;

    /// Nearest usable radius to a possibly fractional one, rounding ties up.
    fn snap_radius(&self, radius: f64) -> usize;

    /// Precomputes whatever the front-end can reuse across queries of `map`.
    fn prepare<'a>(&'a self, map: &'a GrayImage) -> Box<dyn PreparedMap + 'a>;

    fn score_field(&self, patch: &Patch, map: &GrayImage) -> Result<ScoreField> {
        self.check_radius(patch.radius)?;
        self.prepare(map).score_field(patch)
    }
}

/// Result of localizing one query patch.
#[derive(Clone, Debug)]
pub struct Localization {
    pub best: PixelPos,
    pub best_score: f64,
    pub field: ScoreField,
}

pub fn localize(front_end: &dyn FrontEnd, patch: &Patch, ref_map: &GrayImage) -> Result<Localization> {
    front_end.check_radius(patch.radius)?;
    localize_prepared(front_end.prepare(ref_map).as_ref(), patch)
}

/// [`localize`] against a map prepared once for many queries.
pub fn localize_prepared(prepared: &dyn PreparedMap, patch: &Patch) -> Result<Localization> {
    let field = prepared.score_field(patch)?;
    let (best, best_score) = field.argmax();
    Ok(Localization {
        best,
        best_score,
        field,
    })
}

/// Serializable front-end selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum FrontEndConfig {
    #[default]
    Ncc,
    Feature(FeatureConfig),
}


impl FrontEndConfig {
    pub fn build(&self) -> Box<dyn FrontEnd> {
        match self {
            FrontEndConfig::Ncc => Box::new(NccFrontEnd::default()),
            FrontEndConfig::Feature(cfg) => Box::new(FeatureFrontEnd::new(cfg.clone())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FrontEndConfig::Ncc => Ok(()),
            FrontEndConfig::Feature(cfg) => cfg.validate(),
        }
    }
}

pub(crate) fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| (x + y * w) as f64 / (w * h) as f64)
    }

    #[test]
    fn extract_whole_map() {
        let map = ramp(5, 5);
        let p = extract_patch(&map, PixelPos::new(2, 2), 2).unwrap();
        assert_eq!(p.pixels, map);
        assert_eq!(p.side(), 5);
    }

    #[test]
    fn extract_out_of_bounds() {
        let map = ramp(5, 5);
        assert!(matches!(
            extract_patch(&map, PixelPos::new(0, 0), 1),
            Err(Error::Bounds { .. })
        ));
        assert!(extract_patch(&map, PixelPos::new(4, 2), 1).is_err());
        assert!(extract_patch(&map, PixelPos::new(2, 2), 3).is_err());
    }

    #[test]
    fn extract_interior_indexing() {
        let map = ramp(10, 10);
        let p = extract_patch(&map, PixelPos::new(5, 5), 1).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                assert_eq!(p.pixels.get(i, j), map.get(4 + i, 4 + j));
            }
        }
    }

    #[test]
    fn argmax_tie_break_prefers_top_left() {
        let f = ScoreField::new(3, 2, vec![0.1, 0.9, 0.9, 0.9, 0.2, 0.0], PixelPos::new(4, 4));
        assert_eq!(f.argmax(), (PixelPos::new(5, 4), 0.9));
        let flat = ScoreField::new(2, 2, vec![0.0; 4], PixelPos::new(1, 1));
        assert_eq!(flat.argmax().0, PixelPos::new(1, 1));
    }

    #[test]
    fn cell_and_map_positions_agree() {
        let f = ScoreField::for_geometry(10, 8, 2).unwrap();
        assert_eq!((f.width(), f.height()), (6, 4));
        assert_eq!(f.cell_of(f.map_pos(3, 1)), Some((3, 1)));
        assert_eq!(f.cell_of(PixelPos::new(1, 5)), None);
        assert_eq!(f.cell_of(PixelPos::new(8, 2)), None);
    }

    #[test]
    fn front_end_config_json_shape() {
        let ncc: FrontEndConfig = serde_json::from_str(r#"{"kind":"ncc"}"#).unwrap();
        assert_eq!(ncc, FrontEndConfig::Ncc);
        let feat: FrontEndConfig =
            serde_json::from_str(r#"{"kind":"feature","subpatch_size":40,"stride":20}"#).unwrap();
        match feat {
            FrontEndConfig::Feature(cfg) => {
                assert_eq!(cfg.subpatch_size, 40);
                assert_eq!(cfg.inlier_tol, 5.0);
            }
            _ => panic!("expected feature config"),
        }
        assert!(serde_json::from_str::<FrontEndConfig>(r#"{"kind":"sift"}"#).is_err());
    }

    #[test]
    fn round_half_up_rounds_ties_up() {
        assert_eq!(round_half_up(11.5), 12.0);
        assert_eq!(round_half_up(6.49), 6.0);
        assert_eq!(round_half_up(2.0), 2.0);
    }
}
