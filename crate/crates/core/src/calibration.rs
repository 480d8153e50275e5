//! Coverage calibration: sweep patch radii, collect true-location and
//! impostor score populations for each, measure how much their fitted
//! normals overlap, and pick the radius where the overlap first drops to
//! the required threshold.

use log::{debug, warn};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{plan_samples, AlignedPair, SamplePurpose};
use crate::error::{Error, Result};
use crate::frontends::{extract_patch, round_half_up, FrontEnd, FrontEndConfig, PreparedMap, ScoreBounds, ScoreField};
use crate::imaging::PixelPos;
use crate::stats::{fit_normal, fit_normal_chunks, ovl_weitzman, NormalFit, OvlValue};

/// Radii swept for the NCC front-end when none are configured.
pub const DEFAULT_NCC_RADII: [usize; 12] = [2, 3, 4, 6, 8, 11, 15, 20, 27, 36, 48, 60];

/// Impostor scores kept per calibration sample.
pub const DEFAULT_IMPOSTOR_CAP: usize = 50_000;

/// Distance used to decide whether a placement is a true match.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Chebyshev,
    Euclidean,
}

impl DistanceMetric {
    pub fn distance(self, a: PixelPos, b: PixelPos) -> f64 {
        match self {
            DistanceMetric::Chebyshev => a.chebyshev(b) as f64,
            DistanceMetric::Euclidean => a.euclidean(b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Candidate patch radii, strictly increasing.
    pub radii: Vec<usize>,
    /// Calibration samples per radius.
    pub n_samples: usize,
    /// Required overlap threshold.
    pub ovl_threshold: f64,
    /// True-match distance threshold, in pixels.
    pub match_tol: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub front_end: FrontEndConfig,
    #[serde(default = "default_impostor_cap")]
    pub impostor_cap: usize,
    #[serde(default)]
    pub distance: DistanceMetric,
}

fn default_impostor_cap() -> usize {
    DEFAULT_IMPOSTOR_CAP
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            radii: DEFAULT_NCC_RADII.to_vec(),
            n_samples: 200,
            ovl_threshold: 0.005,
            match_tol: 5.0,
            rng_seed: 0,
            front_end: FrontEndConfig::Ncc,
            impostor_cap: DEFAULT_IMPOSTOR_CAP,
            distance: DistanceMetric::Chebyshev,
        }
    }
}

impl CalibrationConfig {
    /// Default sweep for a front-end: the pseudo-geometric NCC grid, or the
    /// first six admissible radii for the sub-patch front-end.
    pub fn default_radii(front_end: &FrontEndConfig) -> Vec<usize> {
        match front_end {
            FrontEndConfig::Ncc => DEFAULT_NCC_RADII.to_vec(),
            FrontEndConfig::Feature(cfg) => (1..=6).map(|k| k * cfg.radius_unit()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() {
            return Err(Error::Config("radii must not be empty".into()));
        }
        if self.radii[0] == 0 || self.radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("radii must be positive and strictly increasing".into()));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be at least 2".into()));
        }
        if !(self.ovl_threshold > 0.0 && self.ovl_threshold < 1.0) {
            return Err(Error::Config(format!("ovl_threshold {} outside (0, 1)", self.ovl_threshold)));
        }
        if !(self.match_tol >= 0.0) || !self.match_tol.is_finite() {
            return Err(Error::Config(format!("match_tol {} must be >= 0", self.match_tol)));
        }
        if self.impostor_cap == 0 {
            return Err(Error::Config("impostor_cap must be at least 1".into()));
        }
        self.front_end.validate()
    }
}

/// Scores harvested from one calibration sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSample {
    /// Best score within `match_tol` of the true center.
    pub truth_score: f64,
    /// Scores farther than `match_tol` from the true center.
    pub impostor_scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub radius: usize,
    pub ovl: f64,
}

/// Overlap per radius, radii strictly increasing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OvlCurve {
    pub points: Vec<CurvePoint>,
}

impl OvlCurve {
    pub fn radii(&self) -> impl Iterator<Item = usize> + '_ {
        self.points.iter().map(|p| p.radius)
    }
}

/// Fitted populations behind one curve point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusSummary {
    pub radius: usize,
    pub ovl: f64,
    pub truth: NormalFit,
    pub impostor: NormalFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedRadius {
    pub radius: usize,
    pub reason: String,
}

/// One pair's calibration inside a multi-pair run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCalibration {
    pub pair: String,
    pub selected_radius: f64,
    pub curve: OvlCurve,
    pub per_radius: Vec<RadiusSummary>,
    pub dropped: Vec<DroppedRadius>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    /// Selected radius; fractional when interpolated between curve points.
    pub selected_radius: f64,
    /// Empty for multi-pair runs, whose curves live in `per_pair`.
    pub curve: OvlCurve,
    pub config: CalibrationConfig,
    pub pairs: Vec<String>,
    pub per_radius: Vec<RadiusSummary>,
    pub dropped: Vec<DroppedRadius>,
    /// Unrounded mean of the per-pair selections (multi-pair runs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_selected_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_pair: Vec<PairCalibration>,
}

/// Chooses the operating radius from an overlap curve.
///
/// Finds the first adjacent pair with `O_a > threshold >= O_b` and
/// interpolates linearly between their radii. A curve that starts at or
/// below the threshold yields its smallest radius; one that never reaches
/// it yields its largest.
pub fn select_operating_point(curve: &OvlCurve, ovl_threshold: f64) -> Result<f64> {
    let points = &curve.points;
    let (Some(first), Some(last)) = (points.first(), points.last()) else {
        return Err(Error::Input("overlap curve has no points".into()));
    };
    if first.ovl <= ovl_threshold {
        return Ok(first.radius as f64);
    }
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.ovl > ovl_threshold && ovl_threshold >= b.ovl {
            let (pa, pb) = (a.radius as f64, b.radius as f64);
            return Ok(pa + (pb - pa) * (ovl_threshold - a.ovl) / (b.ovl - a.ovl));
        }
    }
    Ok(last.radius as f64)
}

/// Overlap between the normal fitted to the truth scores (one per sample)
/// and the normal fitted to all impostor scores pooled.
pub fn ovl_for_radius(samples: &[ScoreSample], bounds: ScoreBounds) -> Result<OvlValue> {
    summarize(samples, bounds).map(|(ovl, _, _)| ovl)
}

fn summarize(samples: &[ScoreSample], bounds: ScoreBounds) -> Result<(OvlValue, NormalFit, NormalFit)> {
    if samples.len() < 2 {
        return Err(Error::Fit(format!("{} calibration samples, need at least 2", samples.len())));
    }
    let truths: Vec<f64> = samples.iter().map(|s| s.truth_score).collect();
    let truth = fit_normal(&truths)?;
    let impostor = fit_normal_chunks(samples.iter().map(|s| s.impostor_scores.as_slice()))?;
    let ovl = ovl_weitzman(&truth, &impostor, bounds.k0, bounds.k1)?;
    Ok((ovl, truth, impostor))
}

/// Seed for the per-sample impostor subsampling stream.
fn sample_seed(base: u64, radius: usize, sample: usize) -> u64 {
    // splitmix64 finalizer over the packed key.
    let mut z = base ^ (radius as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (sample as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits a field around the true center into the truth score and the
/// (possibly subsampled) impostor scores.
pub fn partition_field(
    field: &ScoreField,
    truth: PixelPos,
    match_tol: f64,
    metric: DistanceMetric,
    impostor_cap: usize,
    rng_seed: u64,
) -> Result<ScoreSample> {
    let mut truth_score = f64::NEG_INFINITY;
    let mut impostors = Vec::with_capacity(field.scores().len());
    for j in 0..field.height() {
        for i in 0..field.width() {
            let s = field.get(i, j);
            if metric.distance(field.map_pos(i, j), truth) <= match_tol {
                truth_score = truth_score.max(s);
            } else {
                impostors.push(s);
            }
        }
    }
    if !truth_score.is_finite() {
        return Err(Error::Geometry(format!("no placement within {match_tol} px of ({}, {})", truth.x, truth.y)));
    }
    if impostors.is_empty() {
        return Err(Error::Geometry(format!(
            "every placement lies within {match_tol} px of the true center"
        )));
    }
    if impostors.len() > impostor_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut keep = index::sample(&mut rng, impostors.len(), impostor_cap).into_vec();
        keep.sort_unstable();
        impostors = keep.into_iter().map(|k| impostors[k]).collect();
    }
    Ok(ScoreSample {
        truth_score,
        impostor_scores: impostors,
    })
}

/// Localizes `n_samples` seeded query patches of `radius` and collects their
/// truth and impostor scores.
pub fn harvest_scores(pair: &AlignedPair, radius: usize, cfg: &CalibrationConfig) -> Result<Vec<ScoreSample>> {
    let front_end = cfg.front_end.build();
    front_end.check_radius(radius)?;
    let prepared = front_end.prepare(&pair.reference);
    harvest_prepared(prepared.as_ref(), pair, radius, cfg)
}

fn harvest_prepared(
    prepared: &dyn PreparedMap,
    pair: &AlignedPair,
    radius: usize,
    cfg: &CalibrationConfig,
) -> Result<Vec<ScoreSample>> {
    let plan = plan_samples(pair, radius, cfg.n_samples, cfg.rng_seed, SamplePurpose::Calibration)?;
    plan.centers
        .par_iter()
        .enumerate()
        .map(|(k, &center)| {
            let patch = extract_patch(&pair.query, center, radius)?;
            let field = prepared.score_field(&patch)?;
            partition_field(
                &field,
                center,
                cfg.match_tol,
                cfg.distance,
                cfg.impostor_cap,
                sample_seed(cfg.rng_seed, radius, k),
            )
        })
        .collect()
}

/// Runs the calibration sweep on one pair.
///
/// Radii the front-end or the pair geometry cannot accommodate are dropped
/// with a warning; at least one must survive.
pub fn calibrate(pair: &AlignedPair, cfg: &CalibrationConfig) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    let front_end = cfg.front_end.build();
    let prepared = front_end.prepare(&pair.reference);
    calibrate_with(cfg, front_end.as_ref(), &pair.name, |radius| {
        front_end.check_radius(radius)?;
        harvest_prepared(prepared.as_ref(), pair, radius, cfg)
    })
}

/// Calibration over an arbitrary score source, one call per radius. Errors
/// from `harvest` drop that radius.
pub fn calibrate_with(
    cfg: &CalibrationConfig,
    front_end: &dyn FrontEnd,
    pair_name: &str,
    mut harvest: impl FnMut(usize) -> Result<Vec<ScoreSample>>,
) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    let bounds = front_end.score_bounds();
    let mut curve = OvlCurve::default();
    let mut per_radius = Vec::new();
    let mut dropped = Vec::new();
    for &radius in &cfg.radii {
        let summary = harvest(radius).and_then(|samples| summarize(&samples, bounds));
        match summary {
            Ok((ovl, truth, impostor)) => {
                debug!(
                    "{pair_name}: radius {radius} ovl {:.6} truth {:.4}±{:.4} impostor {:.4}±{:.4}",
                    ovl.value(),
                    truth.mean,
                    truth.std,
                    impostor.mean,
                    impostor.std
                );
                curve.points.push(CurvePoint {
                    radius,
                    ovl: ovl.value(),
                });
                per_radius.push(RadiusSummary {
                    radius,
                    ovl: ovl.value(),
                    truth,
                    impostor,
                });
            }
            Err(e) => {
                warn!("{pair_name}: dropping radius {radius}: {e}");
                dropped.push(DroppedRadius {
                    radius,
                    reason: e.to_string(),
                });
            }
        }
    }
    if curve.points.is_empty() {
        return Err(Error::Geometry(format!("no radius could be calibrated on {pair_name}")));
    }
    let selected_radius = select_operating_point(&curve, cfg.ovl_threshold)?;
    Ok(CalibrationOutcome {
        selected_radius,
        curve,
        config: cfg.clone(),
        pairs: vec![pair_name.to_string()],
        per_radius,
        dropped,
        mean_selected_radius: None,
        per_pair: Vec::new(),
    })
}

/// Calibrates every pair independently and averages their selections,
/// rounding half up to a whole radius.
pub fn calibrate_multi(pairs: &[AlignedPair], cfg: &CalibrationConfig) -> Result<CalibrationOutcome> {
    if pairs.is_empty() {
        return Err(Error::Input("no pairs to calibrate".into()));
    }
    let outcomes = pairs
        .iter()
        .map(|p| calibrate(p, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_outcomes(outcomes, cfg))
}

/// Merges single-pair outcomes into one multi-pair outcome.
pub fn combine_outcomes(outcomes: Vec<CalibrationOutcome>, cfg: &CalibrationConfig) -> CalibrationOutcome {
    assert!(!outcomes.is_empty());
    if outcomes.len() == 1 {
        return outcomes.into_iter().next().unwrap();
    }
    let radii: Vec<f64> = outcomes.iter().map(|o| o.selected_radius).collect();
    let mean = radii.iter().sum::<f64>() / radii.len() as f64;
    CalibrationOutcome {
        selected_radius: round_half_up(mean),
        curve: OvlCurve::default(),
        config: cfg.clone(),
        pairs: outcomes.iter().flat_map(|o| o.pairs.clone()).collect(),
        per_radius: Vec::new(),
        dropped: Vec::new(),
        mean_selected_radius: Some(mean),
        per_pair: outcomes
            .into_iter()
            .map(|o| PairCalibration {
                pair: o.pairs.into_iter().next().unwrap_or_default(),
                selected_radius: o.selected_radius,
                curve: o.curve,
                per_radius: o.per_radius,
                dropped: o.dropped,
            })
            .collect(),
    }
}
