//! Validation of a calibration: recall and localization time per radius,
//! the ground-truth optimal radius, and the recall-to-computation metric.

use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationOutcome, DistanceMetric};
use crate::datasets::{plan_samples, AlignedPair, SamplePurpose};
use crate::error::{Error, Result};
use crate::frontends::{extract_patch, localize_prepared, FrontEnd, PreparedMap};

/// Share of the maximum recall the ground-truth optimal radius must reach.
pub const OPTIMAL_RECALL_FRACTION: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Radii to validate; the calibration sweep when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<usize>>,
    #[serde(default = "default_m_samples")]
    pub m_samples: usize,
    /// True-match threshold; the calibration's when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_tol: Option<f64>,
    /// Sampling seed base; the calibration's when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_timing_reps")]
    pub timing_reps: usize,
    #[serde(default = "default_timing_samples")]
    pub timing_samples: usize,
}

fn default_m_samples() -> usize {
    1000
}
fn default_timing_reps() -> usize {
    3
}
fn default_timing_samples() -> usize {
    20
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            radii: None,
            m_samples: default_m_samples(),
            match_tol: None,
            seed: None,
            timing_reps: default_timing_reps(),
            timing_samples: default_timing_samples(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_samples == 0 {
            return Err(Error::Config("m_samples must be at least 1".into()));
        }
        if self.timing_reps == 0 || self.timing_samples == 0 {
            return Err(Error::Config("timing_reps and timing_samples must be at least 1".into()));
        }
        if let Some(radii) = &self.radii {
            if radii.is_empty() || radii.contains(&0) {
                return Err(Error::Config("evaluation radii must be non-empty and positive".into()));
            }
        }
        if let Some(tol) = self.match_tol {
            if !(tol >= 0.0) {
                return Err(Error::Config(format!("match_tol {tol} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusEval {
    pub radius: usize,
    pub recall: f64,
    /// Seconds per localization.
    pub mean_time: f64,
    pub m_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pair: String,
    pub per_radius: Vec<RadiusEval>,
    pub p_g: usize,
    /// Radius chosen by calibration, possibly fractional.
    pub selected_radius: f64,
    /// The selection rounded to a radius the front-end can evaluate.
    pub evaluated_selected_radius: usize,
    pub m_at_selected: f64,
    pub recall_at_selected: f64,
    pub max_recall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallResult {
    pub recall: f64,
    pub mean_time: f64,
}

/// Recall of `m_samples` validation queries plus the per-call localization
/// time (median over `timing_reps` serial passes of `timing_samples` queries).
#[allow(clippy::too_many_arguments)]
pub fn recall_at_radius(
    pair: &AlignedPair,
    radius: usize,
    m_samples: usize,
    match_tol: f64,
    front_end: &dyn FrontEnd,
    seed: u64,
) -> Result<RecallResult> {
    front_end.check_radius(radius)?;
    let prepared = front_end.prepare(&pair.reference);
    let timing = EvalConfig::default();
    recall_prepared(
        prepared.as_ref(),
        pair,
        radius,
        m_samples,
        match_tol,
        DistanceMetric::Chebyshev,
        seed,
        timing.timing_reps,
        timing.timing_samples,
    )
}

#[allow(clippy::too_many_arguments)]
fn recall_prepared(
    prepared: &dyn PreparedMap,
    pair: &AlignedPair,
    radius: usize,
    m_samples: usize,
    match_tol: f64,
    metric: DistanceMetric,
    seed: u64,
    timing_reps: usize,
    timing_samples: usize,
) -> Result<RecallResult> {
    let plan = plan_samples(pair, radius, m_samples, seed, SamplePurpose::Validation)?;
    let hits = plan
        .centers
        .par_iter()
        .map(|&center| {
            let patch = extract_patch(&pair.query, center, radius)?;
            let loc = localize_prepared(prepared, &patch)?;
            Ok((metric.distance(loc.best, center) <= match_tol) as usize)
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();

    let timed = &plan.centers[..timing_samples.min(plan.centers.len())];
    let mean_time = time_localizations(prepared, pair, radius, timed, timing_reps)?;
    Ok(RecallResult {
        recall: hits as f64 / m_samples as f64,
        mean_time,
    })
}

/// Median over `reps` passes of the mean wall-clock time of one
/// localization; patch extraction is outside the timed region.
pub fn time_localizations(
    prepared: &dyn PreparedMap,
    pair: &AlignedPair,
    radius: usize,
    centers: &[crate::imaging::PixelPos],
    reps: usize,
) -> Result<f64> {
    let patches = centers
        .iter()
        .map(|&c| extract_patch(&pair.query, c, radius))
        .collect::<Result<Vec<_>>>()?;
    if patches.is_empty() {
        return Err(Error::Input("no patches to time".into()));
    }
    // Warm the map's lazily built caches outside the timed passes.
    localize_prepared(prepared, &patches[0])?;
    let mut means = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        for p in &patches {
            std::hint::black_box(localize_prepared(prepared, p)?);
        }
        means.push(start.elapsed().as_secs_f64() / patches.len() as f64);
    }
    means.sort_by(f64::total_cmp);
    Ok(means[means.len() / 2].max(f64::MIN_POSITIVE))
}

/// Smallest radius whose recall reaches 95% of the best recall.
pub fn ground_truth_optimal_radius(per_radius: &[RadiusEval]) -> Result<usize> {
    let max = per_radius
        .iter()
        .map(|e| e.recall)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
        .ok_or_else(|| Error::Input("no evaluated radii".into()))?;
    let target = OPTIMAL_RECALL_FRACTION * max;
    Ok(per_radius
        .iter()
        .filter(|e| e.recall >= target)
        .map(|e| e.radius)
        .min()
        .expect("the best radius always qualifies"))
}

/// Max recall-to-computation efficiency: `1 - |p_i - p_g| / max_n |p_n - p_g|`,
/// or 1 when every radius equals `p_g`.
pub fn m_metric(p_i: f64, p_g: f64, all_radii: &[f64]) -> f64 {
    let spread = all_radii.iter().map(|r| (r - p_g).abs()).fold(0.0, f64::max);
    if spread == 0.0 {
        return 1.0;
    }
    (1.0 - (p_i - p_g).abs() / spread).clamp(0.0, 1.0)
}

/// Validates a calibration on `pair` at the configured radii plus the
/// selected one.
pub fn evaluate(pair: &AlignedPair, outcome: &CalibrationOutcome, eval_cfg: &EvalConfig) -> Result<EvalReport> {
    eval_cfg.validate()?;
    let cal = &outcome.config;
    let front_end = cal.front_end.build();
    let selected = front_end.snap_radius(outcome.selected_radius);

    let mut radii = eval_cfg.radii.clone().unwrap_or_else(|| cal.radii.clone());
    radii.push(selected);
    radii.sort_unstable();
    radii.dedup();

    let match_tol = eval_cfg.match_tol.unwrap_or(cal.match_tol);
    let seed = eval_cfg.seed.unwrap_or(cal.rng_seed);
    let prepared = front_end.prepare(&pair.reference);

    let mut per_radius = Vec::new();
    for radius in radii {
        let result = front_end.check_radius(radius).and_then(|_| {
            recall_prepared(
                prepared.as_ref(),
                pair,
                radius,
                eval_cfg.m_samples,
                match_tol,
                cal.distance,
                seed,
                eval_cfg.timing_reps,
                eval_cfg.timing_samples,
            )
        });
        match result {
            Ok(r) => per_radius.push(RadiusEval {
                radius,
                recall: r.recall,
                mean_time: r.mean_time,
                m_metric: 0.0,
            }),
            Err(e) if radius == selected => return Err(e),
            Err(e) => warn!("{}: skipping radius {radius}: {e}", pair.name),
        }
    }

    let p_g = ground_truth_optimal_radius(&per_radius)?;
    let all: Vec<f64> = per_radius.iter().map(|e| e.radius as f64).collect();
    for e in &mut per_radius {
        e.m_metric = m_metric(e.radius as f64, p_g as f64, &all);
    }
    let at_selected = per_radius
        .iter()
        .find(|e| e.radius == selected)
        .expect("selected radius was evaluated");
    let max_recall = per_radius.iter().map(|e| e.recall).fold(0.0, f64::max);
    Ok(EvalReport {
        pair: pair.name.clone(),
        p_g,
        selected_radius: outcome.selected_radius,
        evaluated_selected_radius: selected,
        m_at_selected: at_selected.m_metric,
        recall_at_selected: at_selected.recall,
        max_recall,
        per_radius,
    })
}
