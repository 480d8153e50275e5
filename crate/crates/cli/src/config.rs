//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use covcal_core::calibration::{CalibrationConfig, DistanceMetric, DEFAULT_IMPOSTOR_CAP};
use covcal_core::evaluation::EvalConfig;
use covcal_core::frontends::FrontEndConfig;
use covcal_core::synthdata::{PerturbSpec, SurfaceSpec};
use serde::{Deserialize, Serialize};

/// A config problem, reported as `path:line: message`.
#[derive(Debug)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}: {}", self.path.display(), self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Calibration pairs.
    #[serde(default)]
    pub pairs: Vec<PairSource>,
    /// Pairs for `evaluate`; `pairs` when empty.
    #[serde(default)]
    pub validation_pairs: Vec<PairSource>,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub plots: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PairSource {
    /// Path to a pair manifest, relative to the config file.
    Manifest(PathBuf),
    Synthetic(SynthSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_synth_name")]
    pub name: String,
    #[serde(default)]
    pub surface: SurfaceSpec,
    #[serde(default)]
    pub perturb: PerturbSpec,
}

fn default_synth_name() -> String {
    "synthetic".into()
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: default_synth_name(),
            surface: SurfaceSpec::default(),
            perturb: PerturbSpec::default(),
        }
    }
}

/// Calibration settings; absent fields take defaults, and absent radii the
/// front-end's default sweep.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub radii: Option<Vec<usize>>,
    pub n_samples: Option<usize>,
    pub ovl_threshold: Option<f64>,
    pub match_tol: Option<f64>,
    pub rng_seed: Option<u64>,
    #[serde(default)]
    pub front_end: FrontEndConfig,
    pub impostor_cap: Option<usize>,
    #[serde(default)]
    pub distance: DistanceMetric,
}

impl CalibrationSection {
    pub fn resolve(&self, seed: Option<u64>) -> CalibrationConfig {
        let base = CalibrationConfig::default();
        CalibrationConfig {
            radii: self
                .radii
                .clone()
                .unwrap_or_else(|| CalibrationConfig::default_radii(&self.front_end)),
            n_samples: self.n_samples.unwrap_or(base.n_samples),
            ovl_threshold: self.ovl_threshold.unwrap_or(base.ovl_threshold),
            match_tol: self.match_tol.unwrap_or(base.match_tol),
            rng_seed: seed.or(self.rng_seed).unwrap_or(base.rng_seed),
            front_end: self.front_end.clone(),
            impostor_cap: self.impostor_cap.unwrap_or(DEFAULT_IMPOSTOR_CAP),
            distance: self.distance,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_sweep_radii")]
    pub radii: Vec<usize>,
    /// Query patches timed per radius.
    #[serde(default = "default_sweep_samples")]
    pub samples: usize,
    #[serde(default = "default_sweep_reps")]
    pub reps: usize,
}

fn default_sweep_radii() -> Vec<usize> {
    vec![4, 8, 16, 32]
}
fn default_sweep_samples() -> usize {
    20
}
fn default_sweep_reps() -> usize {
    3
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            radii: default_sweep_radii(),
            samples: default_sweep_samples(),
            reps: default_sweep_reps(),
        }
    }
}

/// Reads and parses a JSON config, reporting syntax and schema errors with
/// their line.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, String), ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let value = serde_json::from_str(&text).map_err(|e| ConfigError {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok((value, text))
}

/// Line of the first occurrence of `"key"` in `text`, or 1.
pub fn key_line(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1)
}

/// Builds a semantic error, pointing at the first listed key found in the
/// message or else at `fallback_key`.
pub fn semantic_error(path: &Path, text: &str, fallback_key: &str, message: String) -> ConfigError {
    const KEYS: [&str; 20] = [
        "radii",
        "n_samples",
        "ovl_threshold",
        "match_tol",
        "impostor_cap",
        "subpatch_size",
        "stride",
        "inlier_tol",
        "detector_threshold",
        "max_keypoints",
        "m_samples",
        "timing_reps",
        "timing_samples",
        "texture_scale",
        "uniqueness",
        "motif_size",
        "octaves",
        "noise_sigma",
        "contrast_gain",
        "occlusion_size",
    ];
    let key = KEYS
        .iter()
        .find(|k| message.contains(*k) && text.contains(&format!("\"{k}\"")))
        .copied()
        .unwrap_or(fallback_key);
    ConfigError {
        path: path.to_path_buf(),
        line: key_line(text, key),
        message,
    }
}
