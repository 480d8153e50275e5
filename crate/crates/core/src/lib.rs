//! Automatic selection of the visual-sensor coverage (patch radius) a
//! surface-based localization front-end needs.
//!
//! The pipeline: load or synthesize pixel-aligned reference/query pairs
//! ([`datasets`], [`synthdata`]), preprocess them ([`imaging`]), sweep patch
//! radii while collecting true-location and impostor match scores from a
//! [`frontends::FrontEnd`], fit normals and measure their overlapping
//! coefficient ([`stats`]), select the operating radius ([`calibration`]),
//! and validate the choice against measured recall ([`evaluation`]).

// `!(x >= 0.0)` style checks are how config validation rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod frontends;
pub mod imaging;
pub mod integral;
pub mod stats;
pub mod synthdata;

pub use calibration::{
    calibrate, calibrate_multi, harvest_scores, ovl_for_radius, select_operating_point, CalibrationConfig,
    CalibrationOutcome, OvlCurve, ScoreSample,
};
pub use datasets::{load_pair, plan_samples, AlignedPair, SamplePlan, SamplePurpose};
pub use error::{Error, Result};
pub use evaluation::{evaluate, ground_truth_optimal_radius, m_metric, recall_at_radius, EvalConfig, EvalReport};
pub use frontends::{extract_patch, localize, FrontEnd, FrontEndConfig, Patch, ScoreField};
pub use imaging::{downsample_to_width, load_image, patch_normalize, GrayImage, PixelPos, PreprocessConfig};
pub use stats::{fit_normal, ovl_weitzman, NormalFit, OvlValue};
