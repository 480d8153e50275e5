//! The `covcal` command-line tool: calibrate a front-end's patch radius,
//! validate the choice, generate synthetic pairs and time localization.

pub mod config;
pub mod report;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use covcal_core::calibration::{calibrate, calibrate_multi, CalibrationConfig, CalibrationOutcome, OvlCurve};
use covcal_core::datasets::{load_pair, plan_samples, AlignedPair, Manifest, SamplePurpose};
use covcal_core::evaluation::{evaluate, time_localizations, EvalReport};
use covcal_core::imaging::{save_pgm, PreprocessConfig};
use covcal_core::synthdata::synthetic_pair;

use config::{read_json, semantic_error, ConfigError, PairSource, RunConfig, SynthSpec};
use report::{fmt_g9, write_csv, Marker, Plot, Series};

#[derive(Debug, Parser)]
#[command(name = "covcal", version, about = "Calibrate the patch radius of surface-based localization front-ends")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration (the synthetic pair spec for `synth`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Also write SVG plots.
    #[arg(long, global = true)]
    pub plots: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sweep radii and select the operating radius.
    Calibrate {
        /// Calibrate each configured pair and average the selections.
        #[arg(long)]
        multi: bool,
    },
    /// Measure recall and timing around a calibration.
    Evaluate {
        /// calibration.json written by `calibrate`.
        #[arg(long)]
        calibration: PathBuf,
    },
    /// Write a synthetic aligned pair with its manifest.
    Synth,
    /// Time localization across radii.
    Sweep,
}

/// Failure category, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Compute(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Compute(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Compute(e) => e,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<covcal_core::Error> for Failure {
    fn from(e: covcal_core::Error) -> Self {
        use covcal_core::Error as E;
        match e {
            E::Config(_) | E::Constraint(_) => Failure::Config(e.into()),
            E::Load { .. } | E::Manifest { .. } | E::Io(_) | E::Geometry(_) | E::Dimension(_) => Failure::Data(e.into()),
            _ => Failure::Compute(e.into()),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn data_err(e: anyhow::Error) -> Failure {
    Failure::Data(e)
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code; errors go to standard error.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            f.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> CmdResult {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Config(anyhow!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Calibrate { multi } => cmd_calibrate(&cli.common, *multi),
        Command::Evaluate { calibration } => cmd_evaluate(&cli.common, calibration),
        Command::Synth => cmd_synth(&cli.common),
        Command::Sweep => cmd_sweep(&cli.common),
    })
}

/// A parsed, validated run configuration with its location.
struct Loaded {
    cfg: RunConfig,
    path: PathBuf,
    text: String,
    out: PathBuf,
    plots: bool,
}

impl Loaded {
    fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    fn fail(&self, fallback_key: &str, message: impl ToString) -> Failure {
        semantic_error(&self.path, &self.text, fallback_key, message.to_string()).into()
    }
}

fn load_run_config(common: &CommonArgs) -> CmdResult<Loaded> {
    let path = common
        .config
        .clone()
        .ok_or_else(|| Failure::Config(anyhow!("--config is required")))?;
    let (mut cfg, text): (RunConfig, String) = read_json(&path)?;
    if let Some(seed) = common.seed {
        cfg.evaluation.seed = Some(seed);
        for src in cfg.pairs.iter_mut().chain(cfg.validation_pairs.iter_mut()) {
            if let PairSource::Synthetic(s) = src {
                s.surface.seed = seed;
                s.perturb.seed = seed;
            }
        }
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Failure::Config(anyhow!("--out is required")))?;
    let plots = common.plots || cfg.plots;
    let loaded = Loaded {
        cfg,
        path,
        text,
        out,
        plots,
    };
    for src in loaded.cfg.pairs.iter().chain(&loaded.cfg.validation_pairs) {
        if let PairSource::Synthetic(s) = src {
            validate_synth(s).map_err(|e| loaded.fail("synthetic", e))?;
        }
    }
    Ok(loaded)
}

fn validate_synth(s: &SynthSpec) -> covcal_core::Result<()> {
    s.surface.validate()?;
    s.perturb.validate()
}

fn calibration_config(loaded: &Loaded, seed: Option<u64>) -> CmdResult<CalibrationConfig> {
    let cal = loaded.cfg.calibration.resolve(seed);
    cal.validate().map_err(|e| loaded.fail("calibration", e))?;
    Ok(cal)
}

fn load_pairs(sources: &[PairSource], base: &Path) -> CmdResult<Vec<AlignedPair>> {
    sources
        .iter()
        .map(|src| match src {
            PairSource::Manifest(p) => {
                let p = if p.is_absolute() { p.clone() } else { base.join(p) };
                Ok(load_pair(&p)?)
            }
            PairSource::Synthetic(s) => Ok(synthetic_pair(&s.name, &s.surface, &s.perturb)?),
        })
        .collect()
}

fn create_out(out: &Path) -> CmdResult {
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(data_err)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Compute(e.into()))?;
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data_err)
}

pub fn cmd_calibrate(common: &CommonArgs, multi: bool) -> CmdResult {
    let loaded = load_run_config(common)?;
    let cal = calibration_config(&loaded, common.seed)?;
    let sources = &loaded.cfg.pairs;
    if sources.is_empty() {
        return Err(loaded.fail("pairs", "no calibration pairs configured"));
    }
    if sources.len() > 1 && !multi {
        return Err(loaded.fail(
            "pairs",
            format!("{} pairs configured; pass --multi to calibrate them jointly", sources.len()),
        ));
    }

    let pairs = load_pairs(sources, loaded.base_dir())?;
    let outcome = if multi {
        calibrate_multi(&pairs, &cal)?
    } else {
        calibrate(&pairs[0], &cal)?
    };
    info!("selected radius {}", outcome.selected_radius);

    create_out(&loaded.out)?;
    write_json(&loaded.out.join("calibration.json"), &outcome)?;
    write_curve_csv(&loaded.out.join("ovl_curve.csv"), &outcome).map_err(data_err)?;
    if loaded.plots {
        curve_plot(&outcome).write(&loaded.out.join("ovl_curve.svg")).map_err(data_err)?;
    }
    Ok(())
}

fn write_curve_csv(path: &Path, outcome: &CalibrationOutcome) -> anyhow::Result<()> {
    if outcome.per_pair.is_empty() {
        let rows = curve_rows(&outcome.curve, None);
        write_csv(path, &["radius", "ovl"], &rows)
    } else {
        let rows: Vec<_> = outcome
            .per_pair
            .iter()
            .flat_map(|p| curve_rows(&p.curve, Some(&p.pair)))
            .collect();
        write_csv(path, &["pair", "radius", "ovl"], &rows)
    }
}

fn curve_rows(curve: &OvlCurve, pair: Option<&str>) -> Vec<Vec<String>> {
    curve
        .points
        .iter()
        .map(|p| {
            pair.map(str::to_string)
                .into_iter()
                .chain([p.radius.to_string(), fmt_g9(p.ovl)])
                .collect()
        })
        .collect()
}

fn curve_plot(outcome: &CalibrationOutcome) -> Plot {
    let mut plot = Plot::new("Overlap vs patch radius", "patch radius (px)", "OVL");
    plot.log_y = true;
    let threshold = outcome.config.ovl_threshold;
    plot.hline = Some((threshold, format!("O_r = {}", fmt_g9(threshold))));
    let curves: Vec<(String, &OvlCurve, f64)> = if outcome.per_pair.is_empty() {
        vec![(outcome.pairs.join(","), &outcome.curve, outcome.selected_radius)]
    } else {
        outcome
            .per_pair
            .iter()
            .map(|p| (p.pair.clone(), &p.curve, p.selected_radius))
            .collect()
    };
    for (label, curve, selected) in curves {
        plot.series.push(Series {
            label,
            points: curve.points.iter().map(|p| (p.radius as f64, p.ovl)).collect(),
        });
        plot.markers.push(Marker {
            x: selected,
            y: threshold,
            label: format!("P_O = {}", fmt_g9(selected)),
        });
    }
    plot
}

pub fn cmd_evaluate(common: &CommonArgs, calibration: &Path) -> CmdResult {
    let loaded = load_run_config(common)?;
    loaded
        .cfg
        .evaluation
        .validate()
        .map_err(|e| loaded.fail("evaluation", e))?;
    let sources = if loaded.cfg.validation_pairs.is_empty() {
        &loaded.cfg.pairs
    } else {
        &loaded.cfg.validation_pairs
    };
    if sources.is_empty() {
        return Err(loaded.fail("pairs", "no validation pairs configured"));
    }

    let text = fs::read_to_string(calibration)
        .with_context(|| format!("reading {}", calibration.display()))
        .map_err(data_err)?;
    let outcome: CalibrationOutcome = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", calibration.display()))
        .map_err(data_err)?;
    outcome
        .config
        .validate()
        .with_context(|| format!("calibration config in {}", calibration.display()))
        .map_err(data_err)?;

    let pairs = load_pairs(sources, loaded.base_dir())?;
    let reports = pairs
        .iter()
        .map(|p| evaluate(p, &outcome, &loaded.cfg.evaluation))
        .collect::<covcal_core::Result<Vec<_>>>()?;

    create_out(&loaded.out)?;
    let dirs = report_dirs(&loaded.out, &reports);
    for (report, dir) in reports.iter().zip(dirs) {
        create_out(&dir)?;
        write_json(&dir.join("eval.json"), report)?;
        write_eval_csv(&dir.join("eval.csv"), report).map_err(data_err)?;
        if loaded.plots {
            eval_plots(report, &dir).map_err(data_err)?;
        }
        info!(
            "{}: selected {} p_g {} m {}",
            report.pair, report.evaluated_selected_radius, report.p_g, report.m_at_selected
        );
    }
    Ok(())
}

/// The output directory itself for one report, else one sub-directory per
/// pair.
fn report_dirs(out: &Path, reports: &[EvalReport]) -> Vec<PathBuf> {
    if reports.len() == 1 {
        return vec![out.to_path_buf()];
    }
    let mut seen = HashSet::new();
    reports
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let mut name: String = r
                .pair
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
                .collect();
            if name.is_empty() || name.starts_with('.') || !seen.insert(name.clone()) {
                name = format!("{k}_{name}");
                seen.insert(name.clone());
            }
            out.join(name)
        })
        .collect()
}

fn write_eval_csv(path: &Path, report: &EvalReport) -> anyhow::Result<()> {
    let rows: Vec<Vec<String>> = report
        .per_radius
        .iter()
        .map(|e| {
            vec![
                e.radius.to_string(),
                fmt_g9(e.recall),
                fmt_g9(e.mean_time),
                fmt_g9(e.m_metric),
            ]
        })
        .collect();
    write_csv(path, &["radius", "recall", "mean_time_s", "m_metric"], &rows)
}

fn eval_plots(report: &EvalReport, dir: &Path) -> anyhow::Result<()> {
    let selected = report.evaluated_selected_radius as f64;
    let mut recall = Plot::new(&format!("Recall: {}", report.pair), "patch radius (px)", "recall");
    recall.series.push(Series {
        label: "recall".into(),
        points: report.per_radius.iter().map(|e| (e.radius as f64, e.recall)).collect(),
    });
    recall.markers.push(Marker {
        x: selected,
        y: report.recall_at_selected,
        label: "selected".into(),
    });
    recall.write(&dir.join("recall.svg"))?;

    let mut m = Plot::new(&format!("Recall-to-computation: {}", report.pair), "patch radius (px)", "M");
    m.series.push(Series {
        label: "M".into(),
        points: report.per_radius.iter().map(|e| (e.radius as f64, e.m_metric)).collect(),
    });
    m.markers.push(Marker {
        x: selected,
        y: report.m_at_selected,
        label: format!("P_g = {}", report.p_g),
    });
    m.write(&dir.join("m_metric.svg"))
}

pub fn cmd_synth(common: &CommonArgs) -> CmdResult {
    let path = common
        .config
        .clone()
        .ok_or_else(|| Failure::Config(anyhow!("--config is required")))?;
    let out = common
        .out
        .clone()
        .ok_or_else(|| Failure::Config(anyhow!("--out is required")))?;
    let (mut spec, text): (SynthSpec, String) = read_json(&path)?;
    if let Some(seed) = common.seed {
        spec.surface.seed = seed;
        spec.perturb.seed = seed;
    }
    validate_synth(&spec).map_err(|e| semantic_error(&path, &text, "surface", e.to_string()))?;

    let pair = synthetic_pair(&spec.name, &spec.surface, &spec.perturb)?;
    create_out(&out)?;
    save_pgm(&pair.reference, out.join("reference.pgm"))?;
    save_pgm(&pair.query, out.join("query.pgm"))?;
    let manifest = Manifest {
        name: spec.name.clone(),
        reference: "reference.pgm".into(),
        query: "query.pgm".into(),
        offset: Some([0, 0]),
        preprocess: PreprocessConfig {
            target_width: pair.width(),
            patchnorm_radius: None,
            convert_grayscale: true,
        },
        notes: Some(pair.provenance.clone()),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

pub fn cmd_sweep(common: &CommonArgs) -> CmdResult {
    let loaded = load_run_config(common)?;
    let cal = loaded.cfg.calibration.resolve(common.seed);
    cal.front_end.validate().map_err(|e| loaded.fail("front_end", e))?;
    let sweep = &loaded.cfg.sweep;
    if sweep.radii.is_empty() {
        return Err(loaded.fail("sweep", "sweep radii must not be empty"));
    }
    if sweep.samples == 0 || sweep.reps == 0 {
        return Err(loaded.fail("sweep", "sweep samples and reps must be at least 1"));
    }
    let front_end = cal.front_end.build();
    for &r in &sweep.radii {
        front_end.check_radius(r).map_err(|e| loaded.fail("sweep", e))?;
    }
    let Some(source) = loaded.cfg.pairs.first() else {
        return Err(loaded.fail("pairs", "no pair configured to time on"));
    };

    let pair = load_pairs(std::slice::from_ref(source), loaded.base_dir())?.remove(0);
    let prepared = front_end.prepare(&pair.reference);
    let mut rows = Vec::new();
    for &radius in &sweep.radii {
        let n = sweep.samples.min(pair.admissible_count(radius));
        let plan = plan_samples(&pair, radius, n, cal.rng_seed, SamplePurpose::Validation)?;
        let t = time_localizations(prepared.as_ref(), &pair, radius, &plan.centers, sweep.reps)?;
        info!("radius {radius}: {t:.3e} s per localization");
        rows.push((radius, t));
    }

    create_out(&loaded.out)?;
    let csv_rows: Vec<Vec<String>> = rows.iter().map(|&(r, t)| vec![r.to_string(), fmt_g9(t)]).collect();
    write_csv(&loaded.out.join("timing.csv"), &["radius", "mean_time_s"], &csv_rows).map_err(data_err)?;
    if loaded.plots {
        let mut plot = Plot::new("Localization time vs patch radius", "patch radius (px)", "seconds");
        plot.series.push(Series {
            label: front_end.name().into(),
            points: rows.iter().map(|&(r, t)| (r as f64, t)).collect(),
        });
        plot.write(&loaded.out.join("timing.svg")).map_err(data_err)?;
    }
    Ok(())
}
