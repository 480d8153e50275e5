use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use covcal_core::calibration::{calibrate_multi, CalibrationConfig, CalibrationOutcome};
use covcal_core::datasets::load_pair;
use covcal_core::imaging::{quantize, GrayImage};
use covcal_core::synthdata::{synthetic_pair, PerturbSpec, SurfaceSpec};
use serde_json::{json, Value};

fn run(args: &[&str]) -> i32 {
    covcal::run_from(std::iter::once("covcal").chain(args.iter().copied()))
}

fn write(path: &Path, value: &Value) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_path_buf()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_synthetic(seed: u64, noise: f64) -> Value {
    json!({
        "synthetic": {
            "name": format!("s{seed}"),
            "surface": {"width": 96, "height": 96, "seed": seed},
            "perturb": {"noise_sigma": noise, "seed": seed + 50}
        }
    })
}

fn small_config(pairs: Vec<Value>) -> Value {
    json!({
        "pairs": pairs,
        "calibration": {"radii": [2, 3, 4, 6, 8], "n_samples": 40, "rng_seed": 5},
        "evaluation": {"radii": [2, 3, 4, 6, 8], "m_samples": 60, "timing_reps": 1, "timing_samples": 3},
        "sweep": {"radii": [4, 8, 16], "samples": 8, "reps": 3}
    })
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

/// Key structure with every leaf replaced by its JSON type.
fn shape(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), shape(v))).collect()),
        Value::Array(a) => a.first().map_or(json!([]), |x| json!([shape(x)])),
        Value::Number(_) => json!("number"),
        Value::String(_) => json!("string"),
        Value::Bool(_) => json!("bool"),
        Value::Null => json!("null"),
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(p.clone(), fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn calibrate_writes_one_row_per_surviving_radius() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("run.json"), &small_config(vec![small_synthetic(1, 0.05)]));
    let out = dir.path().join("out");
    assert_eq!(run(&["calibrate", "--config", s(&cfg), "--out", s(&out), "--plots"]), 0);

    let outcome: CalibrationOutcome = serde_json::from_str(&fs::read_to_string(out.join("calibration.json")).unwrap()).unwrap();
    let (header, rows) = csv_rows(&out.join("ovl_curve.csv"));
    assert_eq!(header, ["radius", "ovl"]);
    assert_eq!(rows.len(), outcome.curve.points.len());
    assert_eq!(rows.len() + outcome.dropped.len(), 5);
    for (row, p) in rows.iter().zip(&outcome.curve.points) {
        assert_eq!(row[0].parse::<usize>().unwrap(), p.radius);
        assert!((row[1].parse::<f64>().unwrap() - p.ovl).abs() <= 1e-8 * p.ovl.max(1e-300) + 1e-300);
    }
    let svg = fs::read_to_string(out.join("ovl_curve.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    let text = fs::read_to_string(out.join("ovl_curve.csv")).unwrap();
    assert!(!text.contains('\r'));
}

#[test]
fn malformed_config_exits_one_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"pairs\": [\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["calibrate", "--config", s(&cfg), "--out", s(&out)]), 1);
    assert!(!out.exists());

    let cfg = write(
        &dir.path().join("range.json"),
        &json!({"pairs": [small_synthetic(1, 0.0)], "calibration": {"ovl_threshold": 2.0}}),
    );
    assert_eq!(run(&["calibrate", "--config", s(&cfg), "--out", s(&out)]), 1);
    assert!(!out.exists());
}

#[test]
fn multi_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifests = Vec::new();
    for (seed, noise) in [(3u64, 0.05), (4, 0.4)] {
        let spec = write(
            &dir.path().join(format!("spec{seed}.json")),
            &json!({
                "name": format!("m{seed}"),
                "surface": {"width": 96, "height": 96, "seed": seed},
                "perturb": {"noise_sigma": noise, "seed": seed + 10}
            }),
        );
        let pair_dir = dir.path().join(format!("pair{seed}"));
        assert_eq!(run(&["synth", "--config", s(&spec), "--out", s(&pair_dir)]), 0);
        manifests.push(pair_dir.join("manifest.json"));
    }
    let mut cfg = small_config(vec![]);
    cfg["pairs"] = json!([{"manifest": "pair3/manifest.json"}, {"manifest": "pair4/manifest.json"}]);
    let cfg = write(&dir.path().join("run.json"), &cfg);
    let out = dir.path().join("out");
    assert_eq!(run(&["calibrate", "--config", s(&cfg), "--out", s(&out)]), 1, "two pairs need --multi");
    assert_eq!(run(&["calibrate", "--multi", "--config", s(&cfg), "--out", s(&out)]), 0);

    let got: CalibrationOutcome = serde_json::from_str(&fs::read_to_string(out.join("calibration.json")).unwrap()).unwrap();
    let pairs: Vec<_> = manifests.iter().map(|m| load_pair(m).unwrap()).collect();
    let lib_cfg = CalibrationConfig {
        radii: vec![2, 3, 4, 6, 8],
        n_samples: 40,
        rng_seed: 5,
        ..Default::default()
    };
    let want = calibrate_multi(&pairs, &lib_cfg).unwrap();
    assert_eq!(got, want);

    let radii: Vec<f64> = got.per_pair.iter().map(|p| p.selected_radius).collect();
    assert_eq!(radii.len(), 2);
    let mean = (radii[0] + radii[1]) / 2.0;
    assert_eq!(got.mean_selected_radius, Some(mean));
    assert_eq!(got.selected_radius, (mean + 0.5).floor());

    let (header, rows) = csv_rows(&out.join("ovl_curve.csv"));
    assert_eq!(header, ["pair", "radius", "ovl"]);
    assert_eq!(rows.len(), got.per_pair.iter().map(|p| p.curve.points.len()).sum::<usize>());
}

fn calibrate_and_evaluate(dir: &Path, cfg: &Value) -> PathBuf {
    let cfg = write(&dir.join("run.json"), cfg);
    let cal_out = dir.join("cal");
    let eval_out = dir.join("eval");
    assert_eq!(run(&["calibrate", "--config", s(&cfg), "--out", s(&cal_out)]), 0);
    let cal = cal_out.join("calibration.json");
    assert_eq!(
        run(&["evaluate", "--config", s(&cfg), "--calibration", s(&cal), "--out", s(&eval_out), "--plots"]),
        0
    );
    eval_out
}

#[test]
fn easy_pair_scores_full_m() {
    let dir = tempfile::tempdir().unwrap();
    let out = calibrate_and_evaluate(dir.path(), &small_config(vec![small_synthetic(2, 0.0)]));
    let report = read_json(&out.join("eval.json"));
    assert_eq!(report["m_at_selected"], json!(1.0));
    assert_eq!(report["p_g"], json!(2));
    assert!(out.join("recall.svg").exists() && out.join("m_metric.svg").exists());
}

#[test]
fn eval_csv_is_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let out = calibrate_and_evaluate(dir.path(), &small_config(vec![small_synthetic(6, 0.35)]));
    let (header, rows) = csv_rows(&out.join("eval.csv"));
    assert_eq!(header, ["radius", "recall", "mean_time_s", "m_metric"]);
    let parsed: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap(), r[3].parse().unwrap()))
        .collect();
    let best = parsed.iter().map(|r| r.1).fold(0.0, f64::max);
    let p_g = parsed
        .iter()
        .filter(|r| r.1 >= 0.95 * best)
        .map(|r| r.0)
        .fold(f64::INFINITY, f64::min);
    let spread = parsed.iter().map(|r| (r.0 - p_g).abs()).fold(0.0, f64::max);
    for &(radius, _, m) in &parsed {
        let want = if spread == 0.0 { 1.0 } else { 1.0 - (radius - p_g).abs() / spread };
        assert!((want - m).abs() <= 1e-9, "radius {radius}: {m} vs {want}");
    }
    assert_eq!(read_json(&out.join("eval.json"))["p_g"].as_f64().unwrap(), p_g);
}

#[test]
fn missing_calibration_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("run.json"), &small_config(vec![small_synthetic(1, 0.0)]));
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("out");
    assert_eq!(run(&["evaluate", "--config", s(&cfg), "--calibration", s(&missing), "--out", s(&out)]), 2);
    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "{\"selected_radius\": 3}").unwrap();
    assert_eq!(run(&["evaluate", "--config", s(&cfg), "--calibration", s(&garbage), "--out", s(&out)]), 2);
}

fn quantized(img: &GrayImage) -> Vec<f64> {
    img.data().iter().map(|&v| quantize(v) as f64 / 255.0).collect()
}

#[test]
fn synth_round_trips_through_load_pair() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(&dir.path().join("spec.json"), &json!({}));
    let out = dir.path().join("pair");
    assert_eq!(run(&["synth", "--config", s(&spec), "--out", s(&out)]), 0);
    let loaded = load_pair(out.join("manifest.json")).unwrap();
    let direct = synthetic_pair("synthetic", &SurfaceSpec::default(), &PerturbSpec::default()).unwrap();
    assert_eq!(loaded.reference.data(), quantized(&direct.reference).as_slice());
    assert_eq!(loaded.query.data(), quantized(&direct.query).as_slice());
    assert_eq!((loaded.width(), loaded.height()), (256, 256));
}

#[test]
fn tiled_synth_is_periodic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        &dir.path().join("spec.json"),
        &json!({"surface": {"width": 128, "height": 96, "uniqueness": 0.0, "motif_size": 16}}),
    );
    let out = dir.path().join("pair");
    assert_eq!(run(&["synth", "--config", s(&spec), "--out", s(&out)]), 0);
    let img = load_pair(out.join("manifest.json")).unwrap().reference;
    for y in 0..img.height() {
        for x in 0..img.width() {
            assert_eq!(img.get(x, y), img.get(x % 16, y % 16), "({x},{y})");
        }
    }
}

#[test]
fn seeds_give_distinct_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        &dir.path().join("spec.json"),
        &json!({"surface": {"width": 64, "height": 64}, "perturb": {"noise_sigma": 0.1}}),
    );
    let pairs: Vec<_> = (1..=5)
        .map(|seed| {
            let out = dir.path().join(format!("seed{seed}"));
            assert_eq!(run(&["synth", "--config", s(&spec), "--out", s(&out), "--seed", &seed.to_string()]), 0);
            load_pair(out.join("manifest.json")).unwrap()
        })
        .collect();
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            assert_ne!(pairs[i].reference, pairs[j].reference, "seeds {} and {}", i + 1, j + 1);
            assert_ne!(pairs[i].query, pairs[j].query);
        }
    }
}

#[test]
fn invalid_synth_spec_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pair");
    for spec in [
        json!({"surface": {"uniqueness": 1.5}}),
        json!({"surface": {"width": 4}}),
        json!({"perturb": {"noise_sigma": -1.0}}),
        json!({"colour": 3}),
    ] {
        let path = write(&dir.path().join("spec.json"), &spec);
        assert_eq!(run(&["synth", "--config", s(&path), "--out", s(&out)]), 1, "{spec}");
        assert!(!out.exists());
    }
}

#[test]
fn sweep_rows_follow_the_radii() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(vec![json!({"synthetic": {"surface": {"seed": 4}}})]);
    cfg["sweep"]["samples"] = json!(10);
    let cfg = write(&dir.path().join("run.json"), &cfg);
    let runs: Vec<Vec<Vec<String>>> = (0..2)
        .map(|k| {
            let out = dir.path().join(format!("out{k}"));
            assert_eq!(run(&["sweep", "--config", s(&cfg), "--out", s(&out), "--plots"]), 0);
            assert!(out.join("timing.svg").exists());
            let (header, rows) = csv_rows(&out.join("timing.csv"));
            assert_eq!(header, ["radius", "mean_time_s"]);
            rows
        })
        .collect();
    let radii = |rows: &[Vec<String>]| rows.iter().map(|r| r[0].clone()).collect::<Vec<_>>();
    assert_eq!(radii(&runs[0]), ["4", "8", "16"]);
    assert_eq!(radii(&runs[0]), radii(&runs[1]));
    // Timing is noisy; accept the faster of the two runs per radius.
    let times: Vec<f64> = (0..3)
        .map(|i| {
            runs.iter()
                .map(|r| r[i][1].parse::<f64>().unwrap())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    for w in times.windows(2) {
        assert!(w[1] >= 0.8 * w[0], "times {times:?}");
    }
}

#[test]
fn empty_sweep_radii_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(vec![small_synthetic(1, 0.0)]);
    cfg["sweep"]["radii"] = json!([]);
    let cfg = write(&dir.path().join("run.json"), &cfg);
    let out = dir.path().join("out");
    assert_eq!(run(&["sweep", "--config", s(&cfg), "--out", s(&out)]), 1);
    assert!(!out.exists());
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("run.json"), &json!({"pairs": [{"manifest": "absent.json"}]}));
    assert_eq!(run(&["calibrate", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]), 2);
}

#[test]
fn json_outputs_keep_their_structure() {
    let dir = tempfile::tempdir().unwrap();
    let out = calibrate_and_evaluate(dir.path(), &small_config(vec![small_synthetic(1, 0.05)]));
    let cal = read_json(&dir.path().join("cal/calibration.json"));
    let normal = json!({"mean": "number", "std": "number", "n": "number"});
    assert_eq!(
        shape(&cal),
        json!({
            "selected_radius": "number",
            "curve": {"points": [{"radius": "number", "ovl": "number"}]},
            "config": {
                "radii": ["number"],
                "n_samples": "number",
                "ovl_threshold": "number",
                "match_tol": "number",
                "rng_seed": "number",
                "front_end": {"kind": "string"},
                "impostor_cap": "number",
                "distance": "string"
            },
            "pairs": ["string"],
            "per_radius": [{"radius": "number", "ovl": "number", "truth": normal, "impostor": normal}],
            "dropped": []
        })
    );
    assert_eq!(
        shape(&read_json(&out.join("eval.json"))),
        json!({
            "pair": "string",
            "per_radius": [{"radius": "number", "recall": "number", "mean_time": "number", "m_metric": "number"}],
            "p_g": "number",
            "selected_radius": "number",
            "evaluated_selected_radius": "number",
            "m_at_selected": "number",
            "recall_at_selected": "number",
            "max_recall": "number"
        })
    );
    let manifest_dir = dir.path().join("pair");
    let spec = write(&dir.path().join("spec.json"), &json!({"surface": {"width": 64, "height": 64}}));
    assert_eq!(run(&["synth", "--config", s(&spec), "--out", s(&manifest_dir)]), 0);
    assert_eq!(
        shape(&read_json(&manifest_dir.join("manifest.json"))),
        json!({
            "name": "string",
            "reference": "string",
            "query": "string",
            "offset": ["number"],
            "preprocess": {"target_width": "number", "convert_grayscale": "bool"},
            "notes": "string"
        })
    );
}

#[test]
fn commands_leave_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("in");
    fs::create_dir(&inputs).unwrap();
    let spec = write(&inputs.join("spec.json"), &json!({"surface": {"width": 64, "height": 64}}));
    let pair_dir = dir.path().join("pair");
    assert_eq!(run(&["synth", "--config", s(&spec), "--out", s(&pair_dir)]), 0);
    let mut cfg = small_config(vec![json!({"manifest": "../pair/manifest.json"})]);
    cfg["calibration"]["radii"] = json!([2, 4, 6]);
    cfg["evaluation"]["radii"] = json!([2, 4, 6]);
    let cfg = write(&inputs.join("run.json"), &cfg);
    let before_in = snapshot(&inputs);
    let before_pair = snapshot(&pair_dir);

    let out = dir.path().join("out");
    assert_eq!(run(&["calibrate", "--config", s(&cfg), "--out", s(&out)]), 0);
    let cal = out.join("calibration.json");
    let cal_bytes = fs::read(&cal).unwrap();
    let eval_out = dir.path().join("eval");
    assert_eq!(run(&["evaluate", "--config", s(&cfg), "--calibration", s(&cal), "--out", s(&eval_out)]), 0);

    assert_eq!(snapshot(&inputs), before_in);
    assert_eq!(snapshot(&pair_dir), before_pair);
    assert_eq!(fs::read(&cal).unwrap(), cal_bytes);
    let mut top: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    top.sort();
    assert_eq!(top, ["eval", "in", "out", "pair"]);
}

#[test]
fn seed_flag_overrides_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("run.json"), &small_config(vec![small_synthetic(1, 0.1)]));
    let read = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert_eq!(run(&["calibrate", "--config", s(&cfg), "--out", s(&out), "--seed", seed]), 0);
        read_json(&out.join("calibration.json"))
    };
    let a = read("a", "12");
    assert_eq!(a["config"]["rng_seed"], json!(12));
    assert_eq!(a, read("b", "12"));
    assert_ne!(a["per_radius"], read("c", "13")["per_radius"]);
}

#[test]
fn unknown_arguments_are_config_errors() {
    assert_eq!(run(&["calibrate", "--bogus"]), 1);
    assert_eq!(run(&["calibrate"]), 1);
}
