use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use flowsplit::cli::{
    cmd_bounds, cmd_datagen, cmd_plot, cmd_run, read_trace, trace_file_name, CliError, ExperimentConfig, TraceRow, XAxis,
};
use flowsplit::data::{DatasetKind, DatasetSpec};
use flowsplit::optimizers::{Method, Outcome};
use tempfile::TempDir;

fn lls_spec(n: usize, p: usize, seed: u64) -> DatasetSpec {
    serde_json::from_value(serde_json::json!({
        "kind": "random-lls", "n": n, "p": p, "noise_sigma": 0.01, "seed": seed
    }))
    .unwrap()
}

fn write_json(dir: &Path, name: &str, value: serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowsplit"))
}

#[test]
fn datagen_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    cmd_datagen(&lls_spec(100, 10, 7), &a).unwrap();
    cmd_datagen(&lls_spec(100, 10, 7), &b).unwrap();
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert!(text.starts_with("100 10\n"));
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn datagen_tomography_file() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("tomo.txt");
    let spec: DatasetSpec =
        serde_json::from_value(serde_json::json!({"kind": "tomo-like", "image_side": 4, "rays": 12, "seed": 3})).unwrap();
    cmd_datagen(&spec, &out).unwrap();
    let pb = flowsplit::data::load_linear_system(&out).unwrap();
    assert_eq!((pb.n(), pb.p()), (12, 16));
}

#[test]
fn datagen_bad_path_is_io_error() {
    let err = cmd_datagen(&lls_spec(20, 2, 1), Path::new("/nonexistent/dir/out.txt")).unwrap_err();
    assert!(matches!(err, CliError::Data(_)), "{err}");
}

#[test]
fn datagen_blob_manifest() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("blobs.json");
    let spec: DatasetSpec = serde_json::from_value(serde_json::json!({
        "kind": "gaussian-blobs", "n": 40, "p": 3, "classes": 2, "seed": 5
    }))
    .unwrap();
    cmd_datagen(&spec, &out).unwrap();
    let back: DatasetSpec = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(back, spec);
    assert_eq!(back.kind, DatasetKind::GaussianBlobs);
}

fn smoke_config(out_dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "dataset": {"kind": "random-lls", "n": 60, "p": 5, "noise_sigma": 0.01, "seed": 11},
        "methods": ["sgd", "splitting"],
        "alphas": [0.01, 0.1],
        "batch_size": 6,
        "max_epochs": 1,
        "stop": {"kind": "relative-residual", "threshold": 1e-9},
        "repeat": 2,
        "seed": 4,
        "out_dir": out_dir
    })
}

#[test]
fn run_writes_traces_and_summary() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("runs");
    let path = write_json(dir.path(), "cfg.json", smoke_config(&out));
    let cfg = ExperimentConfig::load(&path).unwrap();
    let summary = cmd_run(&cfg, Some(2)).unwrap();
    assert_eq!(summary.len(), 8);
    for row in &summary {
        assert_eq!(row.outcome, Outcome::MaxEpochs);
        assert_eq!(row.stop_iteration, None);
        let rows = read_trace(&out.join(&row.file)).unwrap();
        assert!(rows.len() >= 2);
        assert!(rows.iter().all(|r| r.method == row.method && r.seed == row.seed && r.batch == 6));
    }
    let header = fs::read_to_string(out.join(trace_file_name(Method::Sgd, 0.01, 0))).unwrap();
    assert!(header.starts_with("method,alpha,batch,seed,epoch,iteration,wall_seconds,loss,metric,diverged\n"));
    assert!(out.join("summary.csv").is_file());
}

fn untimed(rows: Vec<TraceRow>) -> Vec<TraceRow> {
    rows.into_iter()
        .map(|r| TraceRow {
            wall_seconds: 0.0,
            ..r
        })
        .collect()
}

#[test]
fn rerun_reproduces_everything_but_time() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut cfg: ExperimentConfig = serde_json::from_value(smoke_config(out)).unwrap();
        cfg.repeat = 1;
        cmd_run(&cfg, None).unwrap();
    }
    let name = trace_file_name(Method::Splitting, 0.1, 0);
    assert_eq!(untimed(read_trace(&a.join(&name)).unwrap()), untimed(read_trace(&b.join(&name)).unwrap()));
}

#[test]
fn hand_computed_two_batch_iterates() {
    let dir = TempDir::new().unwrap();
    let system = dir.path().join("two.txt");
    fs::write(&system, "2 1\n1 1\n1 -1\n").unwrap();
    let alpha: f64 = 0.3;
    let cfg = serde_json::json!({
        "dataset": {"kind": "linear-system-file", "path": system},
        "methods": ["sgd", "splitting"],
        "alphas": [alpha],
        "batch_size": 1,
        "max_epochs": 1,
        "stop": {"kind": "loss-threshold", "threshold": 1e-300, "eval_every": 1},
        "shuffle": false,
        "init_scale": 0.0,
        "repeat": 1,
        "out_dir": dir.path().join("runs")
    });
    let cfg: ExperimentConfig = serde_json::from_value(cfg).unwrap();
    cmd_run(&cfg, None).unwrap();
    let loss = |theta: f64| ((theta - 1.0).powi(2) + (theta + 1.0).powi(2)) / 4.0;
    let e = (-alpha).exp();
    let split = [0.0, 1.0 - e, (1.0 - e) * e - (1.0 - e)];
    let sgd = [0.0, alpha, alpha - alpha * (alpha + 1.0)];
    for (method, thetas) in [(Method::Splitting, split), (Method::Sgd, sgd)] {
        let rows = read_trace(&cfg.out_dir.join(trace_file_name(method, alpha, 0))).unwrap();
        assert_eq!(rows.len(), 3);
        for (row, theta) in rows.iter().zip(thetas) {
            assert!((row.loss - loss(theta)).abs() < 1e-14, "{method:?} {} vs {}", row.loss, loss(theta));
        }
    }
}

#[test]
fn paper_style_softmax_config_on_blobs() {
    let dir = TempDir::new().unwrap();
    let cfg = serde_json::json!({
        "dataset": {"kind": "gaussian-blobs", "n": 640, "p": 10, "classes": 10, "seed": 9, "holdout_n": 500},
        "methods": ["splitting"],
        "alphas": [1.0],
        "batch_size": 64,
        "max_epochs": 20,
        "stop": {"kind": "test-error", "threshold": 0.25},
        "repeat": 1,
        "out_dir": dir.path().join("runs")
    });
    let cfg: ExperimentConfig = serde_json::from_value(cfg).unwrap();
    let summary = cmd_run(&cfg, None).unwrap();
    assert_eq!(summary[0].outcome, Outcome::Converged);
    assert!(summary[0].stop_iteration.is_some());
}

#[test]
fn config_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let mut bad = smoke_config(dir.path());
    bad["stop"]["threshold"] = serde_json::json!("small");
    let path = write_json(dir.path(), "bad.json", bad);
    let err = ExperimentConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("stop.threshold"), "{err}");

    let mut unknown = smoke_config(dir.path());
    unknown["dataset"]["colour"] = serde_json::json!(1);
    let path = write_json(dir.path(), "unknown.json", unknown);
    let err = ExperimentConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("dataset"), "{err}");

    let mut zero = smoke_config(dir.path());
    zero["repeat"] = serde_json::json!(0);
    let cfg: ExperimentConfig = serde_json::from_value(zero).unwrap();
    assert!(matches!(cmd_run(&cfg, None), Err(CliError::Invalid(_))));
}

#[test]
fn divergence_is_an_outcome_not_a_failure() {
    let dir = TempDir::new().unwrap();
    let cfg = serde_json::json!({
        "dataset": {"kind": "random-lls", "n": 50, "p": 5, "noise_sigma": 0.01, "seed": 2},
        "methods": ["sgd"],
        "alphas": [100.0],
        "batch_size": 5,
        "max_epochs": 20,
        "stop": {"kind": "relative-residual", "threshold": 1e-6},
        "repeat": 1,
        "out_dir": dir.path().join("runs")
    });
    let cfg: ExperimentConfig = serde_json::from_value(cfg).unwrap();
    let summary = cmd_run(&cfg, None).unwrap();
    assert_eq!(summary[0].outcome, Outcome::Diverged);
    let text = fs::read_to_string(cfg.out_dir.join("summary.csv")).unwrap();
    assert!(text.contains("diverged"));
}

#[test]
fn bounds_single_block_is_flat_zero() {
    let dir = TempDir::new().unwrap();
    let rows = cmd_bounds(20, 1, 10.0, 11, 0, dir.path()).unwrap();
    assert!(rows.iter().all(|r| r.error < 1e-10 && r.limit < 1e-10));
    let csv = fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    assert!(csv.starts_with("t,error,limit\n"));
    assert_eq!(csv.lines().count(), 12);
    assert!(dir.path().join("bounds.svg").is_file());
}

#[test]
fn bounds_curves_approach_their_limit() {
    let dir = TempDir::new().unwrap();
    for blocks in [2, 10] {
        let rows = cmd_bounds(20, blocks, 2000.0, 5, 1, dir.path()).unwrap();
        let last = rows.last().unwrap();
        assert!(last.limit > 0.0);
        assert!((last.error - last.limit).abs() < 1e-3, "{blocks}: {last:?}");
    }
}

#[test]
fn bounds_rank_deficient() {
    let dir = TempDir::new().unwrap();
    assert!(matches!(cmd_bounds(5, 6, 1.0, 3, 0, dir.path()), Err(CliError::Bounds(_))));
}

fn write_rows(path: &Path, rows: &[(Method, f64, usize, f64)]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    for &(method, alpha, iteration, metric) in rows {
        w.serialize(TraceRow {
            method,
            alpha,
            batch: 1,
            seed: 0,
            epoch: iteration,
            iteration,
            wall_seconds: iteration as f64 * 0.5,
            loss: metric,
            metric,
            diverged: false,
        })
        .unwrap();
    }
    w.flush().unwrap();
}

#[test]
fn plot_single_trace() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("t.csv");
    write_rows(&trace, &[(Method::Sgd, 0.1, 0, 1.0), (Method::Sgd, 0.1, 1, 0.1)]);
    let out = dir.path().join("p.svg");
    cmd_plot(&[trace], XAxis::Iteration, &out).unwrap();
    let svg = fs::read_to_string(&out).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
}

#[test]
fn plot_two_methods_matches_golden() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_rows(&a, &[(Method::Sgd, 0.1, 0, 1.0), (Method::Sgd, 0.1, 10, 0.2), (Method::Sgd, 0.1, 20, 0.05)]);
    write_rows(
        &b,
        &[(Method::Splitting, 0.1, 0, 1.0), (Method::Splitting, 0.1, 10, 0.01), (Method::Splitting, 0.1, 20, 1e-4)],
    );
    let out = dir.path().join("p.svg");
    cmd_plot(&[a, b], XAxis::Iteration, &out).unwrap();
    let svg = fs::read_to_string(&out).unwrap();
    assert_eq!(svg.matches(r#"class="legend""#).count(), 2);

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/two_methods.svg");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, &svg).unwrap();
    }
    assert_eq!(svg, fs::read_to_string(&golden).unwrap());
}

#[test]
fn plot_truncates_divergent_runs() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("d.csv");
    let mut w = csv::Writer::from_path(&trace).unwrap();
    for (i, (metric, diverged)) in [(1.0, false), (5.0, false), (f64::INFINITY, true)].into_iter().enumerate() {
        w.serialize(TraceRow {
            method: Method::Sgd,
            alpha: 10.0,
            batch: 1,
            seed: 0,
            epoch: i,
            iteration: i,
            wall_seconds: 0.0,
            loss: metric,
            metric,
            diverged,
        })
        .unwrap();
    }
    w.flush().unwrap();
    let rows = read_trace(&trace).unwrap();
    let series = flowsplit::cli::trace_series(&rows, XAxis::Iteration);
    assert_eq!(series[0].points, vec![(0.0, 1.0), (1.0, 5.0)]);
}

#[test]
fn plot_without_points_is_empty_trace() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("e.csv");
    write_rows(&trace, &[]);
    fs::write(&trace, "method,alpha,batch,seed,epoch,iteration,wall_seconds,loss,metric,diverged\n").unwrap();
    let err = cmd_plot(&[trace], XAxis::Iteration, &dir.path().join("e.svg")).unwrap_err();
    assert!(matches!(err, CliError::Plot(_)));
}

#[test]
fn binary_round_trip_and_exit_codes() {
    let dir = TempDir::new().unwrap();
    let runs = dir.path().join("runs");
    let cfg = write_json(dir.path(), "cfg.json", smoke_config(&runs));
    let status = bin()
        .args(["--threads", "2", "run"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert!(status.success());

    let trace = runs.join(trace_file_name(Method::Splitting, 0.1, 1));
    let svg = dir.path().join("wall.svg");
    let status = bin()
        .args(["plot", "--x-axis", "wall-seconds"])
        .arg(&trace)
        .arg("--out")
        .arg(&svg)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(fs::read_to_string(&svg).unwrap().contains("wall time"));

    let bounds_dir = dir.path().join("bounds");
    let status = bin()
        .args(["bounds", "--n", "12", "--blocks", "3", "--t-max", "5", "--points", "6", "--seed", "2", "--out"])
        .arg(&bounds_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(bounds_dir.join("bounds.csv").is_file());

    let missing = bin().arg("run").arg(dir.path().join("missing.json")).status().unwrap();
    assert!(!missing.success());
}
