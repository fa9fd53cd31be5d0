//! Experiment harness behind the `flowsplit` binary.
//!
//! Subcommands: `datagen` materializes a dataset spec, `run` executes a JSON
//! experiment config over methods × learning rates × repeats, `bounds` sweeps
//! the splitting error of a random linear flow, and `plot` turns trace CSVs
//! into an SVG chart.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, BoundsError};
use crate::data::{self, DataError, DatasetKind, DatasetSpec};
use crate::ode::IntegratorConfig;
use crate::optimizers::{self, LocalSolver, Method, Outcome, RunConfig, RunError, StoppingRule, Trace};
use crate::plot::{self, Chart, PlotError, Series, YScale};
use crate::problems::ProblemKind;

pub const TRACE_HEADER: [&str; 10] = [
    "method",
    "alpha",
    "batch",
    "seed",
    "epoch",
    "iteration",
    "wall_seconds",
    "loss",
    "metric",
    "diverged",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("{failed} of {total} runs failed")]
    RunsFailed { failed: usize, total: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowsplit", version, about = "Minibatch SGD versus exact local-flow splitting")]
pub struct Cli {
    /// Overrides the seed of the dataset, experiment or bound sweep.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for grids and sweeps (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize a dataset spec (JSON) as a linear-system file or a manifest.
    Datagen {
        spec: PathBuf,
    },
    /// Run an experiment config (JSON) and write one trace CSV per run.
    Run {
        config: PathBuf,
    },
    /// Sweep the splitting error of a random linear flow against its limit.
    Bounds {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 50.0)]
        t_max: f64,
        #[arg(long, default_value_t = 101)]
        points: usize,
    },
    /// Plot trace CSVs as an SVG convergence chart.
    Plot {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = XAxis::Iteration)]
        x_axis: XAxis,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum XAxis {
    Iteration,
    WallSeconds,
}

/// JSON experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub stop: StoppingRule,
    /// Seeds the sample shuffle and batch order; shared by all runs.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub local_solver: LocalSolver,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Initialization seed of the first repeat.
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
    /// Repeat `r` uses `init_seed + r · seed_stride`.
    #[serde(default = "default_stride")]
    pub seed_stride: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_true() -> bool {
    true
}

fn default_init_scale() -> f64 {
    0.01
}

fn default_repeat() -> usize {
    30
}

fn default_stride() -> u64 {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: format!("at `{}`: {}", e.path(), e.inner()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.repeat == 0 {
            return Err(CliError::Invalid("repeat must be at least 1".into()));
        }
        if self.methods.is_empty() || self.alphas.is_empty() {
            return Err(CliError::Invalid("methods and alphas must be nonempty".into()));
        }
        Ok(())
    }

    /// Every (method, α, repeat) cell, in method-major order.
    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::with_capacity(self.methods.len() * self.alphas.len() * self.repeat);
        for &method in &self.methods {
            for &alpha in &self.alphas {
                for r in 0..self.repeat {
                    out.push(RunConfig {
                        method,
                        alpha,
                        batch_size: self.batch_size,
                        seed: self.seed,
                        max_epochs: self.max_epochs,
                        stop: self.stop,
                        integrator: self.integrator,
                        local_solver: self.local_solver,
                        shuffle: self.shuffle,
                        init_scale: self.init_scale,
                        init_seed: self.init_seed.wrapping_add(r as u64 * self.seed_stride),
                    });
                }
            }
        }
        out
    }
}

/// One CSV row of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub method: Method,
    pub alpha: f64,
    pub batch: usize,
    pub seed: u64,
    pub epoch: usize,
    pub iteration: usize,
    pub wall_seconds: f64,
    pub loss: f64,
    pub metric: f64,
    pub diverged: bool,
}

pub fn trace_rows(trace: &Trace) -> Vec<TraceRow> {
    trace
        .records
        .iter()
        .map(|r| TraceRow {
            method: trace.meta.method,
            alpha: trace.meta.alpha,
            batch: trace.meta.batch_size,
            seed: trace.meta.init_seed,
            epoch: r.epoch,
            iteration: r.iteration,
            wall_seconds: r.wall_seconds,
            loss: r.loss,
            metric: r.metric,
            diverged: r.diverged,
        })
        .collect()
}

pub fn trace_file_name(method: Method, alpha: f64, seed: u64) -> String {
    format!("{}_alpha{}_seed{}.csv", method.name(), alpha, seed)
}

pub fn write_trace(trace: &Trace, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    for row in trace_rows(trace) {
        writer.serialize(row).map_err(csv_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = reader.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(CliError::Config {
            path: path.to_path_buf(),
            message: format!("unexpected trace header `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    reader
        .deserialize()
        .collect::<Result<Vec<TraceRow>, _>>()
        .map_err(csv_err(path))
}

/// Per-run line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub alpha: f64,
    pub seed: u64,
    pub outcome: Outcome,
    pub stop_iteration: Option<usize>,
    pub stop_seconds: Option<f64>,
    pub file: String,
}

fn summary_row(trace: &Trace, file: String) -> SummaryRow {
    let last = trace.last();
    let converged = trace.converged();
    SummaryRow {
        method: trace.meta.method,
        alpha: trace.meta.alpha,
        seed: trace.meta.init_seed,
        outcome: trace.outcome,
        stop_iteration: converged.then_some(last.iteration),
        stop_seconds: converged.then_some(last.wall_seconds),
        file,
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

/// Writes the dataset described by `spec` to `out`. Least-squares data goes
/// to the linear-system text format; classification data is recorded as a
/// JSON manifest from which it can be regenerated or reloaded.
pub fn cmd_datagen(spec: &DatasetSpec, out: &Path) -> Result<(), CliError> {
    match spec.kind {
        DatasetKind::IdxImages | DatasetKind::GaussianBlobs => {
            if spec.kind == DatasetKind::GaussianBlobs {
                spec.build()?;
            }
            let text = serde_json::to_string_pretty(spec).expect("dataset specs serialize");
            fs::write(out, text + "\n").map_err(io_err(out))
        }
        _ => {
            let (pb, _) = spec.build()?;
            if pb.kind != ProblemKind::LeastSquares {
                return Err(CliError::Invalid("linear-system output needs least-squares data".into()));
            }
            data::write_linear_system(&pb, out)?;
            Ok(())
        }
    }
}

/// Runs every cell of the experiment, writing one trace per cell and a
/// `summary.csv`. Divergence is an outcome, not a failure.
pub fn cmd_run(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<SummaryRow>, CliError> {
    cfg.validate()?;
    let (train, holdout) = cfg.dataset.build()?;
    let out_dir = &cfg.out_dir;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cells = cfg.cells();
    for cell in &cells {
        cell.validate(&train)?;
    }
    let done = AtomicUsize::new(0);
    let total = cells.len();
    let results: Vec<Result<SummaryRow, CliError>> = with_pool(threads, || {
        cells
            .par_iter()
            .map(|cell| {
                let trace = optimizers::run(&train, holdout.as_ref(), cell)?;
                let name = trace_file_name(cell.method, cell.alpha, cell.init_seed);
                write_trace(&trace, &out_dir.join(&name))?;
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                eprintln!("[{k}/{total}] {name}: {:?}", trace.outcome);
                Ok(summary_row(&trace, name))
            })
            .collect()
    });

    let mut summary = Vec::with_capacity(total);
    let mut failed = 0;
    for r in results {
        match r {
            Ok(row) => summary.push(row),
            Err(e) => {
                eprintln!("run failed: {e}");
                failed += 1;
            }
        }
    }
    let path = out_dir.join("summary.csv");
    let mut writer = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for row in &summary {
        writer.serialize(row).map_err(csv_err(&path))?;
    }
    writer.flush().map_err(io_err(&path))?;
    if failed > 0 {
        return Err(CliError::RunsFailed { failed, total });
    }
    Ok(summary)
}

/// Sweeps the splitting error for a standard normal `n × n` design split into
/// `blocks` row groups; writes `bounds.csv` and `bounds.svg` under `out_dir`.
pub fn cmd_bounds(
    n: usize,
    blocks: usize,
    t_max: f64,
    points: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<bounds::SweepRow>, CliError> {
    if !(t_max >= 0.0) {
        return Err(CliError::Invalid("t_max must be nonnegative".into()));
    }
    let x = bounds::random_square(n, seed);
    let ops = bounds::build_split(x.view(), blocks)?;
    let rows = bounds::error_sweep(&ops, &bounds::linear_grid(t_max, points))?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("bounds.csv");
    let file = File::create(&csv_path).map_err(io_err(&csv_path))?;
    bounds::write_sweep_csv(&rows, BufWriter::new(file))?;

    let chart = Chart {
        title: format!("splitting error, n = {n}, {blocks} blocks"),
        x_label: "t".into(),
        y_label: "error (spectral norm)".into(),
        y_scale: YScale::Linear,
        series: vec![
            Series::new("error", rows.iter().map(|r| (r.t, r.error)).collect()),
            Series::new("limit", rows.iter().map(|r| (r.t, r.limit)).collect()).dashed(),
        ],
    };
    let svg_path = out_dir.join("bounds.svg");
    fs::write(&svg_path, plot::render_svg(&chart)?).map_err(io_err(&svg_path))?;
    Ok(rows)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Builds one series per (method, α). Each run is cut before its first
/// divergent record; repeats are merged by taking the median x and metric at
/// each recorded iteration.
pub fn trace_series(rows: &[TraceRow], x_axis: XAxis) -> Vec<Series> {
    type Key = (Method, u64);
    let mut runs: BTreeMap<(Key, u64), Vec<&TraceRow>> = BTreeMap::new();
    for row in rows {
        runs.entry(((row.method, row.alpha.to_bits()), row.seed)).or_default().push(row);
    }
    let mut grouped: BTreeMap<Key, BTreeMap<usize, (Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for ((key, _), run) in &runs {
        let cells = grouped.entry(*key).or_default();
        for row in run.iter().take_while(|r| !r.diverged) {
            let x = match x_axis {
                XAxis::Iteration => row.iteration as f64,
                XAxis::WallSeconds => row.wall_seconds,
            };
            let cell = cells.entry(row.iteration).or_default();
            cell.0.push(x);
            cell.1.push(row.metric);
        }
    }
    let mut keys: Vec<Key> = grouped.keys().copied().collect();
    keys.sort_by(|a, b| a.0.name().cmp(b.0.name()).then(f64::from_bits(a.1).total_cmp(&f64::from_bits(b.1))));
    keys.into_iter()
        .map(|key| {
            let points = grouped[&key]
                .values()
                .map(|(xs, ys)| (median(&mut xs.clone()), median(&mut ys.clone())))
                .collect();
            Series::new(format!("{} α={}", key.0.name(), f64::from_bits(key.1)), points)
        })
        .collect()
}

pub fn cmd_plot(traces: &[PathBuf], x_axis: XAxis, out: &Path) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for path in traces {
        rows.extend(read_trace(path)?);
    }
    let chart = Chart {
        title: "convergence".into(),
        x_label: match x_axis {
            XAxis::Iteration => "iteration".into(),
            XAxis::WallSeconds => "wall time [s]".into(),
        },
        y_label: "stopping metric".into(),
        y_scale: YScale::Log,
        series: trace_series(&rows, x_axis),
    };
    let svg = plot::render_svg(&chart)?;
    fs::write(out, svg).map_err(io_err(out))
}

/// Dispatches a parsed command line.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Datagen { spec } => {
            let text = fs::read_to_string(&spec).map_err(io_err(&spec))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let mut parsed: DatasetSpec = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
                path: spec.clone(),
                message: format!("at `{}`: {}", e.path(), e.inner()),
            })?;
            if let Some(seed) = cli.seed {
                parsed.seed = seed;
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("dataset.txt"));
            cmd_datagen(&parsed, &out)
        }
        Command::Run { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(out) = cli.out {
                cfg.out_dir = out;
            }
            cmd_run(&cfg, cli.threads).map(|_| ())
        }
        Command::Bounds { n, blocks, t_max, points } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("bounds"));
            with_pool(cli.threads, || cmd_bounds(n, blocks, t_max, points, cli.seed.unwrap_or(0), &out)).map(|_| ())
        }
        Command::Plot { traces, x_axis } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("convergence.svg"));
            cmd_plot(&traces, x_axis, &out)
        }
    }
}
