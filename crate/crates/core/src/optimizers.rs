//! Training loops: minibatch SGD, splitting optimization with exact or
//! integrated local flows, and Kaczmarz sweeps.
//!
//! A run partitions the data once (QR factors included), sets `h = α·m`, and
//! then walks the batches epoch by epoch. SGD takes one Euler step of the local
//! flow per batch; splitting advances the local flow exactly (least squares) or
//! with Dormand–Prince on the reduced state (classification).

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError};
use crate::ode::IntegratorConfig;
use crate::problems::{self, BatchFactorization, Params, Problem, ProblemError, ProblemKind};
use crate::solvers::{self, LlsLocalFlow, SolverError};

/// Loss growth factor (relative to the initial loss) that marks a run as diverged.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("stopping rule needs a known reference solution")]
    MissingReference,
    #[error("stopping rule needs a holdout set")]
    MissingHoldout,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sgd,
    Splitting,
    Kaczmarz,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Splitting => "splitting",
            Method::Kaczmarz => "kaczmarz",
        }
    }
}

/// Local solver used by the splitting method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalSolver {
    /// Closed form for least squares, Dormand–Prince on the reduced state otherwise.
    #[default]
    Auto,
    /// A single explicit Euler step of length `h`.
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopKind {
    /// `‖Xθ − y‖ / ‖y‖`.
    RelativeResidual,
    /// `‖θ − θ*‖ / ‖θ*‖`.
    SolutionDistance,
    /// Holdout misclassification rate.
    TestError,
    /// Full training loss.
    LossThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingRule {
    pub kind: StopKind,
    pub threshold: f64,
    /// Evaluation period in iterations; `0` evaluates once per epoch.
    #[serde(default)]
    pub eval_every: usize,
}

impl StoppingRule {
    pub fn new(kind: StopKind, threshold: f64) -> Self {
        StoppingRule {
            kind,
            threshold,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub alpha: f64,
    pub batch_size: usize,
    /// Seeds the sample shuffle and the per-epoch batch order.
    #[serde(default)]
    pub seed: u64,
    pub max_epochs: usize,
    pub stop: StoppingRule,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub local_solver: LocalSolver,
    /// Shuffle samples once and batch order every epoch; off keeps the natural order.
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Initial parameters are `init_scale ·` standard normal entries.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_true() -> bool {
    true
}

fn default_init_scale() -> f64 {
    0.01
}

impl RunConfig {
    pub fn new(method: Method, alpha: f64, batch_size: usize, max_epochs: usize, stop: StoppingRule) -> Self {
        RunConfig {
            method,
            alpha,
            batch_size,
            seed: 0,
            max_epochs,
            stop,
            integrator: IntegratorConfig::default(),
            local_solver: LocalSolver::Auto,
            shuffle: true,
            init_scale: default_init_scale(),
            init_seed: 0,
        }
    }

    pub fn validate(&self, pb: &Problem) -> Result<(), RunError> {
        let bad = |msg: String| Err(RunError::InvalidConfig(msg));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.stop.threshold > 0.0) {
            return bad(format!("stop threshold must be positive, got {}", self.stop.threshold));
        }
        if self.batch_size == 0 || self.batch_size > pb.n() {
            return bad(format!("batch size {} must be in 1..={}", self.batch_size, pb.n()));
        }
        if self.method == Method::Kaczmarz && (pb.kind != ProblemKind::LeastSquares || self.batch_size != 1) {
            return bad("kaczmarz needs a least-squares problem and batch size 1".into());
        }
        if self.stop.kind == StopKind::RelativeResidual && pb.kind != ProblemKind::LeastSquares {
            return bad("relative residual stopping applies to least squares only".into());
        }
        self.integrator
            .validate()
            .map_err(|e| RunError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub wall_seconds: f64,
    pub loss: f64,
    pub metric: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Converged,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub method: Method,
    pub local_solver: LocalSolver,
    pub alpha: f64,
    pub batch_size: usize,
    pub batches: usize,
    /// Local step length `h = α·m`.
    pub h: f64,
    pub seed: u64,
    pub init_seed: u64,
    pub stop: StoppingRule,
    /// Time spent partitioning and factorizing, excluded from `wall_seconds`.
    pub setup_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
    pub outcome: Outcome,
    pub theta: Params,
}

impl Trace {
    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("a trace always holds its initial record")
    }

    pub fn converged(&self) -> bool {
        self.outcome == Outcome::Converged
    }

    pub fn diverged(&self) -> bool {
        self.outcome == Outcome::Diverged
    }

    /// Records with the timing column zeroed, for reproducibility checks.
    pub fn untimed(&self) -> Vec<TraceRecord> {
        self.records
            .iter()
            .map(|r| TraceRecord {
                wall_seconds: 0.0,
                ..*r
            })
            .collect()
    }
}

/// Value of the stopping metric for `theta`.
pub fn stop_metric(
    kind: StopKind,
    pb: &Problem,
    holdout: Option<&Problem>,
    theta: &Params,
    reference: Option<&Params>,
) -> Result<f64, RunError> {
    match kind {
        StopKind::RelativeResidual => Ok(problems::relative_residual(pb, theta)?),
        StopKind::SolutionDistance => {
            let reference = reference.ok_or(RunError::MissingReference)?;
            if reference.dim() != theta.dim() {
                return Err(ProblemError::DimensionMismatch("reference shape differs from parameters".into()).into());
            }
            let denom = crate::linalg::frobenius(reference.view());
            let num = crate::linalg::frobenius((theta - reference).view());
            Ok(if denom > 0.0 { num / denom } else { num })
        }
        StopKind::TestError => {
            let holdout = holdout.ok_or(RunError::MissingHoldout)?;
            Ok(problems::test_error(pb, theta, holdout)?)
        }
        StopKind::LossThreshold => Ok(problems::loss(pb, theta)?),
    }
}

/// Whether `theta` satisfies `rule`.
pub fn evaluate_stop(
    rule: &StoppingRule,
    pb: &Problem,
    holdout: Option<&Problem>,
    theta: &Params,
    reference: Option<&Params>,
) -> Result<bool, RunError> {
    Ok(stop_metric(rule.kind, pb, holdout, theta, reference)? <= rule.threshold)
}

enum Stepper {
    Sgd,
    Euler,
    Exact(Vec<LlsLocalFlow>),
    Integrated,
    Kaczmarz,
}

impl Stepper {
    fn new(pb: &Problem, cfg: &RunConfig, batches: &[BatchFactorization]) -> Result<Self, RunError> {
        Ok(match (cfg.method, cfg.local_solver, pb.kind) {
            (Method::Sgd, _, _) => Stepper::Sgd,
            (Method::Kaczmarz, _, _) => Stepper::Kaczmarz,
            (Method::Splitting, LocalSolver::Euler, _) => Stepper::Euler,
            (Method::Splitting, LocalSolver::Auto, ProblemKind::LeastSquares) => Stepper::Exact(
                batches
                    .iter()
                    .map(|bf| LlsLocalFlow::new(bf, pb.n()))
                    .collect::<Result<_, _>>()?,
            ),
            (Method::Splitting, LocalSolver::Auto, _) => Stepper::Integrated,
        })
    }

    fn step(
        &self,
        pb: &Problem,
        bf: &BatchFactorization,
        theta: &Params,
        cfg: &RunConfig,
        h: f64,
    ) -> Result<Params, SolverError> {
        match self {
            Stepper::Sgd => solvers::euler_step(pb, bf, theta, cfg.alpha),
            Stepper::Euler => solvers::euler_local_step(pb, bf, theta, h),
            Stepper::Exact(flows) => flows[bf.index].step(theta, h),
            Stepper::Integrated => Ok(solvers::local_step_rk(pb, bf, theta, h, &cfg.integrator)?.theta_next),
            Stepper::Kaczmarz => {
                let next = solvers::kaczmarz_step(bf.x.row(0), bf.y[[0, 0]], theta.column(0))?;
                Ok(solvers::from_column(next))
            }
        }
    }
}

/// Runs one optimization from the configured random initialization.
pub fn run(pb: &Problem, holdout: Option<&Problem>, cfg: &RunConfig) -> Result<Trace, RunError> {
    let theta0 = data::random_init(pb.p(), pb.classes(), cfg.init_scale, cfg.init_seed);
    run_from(pb, holdout, cfg, theta0)
}

/// Runs one optimization from the given initial parameters.
pub fn run_from(pb: &Problem, holdout: Option<&Problem>, cfg: &RunConfig, theta0: Params) -> Result<Trace, RunError> {
    cfg.validate(pb)?;
    pb.check_params(&theta0)?;
    let reference = pb.reference.as_ref();
    // Probe the metric once so configuration errors surface before any work.
    let metric0 = stop_metric(cfg.stop.kind, pb, holdout, &theta0, reference)?;

    let setup = Instant::now();
    let (partition, batches) = data::partition_with(pb, cfg.batch_size, cfg.seed, cfg.shuffle)?;
    let stepper = Stepper::new(pb, cfg, &batches)?;
    let setup_seconds = setup.elapsed().as_secs_f64();

    let m = partition.batch_count();
    let h = cfg.alpha * m as f64;
    let eval_every = if cfg.stop.eval_every == 0 { m } else { cfg.stop.eval_every };
    let meta = TraceMeta {
        method: cfg.method,
        local_solver: cfg.local_solver,
        alpha: cfg.alpha,
        batch_size: cfg.batch_size,
        batches: m,
        h,
        seed: cfg.seed,
        init_seed: cfg.init_seed,
        stop: cfg.stop,
        setup_seconds,
    };

    let loss0 = problems::loss(pb, &theta0)?;
    let divergence_level = DIVERGENCE_FACTOR * loss0.abs().max(f64::MIN_POSITIVE);
    let mut records = vec![TraceRecord {
        epoch: 0,
        iteration: 0,
        wall_seconds: 0.0,
        loss: loss0,
        metric: metric0,
        diverged: false,
    }];
    let mut theta = theta0;
    if metric0 <= cfg.stop.threshold {
        return Ok(Trace {
            meta,
            records,
            outcome: Outcome::Converged,
            theta,
        });
    }

    let mut elapsed = Duration::ZERO;
    let mut iteration = 0usize;
    for epoch in 1..=cfg.max_epochs {
        for batch in partition.epoch_order(epoch - 1) {
            let started = Instant::now();
            theta = stepper.step(pb, &batches[batch], &theta, cfg, h)?;
            elapsed += started.elapsed();
            iteration += 1;

            let blown_up = theta.iter().any(|v| !v.is_finite());
            if !blown_up && iteration % eval_every != 0 {
                continue;
            }
            let loss = if blown_up { f64::INFINITY } else { problems::loss(pb, &theta)? };
            let diverged = !loss.is_finite() || loss > divergence_level;
            let metric = if diverged {
                f64::NAN
            } else {
                stop_metric(cfg.stop.kind, pb, holdout, &theta, reference)?
            };
            records.push(TraceRecord {
                epoch,
                iteration,
                wall_seconds: elapsed.as_secs_f64(),
                loss,
                metric,
                diverged,
            });
            if diverged {
                return Ok(Trace {
                    meta,
                    records,
                    outcome: Outcome::Diverged,
                    theta,
                });
            }
            if metric <= cfg.stop.threshold {
                return Ok(Trace {
                    meta,
                    records,
                    outcome: Outcome::Converged,
                    theta,
                });
            }
        }
    }
    Ok(Trace {
        meta,
        records,
        outcome: Outcome::MaxEpochs,
        theta,
    })
}

/// Independent runs over a list of learning rates, in list order.
pub fn lr_grid(pb: &Problem, holdout: Option<&Problem>, base: &RunConfig, alphas: &[f64]) -> Result<Vec<Trace>, RunError> {
    if alphas.is_empty() {
        return Err(RunError::InvalidConfig("learning-rate grid is empty".into()));
    }
    alphas
        .par_iter()
        .map(|&alpha| {
            let cfg = RunConfig { alpha, ..base.clone() };
            run(pb, holdout, &cfg)
        })
        .collect()
}
