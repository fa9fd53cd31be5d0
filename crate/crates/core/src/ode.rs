//! Dormand–Prince 5(4) embedded Runge–Kutta integrator with adaptive step size.
//!
//! Used for the reduced local problems of the classification models, whose
//! right-hand sides are small (`b × K` states) but nonlinear.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Vector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step budget of {max_steps} exhausted at t = {t}")]
    StepBudgetExceeded { max_steps: usize, t: f64 },
    #[error("right-hand side produced a non-finite value at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; `0` selects one from the local error heuristic.
    pub h_init: f64,
    /// Largest allowed step; `0` means unbounded.
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rtol: 1e-6,
            atol: 1e-9,
            h_init: 0.0,
            h_max: 0.0,
            max_steps: 100_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        IntegratorConfig {
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return Err(OdeError::InvalidConfig(format!(
                "tolerances must be positive (rtol = {}, atol = {})",
                self.rtol, self.atol
            )));
        }
        if self.max_steps == 0 {
            return Err(OdeError::InvalidConfig("max_steps must be at least 1".into()));
        }
        if self.h_init < 0.0 || self.h_max < 0.0 {
            return Err(OdeError::InvalidConfig("step sizes must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub y_end: Vector,
    /// Attempted steps, accepted and rejected.
    pub steps_taken: usize,
    pub rhs_evals: usize,
    pub rejected_steps: usize,
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth-order minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn combine(y: &Vector, h: f64, terms: &[(f64, &Vector)]) -> Vector {
    let mut out = y.clone();
    for (coef, k) in terms {
        if *coef != 0.0 {
            out.scaled_add(h * coef, *k);
        }
    }
    out
}

fn rms_scaled(v: &Vector, scale: &Vector) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let sum: f64 = v.iter().zip(scale.iter()).map(|(x, s)| (x / s).powi(2)).sum();
    (sum / v.len() as f64).sqrt()
}

fn initial_step<F>(rhs: &mut F, y0: &Vector, f0: &Vector, span: f64, cfg: &IntegratorConfig, evals: &mut usize) -> f64
where
    F: FnMut(&Vector) -> Vector,
{
    let scale = y0.mapv(|v| cfg.atol + cfg.rtol * v.abs());
    let d0 = rms_scaled(y0, &scale);
    let d1 = rms_scaled(f0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1 = combine(y0, h0, &[(1.0, f0)]);
    let f1 = rhs(&y1);
    *evals += 1;
    if !all_finite(&f1) {
        return h0 * 1e-3;
    }
    let d2 = rms_scaled(&(&f1 - f0), &scale) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1)
}

/// Integrates the autonomous system `y' = rhs(y)` from `t0` to `t1`.
///
/// The local error of each accepted step satisfies
/// `|err_i| ≤ atol + rtol · max(|y_i|, |y_new_i|)` componentwise.
pub fn rk45_integrate<F>(mut rhs: F, y0: &Vector, t_span: (f64, f64), cfg: &IntegratorConfig) -> Result<OdeSolution, OdeError>
where
    F: FnMut(&Vector) -> Vector,
{
    cfg.validate()?;
    let (t0, t1) = t_span;
    if !(t1 >= t0) {
        return Err(OdeError::InvalidConfig(format!("t_span ({t0}, {t1}) is not ascending")));
    }
    if !all_finite(y0) {
        return Err(OdeError::NonFiniteState { t: t0 });
    }
    let mut solution = OdeSolution {
        y_end: y0.clone(),
        steps_taken: 0,
        rhs_evals: 0,
        rejected_steps: 0,
    };
    if t1 == t0 {
        return Ok(solution);
    }

    let h_max = if cfg.h_max > 0.0 { cfg.h_max } else { f64::INFINITY };
    let mut t = t0;
    let mut y = y0.clone();
    let mut k1 = rhs(&y);
    solution.rhs_evals += 1;
    if !all_finite(&k1) {
        return Err(OdeError::NonFiniteState { t });
    }
    let mut h = if cfg.h_init > 0.0 {
        cfg.h_init
    } else {
        initial_step(&mut rhs, &y, &k1, t1 - t0, cfg, &mut solution.rhs_evals)
    };

    loop {
        let remaining = t1 - t;
        if remaining <= 0.0 {
            break;
        }
        if solution.steps_taken >= cfg.max_steps {
            return Err(OdeError::StepBudgetExceeded {
                max_steps: cfg.max_steps,
                t,
            });
        }
        h = h.min(h_max);
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let min_step = 16.0 * f64::EPSILON * t.abs().max(1.0);
        if h < min_step {
            return Err(OdeError::NonFiniteState { t });
        }
        solution.steps_taken += 1;

        let k2 = rhs(&combine(&y, h, &[(A21, &k1)]));
        let k3 = rhs(&combine(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = rhs(&combine(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = rhs(&combine(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
        let k6 = rhs(&combine(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
        let y_new = combine(&y, h, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let k7 = rhs(&y_new);
        solution.rhs_evals += 6;

        let finite = [&k2, &k3, &k4, &k5, &k6, &k7, &y_new].iter().all(|v| all_finite(v));
        if !finite {
            solution.rejected_steps += 1;
            h *= MIN_FACTOR;
            continue;
        }

        let err = combine(
            &Vector::zeros(y.len()),
            h,
            &[(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)],
        );
        let err_norm = err
            .iter()
            .zip(y.iter().zip(y_new.iter()))
            .map(|(e, (a, b))| e.abs() / (cfg.atol + cfg.rtol * a.abs().max(b.abs())))
            .fold(0.0_f64, f64::max);

        if err_norm <= 1.0 {
            t = if last { t1 } else { t + h };
            y = y_new;
            k1 = k7;
            let factor = if err_norm == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            h *= factor;
            if last {
                break;
            }
        } else {
            solution.rejected_steps += 1;
            h *= (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
        }
    }

    solution.y_end = y;
    Ok(solution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_solution() {
        let y0 = array![1.5, -2.0, 0.25];
        let sol = rk45_integrate(|y: &Vector| Vector::zeros(y.len()), &y0, (0.0, 7.0), &IntegratorConfig::default()).unwrap();
        assert_eq!(sol.y_end, y0);
    }

    #[test]
    fn empty_span_returns_initial_state() {
        let y0 = array![3.0];
        let sol = rk45_integrate(|y: &Vector| -y, &y0, (2.0, 2.0), &IntegratorConfig::default()).unwrap();
        assert_eq!(sol.y_end, y0);
        assert_eq!(sol.rhs_evals, 0);
    }

    #[test]
    fn exponential_decay() {
        let cfg = IntegratorConfig::with_tolerances(1e-8, 1e-12);
        let sol = rk45_integrate(|y: &Vector| -y, &array![1.0], (0.0, 1.0), &cfg).unwrap();
        assert!((sol.y_end[0] - (-1f64).exp()).abs() < 1e-7);
        assert!(sol.steps_taken <= cfg.max_steps);
    }

    #[test]
    fn tighter_tolerance_never_hurts() {
        let exact = (-1f64).exp();
        let mut previous = f64::INFINITY;
        for k in 3..=11 {
            let tol = 10f64.powi(-k);
            let cfg = IntegratorConfig::with_tolerances(tol, tol);
            let sol = rk45_integrate(|y: &Vector| -y, &array![1.0], (0.0, 1.0), &cfg).unwrap();
            let err = (sol.y_end[0] - exact).abs();
            assert!(err <= previous * 1.0000001, "tol {tol:e}: {err:e} > {previous:e}");
            previous = err;
        }
    }

    #[test]
    fn rotation_keeps_norm() {
        let cfg = IntegratorConfig::with_tolerances(1e-10, 1e-12);
        let sol = rk45_integrate(|y: &Vector| array![-y[1], y[0]], &array![1.0, 0.0], (0.0, std::f64::consts::PI), &cfg).unwrap();
        assert!((sol.y_end[0] + 1.0).abs() < 1e-8);
        assert!(sol.y_end[1].abs() < 1e-8);
    }

    #[test]
    fn budget_is_enforced() {
        let cfg = IntegratorConfig {
            max_steps: 3,
            ..IntegratorConfig::with_tolerances(1e-12, 1e-14)
        };
        let err = rk45_integrate(|y: &Vector| -y * 50.0, &array![1.0], (0.0, 10.0), &cfg).unwrap_err();
        assert!(matches!(err, OdeError::StepBudgetExceeded { max_steps: 3, .. }));
    }

    #[test]
    fn non_finite_rhs_is_reported() {
        let err = rk45_integrate(|_: &Vector| array![f64::NAN], &array![1.0], (0.0, 1.0), &IntegratorConfig::default()).unwrap_err();
        assert!(matches!(err, OdeError::NonFiniteState { .. }));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = IntegratorConfig {
            rtol: 0.0,
            ..Default::default()
        };
        assert!(rk45_integrate(|y: &Vector| -y, &array![1.0], (0.0, 1.0), &cfg).is_err());
    }
}
