//! Minibatch optimization as first-order operator splitting of the gradient flow.
//!
//! One epoch of minibatch SGD with learning rate `α` over `m` batches is the
//! Lie–Trotter composition of the per-batch gradient flows, each advanced by a
//! single explicit Euler step of length `h = α·m`. This crate replaces those
//! Euler steps with exact local flows (closed form for least squares, adaptive
//! Runge–Kutta on a QR-reduced state for logistic and softmax regression),
//! recovers the Kaczmarz projection as the unit-batch limit, and measures the
//! asymptotic splitting error of linear flows.
//!
//! Module map:
//! - [`linalg`]: thin QR, symmetric and low-rank matrix exponentials, norms
//! - [`ode`]: Dormand–Prince 5(4) integrator
//! - [`problems`]: objectives, gradients, local and reduced right-hand sides
//! - [`data`]: generators, IDX and text loaders, batch partitioning
//! - [`solvers`]: single local steps
//! - [`optimizers`]: training loops, stopping rules, traces
//! - [`bounds`]: splitting-error sweeps and their limit
//! - [`cli`], [`plot`]: experiment harness and SVG output

pub mod bounds;
pub mod cli;
pub mod data;
pub mod linalg;
pub mod ode;
pub mod optimizers;
pub mod plot;
pub mod problems;
pub mod solvers;
