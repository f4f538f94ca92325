//! Linear representation meta-learning with train/validation splitting.
//!
//! The library studies a synthetic few-shot regression family: every task is a
//! linear regressor `v` drawn from an unknown k-dimensional subspace of R^d
//! (spanned by an orthonormal `basis`), inputs are standard Gaussian, and labels
//! carry N(0, σ²) noise. A shared representation `A ∈ R^{d×D}` is adapted to
//! each task by ridge regression (or its λ→0 minimum-norm limit) on top of
//! `A`, and meta-learning means choosing `A` so that the adapted predictor
//! generalizes from `n̄₁` samples of a fresh task.
//!
//! Two meta-objectives are compared:
//!
//! * **tr-val** — each task's data is split; the inner loop fits the train
//!   split and the outer loss is the residual on the validation split.
//! * **tr-tr** — the same data is used for both fitting and outer loss.
//!
//! The modules mirror that pipeline: [`task_model`] generates instances,
//! tasks, datasets and splits; [`base_learner`] solves the per-task inner
//! problem; [`objectives`] evaluates the empirical meta-objectives and the
//! Monte Carlo meta-test metric; [`oracle`] provides the asymptotic
//! closed-form values and theoretical bounds the estimates are judged
//! against; [`trainer`] optimizes `A` with Adam on stochastic first-order
//! (or exact) meta-gradients; [`diagnostics`] inspects learned
//! representations; and [`harness`] packages everything into deterministic,
//! machine-readable experiments behind the `metasplit` CLI.
//!
//! All randomness flows through [`rng::RngStream`] (a counter-based generator
//! keyed by `(seed, stream_id)`), so every result in the crate is bit-stable
//! for a fixed seed.

pub mod base_learner;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod oracle;
pub mod rng;
pub mod task_model;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngStream;
