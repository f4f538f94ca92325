//! Representation learning by stochastic first-order optimization.
//!
//! The outer loop holds the representation `A` and repeatedly: draws a batch
//! of tasks, runs the inner loop (closed-form ridge/min-norm by default, or
//! gradient descent with momentum) on each task's fit data, measures the
//! outer loss — validation loss for the tr-val variant, whole-data training
//! loss for tr-tr — and applies an Adam update to `A`.
//!
//! Two gradient modes are provided. `first_order` freezes the inner solution
//! `w̃` and differentiates the outer loss in `A` alone — the standard
//! stop-gradient approximation. `exact` additionally propagates through the
//! closed-form map `w(A) = M(A)⁻¹c(A)`, `M = AᵀXᵀXA/n + λI`, via the adjoint
//! of the normal equations; it is validated against finite differences.
//!
//! Tasks are drawn fresh at every step by default, approximating the
//! infinite-task objectives the theory analyzes; a fixed-pool mode (tasks
//! indexed into a finite deterministic family, resampled with replacement)
//! is available for ablation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::base_learner::{solve, sorted_svd, LinearPredictor, Representation};
use crate::diagnostics::{spectral_report, subspace_alignment, SpectralReport, SubspaceAlignment};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::task_model::{sample_dataset, sample_task, split, SplitDataset, SubspaceInstance, TaskDataset};

/// Which empirical meta-objective the outer loop minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Inner loop fits the train split; outer loss on the validation split.
    #[serde(rename = "tr-val")]
    TrVa,
    /// Inner loop and outer loss share the full task dataset.
    #[serde(rename = "tr-tr")]
    TrTr,
}

/// How the inner loop produces the per-task coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InnerMode {
    /// Ridge / min-norm closed form (the default; no inner hyperparameters).
    ClosedForm,
    /// `steps` iterations of gradient descent with momentum 0.9 from w = 0.
    Gd { steps: usize, lr: f64 },
}

/// Heavy-ball coefficient of the iterative inner loop.
pub const INNER_MOMENTUM: f64 = 0.9;

/// Treatment of the inner solution when differentiating the outer loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Stop-gradient on w̃ (the meta-learning standard).
    FirstOrder,
    /// Differentiate through the closed-form w(A). Requires the closed-form
    /// inner mode; at λ = 0 it additionally needs rank(XA) = D and falls
    /// back to first-order (counted per task) when that fails.
    Exact,
}

/// Where outer-step batches come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TaskSource {
    /// New tasks and datasets at every step (infinite-task limit).
    Fresh,
    /// A deterministic family of `tasks` fixed tasks, sampled with
    /// replacement each step; task data is keyed by task id, so the pool
    /// never needs to be materialized.
    Pool { tasks: usize },
}

/// Full specification of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Inner regularizer λ ≥ 0 (0 selects the min-norm solution).
    pub lambda: f64,
    /// Samples per task. The tr-val variant splits these as n = n1 + n2.
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    /// Tasks per outer step.
    pub batch_tasks: usize,
    pub outer_steps: usize,
    /// Adam learning rate.
    pub outer_lr: f64,
    pub inner_mode: InnerMode,
    pub grad_mode: GradMode,
    /// Initialization scale: entries iid N(0, scale²/d).
    pub init_scale: f64,
    /// Width D of the representation (columns of A); `None` means D = d.
    pub rep_dim: Option<usize>,
    pub task_source: TaskSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::TrVa,
            lambda: 0.0,
            n: 16,
            n1: 8,
            n2: 8,
            batch_tasks: 32,
            outer_steps: 3000,
            outer_lr: 1e-2,
            inner_mode: InnerMode::ClosedForm,
            grad_mode: GradMode::FirstOrder,
            init_scale: 1.0,
            rep_dim: None,
            task_source: TaskSource::Fresh,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_tasks < 1 {
            return Err(Error::InvalidParameter("batch_tasks must be ≥ 1".into()));
        }
        if self.outer_steps < 1 {
            return Err(Error::InvalidParameter("outer_steps must be ≥ 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("λ={} must be finite and ≥ 0", self.lambda)));
        }
        if !(self.outer_lr > 0.0) || !self.outer_lr.is_finite() {
            return Err(Error::InvalidParameter("outer_lr must be finite and > 0".into()));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::InvalidParameter("init_scale must be finite and ≥ 0".into()));
        }
        if self.n < 1 {
            return Err(Error::InvalidSize("n must be ≥ 1".into()));
        }
        if self.variant == Variant::TrVa {
            if self.n1 < 1 || self.n2 < 1 || self.n1 + self.n2 != self.n {
                return Err(Error::SplitSizeMismatch(format!(
                    "tr-val requires n1 + n2 = n with both ≥ 1; got n1={}, n2={}, n={}",
                    self.n1, self.n2, self.n
                )));
            }
        }
        if let Some(dd) = self.rep_dim {
            if dd < 1 {
                return Err(Error::InvalidDimensions("rep_dim must be ≥ 1".into()));
            }
        }
        if let InnerMode::Gd { steps, lr } = self.inner_mode {
            if steps < 1 || !(lr > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "inner GD needs steps ≥ 1 and lr > 0; got steps={steps}, lr={lr}"
                )));
            }
            if self.grad_mode == GradMode::Exact {
                return Err(Error::InvalidParameter(
                    "exact gradient mode differentiates the closed-form inner solution; \
                     it cannot be combined with the iterative inner loop"
                        .into(),
                ));
            }
        }
        if let TaskSource::Pool { tasks } = self.task_source {
            if tasks < 1 {
                return Err(Error::InvalidParameter("task pool must contain ≥ 1 task".into()));
            }
        }
        Ok(())
    }

    fn rep_dim_for(&self, d: usize) -> usize {
        self.rep_dim.unwrap_or(d)
    }
}

/// One outer step's log entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    /// Batch objective at the pre-update representation.
    pub objective: f64,
    /// Frobenius norm of the batch-averaged outer gradient.
    pub grad_norm: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub a: Representation,
    /// One entry per outer step.
    pub trace: Vec<TraceEntry>,
    pub config: TrainConfig,
    pub spectral: SpectralReport,
    pub alignment: SubspaceAlignment,
    /// Tasks on which exact mode fell back to the first-order gradient
    /// (λ = 0 with a rank-deficient inner problem). 0 in first-order mode.
    pub exact_fallbacks: usize,
}

/// Random initialization: entries iid N(0, scale²/d).
pub fn init_representation(d: usize, rep_dim: usize, scale: f64, rng: RngStream) -> Representation {
    let std = scale / (d as f64).sqrt();
    let g = crate::task_model::gaussian_matrix(d, rep_dim, &mut rng.rng());
    Representation::new(g * std)
}

/// Inner loop by gradient descent with momentum on the regularized task
/// objective `(1/n)‖XAw − Y‖² + λ‖w‖²`, starting from w = 0.
pub fn inner_gd(
    a: &Representation,
    data: &TaskDataset,
    lambda: f64,
    t_in: usize,
    eta_in: f64,
) -> Result<LinearPredictor> {
    if t_in < 1 || !(eta_in > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "inner GD needs t_in ≥ 1 and eta_in > 0; got t_in={t_in}, eta_in={eta_in}"
        )));
    }
    if data.d() != a.d() {
        return Err(Error::DimensionMismatch(format!(
            "data has d={}, representation expects d={}",
            data.d(),
            a.d()
        )));
    }
    let n = data.n() as f64;
    let xa = &data.x * a.matrix();
    let mut w = DVector::zeros(a.rep_dim());
    let mut momentum = DVector::zeros(a.rep_dim());
    for step in 0..t_in {
        let r = &xa * &w - &data.y;
        let grad = xa.transpose() * r * (2.0 / n) + &w * (2.0 * lambda);
        momentum = momentum * INNER_MOMENTUM + grad;
        w -= &momentum * eta_in;
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::OptimizationDiverged { step, what: "inner-loop weights".into() });
        }
    }
    Ok(LinearPredictor::from_weights(a, w))
}

/// One outer step's worth of tasks.
#[derive(Debug, Clone)]
pub enum Batch {
    /// tr-tr: whole datasets.
    Whole(Vec<TaskDataset>),
    /// tr-val: split datasets.
    Split(Vec<SplitDataset>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Whole(t) => t.len(),
            Batch::Split(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The batch used at a given outer step. Deterministic in
/// `(instance, config, rng, step)` and independent across steps, so any
/// step's batch can be regenerated without replaying the run.
pub fn step_batch(
    instance: &SubspaceInstance,
    config: &TrainConfig,
    rng: RngStream,
    step: u64,
) -> Result<Batch> {
    let base = rng.substream(1).substream(step);
    let mut task_streams = Vec::with_capacity(config.batch_tasks);
    match config.task_source {
        TaskSource::Fresh => {
            for t in 0..config.batch_tasks {
                task_streams.push(base.substream(t as u64));
            }
        }
        TaskSource::Pool { tasks } => {
            // Draw ids with replacement; the pool itself is the id-keyed
            // family of streams, never materialized.
            let mut idx_rng = base.rng();
            let pool_base = rng.substream(2);
            for _ in 0..config.batch_tasks {
                let id = rand::Rng::gen_range(&mut idx_rng, 0..tasks as u64);
                task_streams.push(pool_base.substream(id));
            }
        }
    }

    if config.variant == Variant::TrVa {
        let mut out = Vec::with_capacity(task_streams.len());
        for s in task_streams {
            let v = sample_task(instance, s.substream(0));
            let data = sample_dataset(instance, &v, config.n, s.substream(1))?;
            out.push(split(&data, config.n1, s.substream(2))?);
        }
        Ok(Batch::Split(out))
    } else {
        let mut out = Vec::with_capacity(task_streams.len());
        for s in task_streams {
            let v = sample_task(instance, s.substream(0));
            out.push(sample_dataset(instance, &v, config.n, s.substream(1))?);
        }
        Ok(Batch::Whole(out))
    }
}

fn fit_inner(a: &Representation, fit: &TaskDataset, config: &TrainConfig) -> Result<LinearPredictor> {
    match config.inner_mode {
        InnerMode::ClosedForm => solve(a, fit, config.lambda),
        InnerMode::Gd { steps, lr } => inner_gd(a, fit, config.lambda, steps, lr),
    }
}

/// Fit and outer-loss parts of one task.
fn task_parts<'t>(batch: &'t Batch, i: usize) -> (&'t TaskDataset, &'t TaskDataset) {
    match batch {
        Batch::Whole(t) => (&t[i], &t[i]),
        Batch::Split(t) => (&t[i].train, &t[i].val),
    }
}

/// Batch-averaged outer objective at frozen `A` (inner loop re-run per task).
pub fn batch_objective(a: &Representation, batch: &Batch, config: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidSize("empty batch".into()));
    }
    let mut total = 0.0;
    for i in 0..batch.len() {
        let (fit, loss) = task_parts(batch, i);
        let pred = fit_inner(a, fit, config)?;
        total += (&loss.x * &pred.composite - &loss.y).norm_squared() / loss.n() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient, objective, and exact-mode fallback count for one batch.
#[derive(Debug, Clone)]
pub struct StepEval {
    /// Batch-averaged gradient of the outer loss in A (d×D).
    pub grad: DMatrix<f64>,
    pub objective: f64,
    pub exact_fallbacks: usize,
}

/// Batch-averaged outer gradient (see [`StepEval`] for the full evaluation).
pub fn outer_gradient(a: &Representation, batch: &Batch, config: &TrainConfig) -> Result<DMatrix<f64>> {
    step_eval(a, batch, config).map(|e| e.grad)
}

/// Evaluate one batch: per-task inner solutions, outer objective, and the
/// gradient in the configured mode, averaged in task order.
pub fn step_eval(a: &Representation, batch: &Batch, config: &TrainConfig) -> Result<StepEval> {
    if batch.is_empty() {
        return Err(Error::InvalidSize("empty batch".into()));
    }
    let (d, dd) = (a.d(), a.rep_dim());
    let mut grad = DMatrix::zeros(d, dd);
    let mut objective = 0.0;
    let mut fallbacks = 0;

    for i in 0..batch.len() {
        let (fit, loss) = task_parts(batch, i);
        let pred = fit_inner(a, fit, config)?;
        let m_l = loss.n() as f64;
        let resid = &loss.x * &pred.composite - &loss.y;
        objective += resid.norm_squared() / m_l;

        // ∂L/∂A at frozen w: (2/m_l)·X_lᵀ·resid·wᵀ.
        let xl_r = loss.x.transpose() * &resid;
        grad += &xl_r * pred.w.transpose() * (2.0 / m_l);

        if config.grad_mode == GradMode::Exact {
            match exact_correction(a, fit, loss, &pred, &resid, config.lambda)? {
                Some(correction) => grad += correction,
                None => fallbacks += 1,
            }
        }
    }
    let b = batch.len() as f64;
    Ok(StepEval { grad: grad / b, objective: objective / b, exact_fallbacks: fallbacks })
}

/// The w-sensitivity part of the exact gradient: with `M = AᵀX_fᵀX_fA/m_f + λI`
/// and adjoint `h = M⁻¹·∂L/∂w`,
///
/// `(X_fᵀY_f/m_f)·hᵀ − (X_fᵀX_f/m_f)·A·(w·hᵀ + h·wᵀ)`.
///
/// Returns `None` when λ = 0 and rank(X_f·A) < D, where M is singular and the
/// min-norm solution is not differentiable through the normal equations.
fn exact_correction(
    a: &Representation,
    fit: &TaskDataset,
    loss: &TaskDataset,
    pred: &LinearPredictor,
    resid: &DVector<f64>,
    lambda: f64,
) -> Result<Option<DMatrix<f64>>> {
    let dd = a.rep_dim();
    let m_f = fit.n() as f64;
    let xfa = &fit.x * a.matrix();
    let parts = sorted_svd(&xfa)?;
    if lambda == 0.0 && parts.rank < dd {
        return Ok(None);
    }

    // h = M⁻¹ g_w through the spectrum of X_f·A = U·S·Vᵀ:
    // M = V·diag(s²/m_f)·Vᵀ + λI, so M⁻¹ acts as 1/(s²/m_f + λ) on span(V)
    // and as 1/λ on its orthocomplement (empty when rank = D).
    let g_w = a.matrix().transpose() * (loss.x.transpose() * resid) * (2.0 / loss.n() as f64);
    let coeffs = parts.v.transpose() * &g_w;
    let mut h = DVector::zeros(dd);
    for j in 0..parts.s.len() {
        let denom = parts.s[j] * parts.s[j] / m_f + lambda;
        h += parts.v.column(j) * (coeffs[j] / denom);
    }
    if parts.s.len() < dd && lambda > 0.0 {
        let in_span = &parts.v * &coeffs;
        h += (&g_w - in_span) / lambda;
    }

    // (X_fᵀ Y_f/m_f)·hᵀ − X_fᵀ(X_f A (w hᵀ + h wᵀ))/m_f, assembled from
    // d- and D-vector outer products.
    let xf_y = fit.x.transpose() * &fit.y;
    let u1 = &xfa * &pred.w; // X_f·A·w
    let u2 = &xfa * &h; // X_f·A·h
    let k1 = fit.x.transpose() * u1;
    let k2 = fit.x.transpose() * u2;
    Ok(Some(
        (xf_y * h.transpose() - k1 * h.transpose() - k2 * pred.w.transpose()) / m_f,
    ))
}

/// Central finite-difference gradient of [`batch_objective`] — the testing
/// oracle for exact mode. O(d·D) objective evaluations; small problems only.
pub fn finite_difference_gradient(
    a: &Representation,
    batch: &Batch,
    config: &TrainConfig,
    h: f64,
) -> Result<DMatrix<f64>> {
    let mut g = DMatrix::zeros(a.d(), a.rep_dim());
    for i in 0..a.d() {
        for j in 0..a.rep_dim() {
            let mut plus = a.matrix().clone();
            plus[(i, j)] += h;
            let mut minus = a.matrix().clone();
            minus[(i, j)] -= h;
            let f_plus = batch_objective(&Representation::new(plus), batch, config)?;
            let f_minus = batch_objective(&Representation::new(minus), batch, config)?;
            g[(i, j)] = (f_plus - f_minus) / (2.0 * h);
        }
    }
    Ok(g)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Run the outer loop: per step, a fresh (or pool-drawn) batch, one
/// [`step_eval`], and one Adam update. The trace logs the objective and
/// gradient norm at the pre-update representation of every step.
pub fn train(instance: &SubspaceInstance, config: &TrainConfig, rng: RngStream) -> Result<TrainedModel> {
    config.validate()?;
    let d = instance.d();
    let dd = config.rep_dim_for(d);

    let mut a = init_representation(d, dd, config.init_scale, rng.substream(0)).matrix().clone();
    let mut adam_m: DMatrix<f64> = DMatrix::zeros(d, dd);
    let mut adam_v: DMatrix<f64> = DMatrix::zeros(d, dd);
    let mut trace = Vec::with_capacity(config.outer_steps);
    let mut fallbacks = 0;

    for step in 0..config.outer_steps {
        let rep = Representation::new(a.clone());
        let batch = step_batch(instance, config, rng, step as u64)?;
        let eval = step_eval(&rep, &batch, config)?;
        if !eval.objective.is_finite() {
            return Err(Error::OptimizationDiverged { step, what: "outer objective".into() });
        }
        if !eval.grad.iter().all(|x| x.is_finite()) {
            return Err(Error::OptimizationDiverged { step, what: "outer gradient".into() });
        }
        trace.push(TraceEntry { step, objective: eval.objective, grad_norm: eval.grad.norm() });
        fallbacks += eval.exact_fallbacks;

        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..d {
            for j in 0..dd {
                let g = eval.grad[(i, j)];
                adam_m[(i, j)] = ADAM_BETA1 * adam_m[(i, j)] + (1.0 - ADAM_BETA1) * g;
                adam_v[(i, j)] = ADAM_BETA2 * adam_v[(i, j)] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = adam_m[(i, j)] / bc1;
                let v_hat: f64 = adam_v[(i, j)] / bc2;
                a[(i, j)] -= config.outer_lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }

    let a = Representation::new(a);
    let spectral = spectral_report(&a, instance.k())?;
    let alignment = subspace_alignment(&a, instance)?;
    Ok(TrainedModel { a, trace, config: config.clone(), spectral, alignment, exact_fallbacks: fallbacks })
}
