//! Empirical meta-objectives and the Monte Carlo meta-test metric.
//!
//! For a representation `A` and per-task inner solutions `w_λ`:
//!
//! * **tr-val** (splitting): `(1/T)·Σ_t (1/n2)‖X^val_t A w_λ(A; S^tr_t) − Y^val_t‖²`
//!   — fit on the train split, score on the held-out validation split.
//! * **tr-tr** (non-splitting): `(1/T)·Σ_t (1/n)‖X_t A w_λ(A; S_t) − Y_t‖²`
//!   — fit and score on the same data.
//! * **meta-test**: `E_v E_S [‖A·w_λ̄(A; S) − v‖² + σ²]` over fresh tasks with
//!   n̄₁-point adaptation sets, estimated by Monte Carlo. The per-task term is
//!   the analytic population risk (no test-set sampling), so the only noise
//!   source is the draw of `(v, S)`.
//!
//! All Monte Carlo loops derive one [`RngStream`] sub-stream per task index
//! and reduce in task-index order, making every estimate bit-stable.

use serde::{Deserialize, Serialize};

use crate::base_learner::{solve, task_excess_risk, training_mse, Representation};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::task_model::{sample_dataset, sample_task, split, SplitDataset, SubspaceInstance, TaskDataset};

/// Split sizes and inner regularizer for the tr-val objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n1: usize,
    pub n2: usize,
    pub lambda: f64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n1 < 1 || self.n2 < 1 {
            return Err(Error::InvalidSplit { n1: self.n1, n: self.n1 + self.n2 });
        }
        if self.lambda < 0.0 || self.lambda.is_nan() {
            return Err(Error::InvalidParameter(format!("λ={} must be ≥ 0", self.lambda)));
        }
        Ok(())
    }
}

/// A Monte Carlo mean with its sampling standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    /// Sample standard deviation / √num_samples.
    pub stderr: f64,
    pub num_samples: usize,
}

impl MonteCarloEstimate {
    /// Two-pass mean and standard error; requires at least two samples.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidSize(format!(
                "Monte Carlo estimate needs ≥ 2 samples, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self { mean, stderr: (var / n).sqrt(), num_samples: values.len() })
    }

    /// Standard error of the difference of two independent estimates.
    pub fn combined_stderr(&self, other: &Self) -> f64 {
        self.stderr.hypot(other.stderr)
    }
}

/// Empirical tr-tr objective over an explicit task batch.
pub fn empirical_trtr(a: &Representation, tasks: &[TaskDataset], lambda: f64) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::InvalidSize("empty task batch".into()));
    }
    let mut total = 0.0;
    for data in tasks {
        if data.d() != a.d() {
            return Err(Error::DimensionMismatch(format!(
                "task has d={}, representation expects d={}",
                data.d(),
                a.d()
            )));
        }
        let w = solve(a, data, lambda)?;
        total += training_mse(a, data, &w);
    }
    Ok(total / tasks.len() as f64)
}

/// Empirical tr-val objective over an explicit batch of split tasks.
pub fn empirical_trva(a: &Representation, tasks: &[SplitDataset], spec: &SplitSpec) -> Result<f64> {
    spec.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidSize("empty task batch".into()));
    }
    let mut total = 0.0;
    for task in tasks {
        if task.train.d() != a.d() {
            return Err(Error::DimensionMismatch(format!(
                "task has d={}, representation expects d={}",
                task.train.d(),
                a.d()
            )));
        }
        if task.n1() != spec.n1 || task.n2() != spec.n2 {
            return Err(Error::SplitSizeMismatch(format!(
                "split sizes ({}, {}) do not match spec ({}, {})",
                task.n1(),
                task.n2(),
                spec.n1,
                spec.n2
            )));
        }
        total += trva_term(a, task, spec.lambda)?;
    }
    Ok(total / tasks.len() as f64)
}

/// One task's validation residual `(1/n2)‖X_val A w_λ(A; S_tr) − Y_val‖²`.
pub fn trva_term(a: &Representation, task: &SplitDataset, lambda: f64) -> Result<f64> {
    let w = solve(a, &task.train, lambda)?;
    let r = &task.val.x * &w.composite - &task.val.y;
    Ok(r.norm_squared() / task.n2() as f64)
}

/// Per-task tr-val losses over fresh sampled tasks (one per sub-stream).
///
/// Each task draws `v`, an (n1+n2)-point dataset, and a uniform split. The
/// returned vector is in task-index order; use it directly for medians and
/// tail diagnostics, or fold it with [`MonteCarloEstimate::from_values`].
pub fn trva_sample_values(
    a: &Representation,
    instance: &SubspaceInstance,
    spec: &SplitSpec,
    num_tasks: usize,
    rng: RngStream,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let s = rng.substream(t as u64);
        let v = sample_task(instance, s.substream(0));
        let data = sample_dataset(instance, &v, spec.n1 + spec.n2, s.substream(1))?;
        let task = split(&data, spec.n1, s.substream(2))?;
        out.push(trva_term(a, &task, spec.lambda)?);
    }
    Ok(out)
}

/// Monte Carlo tr-val objective over fresh tasks.
pub fn trva_mc(
    a: &Representation,
    instance: &SubspaceInstance,
    spec: &SplitSpec,
    num_tasks: usize,
    rng: RngStream,
) -> Result<MonteCarloEstimate> {
    MonteCarloEstimate::from_values(&trva_sample_values(a, instance, spec, num_tasks, rng)?)
}

/// Monte Carlo tr-tr objective over fresh tasks of size `n`.
pub fn trtr_mc(
    a: &Representation,
    instance: &SubspaceInstance,
    n: usize,
    lambda: f64,
    num_tasks: usize,
    rng: RngStream,
) -> Result<MonteCarloEstimate> {
    let mut values = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let s = rng.substream(t as u64);
        let v = sample_task(instance, s.substream(0));
        let data = sample_dataset(instance, &v, n, s.substream(1))?;
        let w = solve(a, &data, lambda)?;
        values.push(training_mse(a, &data, &w));
    }
    MonteCarloEstimate::from_values(&values)
}

/// Monte Carlo meta-test loss: adapt to n̄₁ fresh samples per fresh task with
/// regularizer λ̄, then score the analytic population risk plus σ².
pub fn meta_test_loss_mc(
    a: &Representation,
    instance: &SubspaceInstance,
    nbar1: usize,
    lambda_bar: f64,
    num_tasks: usize,
    rng: RngStream,
) -> Result<MonteCarloEstimate> {
    if num_tasks < 2 {
        return Err(Error::InvalidSize(format!("num_tasks={num_tasks} must be ≥ 2")));
    }
    let noise_floor = instance.sigma() * instance.sigma();
    let mut values = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let s = rng.substream(t as u64);
        let v = sample_task(instance, s.substream(0));
        let data = sample_dataset(instance, &v, nbar1, s.substream(1))?;
        let w = solve(a, &data, lambda_bar)?;
        values.push(task_excess_risk(a, &w, &v, instance.sigma()) + noise_floor);
    }
    MonteCarloEstimate::from_values(&values)
}

/// Pick the λ̄ grid value minimizing the meta-test Monte Carlo estimate on a
/// held-out tuning stream. All grid points are scored on the same tasks
/// (common random numbers), and ties break toward the smaller λ̄.
pub fn tune_lambda_bar(
    a: &Representation,
    instance: &SubspaceInstance,
    nbar1: usize,
    grid: &[f64],
    val_tasks: usize,
    rng: RngStream,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty λ̄ grid".into()));
    }
    let mut sorted = grid.to_vec();
    if sorted.iter().any(|l| *l < 0.0 || l.is_nan()) {
        return Err(Error::InvalidParameter(format!("λ̄ grid must be ≥ 0, got {sorted:?}")));
    }
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let mut best = (f64::INFINITY, sorted[0]);
    for &lambda_bar in &sorted {
        let est = meta_test_loss_mc(a, instance, nbar1, lambda_bar, val_tasks, rng)?;
        if est.mean < best.0 {
            best = (est.mean, lambda_bar);
        }
    }
    Ok(best.1)
}

/// Default λ̄ tuning grid: zero plus decade steps through 100.
pub const DEFAULT_LAMBDA_BAR_GRID: [f64; 9] = [0.0, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_model::{gaussian_matrix, make_instance, TaskScale};
    use nalgebra::DMatrix;

    fn stream(tag: u64) -> RngStream {
        RngStream::new(0x0B1EC7).substream(tag)
    }

    #[test]
    fn trtr_interpolation_yields_zero() {
        // rank(X_t A) = n for every task ⇒ min-norm fits exactly.
        let inst = make_instance(10, 3, 0.5, stream(1)).unwrap();
        let a = Representation::new(gaussian_matrix(10, 10, &mut stream(2).rng()));
        let tasks: Vec<TaskDataset> = (0..8)
            .map(|t| {
                let s = stream(3).substream(t);
                let v = sample_task(&inst, s.substream(0));
                sample_dataset(&inst, &v, 6, s.substream(1)).unwrap()
            })
            .collect();
        let val = empirical_trtr(&a, &tasks, 0.0).unwrap();
        assert!(val <= 1e-16, "interpolating tr-tr objective = {val:e}");
    }

    #[test]
    fn noiseless_projector_objectives_vanish() {
        let inst = make_instance(12, 4, 0.0, stream(4)).unwrap();
        let a = Representation::new(inst.projector());

        let tasks: Vec<TaskDataset> = (0..6)
            .map(|t| {
                let s = stream(5).substream(t);
                let v = sample_task(&inst, s.substream(0));
                sample_dataset(&inst, &v, 8, s.substream(1)).unwrap()
            })
            .collect();
        assert!(empirical_trtr(&a, &tasks, 0.0).unwrap() <= 1e-10);

        let splits: Vec<SplitDataset> = (0..6)
            .map(|t| {
                let s = stream(6).substream(t);
                let v = sample_task(&inst, s.substream(0));
                let data = sample_dataset(&inst, &v, 12, s.substream(1)).unwrap();
                split(&data, 6, s.substream(2)).unwrap()
            })
            .collect();
        let spec = SplitSpec { n1: 6, n2: 6, lambda: 0.0 };
        assert!(empirical_trva(&a, &splits, &spec).unwrap() <= 1e-10);
    }

    #[test]
    fn zero_representation_scores_label_energy() {
        let inst = make_instance(7, 2, 0.3, stream(7)).unwrap();
        let a = Representation::new(DMatrix::zeros(7, 7));
        let splits: Vec<SplitDataset> = (0..5)
            .map(|t| {
                let s = stream(8).substream(t);
                let v = sample_task(&inst, s.substream(0));
                let data = sample_dataset(&inst, &v, 9, s.substream(1)).unwrap();
                split(&data, 4, s.substream(2)).unwrap()
            })
            .collect();
        let spec = SplitSpec { n1: 4, n2: 5, lambda: 0.0 };
        let got = empirical_trva(&a, &splits, &spec).unwrap();
        let want = splits.iter().map(|s| s.val.y.norm_squared() / 5.0).sum::<f64>() / 5.0;
        assert!((got - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn trva_rejects_mismatched_splits() {
        let inst = make_instance(6, 2, 0.1, stream(9)).unwrap();
        let a = Representation::identity(6);
        let s = stream(10);
        let v = sample_task(&inst, s.substream(0));
        let data = sample_dataset(&inst, &v, 10, s.substream(1)).unwrap();
        let task = split(&data, 4, s.substream(2)).unwrap();
        let bad_spec = SplitSpec { n1: 5, n2: 5, lambda: 0.0 };
        assert!(matches!(
            empirical_trva(&a, &[task], &bad_spec),
            Err(Error::SplitSizeMismatch(_))
        ));
    }

    #[test]
    fn trva_mc_matches_underparam_closed_form() {
        // Oracle representation, n1 = 15: asymptotic tr-val value is
        // σ²(1 + k/(n1−k−1)) = 0.25·(1 + 5/9) ≈ 0.38889.
        let inst = make_instance(50, 5, 0.5, stream(11)).unwrap();
        let a = Representation::new(inst.projector());
        let spec = SplitSpec { n1: 15, n2: 15, lambda: 0.0 };
        let est = trva_mc(&a, &inst, &spec, 6_000, stream(12)).unwrap();
        let oracle: f64 = 0.25 * (1.0 + 5.0 / 9.0);
        let tol = (0.02 * oracle).max(3.5 * est.stderr);
        assert!(
            (est.mean - oracle).abs() <= tol,
            "MC {} ± {} vs oracle {oracle}",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn meta_test_noiseless_recovery_is_exact() {
        let inst = make_instance(10, 3, 0.0, stream(13)).unwrap();
        let a = Representation::new(inst.projector());
        let est = meta_test_loss_mc(&a, &inst, 5, 0.0, 200, stream(14)).unwrap();
        assert!(est.mean <= 1e-12, "noiseless recovery loss {0:e}", est.mean);
    }

    #[test]
    fn meta_test_matches_trva_distribution() {
        // With λ̄ = λ = 0 and n̄₁ = n1, the meta-test loss and the tr-val
        // objective estimate the same quantity.
        let inst = make_instance(20, 3, 0.5, stream(15)).unwrap();
        let a = Representation::new(gaussian_matrix(20, 20, &mut stream(16).rng()));
        let spec = SplitSpec { n1: 6, n2: 6, lambda: 0.0 };
        let trva = trva_mc(&a, &inst, &spec, 4_000, stream(17)).unwrap();
        let meta = meta_test_loss_mc(&a, &inst, 6, 0.0, 4_000, stream(18)).unwrap();
        let gap = (trva.mean - meta.mean).abs();
        let tol = 3.0 * trva.combined_stderr(&meta);
        assert!(gap <= tol, "|{} − {}| = {gap} > {tol}", trva.mean, meta.mean);
    }

    #[test]
    fn tuning_prefers_ridge_when_overparameterized() {
        let inst = make_instance(50, 5, 0.5, stream(19)).unwrap();
        let a = Representation::identity(50);
        let picked =
            tune_lambda_bar(&a, &inst, 5, &[0.0, 0.3, 1.0, 3.0], 1_500, stream(20)).unwrap();
        assert!(picked > 0.0, "min-norm should lose to ridge at n̄₁=5, picked λ̄={picked}");
    }

    #[test]
    fn tuning_is_deterministic_and_handles_singletons() {
        let inst = make_instance(8, 2, 0.4, stream(21)).unwrap();
        let a = Representation::identity(8);
        assert_eq!(tune_lambda_bar(&a, &inst, 4, &[0.0], 100, stream(22)).unwrap(), 0.0);
        let g = [1.0, 0.1, 0.0, 10.0];
        let p1 = tune_lambda_bar(&a, &inst, 4, &g, 400, stream(23)).unwrap();
        let p2 = tune_lambda_bar(&a, &inst, 4, &g, 400, stream(23)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn estimates_are_deterministic_and_nonnegative() {
        let inst = make_instance(9, 2, 0.6, stream(24)).unwrap();
        let a = Representation::new(gaussian_matrix(9, 9, &mut stream(25).rng()));
        let e1 = meta_test_loss_mc(&a, &inst, 5, 0.1, 500, stream(26)).unwrap();
        let e2 = meta_test_loss_mc(&a, &inst, 5, 0.1, 500, stream(26)).unwrap();
        assert_eq!(e1.mean.to_bits(), e2.mean.to_bits(), "bit-identical reruns");
        assert!(e1.mean >= 0.0 && e1.stderr >= 0.0);
    }

    #[test]
    fn trtr_scaling_nonincreasing_in_kappa() {
        // The κ→∞ limit of tr-tr on κI equals its λ/κ² reparameterization, so
        // on a fixed batch the objective is non-increasing in κ.
        let inst = make_instance(12, 3, 0.5, stream(27)).unwrap();
        let tasks: Vec<TaskDataset> = (0..10)
            .map(|t| {
                let s = stream(28).substream(t);
                let v = sample_task(&inst, s.substream(0));
                sample_dataset(&inst, &v, 20, s.substream(1)).unwrap()
            })
            .collect();
        let lambda = 1.0;
        let mut last = f64::INFINITY;
        for kappa in [0.5, 1.0, 2.0, 8.0, 64.0] {
            let a = Representation::new(DMatrix::identity(12, 12) * kappa);
            let val = empirical_trtr(&a, &tasks, lambda).unwrap();
            assert!(val <= last + 1e-12, "tr-tr increased at κ={kappa}: {val} > {last}");
            last = val;
        }
    }

    #[test]
    fn raw_scale_inflates_losses_by_k() {
        // Same geometry, raw task energy k: the zero-predictor loss scales by k.
        let k = 4;
        let inst = make_instance(16, k, 0.0, stream(29)).unwrap();
        let raw = inst.clone().with_task_scale(TaskScale::Raw);
        let a = Representation::new(DMatrix::zeros(16, 16));
        let unit = meta_test_loss_mc(&a, &inst, 3, 0.0, 3_000, stream(30)).unwrap();
        let rawv = meta_test_loss_mc(&a, &raw, 3, 0.0, 3_000, stream(30)).unwrap();
        let ratio = rawv.mean / unit.mean;
        assert!((ratio - k as f64).abs() <= 0.4, "ratio {ratio} vs k={k}");
    }

    #[test]
    fn estimate_requires_two_samples() {
        assert!(MonteCarloEstimate::from_values(&[1.0]).is_err());
        let est = MonteCarloEstimate::from_values(&[1.0, 3.0]).unwrap();
        assert_eq!(est.mean, 2.0);
        assert_eq!(est.num_samples, 2);
        // sd = √2, stderr = √2/√2 = 1.
        assert!((est.stderr - 1.0).abs() <= 1e-12);
    }
}
