//! The subspace meta-learning instance.
//!
//! An instance fixes an ambient dimension `d`, a hidden subspace dimension
//! `k ≤ d` with orthonormal basis `B ∈ R^{d×k}`, and a label-noise level σ.
//! A task is a regressor `v = B·g` living on span(B); its dataset has rows
//! `x ~ N(0, I_d)` and labels `y = vᵀx + N(0, σ²)`.
//!
//! Task-vector normalization: with `g ~ N(0, I_k)` (the `Raw` mode) the
//! expected task energy is E‖v‖² = k, which makes absolute loss values grow
//! with k. The default `UnitEnergy` mode draws `g ~ N(0, I_k/k)` so that
//! E‖v‖² = 1 — the normalization under which the asymptotic closed forms in
//! [`crate::oracle`] and all reference loss magnitudes are stated. Both modes
//! share the same subspace structure.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Task-vector scaling convention for the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskScale {
    /// `v = B·g`, `g ~ N(0, I_k/k)`: E‖v‖² = 1. Default.
    #[default]
    UnitEnergy,
    /// `v = B·g`, `g ~ N(0, I_k)`: E‖v‖² = k (covariance B·Bᵀ).
    Raw,
}

/// A realized meta-learning problem: dimensions, noise level and hidden basis.
#[derive(Debug, Clone)]
pub struct SubspaceInstance {
    d: usize,
    k: usize,
    sigma: f64,
    /// d×k with orthonormal columns; spans the task subspace.
    basis: DMatrix<f64>,
    task_scale: TaskScale,
}

impl SubspaceInstance {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn task_scale(&self) -> TaskScale {
        self.task_scale
    }

    /// The rank-k projector onto the task subspace, B·Bᵀ (d×d).
    ///
    /// This is the oracle representation: it exposes exactly the directions
    /// tasks live in.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// Instance with the same geometry but the other task scaling.
    pub fn with_task_scale(mut self, scale: TaskScale) -> Self {
        self.task_scale = scale;
        self
    }
}

/// A single task: the regressor `v ∈ span(basis)`.
#[derive(Debug, Clone)]
pub struct TaskVector {
    pub v: DVector<f64>,
}

/// One task's regression data: `X` is n×d, `Y = X·v + noise` is length n.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl TaskDataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

/// Disjoint train/validation partition of one task's dataset.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: TaskDataset,
    pub val: TaskDataset,
}

impl SplitDataset {
    pub fn n1(&self) -> usize {
        self.train.n()
    }

    pub fn n2(&self) -> usize {
        self.val.n()
    }
}

/// Draw an instance: the basis comes from the QR factorization of a d×k
/// standard-Gaussian matrix, with the diagonal of R forced positive so that
/// the factorization (and hence the instance) is unique and reproducible.
pub fn make_instance(d: usize, k: usize, sigma: f64, rng: RngStream) -> Result<SubspaceInstance> {
    if k < 1 || k > d {
        return Err(Error::InvalidDimensions(format!(
            "subspace dimension k={k} must satisfy 1 ≤ k ≤ d={d}"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("sigma={sigma} must be ≥ 0")));
    }
    let g = gaussian_matrix(d, k, &mut rng.rng());
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(SubspaceInstance { d, k, sigma, basis: q, task_scale: TaskScale::UnitEnergy })
}

/// Draw a task vector `v = B·g` with the instance's scaling convention.
pub fn sample_task(instance: &SubspaceInstance, rng: RngStream) -> TaskVector {
    let mut r = rng.rng();
    let scale = match instance.task_scale {
        TaskScale::UnitEnergy => (instance.k as f64).sqrt().recip(),
        TaskScale::Raw => 1.0,
    };
    let g = DVector::from_fn(instance.k, |_, _| scale * r.sample::<f64, _>(StandardNormal));
    TaskVector { v: &instance.basis * g }
}

/// Draw an n-point dataset for task `v`: rows of X iid N(0, I_d),
/// `Y = X·v + η` with `η ~ N(0, σ² I_n)`.
pub fn sample_dataset(
    instance: &SubspaceInstance,
    v: &TaskVector,
    n: usize,
    rng: RngStream,
) -> Result<TaskDataset> {
    if n < 1 {
        return Err(Error::InvalidSize(format!("dataset size n={n} must be ≥ 1")));
    }
    if v.v.len() != instance.d {
        return Err(Error::DimensionMismatch(format!(
            "task vector has length {}, instance d={}",
            v.v.len(),
            instance.d
        )));
    }
    let mut r = rng.rng();
    let x = gaussian_matrix(n, instance.d, &mut r);
    let mut y = &x * &v.v;
    if instance.sigma > 0.0 {
        for i in 0..n {
            y[i] += instance.sigma * r.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(TaskDataset { x, y })
}

/// Uniformly random partition of a dataset into disjoint (n1, n − n1) halves.
pub fn split(dataset: &TaskDataset, n1: usize, rng: RngStream) -> Result<SplitDataset> {
    let n = dataset.n();
    if n1 < 1 || n1 >= n {
        return Err(Error::InvalidSplit { n1, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng.rng());
    let take = |rows: &[usize]| TaskDataset {
        x: DMatrix::from_fn(rows.len(), dataset.d(), |i, j| dataset.x[(rows[i], j)]),
        y: DVector::from_fn(rows.len(), |i, _| dataset.y[rows[i]]),
    };
    Ok(SplitDataset { train: take(&idx[..n1]), val: take(&idx[n1..]) })
}

/// n×m matrix with iid N(0, 1) entries, filled in row-major draw order.
pub(crate) fn gaussian_matrix(n: usize, m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            out[(i, j)] = rng.sample(StandardNormal);
        }
    }
    out
}
