//! Per-task inner problem: ridge regression on a fixed representation.
//!
//! Given a representation `A ∈ R^{d×D}` and task data `(X, Y)` with n rows,
//! the inner loop minimizes `(1/n)‖X A w − Y‖² + λ‖w‖²` over `w ∈ R^D`:
//!
//! * λ > 0: the unique ridge solution `w = (AᵀXᵀXA/n + λI)⁻¹ AᵀXᵀY/n`;
//! * λ = 0: the minimum-ℓ₂-norm least-squares solution
//!   `w = (AᵀXᵀXA)† AᵀXᵀY` — the λ→0⁺ limit of the above, which
//!   interpolates (`XAw = Y`) whenever `rank(XA) = n`.
//!
//! Both are computed from a single SVD of `B = XA`: writing `B = U·diag(s)·Vᵀ`,
//! the solution is `w = Σᵢ fᵢ(sᵢ)·(uᵢᵀY)·vᵢ` with filter `f(s) = s/(s² + nλ)`
//! for ridge and `f(s) = 1/s` above the rank cutoff for min-norm. Using one
//! factorization for both keeps the λ→0 limit exact by construction and
//! avoids forming the (possibly ill-conditioned) normal equations.

use nalgebra::{DMatrix, DVector};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::task_model::{TaskDataset, TaskVector};

/// Relative factor of the pseudo-inverse rank cutoff: singular values below
/// `s_max · max(rows, cols) · RANK_TOL_FACTOR` are treated as zero.
pub const RANK_TOL_FACTOR: f64 = 1e-12;

/// Acceptance threshold of the factorization self-consistency probe,
/// relative to `s_max`. A correct factorization lands around 1e-14; the
/// failure mode being screened for is off by many orders of magnitude.
const SVD_PROBE_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 60;

/// Sorted singular value decomposition parts of a matrix.
#[derive(Debug, Clone)]
pub struct SvdParts {
    /// Left singular vectors, one column per singular value.
    pub u: DMatrix<f64>,
    /// Singular values, descending.
    pub s: DVector<f64>,
    /// Right singular vectors, one column per singular value.
    pub v: DMatrix<f64>,
    /// Count of singular values above the rank cutoff.
    pub rank: usize,
}

/// Thin SVD with singular values sorted descending and the standard relative
/// rank cutoff `s_max · max(n, m) · 1e-12`.
///
/// The fast bidiagonalization SVD is validated with a cheap reconstruction
/// probe: on degenerate spectra (repeated or near-zero singular values) it
/// can return orthogonal factors whose product is *not* the input matrix.
/// When the probe fails, the factorization is redone with one-sided Jacobi,
/// which is slower but only terminates at a self-consistent answer.
pub fn sorted_svd(m: &DMatrix<f64>) -> Result<SvdParts> {
    let (rows, cols) = m.shape();
    if let Some(svd) = m.clone().try_svd(true, true, f64::EPSILON, 10_000) {
        let parts = sort_parts(
            svd.u.expect("u requested"),
            svd.singular_values,
            svd.v_t.expect("v_t requested").transpose(),
            rows,
            cols,
        );
        if factorization_checks_out(m, &parts) {
            return Ok(parts);
        }
    }

    let (u, s, v) = if rows >= cols {
        one_sided_jacobi(m)?
    } else {
        // Factor the tall transpose and swap the roles of U and V.
        let (tu, ts, tv) = one_sided_jacobi(&m.transpose())?;
        (tv, ts, tu)
    };
    let parts = sort_parts(u, s, v, rows, cols);
    if !factorization_checks_out(m, &parts) {
        return Err(Error::Numerical(format!(
            "SVD of a {rows}×{cols} matrix failed the reconstruction probe"
        )));
    }
    Ok(parts)
}

/// Order the columns of a raw factorization by descending singular value and
/// attach the numeric rank.
fn sort_parts(
    u_raw: DMatrix<f64>,
    s_raw: DVector<f64>,
    v_raw: DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> SvdParts {
    let p = s_raw.len();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| s_raw[j].total_cmp(&s_raw[i]));

    let u = DMatrix::from_fn(rows, p, |i, j| u_raw[(i, order[j])]);
    let v = DMatrix::from_fn(cols, p, |i, j| v_raw[(i, order[j])]);
    let s = DVector::from_fn(p, |i, _| s_raw[order[i]]);

    let tol = rank_cutoff(&s, rows, cols);
    let rank = s.iter().take_while(|&&x| x > tol).count();
    SvdParts { u, s, v, rank }
}

fn rank_cutoff(s: &DVector<f64>, rows: usize, cols: usize) -> f64 {
    let s_max = if s.is_empty() { 0.0 } else { s[0].max(s.amax()) };
    s_max * rows.max(cols) as f64 * RANK_TOL_FACTOR
}

/// Verify `U·diag(s)·Vᵀ` reproduces the matrix's action on fixed
/// pseudo-random probe directions (a few matrix-vector products — far
/// cheaper than forming the full reconstruction).
fn factorization_checks_out(m: &DMatrix<f64>, parts: &SvdParts) -> bool {
    let s_max = if parts.s.is_empty() { 0.0 } else { parts.s[0] };
    for salt in [0x5eed_0001u64, 0x5eed_0002] {
        let z = probe_vector(m.ncols(), salt);
        let mut c = parts.v.transpose() * &z;
        for j in 0..parts.s.len() {
            c[j] *= parts.s[j];
        }
        let err = (m * &z - &parts.u * c).norm();
        if err > SVD_PROBE_TOL * s_max * z.norm() {
            return false;
        }
    }
    true
}

/// Deterministic probe direction with entries in [-1, 1), from a splitmix64
/// sequence keyed on `salt`.
fn probe_vector(len: usize, salt: u64) -> DVector<f64> {
    let mut state = salt;
    DVector::from_fn(len, |_, _| {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

/// One-sided Jacobi SVD of a tall matrix (`rows ≥ cols`).
///
/// Returns `(u, s, v)` with `w = u·diag(s)·vᵀ` (singular values unordered),
/// `v` square orthonormal, and `u` orthonormal on the columns with `s > 0`
/// (zero columns elsewhere — callers only use columns above the rank
/// cutoff). The sweep criterion is relative column orthogonality, so the
/// factorization cannot silently drift from the input the way a broken
/// bidiagonalization can.
fn one_sided_jacobi(w: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (n, m) = w.shape();
    debug_assert!(n >= m);
    let mut a = w.clone();
    let mut v = DMatrix::<f64>::identity(m, m);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for q in (p + 1)..m {
                // Gram entries of the (p, q) column pair.
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..n {
                    let x = a[(i, p)];
                    let y = a[(i, q)];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq == 0.0 || apq.abs() <= f64::EPSILON * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                // Rotation angle diagonalizing the 2×2 Gram block.
                let tau = (aqq - app) / (2.0 * apq);
                let tau2 = tau * tau;
                let t = if tau2.is_finite() {
                    tau.signum() / (tau.abs() + (1.0 + tau2).sqrt())
                } else {
                    0.5 / tau
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let x = a[(i, p)];
                    let y = a[(i, q)];
                    a[(i, p)] = c * x - s * y;
                    a[(i, q)] = s * x + c * y;
                }
                for i in 0..m {
                    let x = v[(i, p)];
                    let y = v[(i, q)];
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!("Jacobi SVD of a {n}×{m} matrix did not converge")));
    }

    let mut s = DVector::zeros(m);
    let mut u = DMatrix::zeros(n, m);
    for j in 0..m {
        let norm = a.column(j).norm();
        s[j] = norm;
        if norm > 0.0 {
            for i in 0..n {
                u[(i, j)] = a[(i, j)] / norm;
            }
        }
    }
    Ok((u, s, v))
}

/// A linear representation `A ∈ R^{d×D}` with a lazily cached SVD.
///
/// The cache is computed at most once (single-initialization via
/// [`OnceLock`]) and shared by all readers; diagnostics and projections all
/// read the same factorization.
#[derive(Debug, Clone)]
pub struct Representation {
    a: DMatrix<f64>,
    svd: OnceLock<SvdParts>,
}

impl Representation {
    pub fn new(a: DMatrix<f64>) -> Self {
        Self { a, svd: OnceLock::new() }
    }

    /// The identity representation I_d.
    pub fn identity(d: usize) -> Self {
        Self::new(DMatrix::identity(d, d))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Input (row) dimension d.
    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    /// Representation (column) dimension D.
    pub fn rep_dim(&self) -> usize {
        self.a.ncols()
    }

    /// Cached sorted SVD of `A`.
    ///
    /// Panics only if the SVD fails to converge, which does not happen for
    /// finite matrices at the sizes this crate works with; fallible access is
    /// available through [`sorted_svd`] on [`Representation::matrix`].
    pub fn svd(&self) -> &SvdParts {
        self.svd.get_or_init(|| sorted_svd(&self.a).expect("representation SVD"))
    }

    /// Numeric rank at the pseudo-inverse cutoff.
    pub fn rank(&self) -> usize {
        self.svd().rank
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.svd().s
    }

    /// The scaled representation κ·A (fresh cache).
    pub fn scaled(&self, kappa: f64) -> Self {
        Self::new(&self.a * kappa)
    }
}

impl From<DMatrix<f64>> for Representation {
    fn from(a: DMatrix<f64>) -> Self {
        Self::new(a)
    }
}

/// The inner-loop output: the coefficient vector and the effective regressor.
#[derive(Debug, Clone)]
pub struct LinearPredictor {
    /// Coefficients on top of the representation, length D.
    pub w: DVector<f64>,
    /// The composite regressor `A·w ∈ R^d`.
    pub composite: DVector<f64>,
}

impl LinearPredictor {
    fn new(a: &Representation, w: DVector<f64>) -> Self {
        let composite = a.matrix() * &w;
        Self { w, composite }
    }

    /// Wrap coefficients produced outside the closed-form solvers (e.g. by
    /// an iterative inner loop), caching the composite regressor.
    pub fn from_weights(a: &Representation, w: DVector<f64>) -> Self {
        Self::new(a, w)
    }
}

fn check_shapes(a: &Representation, data: &TaskDataset) -> Result<()> {
    if data.d() != a.d() {
        return Err(Error::DimensionMismatch(format!(
            "data has d={}, representation expects d={}",
            data.d(),
            a.d()
        )));
    }
    Ok(())
}

/// Shared solve path: SVD of `B = XA`, then `w = Σ f(sᵢ)·(uᵢᵀY)·vᵢ`.
fn solve_filtered(
    a: &Representation,
    data: &TaskDataset,
    filter: impl Fn(f64, f64) -> f64,
) -> Result<LinearPredictor> {
    check_shapes(a, data)?;
    let b = &data.x * a.matrix();
    let parts = sorted_svd(&b)?;
    let cutoff = rank_cutoff(&parts.s, b.nrows(), b.ncols());
    let coeffs = parts.u.transpose() * &data.y;
    let mut w = DVector::zeros(a.rep_dim());
    for i in 0..parts.s.len() {
        let f = filter(parts.s[i], cutoff);
        if f != 0.0 {
            w.axpy(f * coeffs[i], &parts.v.column(i).into_owned(), 1.0);
        }
    }
    Ok(LinearPredictor::new(a, w))
}

/// Ridge solution `w = (AᵀXᵀXA/n + λI_D)⁻¹ AᵀXᵀY/n`, the unique minimizer of
/// `(1/n)‖XAw − Y‖² + λ‖w‖²`. Requires λ > 0.
pub fn ridge_solve(a: &Representation, data: &TaskDataset, lambda: f64) -> Result<LinearPredictor> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("ridge_solve needs λ > 0, got {lambda}")));
    }
    let n_lambda = data.n() as f64 * lambda;
    solve_filtered(a, data, |s, _| s / (s * s + n_lambda))
}

/// Minimum-ℓ₂-norm least-squares solution `w = (AᵀXᵀXA)† AᵀXᵀY`, the λ→0⁺
/// limit of [`ridge_solve`]. Interpolates the data when `rank(XA) = n`.
pub fn min_norm_solve(a: &Representation, data: &TaskDataset) -> Result<LinearPredictor> {
    solve_filtered(a, data, |s, cutoff| if s > cutoff { 1.0 / s } else { 0.0 })
}

/// Solve the inner problem at any λ ≥ 0: ridge for λ > 0, min-norm at λ = 0.
/// Negative λ is rejected.
pub fn solve(a: &Representation, data: &TaskDataset, lambda: f64) -> Result<LinearPredictor> {
    if lambda < 0.0 || lambda.is_nan() {
        Err(Error::InvalidParameter(format!("inner regularizer λ={lambda} must be ≥ 0")))
    } else if lambda == 0.0 {
        min_norm_solve(a, data)
    } else {
        ridge_solve(a, data, lambda)
    }
}

/// Population excess risk of the adapted predictor on task `v`:
/// `‖A·w − v‖²`, exact for standard-Gaussian inputs. The total test loss is
/// this plus the irreducible noise floor σ².
pub fn task_excess_risk(
    _a: &Representation,
    predictor: &LinearPredictor,
    v: &TaskVector,
    sigma: f64,
) -> f64 {
    debug_assert!(sigma >= 0.0);
    (&predictor.composite - &v.v).norm_squared()
}

/// Mean squared in-sample residual `(1/n)‖XAw − Y‖²` of a fitted predictor.
pub fn training_mse(a: &Representation, data: &TaskDataset, predictor: &LinearPredictor) -> f64 {
    let _ = a;
    let r = &data.x * &predictor.composite - &data.y;
    r.norm_squared() / data.n() as f64
}
