//! Asymptotic (T→∞) closed forms and theoretical reference values.
//!
//! The λ=0 tr-val objective of a representation `A = U·S·Vᵀ` with rank r,
//! evaluated on n₁-point train splits, depends on `A` only through `(U, S)`
//! and admits an exact value per rank regime. Writing `e = ‖P⊥_U B‖²_F / k`
//! for the normalized task energy missed by the column space (B the task
//! basis, unit task energy), and `α(a, b) = b/(a − b − 1)`:
//!
//! * **underparam** (r < n₁−1): `σ² + (1 + α(n₁, r))·e + α(n₁, r)·σ²`
//! * **overparam** (r > n₁+1):
//!   `σ² + (n₁/r + α(r, n₁))·e + (r − n₁)/r + β(S) + α(r, n₁)·σ²`
//! * **divergent** (|r − n₁| ≤ 1): +∞ — the expected inverse-Wishart traces
//!   behind α blow up at the interpolation boundary.
//!
//! `β(S)` vanishes for isotropic spectra and is otherwise a non-negative
//! anisotropy penalty with no closed form; it is estimated by Monte Carlo
//! from its defining expectations (see [`beta_estimate`]).
//!
//! The module also carries the other analytic anchors: the tr-tr infimum
//! `σ²(n−r)₊/n`, the bad-representation meta-test lower bounds, the optimal
//! tr-val value `σ²(1 + k/(n₁−k−1))`, the rank profile certifying that the
//! optimum sits at rank k, and the inverse-Wishart trace identity
//! `E tr((XᵀX)⁻¹) = q/(p−q−1)` those results rest on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::base_learner::{sorted_svd, Representation};
use crate::error::{Error, Result};
use crate::objectives::MonteCarloEstimate;
use crate::rng::RngStream;
use crate::task_model::{gaussian_matrix, SubspaceInstance};

/// A value on the extended real line [0, +∞]: finite or exactly +∞.
///
/// Divergent closed-form regimes are represented by the `Infinite` tag, never
/// by a large sentinel float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtReal {
    Finite(f64),
    Infinite,
}

impl ExtReal {
    pub fn is_finite(&self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            ExtReal::Finite(x) => Some(*x),
            ExtReal::Infinite => None,
        }
    }

    /// Total order: finite values by magnitude, +∞ above everything.
    pub fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
        match (self, other) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => a.total_cmp(b),
            (ExtReal::Finite(_), ExtReal::Infinite) => std::cmp::Ordering::Less,
            (ExtReal::Infinite, ExtReal::Finite(_)) => std::cmp::Ordering::Greater,
            (ExtReal::Infinite, ExtReal::Infinite) => std::cmp::Ordering::Equal,
        }
    }
}

impl std::fmt::Display for ExtReal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExtReal::Finite(x) => write!(f, "{x}"),
            ExtReal::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for ExtReal {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ExtReal::Finite(x) => s.serialize_f64(*x),
            ExtReal::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ExtReal {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(ExtReal::Finite(x)),
            Raw::Str(s) if s == "inf" => Ok(ExtReal::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {s:?}"))),
        }
    }
}

/// `α(a, b) = b/(a − b − 1)` when `a − b − 1 > 0`, +∞ otherwise.
pub fn alpha(a: usize, b: usize) -> ExtReal {
    if a > b + 1 {
        ExtReal::Finite(b as f64 / (a - b - 1) as f64)
    } else {
        ExtReal::Infinite
    }
}

/// Singular-value profile of a representation, as the closed form sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spectrum {
    /// All r singular values equal κ > 0; β ≡ 0 exactly.
    Isotropic { kappa: f64 },
    /// Explicit positive diagonal (length r); β estimated by Monte Carlo.
    General { values: Vec<f64> },
}

/// The (rank, missed-energy, spectrum) abstraction the closed form consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    /// Rank of the representation.
    pub r: usize,
    /// Normalized missed task energy `e = ‖P⊥_U B‖²_F / k ∈ [0, 1]`.
    pub expressiveness: f64,
    pub spectrum: Spectrum,
}

impl SpectrumModel {
    pub fn isotropic(r: usize, expressiveness: f64) -> Self {
        Self { r, expressiveness, spectrum: Spectrum::Isotropic { kappa: 1.0 } }
    }

    fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(Error::InvalidParameter("rank r must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.expressiveness) {
            return Err(Error::InvalidParameter(format!(
                "expressiveness e={} must lie in [0, 1]",
                self.expressiveness
            )));
        }
        match &self.spectrum {
            Spectrum::Isotropic { kappa } => {
                if !(*kappa > 0.0) {
                    return Err(Error::InvalidParameter(format!("κ={kappa} must be > 0")));
                }
            }
            Spectrum::General { values } => {
                if values.len() != self.r {
                    return Err(Error::InvalidParameter(format!(
                        "spectrum has {} values, rank r={}",
                        values.len(),
                        self.r
                    )));
                }
                if values.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::InvalidParameter("spectrum values must be > 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// Which branch of the closed form applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseTag {
    /// r < n₁ − 1.
    Underparam,
    /// r > n₁ + 1.
    Overparam,
    /// |r − n₁| ≤ 1.
    Divergent,
}

/// Additive decomposition of the finite closed-form value above σ².
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ValueComponents {
    /// Penalty for missed task energy: `(1 + α)·e` or `(n₁/r + α)·e`.
    pub expressiveness_term: f64,
    /// Overparameterization penalty `(r − n₁)/r` (zero when underparam).
    pub rank_penalty_term: f64,
    /// Noise amplification `α·σ²`.
    pub noise_term: f64,
    /// Anisotropy penalty β(S) (zero for isotropic spectra).
    pub beta_term: f64,
}

impl ValueComponents {
    pub fn sum(&self) -> f64 {
        self.expressiveness_term + self.rank_penalty_term + self.noise_term + self.beta_term
    }
}

/// Result of the asymptotic tr-val evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormResult {
    /// Total objective value (σ² + components), or +∞ in the divergent band.
    pub value: ExtReal,
    pub case_tag: CaseTag,
    pub components: ValueComponents,
}

/// Internal Monte Carlo budget used when [`trva_closed_form`] must estimate
/// β for a general spectrum. The draw is keyed by a fixed stream so the
/// function stays deterministic; callers needing a different budget or
/// stream should use [`beta_estimate`] directly.
pub const BETA_MC_SAMPLES: usize = 20_000;
const BETA_MC_SEED: u64 = 0xBE7A_0001;

/// Asymptotic λ=0 tr-val objective of a representation abstracted by
/// `model`, on n₁-point train splits with noise σ.
pub fn trva_closed_form(model: &SpectrumModel, n1: usize, sigma: f64) -> Result<ClosedFormResult> {
    model.validate()?;
    if n1 < 1 {
        return Err(Error::InvalidParameter("n1 must be ≥ 1".into()));
    }
    let r = model.r;
    let e = model.expressiveness;
    let s2 = sigma * sigma;

    if r.abs_diff(n1) <= 1 {
        return Ok(ClosedFormResult {
            value: ExtReal::Infinite,
            case_tag: CaseTag::Divergent,
            components: ValueComponents::default(),
        });
    }

    let components = if r < n1 {
        // Underparam: XA has full column rank r; the fitted direction only
        // sees the column space, and the value is spectrum-independent.
        let a = alpha(n1, r).finite().expect("n1 − r − 1 > 0 in the underparam branch");
        ValueComponents {
            expressiveness_term: (1.0 + a) * e,
            rank_penalty_term: 0.0,
            noise_term: a * s2,
            beta_term: 0.0,
        }
    } else {
        let a = alpha(r, n1).finite().expect("r − n1 − 1 > 0 in the overparam branch");
        let beta_term = match &model.spectrum {
            Spectrum::Isotropic { .. } => 0.0,
            Spectrum::General { values } => {
                let (min, max) =
                    values.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                if max - min <= 1e-12 * max {
                    0.0
                } else {
                    beta_estimate(values, n1, e, sigma, BETA_MC_SAMPLES, RngStream::new(BETA_MC_SEED))?
                        .mean
                        .max(0.0)
                }
            }
        };
        ValueComponents {
            expressiveness_term: (n1 as f64 / r as f64 + a) * e,
            rank_penalty_term: (r - n1) as f64 / r as f64,
            noise_term: a * s2,
            beta_term,
        }
    };

    Ok(ClosedFormResult {
        value: ExtReal::Finite(s2 + components.sum()),
        case_tag: if r < n1 { CaseTag::Underparam } else { CaseTag::Overparam },
        components,
    })
}

/// Monte Carlo estimate of the overparam anisotropy penalty
/// `β(S) = β₁(S) + (γ(S) − α(r, n₁))·(e + σ²)` where, for `X` an n₁×r
/// standard Gaussian and `M = X S² Xᵀ`:
///
/// * `γ(S)  = E tr(M⁻¹ X S⁴ Xᵀ M⁻¹)`
/// * `β₁(S) = ((1 − e)/r) · E ‖S² Xᵀ M⁻¹ X − P_{Xᵀ}‖²_F`
///
/// Requires the overparam regime `r > n₁ + 1` (γ is infinite otherwise).
pub fn beta_estimate(
    spectrum: &[f64],
    n1: usize,
    e: f64,
    sigma: f64,
    num_samples: usize,
    rng: RngStream,
) -> Result<MonteCarloEstimate> {
    let r = spectrum.len();
    if r <= n1 + 1 {
        return Err(Error::DivergentRegime(format!(
            "β is defined for r > n1 + 1; got r={r}, n1={n1}"
        )));
    }
    if spectrum.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParameter("spectrum values must be > 0".into()));
    }
    let a = alpha(r, n1).finite().expect("r > n1 + 1");
    let s2 = DVector::from_fn(r, |i, _| spectrum[i] * spectrum[i]);
    let mix = e + sigma * sigma;

    let mut values = Vec::with_capacity(num_samples);
    for t in 0..num_samples {
        let x = gaussian_matrix(n1, r, &mut rng.substream(t as u64).rng());

        let mut xs2 = x.clone(); // X·S²
        let mut xs4 = x.clone(); // X·S⁴
        for j in 0..r {
            let f2 = s2[j];
            for i in 0..n1 {
                xs2[(i, j)] *= f2;
                xs4[(i, j)] *= f2 * f2;
            }
        }
        let m = &xs2 * x.transpose(); // X S² Xᵀ, n₁×n₁, a.s. positive definite
        let m_inv = m
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| m.try_inverse())
            .ok_or_else(|| Error::Numerical("X S² Xᵀ not invertible".into()))?;

        let gamma_sample = (&m_inv * (&xs4 * x.transpose()) * &m_inv).trace();

        // T = S² Xᵀ M⁻¹ X (the oblique projector the min-norm fit applies)
        // versus the orthogonal projector onto the row space of X.
        let t_mat = {
            let mut xt_minv = x.transpose() * &m_inv; // r×n₁
            for i in 0..r {
                let f2 = s2[i];
                for j in 0..n1 {
                    xt_minv[(i, j)] *= f2;
                }
            }
            xt_minv * &x
        };
        let gram_inv = (&x * x.transpose())
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Numerical("X Xᵀ not invertible".into()))?;
        let p_row = x.transpose() * gram_inv * &x;

        let b1_sample = (&t_mat - &p_row).norm_squared();
        values.push((1.0 - e) / r as f64 * b1_sample + (gamma_sample - a) * mix);
    }
    MonteCarloEstimate::from_values(&values)
}

/// Asymptotic tr-tr infimum for a rank-r representation on n-point tasks:
/// `σ²·(n − r)₊/n`, attained in the κ→∞ limit (equivalently λ→0) where the
/// fit interpolates everything the rank allows.
pub fn trtr_asymptotic(n: usize, r: usize, sigma: f64) -> f64 {
    sigma * sigma * n.saturating_sub(r) as f64 / n as f64
}

/// Two variants of the bad-representation meta-test lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BadRepBounds {
    /// `min{1 − n̄₁/(d(1+σ²)), dσ²/((1+σ²)·n̄₁)}`.
    pub main_text: f64,
    /// `min{1 − n̄₁/(d(1+σ²)), dσ²/(n̄₁ + dσ²)}`.
    pub appendix: f64,
}

/// Excess-risk lower bound certified for the bad (isotropic, tr-tr-optimal)
/// representation at test sample size n̄₁. The second term comes in two
/// variants; both are reported and each is used only as a lower bound.
/// Values clamp at 0.
pub fn bad_rep_lower_bound(d: usize, nbar1: usize, sigma: f64) -> BadRepBounds {
    let d = d as f64;
    let n = nbar1 as f64;
    let s2 = sigma * sigma;
    let first = 1.0 - n / (d * (1.0 + s2));
    BadRepBounds {
        main_text: first.min(d * s2 / ((1.0 + s2) * n)).max(0.0),
        appendix: first.min(d * s2 / (n + d * s2)).max(0.0),
    }
}

/// Minimum of the asymptotic tr-val objective, `σ² + σ²·k/(n₁ − k − 1)`,
/// attained at expressive rank-k representations. Errors when n₁ ≤ k + 1
/// (the minimum regime does not exist below the divergence band).
pub fn optimal_trva_value(n1: usize, k: usize, sigma: f64) -> Result<f64> {
    match alpha(n1, k) {
        ExtReal::Finite(a) => Ok(sigma * sigma * (1.0 + a)),
        ExtReal::Infinite => Err(Error::DivergentRegime(format!(
            "optimal tr-val value needs n1 > k + 1; got n1={n1}, k={k}"
        ))),
    }
}

/// Closed-form value-vs-rank profile: for each r in 1..=d, the best
/// achievable tr-val value at rank r — isotropic spectrum and the smallest
/// attainable missed energy `e = (k − r)₊/k`.
pub fn rank_scan(d: usize, k: usize, n1: usize, sigma: f64) -> Result<Vec<(usize, ExtReal)>> {
    if k < 1 || k > d {
        return Err(Error::InvalidDimensions(format!("k={k} must satisfy 1 ≤ k ≤ d={d}")));
    }
    (1..=d)
        .map(|r| {
            let e = k.saturating_sub(r) as f64 / k as f64;
            let res = trva_closed_form(&SpectrumModel::isotropic(r, e), n1, sigma)?;
            Ok((r, res.value))
        })
        .collect()
}

/// Smallest rank achieving the minimum of a [`rank_scan`] profile, if any
/// entry is finite.
pub fn rank_scan_argmin(profile: &[(usize, ExtReal)]) -> Option<usize> {
    profile
        .iter()
        .filter_map(|(r, v)| v.finite().map(|x| (*r, x)))
        .min_by(|(ra, va), (rb, vb)| va.total_cmp(vb).then(ra.cmp(rb)))
        .map(|(r, _)| r)
}

/// Inverse-Wishart trace identity: for X a `n_rows × n_cols` standard
/// Gaussian with `n_rows > n_cols + 1`,
/// `E tr((XᵀX)⁻¹) = n_cols/(n_rows − n_cols − 1)`; +∞ at or below the
/// boundary.
pub fn inverse_wishart_trace(n_rows: usize, n_cols: usize) -> ExtReal {
    alpha(n_rows, n_cols)
}

/// Monte Carlo counterpart of [`inverse_wishart_trace`]: sample means of
/// `tr((XᵀX)⁻¹)` over fresh Gaussian matrices. Near the divergent boundary
/// the heavy-tailed samples make the running mean grow without bound — the
/// expected signature, not an estimator failure.
pub fn inverse_wishart_trace_mc(
    n_rows: usize,
    n_cols: usize,
    num_samples: usize,
    rng: RngStream,
) -> Result<MonteCarloEstimate> {
    if n_rows < n_cols {
        return Err(Error::InvalidDimensions(format!(
            "need n_rows ≥ n_cols, got {n_rows} < {n_cols}"
        )));
    }
    let mut values = Vec::with_capacity(num_samples);
    for t in 0..num_samples {
        let x = gaussian_matrix(n_rows, n_cols, &mut rng.substream(t as u64).rng());
        let gram = x.transpose() * &x;
        let inv = gram
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| gram.try_inverse())
            .ok_or_else(|| Error::Numerical("XᵀX not invertible".into()))?;
        values.push(inv.trace());
    }
    MonteCarloEstimate::from_values(&values)
}

/// Build a concrete representation realizing a prescribed [`SpectrumModel`]
/// relative to an instance's task basis: rank exactly `model.r`, missed task
/// energy exactly `model.expressiveness`, singular values from the spectrum,
/// with the remaining directions drawn at random.
///
/// The column space takes `⌊k(1−e)⌋` basis directions outright, one mixed
/// direction to hit a fractional captured energy, and fills up with random
/// directions orthogonal to the basis; the right factor is Haar-random.
pub fn synthesize_representation(
    instance: &SubspaceInstance,
    model: &SpectrumModel,
    rng: RngStream,
) -> Result<Representation> {
    model.validate()?;
    let (d, k) = (instance.d(), instance.k());
    let r = model.r;
    if r > d {
        return Err(Error::InvalidDimensions(format!("rank r={r} exceeds d={d}")));
    }
    let captured = k as f64 * (1.0 - model.expressiveness);
    if captured > r as f64 + 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "rank r={r} cannot capture energy {captured:.3} (needs e ≥ (k−r)/k)"
        )));
    }
    let mut m = captured.floor() as usize;
    let mut frac = captured - m as f64;
    if frac < 1e-12 {
        frac = 0.0;
    } else if frac > 1.0 - 1e-12 {
        m += 1;
        frac = 0.0;
    }
    let mixed = usize::from(frac > 0.0);
    let num_complement = r - m; // z-directions used (one absorbed by the mix)
    if m + mixed > k {
        return Err(Error::InvalidParameter(format!(
            "captured energy {captured:.3} exceeds subspace dimension k={k}"
        )));
    }
    if num_complement > d - k {
        return Err(Error::InvalidDimensions(format!(
            "need {num_complement} directions orthogonal to the basis, only {} available",
            d - k
        )));
    }

    let basis = instance.basis();
    let mut r1 = rng.substream(0).rng();

    // Orthonormal directions orthogonal to span(basis).
    let z = if num_complement > 0 {
        let mut g = gaussian_matrix(d, num_complement, &mut r1);
        g -= basis * (basis.transpose() * &g);
        let qr = g.qr();
        let mut q = qr.q();
        q -= basis * (basis.transpose() * &q); // second projection pass for cleanliness
        q.qr().q()
    } else {
        DMatrix::zeros(d, 0)
    };

    let mut u = DMatrix::zeros(d, r);
    for j in 0..m {
        u.set_column(j, &basis.column(j));
    }
    let mut z_next = 0;
    if mixed == 1 {
        let col = basis.column(m).into_owned() * frac.sqrt()
            + z.column(z_next).into_owned() * (1.0 - frac).sqrt();
        u.set_column(m, &col);
        z_next += 1;
    }
    for j in (m + mixed)..r {
        u.set_column(j, &z.column(z_next));
        z_next += 1;
    }

    let s = match &model.spectrum {
        Spectrum::Isotropic { kappa } => DVector::from_element(r, *kappa),
        Spectrum::General { values } => DVector::from_fn(r, |i, _| values[i]),
    };

    // Haar-random right factor (d×r with orthonormal columns).
    let v = {
        let g = gaussian_matrix(d, r, &mut rng.substream(1).rng());
        let qr = g.qr();
        qr.q()
    };

    let a = &u * DMatrix::from_diagonal(&s) * v.transpose();
    Ok(Representation::new(a))
}

/// Measured (rank, missed-energy) of a concrete representation against an
/// instance — the inverse of [`synthesize_representation`], used to verify
/// that constructions hit their prescribed model.
pub fn measure_spectrum_model(a: &Representation, instance: &SubspaceInstance) -> Result<SpectrumModel> {
    let parts = sorted_svd(a.matrix())?;
    let r = parts.rank;
    let u_r = parts.u.columns(0, r);
    let captured = (u_r.transpose() * instance.basis()).norm_squared();
    let e = ((instance.k() as f64 - captured) / instance.k() as f64).clamp(0.0, 1.0);
    Ok(SpectrumModel {
        r,
        expressiveness: e,
        spectrum: Spectrum::General { values: parts.s.iter().take(r).copied().collect() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_model::make_instance;
    use approx::assert_relative_eq;

    fn stream(tag: u64) -> RngStream {
        RngStream::new(0x04AC1E).substream(tag)
    }

    #[test]
    fn alpha_reference_values() {
        assert_eq!(alpha(15, 5), ExtReal::Finite(5.0 / 9.0));
        assert_eq!(alpha(8, 5), ExtReal::Finite(2.5));
        assert_eq!(alpha(6, 5), ExtReal::Infinite);
        assert_eq!(alpha(5, 5), ExtReal::Infinite);
        assert_eq!(alpha(3, 5), ExtReal::Infinite);
    }

    #[test]
    fn closed_form_underparam_frozen_values() {
        // (r=5, e=0, n1=15, σ=0.5): σ²(1 + 5/9) = 7/18.
        let res = trva_closed_form(&SpectrumModel::isotropic(5, 0.0), 15, 0.5).unwrap();
        assert_eq!(res.case_tag, CaseTag::Underparam);
        assert_relative_eq!(res.value.finite().unwrap(), 7.0 / 18.0, max_relative = 1e-14);

        // (r=10, e=0.4, n1=15, σ=0.5): 0.25 + 3.5·0.4 + 2.5·0.25 = 2.275.
        let res = trva_closed_form(&SpectrumModel::isotropic(10, 0.4), 15, 0.5).unwrap();
        assert_relative_eq!(res.value.finite().unwrap(), 2.275, max_relative = 1e-14);
        assert_relative_eq!(res.components.expressiveness_term, 1.4, max_relative = 1e-14);
        assert_relative_eq!(res.components.noise_term, 0.625, max_relative = 1e-14);
        assert_eq!(res.components.rank_penalty_term, 0.0);
    }

    #[test]
    fn closed_form_overparam_frozen_value() {
        // (r=30, e=0, n1=8, σ=0.5): 1/4 + 22/30 + (8/21)/4 = 453/420.
        let res = trva_closed_form(&SpectrumModel::isotropic(30, 0.0), 8, 0.5).unwrap();
        assert_eq!(res.case_tag, CaseTag::Overparam);
        assert_relative_eq!(res.value.finite().unwrap(), 453.0 / 420.0, max_relative = 1e-14);
        assert_eq!(res.components.beta_term, 0.0);
    }

    #[test]
    fn closed_form_divergent_band() {
        for r in [14, 15, 16] {
            let res = trva_closed_form(&SpectrumModel::isotropic(r, 0.0), 15, 0.5).unwrap();
            assert_eq!(res.case_tag, CaseTag::Divergent, "r={r}");
            assert_eq!(res.value, ExtReal::Infinite);
        }
        assert_eq!(
            trva_closed_form(&SpectrumModel::isotropic(13, 0.0), 15, 0.5).unwrap().case_tag,
            CaseTag::Underparam
        );
        assert_eq!(
            trva_closed_form(&SpectrumModel::isotropic(17, 0.0), 15, 0.5).unwrap().case_tag,
            CaseTag::Overparam
        );
    }

    #[test]
    fn closed_form_noiseless_expressive_is_zero() {
        let res = trva_closed_form(&SpectrumModel::isotropic(5, 0.0), 15, 0.0).unwrap();
        assert_eq!(res.value, ExtReal::Finite(0.0));
    }

    #[test]
    fn closed_form_value_equals_sigma2_plus_components() {
        for (r, e, n1, sigma) in [(5, 0.0, 15, 0.5), (9, 0.3, 20, 0.7), (30, 0.1, 8, 0.5)] {
            let res = trva_closed_form(&SpectrumModel::isotropic(r, e), n1, sigma).unwrap();
            let v = res.value.finite().unwrap();
            assert_relative_eq!(v, sigma * sigma + res.components.sum(), max_relative = 1e-14);
            assert!(res.components.expressiveness_term >= 0.0);
            assert!(res.components.rank_penalty_term >= 0.0);
            assert!(res.components.noise_term >= 0.0);
            assert!(res.components.beta_term >= 0.0);
        }
    }

    #[test]
    fn trtr_asymptotic_values() {
        assert_eq!(trtr_asymptotic(16, 50, 0.5), 0.0);
        assert_relative_eq!(trtr_asymptotic(100, 50, 0.5), 0.125);
        assert_eq!(trtr_asymptotic(7, 3, 0.0), 0.0);
    }

    #[test]
    fn bad_rep_bounds_frozen_values() {
        let b = bad_rep_lower_bound(50, 15, 0.5);
        // 1 − 15/62.5 = 0.76; main-text second term 12.5/18.75 = 2/3;
        // appendix second term 12.5/27.5 = 5/11.
        assert_relative_eq!(b.main_text, 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(b.appendix, 5.0 / 11.0, max_relative = 1e-14);
        // Vacuous regime clamps at zero.
        let z = bad_rep_lower_bound(4, 10, 0.0);
        assert_eq!(z.main_text, 0.0);
        assert_eq!(z.appendix, 0.0);
    }

    #[test]
    fn optimal_value_matches_rank_k_closed_form() {
        assert_relative_eq!(optimal_trva_value(8, 5, 0.5).unwrap(), 0.875, max_relative = 1e-14);
        let opt = optimal_trva_value(15, 5, 0.5).unwrap();
        let cf = trva_closed_form(&SpectrumModel::isotropic(5, 0.0), 15, 0.5).unwrap();
        assert_relative_eq!(opt, cf.value.finite().unwrap(), max_relative = 1e-14);
        assert_eq!(optimal_trva_value(9, 3, 0.0).unwrap(), 0.0);
        assert!(matches!(optimal_trva_value(6, 5, 0.5), Err(Error::DivergentRegime(_))));
    }

    #[test]
    fn rank_scan_argmin_is_k() {
        let profile = rank_scan(50, 5, 15, 0.5).unwrap();
        assert_eq!(profile.len(), 50);
        assert_eq!(rank_scan_argmin(&profile), Some(5));
        // Divergent band at r ∈ {14, 15, 16}.
        for (r, v) in &profile {
            if r.abs_diff(15) <= 1 {
                assert_eq!(*v, ExtReal::Infinite, "r={r}");
            } else {
                assert!(v.is_finite(), "r={r}");
            }
        }
    }

    #[test]
    fn rank_scan_noiseless_ties() {
        // σ = 0: every rank in [k, n1−2] scores exactly 0.
        let profile = rank_scan(30, 4, 12, 0.0).unwrap();
        for (r, v) in &profile {
            if (4..=10).contains(r) {
                assert_eq!(*v, ExtReal::Finite(0.0), "r={r}");
            } else if r.abs_diff(12) > 1 {
                assert!(v.finite().unwrap() > 0.0, "r={r} should be positive");
            }
        }
        assert_eq!(rank_scan_argmin(&profile), Some(4));
    }

    #[test]
    fn wishart_identity_values() {
        assert_eq!(inverse_wishart_trace(15, 5), ExtReal::Finite(5.0 / 9.0));
        assert_eq!(inverse_wishart_trace(7, 5), ExtReal::Finite(5.0));
        assert_eq!(inverse_wishart_trace(6, 5), ExtReal::Infinite);
    }

    #[test]
    fn wishart_monte_carlo_matches_identity() {
        let est = inverse_wishart_trace_mc(15, 5, 10_000, stream(1)).unwrap();
        let want = 5.0 / 9.0;
        assert!(
            (est.mean - want).abs() <= (0.03 * want).max(3.0 * est.stderr),
            "MC {} ± {} vs {want}",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn beta_is_zero_for_isotropic_and_positive_for_skewed() {
        // Isotropic spectra short-circuit to exactly zero.
        let iso = trva_closed_form(
            &SpectrumModel { r: 20, expressiveness: 0.0, spectrum: Spectrum::Isotropic { kappa: 3.0 } },
            8,
            0.5,
        )
        .unwrap();
        assert_eq!(iso.components.beta_term, 0.0);

        // A strongly anisotropic spectrum has β > 0 (Monte Carlo, so demand
        // a clear multiple of the standard error).
        let values: Vec<f64> = (0..20).map(|i| 2.0_f64.powi(-(i as i32) / 2)).collect();
        let est = beta_estimate(&values, 8, 0.0, 0.5, 4_000, stream(2)).unwrap();
        assert!(est.mean > 5.0 * est.stderr, "β = {} ± {}", est.mean, est.stderr);
    }

    #[test]
    fn beta_requires_overparam() {
        assert!(matches!(
            beta_estimate(&[1.0, 1.0, 2.0], 4, 0.0, 0.5, 10, stream(3)),
            Err(Error::DivergentRegime(_))
        ));
    }

    #[test]
    fn synthesized_representation_hits_the_model() {
        let inst = make_instance(50, 5, 0.5, stream(4)).unwrap();
        for (tag, r, e) in [(10, 5usize, 0.0), (11, 30, 0.0), (12, 10, 0.4), (13, 3, 0.55)] {
            let model = SpectrumModel::isotropic(r, e);
            let a = synthesize_representation(&inst, &model, stream(tag)).unwrap();
            let measured = measure_spectrum_model(&a, &inst).unwrap();
            assert_eq!(measured.r, r, "rank at e={e}");
            assert!(
                (measured.expressiveness - e).abs() <= 1e-9,
                "e measured {} want {e}",
                measured.expressiveness
            );
        }
    }

    #[test]
    fn synthesized_rejects_impossible_models() {
        let inst = make_instance(10, 4, 0.5, stream(5)).unwrap();
        // Rank 2 cannot capture all of a 4-dimensional subspace (e = 0).
        assert!(synthesize_representation(&inst, &SpectrumModel::isotropic(2, 0.0), stream(6)).is_err());
        // e ≥ (k−r)/k is required: r=2, k=4 ⇒ e ≥ 0.5.
        assert!(synthesize_representation(&inst, &SpectrumModel::isotropic(2, 0.5), stream(7)).is_ok());
    }

    #[test]
    fn ext_real_serialization_round_trip() {
        let fin: ExtReal = serde_json::from_str("0.25").unwrap();
        assert_eq!(fin, ExtReal::Finite(0.25));
        let inf: ExtReal = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(inf, ExtReal::Infinite);
        assert_eq!(serde_json::to_string(&inf).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&fin).unwrap(), "0.25");
    }
}
