//! Spectral and subspace diagnostics of a learned representation.
//!
//! Two questions matter after training: did the representation collapse to
//! (near) rank k, and does its column space line up with the task subspace?
//! The first is answered by the singular-value profile — how much nuclear /
//! Frobenius mass the top k values carry — and the second by the principal
//! angles between the top-k left singular subspace and the task basis, plus
//! the projection error of the basis onto the full column space.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::base_learner::Representation;
use crate::error::{Error, Result};
use crate::task_model::SubspaceInstance;

/// Relative singular-value tolerance used for reporting-level rank counts.
/// (The solvers keep their own, tighter cutoff.)
pub const DEFAULT_RANK_REL_TOL: f64 = 1e-8;

/// Concentration profile of a representation's singular values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
    /// Σ of the top k values over Σ of all values (0 for a zero matrix).
    pub nuclear_topk_share: f64,
    /// Σ of the top k squared values over Σ of all squared values.
    pub frobenius_topk_share: f64,
    /// Count of singular values above `DEFAULT_RANK_REL_TOL · s_max`.
    pub numeric_rank: usize,
}

/// Alignment of a representation's column space with a task basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceAlignment {
    /// k principal angles between the top-k left singular subspace and the
    /// basis, in degrees, ascending. When the representation has numeric
    /// rank m < k, only m angles are measurable; the remaining k − m slots
    /// are 90° (those basis directions meet no part of the column space).
    pub principal_angles_deg: Vec<f64>,
    pub max_angle_deg: f64,
    /// `‖P_A·B − B‖²_F ∈ [0, k]` where P_A projects onto the *full* column
    /// space of A (all directions above the rank cutoff, not just the top k).
    pub projection_error: f64,
    /// Set when numeric rank < k; angles are then measured against the
    /// smaller available subspace and padded as described above.
    pub rank_deficient: bool,
}

/// Singular-value concentration of `A` in its top k values.
pub fn spectral_report(a: &Representation, k: usize) -> Result<SpectralReport> {
    let max_k = a.d().min(a.rep_dim());
    if k < 1 || k > max_k {
        return Err(Error::InvalidParameter(format!(
            "k={k} must satisfy 1 ≤ k ≤ min(d, D) = {max_k}"
        )));
    }
    let s = a.singular_values();
    let nuclear_total: f64 = s.iter().sum();
    let frob_total: f64 = s.iter().map(|x| x * x).sum();
    let nuclear_top: f64 = s.iter().take(k).sum();
    let frob_top: f64 = s.iter().take(k).map(|x| x * x).sum();
    Ok(SpectralReport {
        singular_values: s.iter().copied().collect(),
        nuclear_topk_share: if nuclear_total > 0.0 { nuclear_top / nuclear_total } else { 0.0 },
        frobenius_topk_share: if frob_total > 0.0 { frob_top / frob_total } else { 0.0 },
        numeric_rank: report_rank(a),
    })
}

/// Count of singular values above `rel_tol · s_max`.
pub fn numeric_rank(a: &Representation, rel_tol: f64) -> usize {
    assert!(rel_tol > 0.0, "rel_tol must be > 0");
    let s = a.singular_values();
    if s.len() == 0 {
        return 0;
    }
    let cut = rel_tol * s[0];
    s.iter().filter(|&&x| x > cut).count()
}

fn report_rank(a: &Representation) -> usize {
    numeric_rank(a, DEFAULT_RANK_REL_TOL)
}

/// Principal angles and projection error of `A`'s column space against the
/// instance's task basis.
pub fn subspace_alignment(a: &Representation, instance: &SubspaceInstance) -> Result<SubspaceAlignment> {
    if a.d() != instance.d() {
        return Err(Error::DimensionMismatch(format!(
            "representation lives in R^{}, instance in R^{}",
            a.d(),
            instance.d()
        )));
    }
    let k = instance.k();
    let basis = instance.basis();
    let parts = a.svd();
    let rank = report_rank(a);

    // Angles against the top-min(rank, k) left singular directions.
    let m = rank.min(k);
    let mut angles: Vec<f64> = if m > 0 {
        let u_m = parts.u.columns(0, m);
        cosines(&(u_m.transpose() * basis))
            .into_iter()
            .map(|c| c.acos().to_degrees())
            .collect()
    } else {
        Vec::new()
    };
    angles.resize(k, 90.0);
    angles.sort_by(f64::total_cmp);
    let max_angle_deg = angles.last().copied().unwrap_or(90.0);

    // Projection error against the full column space:
    // ‖P_A B − B‖²_F = k − ‖U_rᵀ B‖²_F for orthonormal B.
    let projection_error = if rank > 0 {
        let u_r = parts.u.columns(0, rank);
        (k as f64 - (u_r.transpose() * basis).norm_squared()).clamp(0.0, k as f64)
    } else {
        k as f64
    };

    Ok(SubspaceAlignment {
        principal_angles_deg: angles,
        max_angle_deg,
        projection_error,
        rank_deficient: rank < k,
    })
}

/// Singular values of a small matrix, clamped into [0, 1], descending —
/// the principal-angle cosines of a product of orthonormal bases.
fn cosines(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.into_iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::task_model::make_instance;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn stream(tag: u64) -> RngStream {
        RngStream::new(0xD1A6).substream(tag)
    }

    fn random_rep(d: usize, dd: usize, tag: u64) -> Representation {
        let mut rng = stream(tag).rng();
        Representation::new(crate::task_model::gaussian_matrix(d, dd, &mut rng))
    }

    #[test]
    fn identity_has_flat_spectrum() {
        let a = Representation::identity(50);
        let rep = spectral_report(&a, 5).unwrap();
        assert_relative_eq!(rep.nuclear_topk_share, 0.1, max_relative = 1e-12);
        assert_relative_eq!(rep.frobenius_topk_share, 0.1, max_relative = 1e-12);
        assert_eq!(rep.numeric_rank, 50);
        assert_eq!(numeric_rank(&a, 1e-8), 50);
    }

    #[test]
    fn task_projector_is_perfectly_aligned() {
        let inst = make_instance(20, 4, 0.5, stream(1)).unwrap();
        let a = Representation::new(inst.projector());
        let rep = spectral_report(&a, 4).unwrap();
        assert_relative_eq!(rep.nuclear_topk_share, 1.0, max_relative = 1e-10);
        assert_eq!(rep.numeric_rank, 4);

        let al = subspace_alignment(&a, &inst).unwrap();
        assert!(!al.rank_deficient);
        assert!(al.max_angle_deg <= 1e-5, "angles {:?}", al.principal_angles_deg);
        assert!(al.projection_error <= 1e-10);
    }

    #[test]
    fn invalid_k_is_rejected() {
        let a = Representation::identity(10);
        assert!(spectral_report(&a, 0).is_err());
        assert!(spectral_report(&a, 11).is_err());
    }

    #[test]
    fn zero_matrix_diagnostics() {
        let inst = make_instance(8, 3, 0.0, stream(2)).unwrap();
        let a = Representation::new(DMatrix::zeros(8, 8));
        let rep = spectral_report(&a, 3).unwrap();
        assert_eq!(rep.numeric_rank, 0);
        assert_eq!(rep.nuclear_topk_share, 0.0);
        let al = subspace_alignment(&a, &inst).unwrap();
        assert!(al.rank_deficient);
        assert_eq!(al.principal_angles_deg, vec![90.0; 3]);
        assert_relative_eq!(al.projection_error, 3.0);
    }

    #[test]
    fn projection_error_matches_angle_identity() {
        // ‖P_A B − B‖²_F = Σ sin²θᵢ over the angles against the full column
        // space, for any representation with rank ≥ k.
        let inst = make_instance(12, 4, 0.5, stream(3)).unwrap();
        let a = random_rep(12, 9, 4);
        let al = subspace_alignment(&a, &inst).unwrap();
        let parts = a.svd();
        let u_r = parts.u.columns(0, a.rank());
        let sin2: f64 = cosines(&(u_r.transpose() * inst.basis()))
            .iter()
            .map(|c| 1.0 - c * c)
            .sum();
        assert!((al.projection_error - sin2).abs() <= 1e-8);
    }

    #[test]
    fn diagnostics_invariant_to_right_rotation_and_scale() {
        let inst = make_instance(10, 3, 0.5, stream(5)).unwrap();
        let a = random_rep(10, 7, 6);
        let q = {
            let g = crate::task_model::gaussian_matrix(7, 7, &mut stream(7).rng());
            g.qr().q()
        };
        let rotated = Representation::new(a.matrix() * q);
        let scaled = a.scaled(3.7);

        let (r0, r1) = (spectral_report(&a, 3).unwrap(), spectral_report(&rotated, 3).unwrap());
        assert_relative_eq!(r0.nuclear_topk_share, r1.nuclear_topk_share, max_relative = 1e-10);
        assert_relative_eq!(r0.frobenius_topk_share, r1.frobenius_topk_share, max_relative = 1e-10);
        assert_eq!(r0.numeric_rank, r1.numeric_rank);

        let (a0, a1) = (subspace_alignment(&a, &inst).unwrap(), subspace_alignment(&rotated, &inst).unwrap());
        assert!((a0.projection_error - a1.projection_error).abs() <= 1e-10);
        assert!((a0.max_angle_deg - a1.max_angle_deg).abs() <= 1e-8);

        let a2 = subspace_alignment(&scaled, &inst).unwrap();
        assert!((a0.projection_error - a2.projection_error).abs() <= 1e-10);
        let r2 = spectral_report(&scaled, 3).unwrap();
        assert_relative_eq!(r0.nuclear_topk_share, r2.nuclear_topk_share, max_relative = 1e-12);
    }

    #[test]
    fn orthogonal_column_space_is_fully_misaligned() {
        let inst = make_instance(9, 2, 0.0, stream(8)).unwrap();
        // Columns orthogonal to the basis: project a random matrix out.
        let mut g = crate::task_model::gaussian_matrix(9, 3, &mut stream(9).rng());
        g -= inst.basis() * (inst.basis().transpose() * &g);
        let a = Representation::new(g.qr().q());
        let al = subspace_alignment(&a, &inst).unwrap();
        assert!(al.principal_angles_deg.iter().all(|&t| t > 89.99), "{:?}", al.principal_angles_deg);
        assert_relative_eq!(al.projection_error, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn rank_deficient_flagged_and_padded() {
        let inst = make_instance(10, 4, 0.0, stream(10)).unwrap();
        // Representation spanning only the first two basis directions.
        let mut a = DMatrix::zeros(10, 2);
        a.set_column(0, &inst.basis().column(0));
        a.set_column(1, &inst.basis().column(1));
        let al = subspace_alignment(&Representation::new(a), &inst).unwrap();
        assert!(al.rank_deficient);
        assert_eq!(al.principal_angles_deg.len(), 4);
        assert!(al.principal_angles_deg[0] < 1e-5 && al.principal_angles_deg[1] < 1e-5);
        assert_eq!(al.principal_angles_deg[2], 90.0);
        assert_relative_eq!(al.projection_error, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn numeric_rank_respects_tolerance() {
        let s = DVector::from_vec(vec![1.0, 1e-3, 1e-9]);
        let a = Representation::new(DMatrix::from_diagonal(&s));
        assert_eq!(numeric_rank(&a, 1e-8), 2);
        assert_eq!(numeric_rank(&a, 1e-12), 3);
        assert_eq!(numeric_rank(&a, 1e-2), 1);
    }
}
