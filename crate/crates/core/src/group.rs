//! Arithmetic, sampling, metrics and projections for the three compact
//! matrix groups the estimators run over: Z2 (signs), U(1) ~ SO(2)
//! (angles) and O(m) (orthogonal matrices).
//!
//! Z2 and U1 use exact scalar arithmetic; the matrix embedding (1x1 signs,
//! 2x2 rotations) only appears at metric boundaries, i.e. when a Frobenius
//! norm or a raw average is needed. O(m) elements are validated on
//! construction and polar-projected back onto the group so long products
//! cannot drift off it.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

/// A not-necessarily-orthogonal m x m matrix, e.g. a pre-projection
/// estimator output or an unprojected Gaussian observation.
pub type RawMatrix = DMatrix<f64>;

/// Orthogonality tolerated on construction: anything with
/// `||QᵀQ - I||_F` beyond this is rejected outright.
pub const ORTH_CONSTRUCT_TOL: f64 = 1e-6;

/// Orthogonality of stored elements after re-projection.
pub const ORTH_INVARIANT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupVariant {
    Z2,
    U1,
    Orth(usize),
}

impl GroupVariant {
    /// Side of the matrix embedding.
    pub fn matrix_dim(&self) -> usize {
        match self {
            GroupVariant::Z2 => 1,
            GroupVariant::U1 => 2,
            GroupVariant::Orth(m) => *m,
        }
    }
}

impl std::fmt::Display for GroupVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupVariant::Z2 => write!(f, "z2"),
            GroupVariant::U1 => write!(f, "u1"),
            GroupVariant::Orth(m) => write!(f, "orth({m})"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GroupError {
    #[error("sign must be +1 or -1, got {0}")]
    BadSign(i8),
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not within {tol} of orthogonal (deviation {dev:.3e})")]
    NotOrthogonal { dev: f64, tol: f64 },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("variant mismatch: {left} vs {right}")]
    VariantMismatch { left: GroupVariant, right: GroupVariant },
}

#[derive(Clone, Debug)]
pub enum GroupElement {
    Z2(i8),
    U1(f64),
    Orth(DMatrix<f64>),
}

fn normalize_angle(a: f64) -> f64 {
    let mut r = a % TAU;
    if r < 0.0 {
        r += TAU;
    }
    // -1e-20 % TAU rounds to TAU itself; keep the representative in [0, TAU)
    if r >= TAU {
        r = 0.0;
    }
    r
}

/// `||AᵀA - I||_F`, the orthogonality defect.
pub fn orthogonality_defect(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let n = g.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = g[(i, j)] - if i == j { 1.0 } else { 0.0 };
            acc += d * d;
        }
    }
    acc.sqrt()
}

/// Polar projection `argmin_{Q in O(m)} ||Q - M||_F = U Vᵀ` from the SVD.
/// The boolean is true when the input was nearly singular, in which case
/// the SVD's basis choice is arbitrary but still a valid group element.
pub fn polar_project(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let svd = m.clone().svd(true, true);
    let degenerate = svd
        .singular_values
        .iter()
        .any(|&s| s.abs() < 1e-12);
    let q = svd.u.as_ref().unwrap() * svd.v_t.as_ref().unwrap();
    (q, degenerate)
}

impl GroupElement {
    pub fn z2(sign: i8) -> Result<Self, GroupError> {
        if sign == 1 || sign == -1 {
            Ok(GroupElement::Z2(sign))
        } else {
            Err(GroupError::BadSign(sign))
        }
    }

    pub fn u1(angle: f64) -> Self {
        GroupElement::U1(normalize_angle(angle))
    }

    /// Validate and store an orthogonal matrix, re-orthonormalizing small
    /// floating-point drift away.
    pub fn orth(m: DMatrix<f64>) -> Result<Self, GroupError> {
        if m.nrows() != m.ncols() {
            return Err(GroupError::NotSquare { rows: m.nrows(), cols: m.ncols() });
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(GroupError::NonFinite);
        }
        let dev = orthogonality_defect(&m);
        if dev > ORTH_CONSTRUCT_TOL {
            return Err(GroupError::NotOrthogonal { dev, tol: ORTH_CONSTRUCT_TOL });
        }
        let q = if dev > 1e-13 { polar_project(&m).0 } else { m };
        debug_assert!(orthogonality_defect(&q) <= ORTH_INVARIANT_TOL);
        Ok(GroupElement::Orth(q))
    }

    pub fn identity(variant: GroupVariant) -> Self {
        match variant {
            GroupVariant::Z2 => GroupElement::Z2(1),
            GroupVariant::U1 => GroupElement::U1(0.0),
            GroupVariant::Orth(m) => GroupElement::Orth(DMatrix::identity(m, m)),
        }
    }

    pub fn variant(&self) -> GroupVariant {
        match self {
            GroupElement::Z2(_) => GroupVariant::Z2,
            GroupElement::U1(_) => GroupVariant::U1,
            GroupElement::Orth(m) => GroupVariant::Orth(m.nrows()),
        }
    }

    pub fn sign(&self) -> Option<i8> {
        match self {
            GroupElement::Z2(s) => Some(*s),
            _ => None,
        }
    }

    pub fn angle(&self) -> Option<f64> {
        match self {
            GroupElement::U1(a) => Some(*a),
            _ => None,
        }
    }

    /// Matrix embedding: 1x1 sign, 2x2 rotation, or the matrix itself.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            GroupElement::Z2(s) => DMatrix::from_element(1, 1, *s as f64),
            GroupElement::U1(a) => {
                let (s, c) = a.sin_cos();
                DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
            }
            GroupElement::Orth(m) => m.clone(),
        }
    }

    pub fn inverse(&self) -> GroupElement {
        match self {
            GroupElement::Z2(s) => GroupElement::Z2(*s),
            GroupElement::U1(a) => GroupElement::u1(-a),
            GroupElement::Orth(m) => GroupElement::Orth(m.transpose()),
        }
    }

    /// Group product `self * other`.
    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement, GroupError> {
        match (self, other) {
            (GroupElement::Z2(a), GroupElement::Z2(b)) => Ok(GroupElement::Z2(a * b)),
            (GroupElement::U1(a), GroupElement::U1(b)) => Ok(GroupElement::u1(a + b)),
            (GroupElement::Orth(a), GroupElement::Orth(b)) if a.nrows() == b.nrows() => {
                let prod = a * b;
                // products of stored elements stay within construction
                // tolerance, so this cannot fail
                GroupElement::orth(prod)
            }
            _ => Err(GroupError::VariantMismatch {
                left: self.variant(),
                right: other.variant(),
            }),
        }
    }

    /// Approximate equality in the Frobenius embedding.
    pub fn approx_eq(&self, other: &GroupElement, tol: f64) -> bool {
        if self.variant() != other.variant() {
            return false;
        }
        match (self, other) {
            (GroupElement::Z2(a), GroupElement::Z2(b)) => a == b,
            _ => {
                let d = self.to_matrix() - other.to_matrix();
                d.iter().map(|x| x * x).sum::<f64>().sqrt() <= tol
            }
        }
    }
}

/// Haar-distributed sample: uniform sign, uniform angle, or the QR of an
/// iid Gaussian matrix with the R-diagonal sign correction.
pub fn haar_sample(variant: GroupVariant, rng: &mut impl Rng) -> GroupElement {
    match variant {
        GroupVariant::Z2 => GroupElement::Z2(if rng.gen::<bool>() { 1 } else { -1 }),
        GroupVariant::U1 => GroupElement::U1(rng.gen::<f64>() * TAU),
        GroupVariant::Orth(m) => {
            let g = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let qr = g.qr();
            let r = qr.r();
            let mut q = qr.q();
            for j in 0..m {
                if r[(j, j)] < 0.0 {
                    for i in 0..m {
                        q[(i, j)] = -q[(i, j)];
                    }
                }
            }
            GroupElement::orth(q).expect("QR factor is orthogonal")
        }
    }
}

/// Frobenius projection of a raw matrix onto the group. Z2 takes the sign
/// of the 1x1 entry (ties to +1); U1 takes the angle of the nearest
/// rotation; O(m) takes UVᵀ from the SVD.
pub fn project_to_group(m: &RawMatrix, variant: GroupVariant) -> Result<GroupElement, GroupError> {
    let (el, _) = project_to_group_flagged(m, variant)?;
    Ok(el)
}

/// Same as [`project_to_group`] but also reports whether the projection was
/// degenerate (zero scalar, zero rotation component, or a vanishing
/// singular value).
pub fn project_to_group_flagged(
    m: &RawMatrix,
    variant: GroupVariant,
) -> Result<(GroupElement, bool), GroupError> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(GroupError::NonFinite);
    }
    match variant {
        GroupVariant::Z2 => {
            if m.nrows() != 1 || m.ncols() != 1 {
                return Err(GroupError::NotSquare { rows: m.nrows(), cols: m.ncols() });
            }
            let x = m[(0, 0)];
            Ok((GroupElement::Z2(if x < 0.0 { -1 } else { 1 }), x == 0.0))
        }
        GroupVariant::U1 => {
            if m.nrows() != 2 || m.ncols() != 2 {
                return Err(GroupError::NotSquare { rows: m.nrows(), cols: m.ncols() });
            }
            // nearest rotation R(phi) in Frobenius norm maximizes
            // tr(R(phi)ᵀ M); phi = atan2(m10 - m01, m00 + m11)
            let y = m[(1, 0)] - m[(0, 1)];
            let x = m[(0, 0)] + m[(1, 1)];
            let degenerate = x == 0.0 && y == 0.0;
            let angle = if degenerate { 0.0 } else { y.atan2(x) };
            Ok((GroupElement::u1(angle), degenerate))
        }
        GroupVariant::Orth(dim) => {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(GroupError::NotSquare { rows: m.nrows(), cols: m.ncols() });
            }
            let (q, degenerate) = polar_project(m);
            Ok((GroupElement::orth(q)?, degenerate))
        }
    }
}

/// `||a t b⁻¹ - I||_F²`, the squared Frobenius misalignment of a raw or
/// projected estimate `t` for the group difference between `a` and `b`.
pub fn frobenius_misalignment(a: &GroupElement, t: &RawMatrix, b: &GroupElement) -> f64 {
    let prod = a.to_matrix() * t * b.inverse().to_matrix();
    let n = prod.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = prod[(i, j)] - if i == j { 1.0 } else { 0.0 };
            acc += d * d;
        }
    }
    acc
}

/// Misalignment with a group element in place of the raw matrix.
pub fn misalignment(a: &GroupElement, t: &GroupElement, b: &GroupElement) -> f64 {
    frobenius_misalignment(a, &t.to_matrix(), b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    #[test]
    fn z2_compose_and_invert() {
        let plus = GroupElement::z2(1).unwrap();
        let minus = GroupElement::z2(-1).unwrap();
        assert_eq!(plus.compose(&minus).unwrap().sign(), Some(-1));
        assert_eq!(minus.inverse().sign(), Some(-1));
        assert!(GroupElement::z2(0).is_err());
    }

    #[test]
    fn u1_compose_wraps() {
        let a = GroupElement::u1(FRAC_PI_2);
        let b = a.compose(&a).unwrap();
        assert_abs_diff_eq!(b.angle().unwrap(), PI, epsilon = 1e-15);
        let inv = GroupElement::u1(1.0).inverse();
        assert_abs_diff_eq!(inv.angle().unwrap(), TAU - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rotation_composition_is_exact() {
        let r = |a: f64| {
            let (s, c) = a.sin_cos();
            GroupElement::orth(DMatrix::from_row_slice(2, 2, &[c, -s, s, c])).unwrap()
        };
        let q = r(FRAC_PI_4).compose(&r(FRAC_PI_4)).unwrap();
        let expect = r(FRAC_PI_2).to_matrix();
        let got = q.to_matrix();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(got[(i, j)], expect[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn orth_construction_policy() {
        // small drift: re-orthonormalized
        let mut m = DMatrix::identity(3, 3);
        m[(0, 1)] = 3e-7;
        let q = GroupElement::orth(m).unwrap();
        assert!(orthogonality_defect(&q.to_matrix()) < ORTH_INVARIANT_TOL);
        // large drift: rejected
        let mut bad = DMatrix::identity(3, 3);
        bad[(0, 1)] = 0.1;
        assert!(GroupElement::orth(bad).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut r = rng::stream(9, 0x77, 0);
        for variant in [GroupVariant::Z2, GroupVariant::U1, GroupVariant::Orth(3)] {
            for _ in 0..20 {
                let g = haar_sample(variant, &mut r);
                let e = g.compose(&g.inverse()).unwrap();
                assert!(
                    e.approx_eq(&GroupElement::identity(variant), 1e-10),
                    "inverse failed for {variant}"
                );
            }
        }
    }

    #[test]
    fn compose_is_associative_within_tolerance() {
        let mut r = rng::stream(10, 0x77, 1);
        for variant in [GroupVariant::U1, GroupVariant::Orth(3)] {
            for _ in 0..20 {
                let (a, b, c) = (
                    haar_sample(variant, &mut r),
                    haar_sample(variant, &mut r),
                    haar_sample(variant, &mut r),
                );
                let left = a.compose(&b).unwrap().compose(&c).unwrap();
                let right = a.compose(&b.compose(&c).unwrap()).unwrap();
                assert!(left.approx_eq(&right, 1e-10));
            }
        }
    }

    #[test]
    fn haar_means_vanish() {
        // CLT bounds frozen at ~5 sigma for the fixed seeds below
        let mut r = rng::stream(123, 0x77, 2);
        let mut acc = 0.0;
        for _ in 0..1_000_000 {
            acc += haar_sample(GroupVariant::Z2, &mut r).sign().unwrap() as f64;
        }
        assert!((acc / 1e6).abs() < 0.005, "Z2 mean {}", acc / 1e6);

        let (mut re, mut im) = (0.0, 0.0);
        for _ in 0..1_000_000 {
            let a = haar_sample(GroupVariant::U1, &mut r).angle().unwrap();
            re += a.cos();
            im += a.sin();
        }
        let modulus = ((re / 1e6).powi(2) + (im / 1e6).powi(2)).sqrt();
        assert!(modulus < 0.005, "U1 mean modulus {modulus}");

        let mut sum = DMatrix::zeros(3, 3);
        for _ in 0..10_000 {
            sum += haar_sample(GroupVariant::Orth(3), &mut r).to_matrix();
        }
        sum /= 10_000.0;
        assert!(sum.iter().all(|x| x.abs() < 0.05), "O(3) mean {sum}");
    }

    #[test]
    fn projection_examples() {
        // 2I -> I
        let m = DMatrix::identity(3, 3) * 2.0;
        let p = project_to_group(&m, GroupVariant::Orth(3)).unwrap();
        assert!(p.approx_eq(&GroupElement::identity(GroupVariant::Orth(3)), 1e-12));
        // diag(3,1) -> I
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let p = project_to_group(&m, GroupVariant::Orth(2)).unwrap();
        assert!(p.approx_eq(&GroupElement::identity(GroupVariant::Orth(2)), 1e-12));
        // [[0,-2],[2,0]] -> rotation by pi/2, via both the U1 and O(2) routes
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -2.0, 2.0, 0.0]);
        let p = project_to_group(&m, GroupVariant::U1).unwrap();
        assert_abs_diff_eq!(p.angle().unwrap(), FRAC_PI_2, epsilon = 1e-12);
        let q = project_to_group(&m, GroupVariant::Orth(2)).unwrap().to_matrix();
        let r = GroupElement::u1(FRAC_PI_2).to_matrix();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(q[(i, j)], r[(i, j)], epsilon = 1e-12);
            }
        }
        // Z2 tie-break at zero
        let z = DMatrix::from_element(1, 1, 0.0);
        let (el, degenerate) = project_to_group_flagged(&z, GroupVariant::Z2).unwrap();
        assert_eq!(el.sign(), Some(1));
        assert!(degenerate);
    }

    #[test]
    fn projection_is_idempotent() {
        let mut r = rng::stream(77, 0x77, 3);
        for variant in [GroupVariant::Z2, GroupVariant::U1, GroupVariant::Orth(4)] {
            for _ in 0..10 {
                let g = haar_sample(variant, &mut r);
                let back = project_to_group(&g.to_matrix(), variant).unwrap();
                assert!(back.approx_eq(&g, 1e-10), "idempotence failed for {variant}");
            }
        }
    }

    #[test]
    fn projection_minimizes_frobenius_distance() {
        // exhaustive search over a fine rotation/reflection grid
        let mut r = rng::stream(4, 0x77, 4);
        let frob = |m: &DMatrix<f64>| m.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..100 {
            let m = DMatrix::from_fn(2, 2, |_, _| r.sample::<f64, _>(StandardNormal));
            let best = project_to_group(&m, GroupVariant::Orth(2)).unwrap().to_matrix();
            let best_dist = frob(&(&best - &m));
            let step = 1e-3;
            let mut grid_best = f64::INFINITY;
            let mut a = 0.0;
            while a < TAU {
                let (s, c) = a.sin_cos();
                let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
                let refl = DMatrix::from_row_slice(2, 2, &[c, s, s, -c]);
                grid_best = grid_best.min(frob(&(&rot - &m))).min(frob(&(&refl - &m)));
                a += step;
            }
            // the grid can undercut the optimum by at most O(step)
            assert!(
                best_dist <= grid_best + 2.0 * step,
                "projection not optimal: {best_dist} vs grid {grid_best}"
            );
        }
    }

    #[test]
    fn misalignment_examples() {
        let id3 = GroupElement::identity(GroupVariant::Orth(3));
        assert_abs_diff_eq!(
            misalignment(&id3, &id3, &id3),
            0.0,
            epsilon = 1e-15
        );
        let plus = GroupElement::z2(1).unwrap();
        let minus = GroupElement::z2(-1).unwrap();
        assert_abs_diff_eq!(misalignment(&plus, &minus, &plus), 4.0, epsilon = 1e-15);
        // U1 embedded: ||R(pi) - I||_F^2 = 8
        let zero = GroupElement::u1(0.0);
        let half = GroupElement::u1(PI);
        assert_abs_diff_eq!(misalignment(&zero, &half, &zero), 8.0, epsilon = 1e-12);
    }

    #[test]
    fn misalignment_is_rotation_invariant() {
        // absorbing orthogonal factors into a and b leaves the metric alone
        let mut r = rng::stream(5, 0x77, 5);
        for _ in 0..10 {
            let t = DMatrix::from_fn(3, 3, |_, _| r.sample::<f64, _>(StandardNormal));
            let a = haar_sample(GroupVariant::Orth(3), &mut r);
            let b = haar_sample(GroupVariant::Orth(3), &mut r);
            let g = haar_sample(GroupVariant::Orth(3), &mut r);
            let direct = frobenius_misalignment(&a, &t, &b);
            // move g from t into a
            let shifted = frobenius_misalignment(
                &a.compose(&g).unwrap(),
                &(g.inverse().to_matrix() * &t),
                &b,
            );
            assert_abs_diff_eq!(direct, shifted, epsilon = 1e-9);
        }
    }
}
