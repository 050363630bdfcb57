//! Path-product estimators for grid synchronization in d >= 3.
//!
//! The diagonal estimator averages edge-observation products over random
//! reflected monotone paths from a base vertex to the diagonal corner
//! `base + n*(e_a + e_b + e_c)` and rescales by `lambda^{-3n}`:
//!
//! ```text
//! T = lambda^{-3n} * (1/K) * sum_k  Y_{I_1(g_k)} Y_{I_2(g_k)} ... Y_{I_3n(g_k)}
//! ```
//!
//! Averaging happens in the raw (scalar / complex / matrix) domain and
//! only the final estimate is projected back onto the group. The axis
//! estimator composes two diagonal legs through a midpoint, and the pair
//! estimator chains per-axis legs along a staircase, so any two vertices
//! far apart in any direction get an estimate of their group difference.

use crate::channel::Instance;
use crate::group::{
    misalignment, polar_project, project_to_group_flagged, GroupElement, GroupVariant, RawMatrix,
};
use crate::paths::{resolve_moves, PathError, PathMeasureKind, PathSample};
use crate::rng::{self, tag};
use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

/// O(m) path products are polar-projected back onto the group after this
/// many factors to stop floating-point drift; products reach thousands of
/// factors in the long-path experiments.
pub const REORTHO_EVERY: usize = 32;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("lambda must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("n must be even for the reflected diagonal estimator, got {0}")]
    OddN(usize),
    #[error("need at least one path")]
    NoPaths,
    #[error("estimator needs d >= 3, grid has {0} axes")]
    NeedThreeAxes(usize),
    #[error("grid too small: {need} cells needed on axis {axis}, extent is {extent}")]
    GridTooSmall { axis: usize, need: usize, extent: usize },
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("instance holds {got} observations, not the {want} the grid has")]
    ObservationMismatch { got: usize, want: usize },
}

/// Pre-projection average of path products. Z2 stays scalar, U1 stays a
/// unit-circle accumulation, O(m) is a dense matrix.
#[derive(Clone, Debug)]
pub enum RawEstimate {
    Scalar(f64),
    Complex { re: f64, im: f64 },
    Matrix(DMatrix<f64>),
}

impl RawEstimate {
    fn zero(variant: GroupVariant) -> Self {
        match variant {
            GroupVariant::Z2 => RawEstimate::Scalar(0.0),
            GroupVariant::U1 => RawEstimate::Complex { re: 0.0, im: 0.0 },
            GroupVariant::Orth(m) => RawEstimate::Matrix(DMatrix::zeros(m, m)),
        }
    }

    fn add_element(&mut self, g: &GroupElement) {
        match (self, g) {
            (RawEstimate::Scalar(acc), GroupElement::Z2(s)) => *acc += *s as f64,
            (RawEstimate::Complex { re, im }, GroupElement::U1(a)) => {
                *re += a.cos();
                *im += a.sin();
            }
            (RawEstimate::Matrix(acc), GroupElement::Orth(m)) => *acc += m,
            _ => unreachable!("accumulator variant fixed by the instance"),
        }
    }

    fn scale(&mut self, c: f64) {
        match self {
            RawEstimate::Scalar(x) => *x *= c,
            RawEstimate::Complex { re, im } => {
                *re *= c;
                *im *= c;
            }
            RawEstimate::Matrix(m) => *m *= c,
        }
    }

    /// Raw product with another estimate (matrix product in the embedding).
    pub fn multiply(&self, other: &RawEstimate) -> RawEstimate {
        match (self, other) {
            (RawEstimate::Scalar(a), RawEstimate::Scalar(b)) => RawEstimate::Scalar(a * b),
            (RawEstimate::Complex { re: a, im: b }, RawEstimate::Complex { re: c, im: d }) => {
                RawEstimate::Complex { re: a * c - b * d, im: a * d + b * c }
            }
            (RawEstimate::Matrix(a), RawEstimate::Matrix(b)) => RawEstimate::Matrix(a * b),
            _ => unreachable!("mixed-variant estimates never meet"),
        }
    }

    /// Matrix embedding of the raw value.
    pub fn to_matrix(&self) -> RawMatrix {
        match self {
            RawEstimate::Scalar(x) => DMatrix::from_element(1, 1, *x),
            RawEstimate::Complex { re, im } => {
                DMatrix::from_row_slice(2, 2, &[*re, -*im, *im, *re])
            }
            RawEstimate::Matrix(m) => m.clone(),
        }
    }

    /// Frobenius projection onto the group, with a degeneracy flag.
    pub fn project(&self, variant: GroupVariant) -> (GroupElement, bool) {
        match self {
            RawEstimate::Complex { re, im } => {
                let degenerate = *re == 0.0 && *im == 0.0;
                let angle = if degenerate { 0.0 } else { im.atan2(*re) };
                (GroupElement::u1(angle), degenerate)
            }
            _ => project_to_group_flagged(&self.to_matrix(), variant)
                .expect("embedding dimensions are consistent"),
        }
    }
}

/// `1 + ||X1 X2 - I||_F <= (1 + ||X1 - I||_F)(1 + ||X2 - I||_F)`, checked
/// on every composition. Returns `(lhs, rhs)`.
pub fn product_frobenius_check(x1: &RawMatrix, x2: &RawMatrix) -> (f64, f64) {
    let dist = |m: &RawMatrix| {
        let mut acc = 0.0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let d = m[(i, j)] - if i == j { 1.0 } else { 0.0 };
                acc += d * d;
            }
        }
        acc.sqrt()
    };
    let lhs = 1.0 + dist(&(x1 * x2));
    let rhs = (1.0 + dist(x1)) * (1.0 + dist(x2));
    (lhs, rhs)
}

/// Result of one estimator evaluation.
#[derive(Clone, Debug)]
pub struct EstimatorReport {
    /// Pre-projection average (scaled by the lambda powers).
    pub raw: RawEstimate,
    /// The raw estimate projected onto the group.
    pub projected: GroupElement,
    /// True when a projection hit a (near-)singular matrix.
    pub degenerate_projection: bool,
    pub n_paths: usize,
    pub lambda_used: f64,
    /// `||theta_x T theta_y^{-1} - I||_F^2` of the raw estimate.
    pub misalignment: Option<f64>,
    /// Same metric for the projected estimate.
    pub projected_misalignment: Option<f64>,
    /// Endpoints the estimate connects.
    pub from: Vec<usize>,
    pub to: Vec<usize>,
}

impl EstimatorReport {
    /// Whether the projected estimate equals the true group difference.
    pub fn exact_success(&self, inst: &Instance, tol: f64) -> Option<bool> {
        let x = inst.graph.checked_vertex_index(&self.from).ok()?;
        let y = inst.graph.checked_vertex_index(&self.to).ok()?;
        let truth = inst
            .truth_element(x)
            .inverse()
            .compose(&inst.truth_element(y))
            .ok()?;
        Some(self.projected.approx_eq(&truth, tol))
    }
}

/// Ordered product of the observations along a path, inverting
/// observations traversed against their orientation. Raw (unprojected)
/// O(m) observations are projected onto the group edge by edge first.
pub fn path_product(inst: &Instance, path: &PathSample) -> Result<GroupElement, EstimatorError> {
    let n_edges = inst.graph.edge_count();
    if inst.observations.len() != n_edges {
        return Err(EstimatorError::ObservationMismatch {
            got: inst.observations.len(),
            want: n_edges,
        });
    }
    match inst.variant() {
        GroupVariant::Z2 => {
            let crate::channel::ElementArray::Signs(obs) = &inst.observations else {
                unreachable!()
            };
            let mut acc = 1i8;
            for s in &path.steps {
                acc *= obs[s.edge];
            }
            Ok(GroupElement::Z2(acc))
        }
        GroupVariant::U1 => {
            let crate::channel::ElementArray::Angles(obs) = &inst.observations else {
                unreachable!()
            };
            let mut acc = 0.0f64;
            for s in &path.steps {
                acc += if s.forward { obs[s.edge] } else { -obs[s.edge] };
            }
            Ok(GroupElement::u1(acc))
        }
        GroupVariant::Orth(m) => {
            let mut acc = DMatrix::identity(m, m);
            for (i, s) in path.steps.iter().enumerate() {
                let y = inst.observation_element(s.edge).to_matrix();
                acc = if s.forward { acc * y } else { acc * y.transpose() };
                if (i + 1) % REORTHO_EVERY == 0 {
                    acc = polar_project(&acc).0;
                }
            }
            Ok(GroupElement::orth(polar_project(&acc).0)
                .expect("polar projection lands on the group"))
        }
    }
}

/// Options shared by the estimators.
#[derive(Clone, Copy, Debug)]
pub struct EstimatorOptions {
    pub n_paths: usize,
    pub measure: PathMeasureKind,
    /// The channel's unbiasedness coefficient (exact for Z2, calibrated
    /// for O(m)); plug-in estimation from data is out of scope.
    pub lambda: f64,
}

impl EstimatorOptions {
    pub fn new(n_paths: usize, measure: PathMeasureKind, lambda: f64) -> Self {
        Self { n_paths, measure, lambda }
    }

    fn validate(&self) -> Result<(), EstimatorError> {
        if self.lambda <= 0.0 {
            return Err(EstimatorError::NonPositiveLambda(self.lambda));
        }
        if self.n_paths == 0 {
            return Err(EstimatorError::NoPaths);
        }
        Ok(())
    }
}

fn check_room(
    inst: &Instance,
    base: &[usize],
    axes: &[(usize, i8)],
    amount: usize,
) -> Result<(), EstimatorError> {
    for &(axis, dir) in axes {
        let extent = inst.graph.extents()[axis];
        let ok = if dir >= 0 {
            base[axis] + amount < extent
        } else {
            base[axis] >= amount
        };
        if !ok {
            return Err(EstimatorError::GridTooSmall { axis, need: amount + 1, extent });
        }
    }
    Ok(())
}

/// Move word for one reflected diagonal path of side `k` (k even) over
/// three oriented axes.
fn reflected_diagonal_moves(
    kind: PathMeasureKind,
    k: usize,
    axes: &[(usize, i8); 3],
    rng: &mut impl Rng,
) -> Vec<(usize, i8)> {
    crate::paths::sample_reflected_word(kind, k, rng)
        .into_iter()
        .map(|slot| axes[slot])
        .collect()
}

/// Diagonal estimate between `base` and `base + k*(a, b, c)` for an
/// oriented axis triple; `k` may be odd, in which case the reflected part
/// runs to the even corner `k-1` and the three single-edge observations
/// of the last diagonal step are appended.
fn estimate_diagonal_general(
    inst: &Instance,
    base: &[usize],
    k: usize,
    axes: &[(usize, i8); 3],
    opts: &EstimatorOptions,
    rng: &mut impl Rng,
) -> Result<EstimatorReport, EstimatorError> {
    opts.validate()?;
    check_room(inst, base, axes, k)?;
    let variant = inst.variant();
    let k_even = k - (k % 2);

    // deterministic hook covering the last diagonal step for odd k
    let hook: Vec<(usize, i8)> = if k_even < k { axes.to_vec() } else { Vec::new() };

    let mut acc = RawEstimate::zero(variant);
    for _ in 0..opts.n_paths {
        let mut moves = if k_even > 0 {
            reflected_diagonal_moves(opts.measure, k_even, axes, rng)
        } else {
            Vec::new()
        };
        moves.extend_from_slice(&hook);
        let path = resolve_moves(&inst.graph, base, &moves)?;
        let prod = path_product(inst, &path)?;
        acc.add_element(&prod);
    }
    acc.scale(1.0 / (opts.n_paths as f64 * opts.lambda.powi(3 * k as i32)));

    finish_report(inst, base, k, axes, opts, acc)
}

fn finish_report(
    inst: &Instance,
    base: &[usize],
    k: usize,
    axes: &[(usize, i8); 3],
    opts: &EstimatorOptions,
    raw: RawEstimate,
) -> Result<EstimatorReport, EstimatorError> {
    let mut end = base.to_vec();
    for &(axis, dir) in axes {
        end[axis] = (end[axis] as i64 + dir as i64 * k as i64) as usize;
    }
    let (projected, degenerate_projection) = raw.project(inst.variant());
    let (mis, pmis) = alignment_metrics(inst, base, &end, &raw, &projected);
    Ok(EstimatorReport {
        raw,
        projected,
        degenerate_projection,
        n_paths: opts.n_paths,
        lambda_used: opts.lambda,
        misalignment: mis,
        projected_misalignment: pmis,
        from: base.to_vec(),
        to: end,
    })
}

fn alignment_metrics(
    inst: &Instance,
    from: &[usize],
    to: &[usize],
    raw: &RawEstimate,
    projected: &GroupElement,
) -> (Option<f64>, Option<f64>) {
    let x = inst.graph.vertex_index(from);
    let y = inst.graph.vertex_index(to);
    let a = inst.truth_element(x);
    let b = inst.truth_element(y);
    let raw_mis = crate::group::frobenius_misalignment(&a, &raw.to_matrix(), &b);
    let proj_mis = misalignment(&a, projected, &b);
    (Some(raw_mis), Some(proj_mis))
}

/// The diagonal estimator: `base` to `base + n*(e_1 + e_2 + e_3)` with
/// positive orientation on the first three axes. Requires even `n`.
pub fn estimate_diagonal(
    inst: &Instance,
    base: &[usize],
    n: usize,
    opts: &EstimatorOptions,
    rng: &mut impl Rng,
) -> Result<EstimatorReport, EstimatorError> {
    if inst.graph.dims() < 3 {
        return Err(EstimatorError::NeedThreeAxes(inst.graph.dims()));
    }
    if n % 2 != 0 {
        return Err(EstimatorError::OddN(n));
    }
    let axes = [(0usize, 1i8), (1, 1), (2, 1)];
    estimate_diagonal_general(inst, base, n, &axes, opts, rng)
}

/// Pick two helper axes for a 3D slice through `axis`, with directions
/// chosen toward the grid interior so the midpoint excursion of size
/// `half` stays in bounds.
fn helper_axes(
    inst: &Instance,
    base: &[usize],
    axis: usize,
    half: usize,
) -> Result<[(usize, i8); 2], EstimatorError> {
    let d = inst.graph.dims();
    let mut picked = Vec::with_capacity(2);
    for a in 0..d {
        if a == axis || picked.len() == 2 {
            continue;
        }
        let extent = inst.graph.extents()[a];
        let dir = if base[a] + half < extent {
            1i8
        } else if base[a] >= half {
            -1i8
        } else {
            return Err(EstimatorError::GridTooSmall { axis: a, need: half + 1, extent });
        };
        picked.push((a, dir));
    }
    if picked.len() < 2 {
        return Err(EstimatorError::NeedThreeAxes(d));
    }
    Ok([picked[0], picked[1]])
}

/// The axis estimator: `base` to `base + n * dir * e_axis` composed out of
/// two diagonal legs through the midpoint `base + (n/2)(dir*e_axis + s_a
/// e_a + s_b e_b)`, all paths inside the 3D slice spanned by `axis` and
/// two helper axes. `n` must be even.
pub fn estimate_axis(
    inst: &Instance,
    base: &[usize],
    axis: usize,
    dir: i8,
    n: usize,
    opts: &EstimatorOptions,
    rng: &mut impl Rng,
) -> Result<EstimatorReport, EstimatorError> {
    opts.validate()?;
    if inst.graph.dims() < 3 {
        return Err(EstimatorError::NeedThreeAxes(inst.graph.dims()));
    }
    if n % 2 != 0 {
        return Err(EstimatorError::OddN(n));
    }
    if n == 0 {
        let raw = identity_raw(inst.variant());
        return finish_report(inst, base, 0, &[(axis, dir), (axis, dir), (axis, dir)], opts, raw);
    }
    let half = n / 2;
    check_room(inst, base, &[(axis, dir)], n)?;
    let helpers = helper_axes(inst, base, axis, half)?;

    // leg 1: base -> mid along (axis, +helpers)
    let axes1 = [(axis, dir), helpers[0], helpers[1]];
    let leg1 = estimate_diagonal_general(inst, base, half, &axes1, opts, rng)?;
    // leg 2: mid -> target along (axis, -helpers)
    let mid = leg1.to.clone();
    let axes2 = [(axis, dir), (helpers[0].0, -helpers[0].1), (helpers[1].0, -helpers[1].1)];
    let leg2 = estimate_diagonal_general(inst, &mid, half, &axes2, opts, rng)?;

    // the product inequality holds for any matrices; a violation would
    // mean the arithmetic itself is broken
    let (lhs, rhs) = product_frobenius_check(&leg1.raw.to_matrix(), &leg2.raw.to_matrix());
    assert!(
        lhs <= rhs * (1.0 + 1e-9),
        "product Frobenius inequality violated: {lhs} > {rhs}"
    );

    let raw = leg1.raw.multiply(&leg2.raw);
    let mut end = base.to_vec();
    end[axis] = (end[axis] as i64 + dir as i64 * n as i64) as usize;
    let (projected, degenerate_projection) = raw.project(inst.variant());
    let (mis, pmis) = alignment_metrics(inst, base, &end, &raw, &projected);
    Ok(EstimatorReport {
        raw,
        projected,
        degenerate_projection,
        n_paths: opts.n_paths,
        lambda_used: opts.lambda,
        misalignment: mis,
        projected_misalignment: pmis,
        from: base.to_vec(),
        to: end,
    })
}

fn identity_raw(variant: GroupVariant) -> RawEstimate {
    match variant {
        GroupVariant::Z2 => RawEstimate::Scalar(1.0),
        GroupVariant::U1 => RawEstimate::Complex { re: 1.0, im: 0.0 },
        GroupVariant::Orth(m) => RawEstimate::Matrix(DMatrix::identity(m, m)),
    }
}

/// The pair estimator: chains per-axis estimates along the staircase
/// `w(j) = (y_1, ..., y_j, x_{j+1}, ..., x_d)`. Even per-axis
/// displacements use the axis estimator; the odd remainder contributes
/// its single-edge observation directly.
pub fn estimate_pair(
    inst: &Instance,
    x: &[usize],
    y: &[usize],
    opts: &EstimatorOptions,
    rng: &mut impl Rng,
) -> Result<EstimatorReport, EstimatorError> {
    opts.validate()?;
    let d = inst.graph.dims();
    if d < 3 {
        return Err(EstimatorError::NeedThreeAxes(d));
    }
    let variant = inst.variant();
    let mut raw = identity_raw(variant);
    let mut projected = GroupElement::identity(variant);
    let mut current = x.to_vec();
    let mut any_degenerate = false;

    for axis in 0..d {
        let delta = y[axis] as i64 - current[axis] as i64;
        if delta == 0 {
            continue;
        }
        let dir: i8 = if delta > 0 { 1 } else { -1 };
        let amount = delta.unsigned_abs() as usize;
        let even = amount - (amount % 2);

        if even > 0 {
            let leg = estimate_axis(inst, &current, axis, dir, even, opts, rng)?;
            let (lhs, rhs) = product_frobenius_check(&raw.to_matrix(), &leg.raw.to_matrix());
            assert!(lhs <= rhs * (1.0 + 1e-9), "product Frobenius inequality violated");
            raw = raw.multiply(&leg.raw);
            projected = projected
                .compose(&leg.projected)
                .expect("legs share the instance variant");
            any_degenerate |= leg.degenerate_projection;
            current = leg.to;
        }
        if amount % 2 == 1 {
            // single-edge remainder, rescaled by 1/lambda
            let path = resolve_moves(&inst.graph, &current, &[(axis, dir)])?;
            let obs = path_product(inst, &path)?;
            let mut single = RawEstimate::zero(variant);
            single.add_element(&obs);
            single.scale(1.0 / opts.lambda);
            raw = raw.multiply(&single);
            projected = projected.compose(&obs).expect("same variant");
            current = path.end;
        }
    }
    debug_assert_eq!(current, y);

    let (_, degenerate) = raw.project(variant);
    let (mis, pmis) = alignment_metrics(inst, x, y, &raw, &projected);
    Ok(EstimatorReport {
        raw,
        projected,
        degenerate_projection: any_degenerate || degenerate,
        n_paths: opts.n_paths,
        lambda_used: opts.lambda,
        misalignment: mis,
        projected_misalignment: pmis,
        from: x.to_vec(),
        to: y.to_vec(),
    })
}

/// One single-path diagonal estimate contracted to its (0,0) entry after
/// truth alignment: `[theta_base (lambda^{-3n} Y_gamma) theta_end^{-1}]_{00}`.
/// Building block of the variance-identity checks.
pub fn single_path_aligned_scalar(
    inst: &Instance,
    base: &[usize],
    n: usize,
    measure: PathMeasureKind,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<f64, EstimatorError> {
    let axes = [(0usize, 1i8), (1, 1), (2, 1)];
    let moves = reflected_diagonal_moves(measure, n, &axes, rng);
    let path = resolve_moves(&inst.graph, base, &moves)?;
    let prod = path_product(inst, &path)?;
    let x = inst.graph.vertex_index(base);
    let y = inst.graph.vertex_index(&path.end);
    let aligned = inst.truth_element(x).to_matrix()
        * prod.to_matrix()
        * inst.truth_element(y).inverse().to_matrix();
    Ok(aligned[(0, 0)] / lambda.powi(3 * n as i32))
}

/// Deterministic per-repetition estimator stream.
pub fn estimator_stream(seed: u64, rep: u64) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, tag::PATH, rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_instance, ChannelSpec, TruthMode};
    use crate::grid::{Boundary, GridGraph};
    use crate::stats::RunningMoments;

    fn grid3(l: usize) -> GridGraph {
        GridGraph::build(&[l, l, l], Boundary::Free).unwrap()
    }

    fn noiseless_z2(l: usize, seed: u64) -> Instance {
        generate_instance(&grid3(l), ChannelSpec::Z2Flip { p: 0.0 }, TruthMode::HaarRandom, seed)
            .unwrap()
    }

    #[test]
    fn empty_path_gives_identity() {
        let inst = noiseless_z2(3, 1);
        let path = resolve_moves(&inst.graph, &[0, 0, 0], &[]).unwrap();
        assert_eq!(path_product(&inst, &path).unwrap().sign(), Some(1));
    }

    #[test]
    fn noiseless_product_telescopes_to_truth_difference() {
        let inst = noiseless_z2(5, 2);
        let mut r = rng::stream(2, 0xcd, 0);
        let m = crate::paths::PathMeasure {
            kind: PathMeasureKind::UniformMonotone,
            target: vec![3, 2, 4],
        };
        for _ in 0..20 {
            let p = crate::paths::sample_increasing_path(&inst.graph, &[1, 0, 0], &m, &mut r)
                .unwrap();
            let prod = path_product(&inst, &p).unwrap();
            let x = inst.graph.vertex_index(&p.start);
            let y = inst.graph.vertex_index(&p.end);
            let expect =
                inst.truth_element(x).sign().unwrap() * inst.truth_element(y).sign().unwrap();
            assert_eq!(prod.sign(), Some(expect));
        }
    }

    #[test]
    fn noiseless_orth_product_telescopes() {
        let g = grid3(4);
        let inst = generate_instance(
            &g,
            ChannelSpec::OrthGaussian { m: 3, sigma: 0.0, project: true },
            TruthMode::HaarRandom,
            3,
        )
        .unwrap();
        let mut r = rng::stream(3, 0xcd, 1);
        let m = crate::paths::PathMeasure {
            kind: PathMeasureKind::UniformMonotone,
            target: vec![2, 3, 1],
        };
        let p = crate::paths::sample_increasing_path(&g, &[0, 0, 2], &m, &mut r).unwrap();
        let prod = path_product(&inst, &p).unwrap();
        let x = g.vertex_index(&p.start);
        let y = g.vertex_index(&p.end);
        let expect = inst.truth_element(x).inverse().compose(&inst.truth_element(y)).unwrap();
        assert!(prod.approx_eq(&expect, 1e-8));
    }

    #[test]
    fn long_orth_products_stay_orthogonal() {
        // products far longer than the re-orthonormalization window
        let g = GridGraph::build(&[3, 3, 3], Boundary::Torus).unwrap();
        let inst = generate_instance(
            &g,
            ChannelSpec::OrthGaussian { m: 3, sigma: 0.5, project: true },
            TruthMode::HaarRandom,
            4,
        )
        .unwrap();
        // wind around the torus 200 times along axis 0
        let moves: Vec<(usize, i8)> = std::iter::repeat((0usize, 1i8)).take(600).collect();
        let path = resolve_moves(&g, &[0, 0, 0], &moves).unwrap();
        let prod = path_product(&inst, &path).unwrap();
        assert!(
            crate::group::orthogonality_defect(&prod.to_matrix()) < 1e-10,
            "drift survived re-orthonormalization"
        );
    }

    #[test]
    fn noiseless_diagonal_estimate_is_exact_even_with_one_path() {
        let inst = noiseless_z2(9, 5);
        let opts = EstimatorOptions::new(1, PathMeasureKind::UniformMonotone, 1.0);
        let mut r = rng::stream(5, 0xcd, 2);
        let rep = estimate_diagonal(&inst, &[0, 0, 0], 8, &opts, &mut r).unwrap();
        assert_eq!(rep.misalignment, Some(0.0));
        assert_eq!(rep.exact_success(&inst, 1e-9), Some(true));
    }

    #[test]
    fn diagonal_estimator_rejects_bad_arguments() {
        let inst = noiseless_z2(5, 6);
        let opts = EstimatorOptions::new(4, PathMeasureKind::UniformMonotone, 1.0);
        let mut r = rng::stream(6, 0xcd, 3);
        assert!(matches!(
            estimate_diagonal(&inst, &[0, 0, 0], 3, &opts, &mut r),
            Err(EstimatorError::OddN(3))
        ));
        assert!(matches!(
            estimate_diagonal(&inst, &[0, 0, 0], 6, &opts, &mut r),
            Err(EstimatorError::GridTooSmall { .. })
        ));
        let bad = EstimatorOptions::new(4, PathMeasureKind::UniformMonotone, 0.0);
        assert!(matches!(
            estimate_diagonal(&inst, &[0, 0, 0], 2, &bad, &mut r),
            Err(EstimatorError::NonPositiveLambda(_))
        ));
        let g2 = GridGraph::build(&[5, 5], Boundary::Free).unwrap();
        let inst2 =
            generate_instance(&g2, ChannelSpec::Z2Flip { p: 0.0 }, TruthMode::HaarRandom, 1)
                .unwrap();
        assert!(matches!(
            estimate_diagonal(&inst2, &[0, 0], 2, &opts, &mut r),
            Err(EstimatorError::NeedThreeAxes(2))
        ));
    }

    #[test]
    fn noiseless_axis_and_pair_estimates_are_exact() {
        let inst = noiseless_z2(11, 7);
        let opts = EstimatorOptions::new(2, PathMeasureKind::UniformMonotone, 1.0);
        let mut r = rng::stream(7, 0xcd, 4);
        let rep = estimate_axis(&inst, &[0, 0, 0], 0, 1, 8, &opts, &mut r).unwrap();
        assert_eq!(rep.exact_success(&inst, 1e-9), Some(true));
        // n = 6 -> odd legs of 3 via even part 2 plus the diagonal hook
        let rep = estimate_axis(&inst, &[0, 0, 0], 1, 1, 6, &opts, &mut r).unwrap();
        assert_eq!(rep.exact_success(&inst, 1e-9), Some(true));
        // staircase with mixed signs and odd remainders
        let rep = estimate_pair(&inst, &[9, 2, 5], &[2, 9, 4], &opts, &mut r).unwrap();
        assert_eq!(rep.exact_success(&inst, 1e-9), Some(true));
        // x = y
        let rep = estimate_pair(&inst, &[3, 3, 3], &[3, 3, 3], &opts, &mut r).unwrap();
        assert_eq!(rep.misalignment, Some(0.0));
    }

    #[test]
    fn unbiasedness_over_instances_single_path() {
        // E[theta_0 T theta_u^{-1}] = I within 3 sigma, with one path per
        // instance (unbiasedness holds per path)
        let n = 4usize;
        let lambda = 0.9f64;
        let p = (1.0 - lambda) / 2.0;
        let g = grid3(n + 1);
        let mut acc = RunningMoments::new();
        for i in 0..4000u64 {
            let inst =
                generate_instance(&g, ChannelSpec::Z2Flip { p }, TruthMode::HaarRandom, 100 + i)
                    .unwrap();
            let mut r = rng::stream(900, 0xcd, i);
            let v = single_path_aligned_scalar(
                &inst,
                &[0, 0, 0],
                n,
                PathMeasureKind::UniformMonotone,
                lambda,
                &mut r,
            )
            .unwrap();
            acc.push(v);
        }
        assert!(
            (acc.mean() - 1.0).abs() <= 3.0 * acc.stderr(),
            "mean {} +- {}",
            acc.mean(),
            acc.stderr()
        );
    }

    #[test]
    fn estimator_improves_with_more_paths() {
        let g = grid3(5);
        let lambda = 0.9f64;
        let p = (1.0 - lambda) / 2.0;
        let mut mis1 = RunningMoments::new();
        let mut mis64 = RunningMoments::new();
        for i in 0..60u64 {
            let inst =
                generate_instance(&g, ChannelSpec::Z2Flip { p }, TruthMode::HaarRandom, 500 + i)
                    .unwrap();
            let mut r = rng::stream(901, 0xcd, i);
            let o1 = EstimatorOptions::new(1, PathMeasureKind::UniformMonotone, lambda);
            let o64 = EstimatorOptions::new(64, PathMeasureKind::UniformMonotone, lambda);
            mis1.push(
                estimate_diagonal(&inst, &[0, 0, 0], 4, &o1, &mut r)
                    .unwrap()
                    .misalignment
                    .unwrap(),
            );
            mis64.push(
                estimate_diagonal(&inst, &[0, 0, 0], 4, &o64, &mut r)
                    .unwrap()
                    .misalignment
                    .unwrap(),
            );
        }
        assert!(
            mis64.mean() < mis1.mean(),
            "64-path {} vs 1-path {}",
            mis64.mean(),
            mis1.mean()
        );
    }

    #[test]
    fn product_frobenius_inequality_on_random_matrices() {
        let mut r = rng::stream(8, 0xcd, 5);
        use rand_distr::StandardNormal;
        for _ in 0..200 {
            let a =
                DMatrix::from_fn(3, 3, |_, _| rand::Rng::sample::<f64, _>(&mut r, StandardNormal));
            let b =
                DMatrix::from_fn(3, 3, |_, _| rand::Rng::sample::<f64, _>(&mut r, StandardNormal));
            let (lhs, rhs) = product_frobenius_check(&a, &b);
            assert!(lhs <= rhs * (1.0 + 1e-12), "{lhs} > {rhs}");
        }
    }

    #[test]
    fn u1_estimates_recover_angles() {
        let g = grid3(9);
        let inst = generate_instance(
            &g,
            ChannelSpec::U1Multiplicative {
                density: crate::channel::DensitySpec::VonMises { concentration: 40.0 },
            },
            TruthMode::HaarRandom,
            11,
        )
        .unwrap();
        let lambda = crate::channel::lambda_for_channel(&inst.channel, 0, 0).unwrap().value;
        let opts = EstimatorOptions::new(256, PathMeasureKind::UniformMonotone, lambda);
        let mut r = rng::stream(11, 0xcd, 6);
        let rep = estimate_diagonal(&inst, &[0, 0, 0], 8, &opts, &mut r).unwrap();
        // ||R(a) - R(b)||_F^2 = 4(1 - cos(a - b)); below 2 means the angle
        // error is under pi/3
        assert!(
            rep.projected_misalignment.unwrap() < 2.0,
            "projected angle too far: {}",
            rep.projected_misalignment.unwrap()
        );
    }

    #[test]
    fn orth_gaussian_projected_estimates_converge() {
        let g = grid3(5);
        let channel = ChannelSpec::OrthGaussian { m: 2, sigma: 0.15, project: true };
        let inst = generate_instance(&g, channel, TruthMode::HaarRandom, 12).unwrap();
        let lambda = crate::channel::lambda_for_channel(&channel, 40_000, 99).unwrap().value;
        let opts = EstimatorOptions::new(512, PathMeasureKind::UniformMonotone, lambda);
        let mut r = rng::stream(12, 0xcd, 7);
        let rep = estimate_diagonal(&inst, &[0, 0, 0], 4, &opts, &mut r).unwrap();
        assert!(
            rep.projected_misalignment.unwrap() < 1.0,
            "misalignment {}",
            rep.projected_misalignment.unwrap()
        );
        assert!(!rep.degenerate_projection);
    }
}
