//! Monotone lattice paths: sampling measures, reflection completion and
//! the empirical exponential-intersection-tail diagnostic.
//!
//! A path here is monotone in a fixed orthant: every step moves one unit
//! along some axis, always in that axis's assigned direction. Two
//! measures over the monotone paths to a target are shipped:
//!
//! - `UniformMonotone` — a uniformly random interleaving of the required
//!   axis steps;
//! - `HierarchicalSplit` — recursive randomized midpoint splitting of the
//!   displacement, which spreads mass across the orthant.
//!
//! Neither measure comes with a proven intersection tail; the
//! [`eit_diagnostic`] measures `P(|gamma_1 * gamma_2| >= k)` empirically
//! and fits the geometric rate, so experiments can document the regime
//! they ran in.

use crate::grid::GridGraph;
use crate::rng;
use crate::stats;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "measure", rename_all = "kebab-case")]
pub enum PathMeasureKind {
    UniformMonotone,
    /// `spread` is the half-width of the uniform split bias around 1/2;
    /// 0 reduces to fair binomial splits.
    HierarchicalSplit { spread: f64 },
}

impl Default for PathMeasureKind {
    fn default() -> Self {
        PathMeasureKind::UniformMonotone
    }
}

/// A measure over monotone paths from an origin to `origin + target`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathMeasure {
    pub kind: PathMeasureKind,
    /// Signed per-axis displacement.
    pub target: Vec<i64>,
}

#[derive(Debug, Error)]
pub enum PathError {
    #[error("path leaves the grid at step {step}")]
    OutOfGrid { step: usize },
    #[error("target displacement has wrong dimension: {got} axes, grid has {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("prefix endpoint {endpoint:?} is not on the half-sum hyperplane of n={n}")]
    NotOnHyperplane { endpoint: Vec<i64>, n: usize },
    #[error("prefix overshoots axis {axis}: {count} steps with n={n}, no completion exists")]
    Uncompletable { axis: usize, count: usize, n: usize },
    #[error("reflection needs an even n, got {0}")]
    OddN(usize),
    #[error("prefix moves along axis {0}, which is outside the diagonal triple")]
    PrefixOffAxes(usize),
}

/// One resolved step of a path on a concrete grid.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PathStep {
    pub edge: usize,
    /// True when the step traverses the edge in its canonical orientation.
    pub forward: bool,
}

/// A monotone path resolved against a grid: ordered edges plus the move
/// word (axis, direction) that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub start: Vec<usize>,
    pub end: Vec<usize>,
    pub steps: Vec<PathStep>,
    pub moves: Vec<(usize, i8)>,
}

impl PathSample {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Axis word of the path, ignoring directions.
    pub fn axis_sequence(&self) -> Vec<usize> {
        self.moves.iter().map(|&(a, _)| a).collect()
    }
}

/// Sample the axis word for a monotone path with the given per-axis step
/// counts (always nonnegative; directions are applied at resolution).
pub fn sample_axis_word(
    kind: PathMeasureKind,
    counts: &[usize],
    rng: &mut impl Rng,
) -> Vec<usize> {
    match kind {
        PathMeasureKind::UniformMonotone => {
            let mut word: Vec<usize> = counts
                .iter()
                .enumerate()
                .flat_map(|(axis, &c)| std::iter::repeat(axis).take(c))
                .collect();
            // Fisher-Yates gives the uniform interleaving
            for i in (1..word.len()).rev() {
                let j = rng.gen_range(0..=i);
                word.swap(i, j);
            }
            word
        }
        PathMeasureKind::HierarchicalSplit { spread } => {
            let mut word = Vec::with_capacity(counts.iter().sum());
            hier_split(counts, spread.clamp(0.0, 0.5), rng, &mut word);
            word
        }
    }
}

fn hier_split(counts: &[usize], spread: f64, rng: &mut impl Rng, out: &mut Vec<usize>) {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return;
    }
    if total == 1 {
        out.push(counts.iter().position(|&c| c > 0).unwrap());
        return;
    }
    let bias = 0.5 + (rng.gen::<f64>() * 2.0 - 1.0) * spread;
    // split each axis binomially with the shared bias, rejecting empty halves
    let mut first = vec![0usize; counts.len()];
    loop {
        let mut sum = 0usize;
        for (f, &c) in first.iter_mut().zip(counts) {
            *f = (0..c).filter(|_| rng.gen::<f64>() < bias).count();
            sum += *f;
        }
        if sum > 0 && sum < total {
            break;
        }
    }
    let rest: Vec<usize> = counts.iter().zip(&first).map(|(&c, &f)| c - f).collect();
    hier_split(&first, spread, rng, out);
    hier_split(&rest, spread, rng, out);
}

/// Resolve a move word against a grid from an origin coordinate.
pub fn resolve_moves(
    grid: &GridGraph,
    origin: &[usize],
    moves: &[(usize, i8)],
) -> Result<PathSample, PathError> {
    let mut pos = origin.to_vec();
    let mut steps = Vec::with_capacity(moves.len());
    for (i, &(axis, dir)) in moves.iter().enumerate() {
        let (edge, forward, next) = grid
            .step(&pos, axis, dir)
            .ok_or(PathError::OutOfGrid { step: i })?;
        steps.push(PathStep { edge, forward });
        pos = next;
    }
    Ok(PathSample {
        start: origin.to_vec(),
        end: pos,
        steps,
        moves: moves.to_vec(),
    })
}

/// Sample a monotone path from `origin` to `origin + measure.target`
/// distributed per the measure.
pub fn sample_increasing_path(
    grid: &GridGraph,
    origin: &[usize],
    measure: &PathMeasure,
    rng: &mut impl Rng,
) -> Result<PathSample, PathError> {
    if measure.target.len() != grid.dims() {
        return Err(PathError::DimensionMismatch {
            got: measure.target.len(),
            want: grid.dims(),
        });
    }
    let counts: Vec<usize> = measure.target.iter().map(|&t| t.unsigned_abs() as usize).collect();
    let dirs: Vec<i8> = measure.target.iter().map(|&t| if t < 0 { -1 } else { 1 }).collect();
    let word = sample_axis_word(measure.kind, &counts, rng);
    let moves: Vec<(usize, i8)> = word.into_iter().map(|a| (a, dirs[a])).collect();
    resolve_moves(grid, origin, &moves)
}

/// Complete a stopped diagonal path by "reflecting" it through the
/// half-sum hyperplane `H(n)`.
///
/// The prefix must be a monotone path over exactly three active axes whose
/// step counts sum to `3n/2` with every count at most `n` (it ends on
/// `H(n)`). The completion appends the reversed prefix word with each axis
/// replaced by its complement within the active triple (first and third
/// swap, middle fixed), falling back to the axis with the largest
/// remaining budget when the complement is spent. The result is monotone,
/// has length `3n`, and ends at the diagonal corner `n * (e_a + e_b +
/// e_c)` relative to the prefix origin.
pub fn reflect_complete(
    grid: &GridGraph,
    prefix: &PathSample,
    n: usize,
    axes: &[(usize, i8); 3],
) -> Result<PathSample, PathError> {
    if n % 2 != 0 {
        return Err(PathError::OddN(n));
    }
    let axis_slot = |axis: usize| axes.iter().position(|&(a, _)| a == axis);
    let mut counts = [0usize; 3];
    for &(axis, _) in &prefix.moves {
        let slot = axis_slot(axis).ok_or(PathError::PrefixOffAxes(axis))?;
        counts[slot] += 1;
    }
    let total: usize = counts.iter().sum();
    if total != 3 * n / 2 {
        let endpoint: Vec<i64> = counts.iter().map(|&c| c as i64).collect();
        return Err(PathError::NotOnHyperplane { endpoint, n });
    }
    for (slot, &c) in counts.iter().enumerate() {
        if c > n {
            return Err(PathError::Uncompletable { axis: axes[slot].0, count: c, n });
        }
    }
    let mut remaining = [n - counts[0], n - counts[1], n - counts[2]];
    let mut moves = prefix.moves.clone();
    for &(axis, _) in prefix.moves.iter().rev() {
        let slot = axis_slot(axis).expect("checked above");
        let mut pick = 2 - slot;
        if remaining[pick] == 0 {
            // largest remaining budget, ties to the smallest slot
            pick = (0..3).max_by_key(|&s| (remaining[s], 2 - s)).unwrap();
        }
        debug_assert!(remaining[pick] > 0);
        remaining[pick] -= 1;
        moves.push((axes[pick].0, axes[pick].1));
    }
    debug_assert_eq!(remaining, [0, 0, 0]);
    resolve_moves(grid, &prefix.start, &moves)
}

/// Table row of the intersection diagnostic: `P(|g1 * g2| >= k)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EitTailRow {
    pub k: usize,
    pub p_geq: f64,
}

/// Empirical intersection-tail report for a path measure at diagonal
/// scale `n`.
#[derive(Clone, Debug)]
pub struct EitReport {
    pub kind: PathMeasureKind,
    pub n: usize,
    pub n_pairs: usize,
    pub tail: Vec<EitTailRow>,
    /// Fitted geometric rate of the tail over `k` in `[1, fit_upto]`.
    pub beta_hat: f64,
    pub fit_upto: usize,
    pub mean_intersections: f64,
    /// Raw shared-edge counts, one per sampled pair.
    pub samples: Vec<u32>,
}

impl EitReport {
    /// `E[lambda^{-2X}]` with its standard error, straight off the samples.
    pub fn lambda_moment(&self, lambda: f64) -> (f64, f64) {
        let mut acc = stats::RunningMoments::new();
        for &x in &self.samples {
            acc.push(lambda.powi(-2 * x as i32));
        }
        (acc.mean(), acc.stderr())
    }
}

/// Sample a reflected diagonal path purely in move-word space (the
/// virtual `[0, n]^3` box): the measure targets the diagonal corner, the
/// word is stopped at the hyperplane and completed by reflection.
pub fn sample_reflected_word(
    kind: PathMeasureKind,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    debug_assert!(n % 2 == 0);
    let full = sample_axis_word(kind, &[n, n, n], rng);
    let prefix = &full[..3 * n / 2];
    let mut counts = [0usize; 3];
    for &a in prefix {
        counts[a] += 1;
    }
    let mut remaining = [n - counts[0], n - counts[1], n - counts[2]];
    let mut word = prefix.to_vec();
    for &a in prefix.iter().rev() {
        let mut pick = 2 - a;
        if remaining[pick] == 0 {
            pick = (0..3).max_by_key(|&s| (remaining[s], 2 - s)).unwrap();
        }
        remaining[pick] -= 1;
        word.push(pick);
    }
    word
}

/// Count shared directed edges of two monotone diagonal words. Positions
/// are tracked in the virtual box; monotone paths can only share an edge
/// at equal step index, but we count set intersections anyway so the
/// diagnostic does not depend on that fact.
fn shared_edges(w1: &[usize], w2: &[usize]) -> u32 {
    let key = |pos: &[usize; 3], axis: usize| -> u64 {
        // n stays small; pack the source coordinate and axis
        ((pos[0] as u64) << 40) | ((pos[1] as u64) << 24) | ((pos[2] as u64) << 8) | axis as u64
    };
    let mut set = std::collections::HashSet::with_capacity(w1.len());
    let mut pos = [0usize; 3];
    for &a in w1 {
        set.insert(key(&pos, a));
        pos[a] += 1;
    }
    let mut shared = 0u32;
    let mut pos = [0usize; 3];
    for &a in w2 {
        if set.contains(&key(&pos, a)) {
            shared += 1;
        }
        pos[a] += 1;
    }
    shared
}

/// Sample `n_pairs` independent pairs of reflected diagonal paths and
/// tabulate the intersection tail with a fitted geometric rate.
pub fn eit_diagnostic(
    kind: PathMeasureKind,
    n: usize,
    n_pairs: usize,
    seed: u64,
) -> EitReport {
    assert!(n_pairs >= 1000, "need at least 1e3 pairs for the tail");
    assert!(n % 2 == 0);
    use rayon::prelude::*;
    let samples: Vec<u32> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, rng::tag::PATH, i as u64);
            let w1 = sample_reflected_word(kind, n, &mut r);
            let w2 = sample_reflected_word(kind, n, &mut r);
            shared_edges(&w1, &w2)
        })
        .collect();
    let max_x = samples.iter().copied().max().unwrap_or(0) as usize;
    let mut tail = Vec::new();
    for k in 0..=max_x {
        let p = samples.iter().filter(|&&x| x as usize >= k).count() as f64 / n_pairs as f64;
        tail.push(EitTailRow { k, p_geq: p });
    }
    // log-linear fit over k in [1, 20] where the tail is resolved
    let fit_upto = max_x.min(20);
    let (ks, lps): (Vec<f64>, Vec<f64>) = tail
        .iter()
        .filter(|row| row.k >= 1 && row.k <= fit_upto && row.p_geq > 0.0)
        .map(|row| (row.k as f64, row.p_geq.ln()))
        .unzip();
    let beta_hat = if ks.len() >= 2 {
        stats::fit_line(&ks, &lps).1.exp()
    } else {
        f64::NAN
    };
    let mean_intersections = samples.iter().map(|&x| x as f64).sum::<f64>() / n_pairs as f64;
    EitReport {
        kind,
        n,
        n_pairs,
        tail,
        beta_hat,
        fit_upto,
        mean_intersections,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Boundary;
    use std::collections::HashMap;

    fn grid3(l: usize) -> GridGraph {
        GridGraph::build(&[l, l, l], Boundary::Free).unwrap()
    }

    #[test]
    fn unique_path_for_straight_targets() {
        let g = grid3(5);
        let m = PathMeasure { kind: PathMeasureKind::UniformMonotone, target: vec![3, 0, 0] };
        let mut r = rng::stream(1, 0xab, 0);
        for _ in 0..20 {
            let p = sample_increasing_path(&g, &[0, 0, 0], &m, &mut r).unwrap();
            assert_eq!(p.axis_sequence(), vec![0, 0, 0]);
            assert_eq!(p.end, vec![3, 0, 0]);
        }
    }

    #[test]
    fn uniform_measure_hits_all_orderings_uniformly() {
        let g = grid3(3);
        let m = PathMeasure { kind: PathMeasureKind::UniformMonotone, target: vec![1, 1, 1] };
        let mut r = rng::stream(2, 0xab, 1);
        let n = 100_000;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..n {
            let p = sample_increasing_path(&g, &[0, 0, 0], &m, &mut r).unwrap();
            *counts.entry(p.axis_sequence()).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for (_, c) in counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 6.0).abs() < 0.01, "ordering frequency {f}");
        }
    }

    #[test]
    fn binomial_arrangements_for_2_1_target() {
        let g = grid3(4);
        let m = PathMeasure { kind: PathMeasureKind::UniformMonotone, target: vec![2, 1, 0] };
        let mut r = rng::stream(3, 0xab, 2);
        let n = 100_000;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..n {
            let p = sample_increasing_path(&g, &[0, 0, 0], &m, &mut r).unwrap();
            *counts.entry(p.axis_sequence()).or_default() += 1;
        }
        assert_eq!(counts.len(), 3);
        for (_, c) in counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.01, "arrangement frequency {f}");
        }
    }

    #[test]
    fn hierarchical_split_targets_and_monotone() {
        let g = grid3(9);
        let m = PathMeasure {
            kind: PathMeasureKind::HierarchicalSplit { spread: 0.25 },
            target: vec![4, 6, 2],
        };
        let mut r = rng::stream(4, 0xab, 3);
        for _ in 0..200 {
            let p = sample_increasing_path(&g, &[0, 0, 0], &m, &mut r).unwrap();
            assert_eq!(p.len(), 12);
            assert_eq!(p.end, vec![4, 6, 2]);
            assert!(p.steps.iter().all(|s| s.forward));
        }
    }

    #[test]
    fn negative_displacements_traverse_reverse_edges() {
        let g = grid3(5);
        let m = PathMeasure { kind: PathMeasureKind::UniformMonotone, target: vec![2, -2, 0] };
        let mut r = rng::stream(5, 0xab, 4);
        let p = sample_increasing_path(&g, &[1, 3, 0], &m, &mut r).unwrap();
        assert_eq!(p.end, vec![3, 1, 0]);
        // exactly the axis-1 steps are reverse traversals
        for (step, &(axis, dir)) in p.steps.iter().zip(&p.moves) {
            assert_eq!(step.forward, dir == 1, "axis {axis}");
        }
    }

    #[test]
    fn paths_exit_grid_is_an_error() {
        let g = grid3(3);
        let m = PathMeasure { kind: PathMeasureKind::UniformMonotone, target: vec![3, 0, 0] };
        let mut r = rng::stream(6, 0xab, 5);
        let err = sample_increasing_path(&g, &[0, 0, 0], &m, &mut r);
        assert!(matches!(err, Err(PathError::OutOfGrid { .. })));
    }

    #[test]
    fn reflect_examples_from_midpoints() {
        let g = grid3(4);
        let axes = [(0usize, 1i8), (1, 1), (2, 1)];
        // symmetric prefix (e1, e2, e3) at (1,1,1)
        let prefix = resolve_moves(&g, &[0, 0, 0], &[(0, 1), (1, 1), (2, 1)]).unwrap();
        let full = reflect_complete(&g, &prefix, 2, &axes).unwrap();
        assert_eq!(full.len(), 6);
        assert_eq!(full.end, vec![2, 2, 2]);
        assert_eq!(full.axis_sequence(), vec![0, 1, 2, 0, 1, 2]);

        // skewed prefix (e1, e1, e2) at (2,1,0)
        let prefix = resolve_moves(&g, &[0, 0, 0], &[(0, 1), (0, 1), (1, 1)]).unwrap();
        let full = reflect_complete(&g, &prefix, 2, &axes).unwrap();
        assert_eq!(full.len(), 6);
        assert_eq!(full.end, vec![2, 2, 2]);
        assert!(full.steps.iter().all(|s| s.forward));
    }

    #[test]
    fn reflect_rejects_bad_prefixes() {
        let g = grid3(5);
        let axes = [(0usize, 1i8), (1, 1), (2, 1)];
        // off the hyperplane
        let prefix = resolve_moves(&g, &[0, 0, 0], &[(0, 1), (1, 1)]).unwrap();
        assert!(matches!(
            reflect_complete(&g, &prefix, 2, &axes),
            Err(PathError::NotOnHyperplane { .. })
        ));
        // odd n
        let prefix = resolve_moves(&g, &[0, 0, 0], &[(0, 1)]).unwrap();
        assert!(matches!(
            reflect_complete(&g, &prefix, 1, &axes),
            Err(PathError::OddN(1))
        ));
        // overshoot: (e1, e1, e1) cannot reach (2,2,2) monotonically
        let prefix = resolve_moves(&g, &[0, 0, 0], &[(0, 1), (0, 1), (0, 1)]).unwrap();
        assert!(matches!(
            reflect_complete(&g, &prefix, 2, &axes),
            Err(PathError::Uncompletable { axis: 0, count: 3, n: 2 })
        ));
    }

    #[test]
    fn reflected_words_always_reach_the_corner() {
        let mut r = rng::stream(7, 0xab, 6);
        for kind in [
            PathMeasureKind::UniformMonotone,
            PathMeasureKind::HierarchicalSplit { spread: 0.25 },
        ] {
            for &n in &[2usize, 4, 8] {
                for _ in 0..500 {
                    let w = sample_reflected_word(kind, n, &mut r);
                    assert_eq!(w.len(), 3 * n);
                    let mut counts = [0usize; 3];
                    for &a in &w {
                        counts[a] += 1;
                    }
                    assert_eq!(counts, [n, n, n]);
                }
            }
        }
    }

    #[test]
    fn straight_line_pairs_share_everything() {
        // degenerate measure sanity: identical words intersect fully
        assert_eq!(shared_edges(&[0, 0, 0], &[0, 0, 0]), 3);
        // both words converge on (1,1,0) and then step axis 2 together
        assert_eq!(shared_edges(&[0, 1, 2], &[1, 0, 2]), 1);
        assert_eq!(shared_edges(&[0, 1, 2], &[2, 1, 0]), 0);
    }

    #[test]
    fn eit_tail_has_full_support_at_small_n() {
        let rep = eit_diagnostic(PathMeasureKind::UniformMonotone, 2, 20_000, 9);
        // P(X >= 6) = P(identical reflected words) > 0
        let p6 = rep
            .tail
            .iter()
            .find(|row| row.k == 6)
            .map(|row| row.p_geq)
            .unwrap_or(0.0);
        assert!(p6 > 0.0, "P(X >= 6) should be positive at n=2");
        assert!(rep.mean_intersections > 0.0);
    }

    #[test]
    fn eit_beta_estimates_are_subgeometric_at_n32() {
        let rep = eit_diagnostic(PathMeasureKind::UniformMonotone, 32, 4_000, 10);
        assert!(rep.beta_hat.is_finite());
        assert!(rep.beta_hat < 1.0, "beta_hat = {}", rep.beta_hat);
        let rep = eit_diagnostic(PathMeasureKind::HierarchicalSplit { spread: 0.25 }, 32, 4_000, 11);
        assert!(rep.beta_hat < 1.0, "beta_hat = {}", rep.beta_hat);
    }
}
