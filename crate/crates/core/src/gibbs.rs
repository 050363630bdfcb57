//! Heat-bath sampling of the Bayes posterior for Z2 synchronization: the
//! random-bond Ising model
//!
//! ```text
//! mu_Y(sigma) = (1/Z) exp( beta * sum_{(x,y)} Y_xy sigma_x sigma_y )
//! ```
//!
//! On the Nishimori line `beta = (1/2) ln((1-p)/p)` this is exactly the
//! posterior given the observations, and the planted configuration is an
//! equilibrium sample, so chains start at the truth and only need to
//! decorrelate. Long-range truth-aligned correlations witness the
//! recoverable phase; the phase scan estimates the transition point from
//! the size-crossing of the aligned overlap.

use crate::channel::{ChannelSpec, ElementArray, Instance};
use crate::grid::Boundary;
use crate::group::GroupVariant;
use crate::rng::{self, tag};
use crate::stats::{self, fit_line, integrated_autocorr_time, RunningMoments};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GibbsError {
    #[error("flip probability must lie strictly inside (0, 1/2), got {0}")]
    BadFlipProbability(f64),
    #[error("gibbs sampling is defined for Z2 instances")]
    NotZ2,
    #[error("exact enumeration is limited to {limit} vertices, instance has {got}")]
    TooLargeForEnumeration { got: usize, limit: usize },
    #[error("need at least one measurement (sweeps >= stride)")]
    NoMeasurements,
}

/// `beta = (1/2) ln((1-p)/p)`, the inverse temperature at which the Gibbs
/// measure is the exact posterior.
pub fn nishimori_beta(p: f64) -> Result<f64, GibbsError> {
    if !(p > 0.0 && p < 0.5) {
        return Err(GibbsError::BadFlipProbability(p));
    }
    Ok(0.5 * ((1.0 - p) / p).ln())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum ChainInit {
    /// Start at the stored truth: an exact equilibrium sample on the
    /// Nishimori line.
    Planted,
    /// Uniform random start; needs long burn-in at low temperature.
    Hot,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GibbsParams {
    /// Inverse temperature; `None` selects the Nishimori value for the
    /// instance's flip probability.
    pub beta: Option<f64>,
    pub sweeps: usize,
    pub burn_in: usize,
    pub stride: usize,
    pub seed: u64,
    pub init: ChainInit,
}

impl Default for GibbsParams {
    fn default() -> Self {
        Self { beta: None, sweeps: 800, burn_in: 200, stride: 4, seed: 0, init: ChainInit::Planted }
    }
}

/// Time-averaged pair correlations of one chain.
#[derive(Clone, Debug)]
pub struct CorrelationReport {
    /// Per queried pair: `(u, v, <s_u s_v>, <s_u s_v> * theta_u theta_v)`.
    pub pairs: Vec<(usize, usize, f64, f64)>,
    /// Mean truth-aligned overlap across the queried pairs.
    pub mean_aligned_overlap: f64,
    /// Integrated autocorrelation time of the aligned-overlap series, in
    /// units of the measurement stride.
    pub autocorr_time: f64,
    pub n_measurements: usize,
    pub beta: f64,
}

struct SpinChain<'a> {
    /// +-1 spins, indexed like the grid vertices.
    spins: Vec<i8>,
    /// Per vertex: (neighbor index, coupling) pairs.
    neighbors: Vec<Vec<(u32, i8)>>,
    /// Heat-bath P(spin = +1) indexed by local field + max_field.
    prob_plus: Vec<f64>,
    max_field: i64,
    /// Vertices grouped by checkerboard parity.
    sublattices: [Vec<u32>; 2],
    truth: &'a [i8],
}

impl<'a> SpinChain<'a> {
    fn new(inst: &'a Instance, beta: f64, init: ChainInit, rng: &mut impl Rng) -> Result<Self, GibbsError> {
        if inst.variant() != GroupVariant::Z2 {
            return Err(GibbsError::NotZ2);
        }
        let ElementArray::Signs(obs) = &inst.observations else {
            return Err(GibbsError::NotZ2);
        };
        let ElementArray::Signs(truth) = &inst.truth else {
            return Err(GibbsError::NotZ2);
        };
        let g = &inst.graph;
        let n = g.vertex_count();
        let mut neighbors: Vec<Vec<(u32, i8)>> = vec![Vec::with_capacity(2 * g.dims()); n];
        for e in 0..g.edge_count() {
            let (x, y) = g.edge_endpoints(e);
            neighbors[x].push((y as u32, obs[e]));
            neighbors[y].push((x as u32, obs[e]));
        }
        let max_field = neighbors.iter().map(|v| v.len()).max().unwrap_or(0) as i64;
        let prob_plus = (-max_field..=max_field)
            .map(|h| 1.0 / (1.0 + (-2.0 * beta * h as f64).exp()))
            .collect();
        let mut sublattices = [Vec::new(), Vec::new()];
        for v in 0..n {
            let parity: usize = g.vertex_coord(v).iter().sum::<usize>() % 2;
            sublattices[parity].push(v as u32);
        }
        let spins = match init {
            ChainInit::Planted => truth.to_vec(),
            ChainInit::Hot => (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect(),
        };
        Ok(Self { spins, neighbors, prob_plus, max_field, sublattices, truth })
    }

    /// One checkerboard sweep: all even-parity sites, then all odd.
    fn sweep(&mut self, rng: &mut impl Rng) {
        for parity in 0..2 {
            for i in 0..self.sublattices[parity].len() {
                let v = self.sublattices[parity][i] as usize;
                let mut h = 0i64;
                for &(w, j) in &self.neighbors[v] {
                    h += (j * self.spins[w as usize]) as i64;
                }
                let p = self.prob_plus[(h + self.max_field) as usize];
                self.spins[v] = if rng.gen::<f64>() < p { 1 } else { -1 };
            }
        }
    }

    fn aligned(&self, v: usize) -> i8 {
        self.spins[v] * self.truth[v]
    }
}

/// Run one heat-bath chain and record pair correlations after burn-in.
pub fn run_chain(
    inst: &Instance,
    params: &GibbsParams,
    pairs: &[(usize, usize)],
) -> Result<CorrelationReport, GibbsError> {
    let p = match inst.channel {
        ChannelSpec::Z2Flip { p } => p,
        _ => return Err(GibbsError::NotZ2),
    };
    let beta = match params.beta {
        Some(b) => b,
        None => nishimori_beta(p)?,
    };
    if params.sweeps < params.stride.max(1) {
        return Err(GibbsError::NoMeasurements);
    }
    let mut r = rng::stream(params.seed, tag::CHAIN, inst.seed);
    let mut chain = SpinChain::new(inst, beta, params.init, &mut r)?;
    for _ in 0..params.burn_in {
        chain.sweep(&mut r);
    }
    let stride = params.stride.max(1);
    let mut corr = vec![0.0f64; pairs.len()];
    let mut series = Vec::with_capacity(params.sweeps / stride + 1);
    let mut count = 0usize;
    for t in 0..params.sweeps {
        chain.sweep(&mut r);
        if t % stride == 0 {
            let mut aligned_acc = 0.0;
            for (slot, &(u, v)) in pairs.iter().enumerate() {
                let prod = (chain.spins[u] * chain.spins[v]) as f64;
                corr[slot] += prod;
                aligned_acc += (chain.aligned(u) * chain.aligned(v)) as f64;
            }
            series.push(aligned_acc / pairs.len().max(1) as f64);
            count += 1;
        }
    }
    let truth: &[i8] = chain.truth;
    let pairs_out: Vec<(usize, usize, f64, f64)> = pairs
        .iter()
        .zip(&corr)
        .map(|(&(u, v), &c)| {
            let avg = c / count as f64;
            (u, v, avg, avg * (truth[u] * truth[v]) as f64)
        })
        .collect();
    let mean_aligned_overlap = stats::mean(&series.iter().copied().collect::<Vec<_>>());
    Ok(CorrelationReport {
        pairs: pairs_out,
        mean_aligned_overlap,
        autocorr_time: integrated_autocorr_time(&series),
        n_measurements: count,
        beta,
    })
}

/// Lattice-averaged truth-aligned two-point function at torus offsets, the
/// low-variance observable the phase scan uses. Offsets are (dx, dy).
pub fn aligned_overlap_at_offsets(
    inst: &Instance,
    params: &GibbsParams,
    offsets: &[(usize, usize)],
) -> Result<(f64, f64, f64), GibbsError> {
    let p = match inst.channel {
        ChannelSpec::Z2Flip { p } => p,
        _ => return Err(GibbsError::NotZ2),
    };
    let beta = match params.beta {
        Some(b) => b,
        None => nishimori_beta(p)?,
    };
    if params.sweeps < params.stride.max(1) {
        return Err(GibbsError::NoMeasurements);
    }
    let extents = inst.graph.extents().to_vec();
    if extents.len() != 2 {
        return Err(GibbsError::NotZ2);
    }
    let (lx, ly) = (extents[0], extents[1]);
    let mut r = rng::stream(params.seed, tag::CHAIN, inst.seed);
    let mut chain = SpinChain::new(inst, beta, params.init, &mut r)?;
    for _ in 0..params.burn_in {
        chain.sweep(&mut r);
    }
    let stride = params.stride.max(1);
    let mut series = Vec::new();
    // precompute the aligned-spin index map once
    let index = |x: usize, y: usize| -> usize { x + lx * y };
    for t in 0..params.sweeps {
        chain.sweep(&mut r);
        if t % stride == 0 {
            let mut acc = 0.0f64;
            for &(dx, dy) in offsets {
                let mut off_acc = 0i64;
                for y in 0..ly {
                    let y2 = (y + dy) % ly;
                    for x in 0..lx {
                        let x2 = (x + dx) % lx;
                        let a = chain.aligned(index(x, y)) as i64;
                        let b = chain.aligned(index(x2, y2)) as i64;
                        off_acc += a * b;
                    }
                }
                acc += off_acc as f64 / (lx * ly) as f64;
            }
            series.push(acc / offsets.len() as f64);
        }
    }
    let (mean, stderr) = stats::mean_stderr(&series);
    let tau = integrated_autocorr_time(&series);
    // inflate the naive stderr by the autocorrelation time
    Ok((mean, stderr * tau.sqrt(), tau))
}

/// One row of a phase scan.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PhaseScanRow {
    pub p: f64,
    pub l: usize,
    pub overlap: f64,
    pub stderr: f64,
    pub n_instances: usize,
}

#[derive(Clone, Debug)]
pub struct PhaseScanTable {
    pub rows: Vec<PhaseScanRow>,
    pub dims: usize,
}

/// Crossing estimate of the transition point with a bootstrap interval.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CrossingEstimate {
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Scan the aligned overlap over a p-grid and sizes on the d-dimensional
/// torus. Each (p, L, instance) cell runs an independent chain; cells are
/// evaluated in parallel with per-cell seeds.
pub fn phase_scan(
    dims: usize,
    p_grid: &[f64],
    sizes: &[usize],
    n_instances: usize,
    params: &GibbsParams,
) -> Result<(PhaseScanTable, Vec<Vec<Vec<f64>>>), GibbsError> {
    for &p in p_grid {
        if !(p > 0.0 && p < 0.5) {
            return Err(GibbsError::BadFlipProbability(p));
        }
    }
    let cells: Vec<(usize, usize)> = (0..p_grid.len())
        .flat_map(|pi| (0..sizes.len()).map(move |si| (pi, si)))
        .collect();
    let per_cell: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|&(pi, si)| {
            let p = p_grid[pi];
            let l = sizes[si];
            (0..n_instances)
                .into_par_iter()
                .map(|i| {
                    let cell_seed = rng::mix(&[params.seed, pi as u64, si as u64, i as u64]);
                    let overlap = match dims {
                        2 => {
                            let g = crate::grid::GridGraph::build(&[l, l], Boundary::Torus)
                                .expect("valid grid");
                            let inst = crate::channel::generate_instance(
                                &g,
                                ChannelSpec::Z2Flip { p },
                                crate::channel::TruthMode::HaarRandom,
                                cell_seed,
                            )
                            .expect("valid channel");
                            let offsets =
                                [(l / 2, l / 4), (l / 4, l / 2), (l / 2, l / 2), (l / 3, l / 3)];
                            let mut pr = *params;
                            pr.seed = cell_seed;
                            aligned_overlap_at_offsets(&inst, &pr, &offsets)
                                .expect("z2 instance")
                                .0
                        }
                        _ => {
                            let extents = vec![l; dims];
                            let g = crate::grid::GridGraph::build(&extents, Boundary::Torus)
                                .expect("valid grid");
                            let inst = crate::channel::generate_instance(
                                &g,
                                ChannelSpec::Z2Flip { p },
                                crate::channel::TruthMode::HaarRandom,
                                cell_seed,
                            )
                            .expect("valid channel");
                            let mut pr = *params;
                            pr.seed = cell_seed;
                            chain_far_overlap_generic(&inst, &pr).expect("z2 instance")
                        }
                    };
                    overlap
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(cells.len());
    // per_p -> per_size -> per_instance overlaps, for bootstrap consumers
    let mut cube: Vec<Vec<Vec<f64>>> =
        vec![vec![Vec::new(); sizes.len()]; p_grid.len()];
    for (idx, &(pi, si)) in cells.iter().enumerate() {
        let vals = &per_cell[idx];
        let (mean, stderr) = stats::mean_stderr(vals);
        rows.push(PhaseScanRow {
            p: p_grid[pi],
            l: sizes[si],
            overlap: mean,
            stderr,
            n_instances,
        });
        cube[pi][si] = vals.clone();
    }
    Ok((PhaseScanTable { rows, dims }, cube))
}

/// Far-pair aligned overlap for arbitrary dimension: torus offset of L/2
/// along every axis plus L/2 along each single axis.
fn chain_far_overlap_generic(inst: &Instance, params: &GibbsParams) -> Result<f64, GibbsError> {
    let p = match inst.channel {
        ChannelSpec::Z2Flip { p } => p,
        _ => return Err(GibbsError::NotZ2),
    };
    let beta = match params.beta {
        Some(b) => b,
        None => nishimori_beta(p)?,
    };
    let mut r = rng::stream(params.seed, tag::CHAIN, inst.seed);
    let mut chain = SpinChain::new(inst, beta, params.init, &mut r)?;
    for _ in 0..params.burn_in {
        chain.sweep(&mut r);
    }
    let g = &inst.graph;
    let n = g.vertex_count();
    let extents = g.extents().to_vec();
    // offset vector L/2 on every axis
    let offset_index: Vec<usize> = (0..n)
        .map(|v| {
            let mut c = g.vertex_coord(v);
            for (ci, &l) in c.iter_mut().zip(&extents) {
                *ci = (*ci + l / 2) % l;
            }
            g.vertex_index(&c)
        })
        .collect();
    let stride = params.stride.max(1);
    let mut series = Vec::new();
    for t in 0..params.sweeps {
        chain.sweep(&mut r);
        if t % stride == 0 {
            let mut acc = 0i64;
            for v in 0..n {
                acc += (chain.aligned(v) * chain.aligned(offset_index[v])) as i64;
            }
            series.push(acc as f64 / n as f64);
        }
    }
    Ok(stats::mean(&series))
}

/// Size-crossing estimate of the transition point from a scan cube
/// (per-p, per-size, per-instance overlaps): fit a line to the overlap
/// difference between the smallest and largest size over the transition
/// window and solve for its zero; bootstrap over instances for the CI.
pub fn crossing_estimate(
    p_grid: &[f64],
    sizes: &[usize],
    cube: &[Vec<Vec<f64>>],
    seed: u64,
) -> Option<CrossingEstimate> {
    if sizes.len() < 2 || p_grid.len() < 3 {
        return None;
    }
    let si_small = 0usize;
    let si_large = sizes.len() - 1;

    let zero_of = |overlaps_small: &[f64], overlaps_large: &[f64]| -> Option<f64> {
        // transition window: largest-size overlap between 0.15 and 0.85
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, &p) in p_grid.iter().enumerate() {
            if overlaps_large[i] > 0.15 && overlaps_large[i] < 0.85 {
                xs.push(p);
                ys.push(overlaps_small[i] - overlaps_large[i]);
            }
        }
        if xs.len() < 2 {
            return None;
        }
        let (a, b) = fit_line(&xs, &ys);
        if b.abs() < 1e-12 {
            return None;
        }
        let z = -a / b;
        Some(z.clamp(p_grid[0], *p_grid.last().unwrap()))
    };

    let means = |si: usize, pick: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
        (0..p_grid.len()).map(|pi| pick(&cube[pi][si])).collect()
    };
    let mean_fn = |xs: &[f64]| stats::mean(xs);
    let p_hat = zero_of(&means(si_small, &mean_fn), &means(si_large, &mean_fn))?;

    // percentile bootstrap over instances
    let mut r = rng::stream(seed, tag::TRIAL, 0);
    let mut boots = Vec::with_capacity(200);
    let n_inst = cube[0][0].len();
    for _ in 0..200 {
        let draw: Vec<usize> = (0..n_inst).map(|_| r.gen_range(0..n_inst)).collect();
        let resampled = |si: usize| -> Vec<f64> {
            (0..p_grid.len())
                .map(|pi| {
                    let vals = &cube[pi][si];
                    draw.iter().map(|&i| vals[i]).sum::<f64>() / n_inst as f64
                })
                .collect()
        };
        if let Some(z) = zero_of(&resampled(si_small), &resampled(si_large)) {
            boots.push(z);
        }
    }
    if boots.is_empty() {
        return Some(CrossingEstimate { p_hat, ci_low: p_hat, ci_high: p_hat });
    }
    boots.sort_by(|a, b| a.total_cmp(b));
    let lo = boots[(0.025 * (boots.len() - 1) as f64).round() as usize];
    let hi = boots[(0.975 * (boots.len() - 1) as f64).round() as usize];
    Some(CrossingEstimate { p_hat, ci_low: lo, ci_high: hi })
}

/// Exact pair correlations by brute-force enumeration; the oracle the
/// chain is checked against on tiny lattices.
pub fn exact_pair_correlations(
    inst: &Instance,
    beta: f64,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>, GibbsError> {
    let ElementArray::Signs(obs) = &inst.observations else {
        return Err(GibbsError::NotZ2);
    };
    let n = inst.graph.vertex_count();
    if n > 20 {
        return Err(GibbsError::TooLargeForEnumeration { got: n, limit: 20 });
    }
    let g = &inst.graph;
    let edges: Vec<(usize, usize, i8)> = (0..g.edge_count())
        .map(|e| {
            let (x, y) = g.edge_endpoints(e);
            (x, y, obs[e])
        })
        .collect();
    let mut z = 0.0f64;
    let mut corr = vec![0.0f64; pairs.len()];
    for mask in 0u32..(1u32 << n) {
        let spin = |v: usize| -> f64 {
            if mask & (1 << v) != 0 {
                1.0
            } else {
                -1.0
            }
        };
        let mut energy = 0.0;
        for &(x, y, j) in &edges {
            energy += j as f64 * spin(x) * spin(y);
        }
        let w = (beta * energy).exp();
        z += w;
        for (slot, &(u, v)) in pairs.iter().enumerate() {
            corr[slot] += w * spin(u) * spin(v);
        }
    }
    Ok(corr.into_iter().map(|c| c / z).collect())
}
