//! Hierarchical block synchronization for Z2 on the 2D grid.
//!
//! The grid is tiled by blocks of growing side lengths `l_0 = 1 < l_1 <
//! ... < l_K` (each dividing the next and the grid side). Level by level,
//! every parent block synchronizes its sub-blocks:
//!
//! 1. aggregate cross-boundary observations into a pair sign per adjacent
//!    sub-block pair,
//! 2. flag incoherent quartets (2x2 squares whose pair signs multiply to
//!    -1) and drop every block that appears in one,
//! 3. keep the largest connected component of the clean blocks,
//! 4. assign sub-block signs on that component by spanning-tree
//!    propagation and verify every non-tree constraint; if verification
//!    fails, the parent falls back to all +1.
//!
//! The pair estimate for vertices `u, v` is the product of their W
//! variables across all levels; factors above the first common block
//! cancel automatically.

use crate::channel::{ElementArray, Instance};
use crate::group::GroupVariant;
use crate::stats::binomial_tail_geq;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Level side lengths plus the audit parameters (honesty threshold and
/// the bad-sub-block budget of the goodness recursion).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub sides: Vec<usize>,
    pub alpha: f64,
    pub b_max: usize,
}

impl BlockSchedule {
    /// Desk-scale preset: `l_k = 8^k`.
    pub fn desk(levels: usize) -> Self {
        Self {
            sides: (0..levels).map(|k| 8usize.pow(k as u32)).collect(),
            alpha: 0.9,
            b_max: 1,
        }
    }

    /// The analysis preset `l_k = 2^{10 k (k+1)}`; level 1 already has
    /// side 2^20, so this is for documentation and tiny-k experiments,
    /// not for desk-scale runs.
    pub fn paper(levels: usize) -> Self {
        Self {
            sides: (0..levels)
                .map(|k| 2usize.pow((10 * k * (k + 1)) as u32))
                .collect(),
            alpha: 0.9,
            b_max: 1,
        }
    }

    pub fn from_sides(sides: Vec<usize>) -> Self {
        Self { sides, alpha: 0.9, b_max: 1 }
    }

    pub fn validate(&self, grid_side: usize) -> Result<(), MultiscaleError> {
        if self.sides.is_empty() || self.sides[0] != 1 {
            return Err(MultiscaleError::ScheduleMustStartAtOne);
        }
        if self.alpha <= 0.5 || self.alpha > 1.0 {
            return Err(MultiscaleError::BadAlpha(self.alpha));
        }
        for w in self.sides.windows(2) {
            if w[1] <= w[0] || w[1] % w[0] != 0 {
                return Err(MultiscaleError::SidesMustNest { smaller: w[0], larger: w[1] });
            }
        }
        let top = *self.sides.last().unwrap();
        if grid_side % top != 0 || grid_side < top {
            return Err(MultiscaleError::GridNotDivisible { grid_side, top });
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MultiscaleError {
    #[error("schedule must start with side 1")]
    ScheduleMustStartAtOne,
    #[error("honesty threshold alpha must lie in (1/2, 1], got {0}")]
    BadAlpha(f64),
    #[error("level side {larger} is not a proper multiple of {smaller}")]
    SidesMustNest { smaller: usize, larger: usize },
    #[error("grid side {grid_side} is not divisible by the top block side {top}")]
    GridNotDivisible { grid_side: usize, top: usize },
    #[error("multiscale synchronization needs a 2D square grid")]
    NotSquare2d,
    #[error("multiscale synchronization is defined for Z2 instances")]
    NotZ2,
    #[error("instance carries no ground truth")]
    TruthMissing,
}

/// Per-level synchronization state: one W sign per block, plus the
/// diagnostic counters the recovery report aggregates.
#[derive(Clone, Debug)]
pub struct LevelState {
    pub blocks_per_side: usize,
    pub block_side: usize,
    /// Assigned sign per block (row-major over the block grid).
    pub w: Vec<i8>,
    /// Whether each block sits in its parent's largest clean component
    /// (and the parent's verification succeeded).
    pub in_largest_component: Vec<bool>,
    pub incoherent_quartets: usize,
    /// Parents whose constraint verification failed (all-+1 fallback).
    pub h_failures: usize,
    pub excluded_blocks: usize,
}

/// The full multi-scale state after synchronization.
#[derive(Clone, Debug)]
pub struct BlockTree {
    pub schedule: BlockSchedule,
    pub grid_side: usize,
    /// One state per schedule level (level 0 first). The virtual top
    /// parent is the whole grid.
    pub levels: Vec<LevelState>,
    /// Per-vertex running product of W across all synchronized levels.
    pub w_tilde: Vec<i8>,
}

impl BlockTree {
    /// Index of the level-k block containing the vertex at (row, col).
    pub fn block_of(&self, level: usize, row: usize, col: usize) -> usize {
        let side = self.levels[level].block_side;
        let nb = self.levels[level].blocks_per_side;
        (row / side) * nb + (col / side)
    }

    /// The pair estimate for two vertex indices.
    pub fn pair_estimate(&self, u: usize, v: usize) -> i8 {
        self.w_tilde[u] * self.w_tilde[v]
    }
}

/// Options for the synchronization pass. `root_sign` flips the spanning
/// tree root, which realizes the global gauge freedom of each parent's
/// assignment; pair estimates must not depend on it.
#[derive(Clone, Copy, Debug)]
pub struct SyncOptions {
    pub root_sign: i8,
}

impl Default for SyncOptions {
    fn default() -> Self {
        Self { root_sign: 1 }
    }
}

fn z2_signs(inst: &Instance) -> Result<(&[i8], usize), MultiscaleError> {
    if inst.variant() != GroupVariant::Z2 {
        return Err(MultiscaleError::NotZ2);
    }
    let extents = inst.graph.extents();
    if extents.len() != 2 || extents[0] != extents[1] {
        return Err(MultiscaleError::NotSquare2d);
    }
    let ElementArray::Signs(obs) = &inst.observations else {
        return Err(MultiscaleError::NotZ2);
    };
    Ok((obs, extents[0]))
}

/// Build the block tree structure (all W = +1) without synchronizing.
pub fn build_block_tree(
    inst: &Instance,
    schedule: &BlockSchedule,
) -> Result<BlockTree, MultiscaleError> {
    let (_, side) = z2_signs(inst)?;
    schedule.validate(side)?;
    let levels = schedule
        .sides
        .iter()
        .map(|&bs| {
            let nb = side / bs;
            LevelState {
                blocks_per_side: nb,
                block_side: bs,
                w: vec![1; nb * nb],
                in_largest_component: vec![true; nb * nb],
                incoherent_quartets: 0,
                h_failures: 0,
                excluded_blocks: 0,
            }
        })
        .collect();
    Ok(BlockTree {
        schedule: schedule.clone(),
        grid_side: side,
        levels,
        w_tilde: vec![1; inst.graph.vertex_count()],
    })
}

/// Aggregated cross-boundary signs between adjacent level blocks.
/// Vertices at (row, col) live at grid coordinate `[col, row]` (axis 0 is
/// the column).
struct PairSigns {
    nb: usize,
    /// `h[r * (nb-1) + c]`: sign between blocks (r, c) and (r, c+1).
    h: Vec<i8>,
    /// `v[r * nb + c]`: sign between blocks (r, c) and (r+1, c).
    v: Vec<i8>,
}

fn block_pair_signs(
    inst: &Instance,
    obs: &[i8],
    w_tilde: &[i8],
    side: usize,
    bs: usize,
) -> PairSigns {
    let nb = side / bs;
    let g = &inst.graph;
    let mut h = vec![1i8; nb * nb.saturating_sub(1)];
    let mut v = vec![1i8; nb.saturating_sub(1) * nb];
    for r in 0..nb {
        for c in 0..nb.saturating_sub(1) {
            let col = bs * (c + 1) - 1;
            let mut acc = 0i64;
            for row in bs * r..bs * (r + 1) {
                let e = g.edge_from(&[col, row], 0).expect("interior edge");
                let u = g.vertex_index(&[col, row]);
                let w = g.vertex_index(&[col + 1, row]);
                acc += (w_tilde[u] * w_tilde[w] * obs[e]) as i64;
            }
            h[r * (nb - 1) + c] = if acc >= 0 { 1 } else { -1 };
        }
    }
    for r in 0..nb.saturating_sub(1) {
        for c in 0..nb {
            let row = bs * (r + 1) - 1;
            let mut acc = 0i64;
            for col in bs * c..bs * (c + 1) {
                let e = g.edge_from(&[col, row], 1).expect("interior edge");
                let u = g.vertex_index(&[col, row]);
                let w = g.vertex_index(&[col, row + 1]);
                acc += (w_tilde[u] * w_tilde[w] * obs[e]) as i64;
            }
            v[r * nb + c] = if acc >= 0 { 1 } else { -1 };
        }
    }
    PairSigns { nb, h, v }
}

/// Synchronize one level: assign W to every level-k block, parent by
/// parent. Levels below `k` must already be folded into `tree.w_tilde`.
pub fn synchronize_level(
    inst: &Instance,
    tree: &mut BlockTree,
    k: usize,
    opts: &SyncOptions,
) -> Result<(), MultiscaleError> {
    let (obs, side) = z2_signs(inst)?;
    let bs = tree.schedule.sides[k];
    let parent_side = if k + 1 < tree.schedule.sides.len() {
        tree.schedule.sides[k + 1]
    } else {
        side // virtual top parent: the whole grid
    };
    let signs = block_pair_signs(inst, obs, &tree.w_tilde, side, bs);
    let nb = signs.nb;
    let g = parent_side / bs; // sub-blocks per parent side
    let parents = nb / g;

    let mut incoherent_total = 0usize;
    let mut h_failures = 0usize;
    let mut excluded = 0usize;
    let level = &mut tree.levels[k];
    debug_assert_eq!(level.blocks_per_side, nb);

    for pr in 0..parents {
        for pc in 0..parents {
            let (r0, c0) = (pr * g, pc * g);
            // quartet coherence inside this parent
            let mut dirty = vec![false; g * g];
            for r in 0..g.saturating_sub(1) {
                for c in 0..g.saturating_sub(1) {
                    let top = signs.h[(r0 + r) * (nb - 1) + (c0 + c)];
                    let bottom = signs.h[(r0 + r + 1) * (nb - 1) + (c0 + c)];
                    let left = signs.v[(r0 + r) * nb + (c0 + c)];
                    let right = signs.v[(r0 + r) * nb + (c0 + c + 1)];
                    if top * bottom * left * right == -1 {
                        incoherent_total += 1;
                        dirty[r * g + c] = true;
                        dirty[r * g + c + 1] = true;
                        dirty[(r + 1) * g + c] = true;
                        dirty[(r + 1) * g + c + 1] = true;
                    }
                }
            }

            // largest clean component (4-adjacency); BFS from ascending
            // indices makes the tie-break "smallest minimum block index"
            let mut comp = vec![usize::MAX; g * g];
            let mut best: Option<(usize, usize)> = None; // (size, component id)
            let mut n_comp = 0usize;
            for start in 0..g * g {
                if dirty[start] || comp[start] != usize::MAX {
                    continue;
                }
                let mut queue = VecDeque::from([start]);
                comp[start] = n_comp;
                let mut size = 0usize;
                while let Some(cell) = queue.pop_front() {
                    size += 1;
                    let (r, c) = (cell / g, cell % g);
                    let push = |idx: usize, comp: &mut Vec<usize>, queue: &mut VecDeque<usize>| {
                        if !dirty[idx] && comp[idx] == usize::MAX {
                            comp[idx] = n_comp;
                            queue.push_back(idx);
                        }
                    };
                    if r > 0 {
                        push(cell - g, &mut comp, &mut queue);
                    }
                    if r + 1 < g {
                        push(cell + g, &mut comp, &mut queue);
                    }
                    if c > 0 {
                        push(cell - 1, &mut comp, &mut queue);
                    }
                    if c + 1 < g {
                        push(cell + 1, &mut comp, &mut queue);
                    }
                }
                if best.map_or(true, |(bsize, _)| size > bsize) {
                    best = Some((size, n_comp));
                }
                n_comp += 1;
            }
            let in_largest: Vec<bool> = match best {
                None => vec![false; g * g],
                Some((_, keep)) => (0..g * g).map(|i| comp[i] == keep).collect(),
            };

            // spanning-tree assignment on the component, then verify all
            // in-component constraints
            let pair_sign = |a: usize, b: usize| -> i8 {
                let (ra, ca) = (a / g, a % g);
                let (rb, cb) = (b / g, b % g);
                if ra == rb {
                    signs.h[(r0 + ra) * (nb - 1) + (c0 + ca.min(cb))]
                } else {
                    signs.v[(r0 + ra.min(rb)) * nb + (c0 + ca)]
                }
            };
            let mut w_local = vec![1i8; g * g];
            let mut h_ok = true;
            if let Some(root) = (0..g * g).find(|&i| in_largest[i]) {
                let mut seen = vec![false; g * g];
                seen[root] = true;
                w_local[root] = opts.root_sign;
                let mut queue = VecDeque::from([root]);
                while let Some(cell) = queue.pop_front() {
                    let (r, c) = (cell / g, cell % g);
                    let mut neighbors = [usize::MAX; 4];
                    let mut nn = 0;
                    if r > 0 {
                        neighbors[nn] = cell - g;
                        nn += 1;
                    }
                    if r + 1 < g {
                        neighbors[nn] = cell + g;
                        nn += 1;
                    }
                    if c > 0 {
                        neighbors[nn] = cell - 1;
                        nn += 1;
                    }
                    if c + 1 < g {
                        neighbors[nn] = cell + 1;
                        nn += 1;
                    }
                    for &idx in &neighbors[..nn] {
                        if in_largest[idx] && !seen[idx] {
                            seen[idx] = true;
                            w_local[idx] = w_local[cell] * pair_sign(cell, idx);
                            queue.push_back(idx);
                        }
                    }
                }
                'verify: for r in 0..g {
                    for c in 0..g {
                        let idx = r * g + c;
                        if !in_largest[idx] {
                            continue;
                        }
                        if c + 1 < g
                            && in_largest[idx + 1]
                            && w_local[idx] * w_local[idx + 1] != pair_sign(idx, idx + 1)
                        {
                            h_ok = false;
                            break 'verify;
                        }
                        if r + 1 < g
                            && in_largest[idx + g]
                            && w_local[idx] * w_local[idx + g] != pair_sign(idx, idx + g)
                        {
                            h_ok = false;
                            break 'verify;
                        }
                    }
                }
            }
            if !h_ok {
                h_failures += 1;
                w_local.iter_mut().for_each(|w| *w = 1);
            }

            for r in 0..g {
                for c in 0..g {
                    let idx = (r0 + r) * nb + (c0 + c);
                    let local = r * g + c;
                    level.w[idx] = w_local[local];
                    level.in_largest_component[idx] = in_largest[local] && h_ok;
                    if !in_largest[local] {
                        excluded += 1;
                    }
                }
            }
        }
    }
    level.incoherent_quartets = incoherent_total;
    level.h_failures = h_failures;
    level.excluded_blocks = excluded;

    // fold this level's W into the per-vertex running product
    for row in 0..side {
        for col in 0..side {
            let v = inst.graph.vertex_index(&[col, row]);
            let b = (row / bs) * nb + (col / bs);
            tree.w_tilde[v] *= level.w[b];
        }
    }
    Ok(())
}

/// Build and synchronize all levels.
pub fn synchronize_all(
    inst: &Instance,
    schedule: &BlockSchedule,
    opts: &SyncOptions,
) -> Result<BlockTree, MultiscaleError> {
    let mut tree = build_block_tree(inst, schedule)?;
    for k in 0..schedule.sides.len() {
        synchronize_level(inst, &mut tree, k, opts)?;
    }
    Ok(tree)
}

/// Outcome of one queried pair.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PairOutcome {
    pub u: usize,
    pub v: usize,
    pub distance: usize,
    pub estimate: i8,
    pub success: Option<bool>,
}

/// Per-level diagnostics carried out of the synchronization pass.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    pub block_side: usize,
    pub incoherent_quartets: usize,
    pub h_failures: usize,
    pub excluded_blocks: usize,
}

#[derive(Clone, Debug)]
pub struct RecoveryResult {
    pub pairs: Vec<PairOutcome>,
    pub success_rate: Option<f64>,
    pub levels: Vec<LevelDiagnostics>,
}

/// Evaluate the synchronized tree on a list of vertex pairs.
pub fn recover_pairs(
    inst: &Instance,
    tree: &BlockTree,
    pairs: &[(usize, usize)],
) -> RecoveryResult {
    let truth: Option<&[i8]> = match &inst.truth {
        ElementArray::Signs(t) => Some(t),
        _ => None,
    };
    let outcomes: Vec<PairOutcome> = pairs
        .iter()
        .map(|&(u, v)| {
            let estimate = tree.pair_estimate(u, v);
            let success = truth.map(|t| estimate == t[u] * t[v]);
            let cu = inst.graph.vertex_coord(u);
            let cv = inst.graph.vertex_coord(v);
            PairOutcome {
                u,
                v,
                distance: inst.graph.graph_distance(&cu, &cv),
                estimate,
                success,
            }
        })
        .collect();
    let success_rate = if !outcomes.is_empty() && outcomes.iter().all(|o| o.success.is_some()) {
        Some(
            outcomes.iter().filter(|o| o.success == Some(true)).count() as f64
                / outcomes.len() as f64,
        )
    } else {
        None
    };
    let levels = tree
        .levels
        .iter()
        .enumerate()
        .map(|(level, s)| LevelDiagnostics {
            level,
            block_side: s.block_side,
            incoherent_quartets: s.incoherent_quartets,
            h_failures: s.h_failures,
            excluded_blocks: s.excluded_blocks,
        })
        .collect();
    RecoveryResult { pairs: outcomes, success_rate, levels }
}

/// Sample vertex pairs with L1 distance in `[dmin, dmax]`, deterministic
/// in the seed.
pub fn sample_pairs(
    inst: &Instance,
    dmin: usize,
    dmax: usize,
    count: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    use rand::Rng;
    let mut r = crate::rng::stream(seed, crate::rng::tag::PAIRS, 0);
    let n = inst.graph.vertex_count();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u = r.gen_range(0..n);
        let v = r.gen_range(0..n);
        let d = inst
            .graph
            .graph_distance(&inst.graph.vertex_coord(u), &inst.graph.vertex_coord(v));
        if d >= dmin && d <= dmax {
            out.push((u, v));
        }
    }
    out
}

/// Truth-side audit of one level.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LevelAudit {
    pub level: usize,
    pub block_side: usize,
    pub adjacent_pairs: usize,
    pub honest_edges: usize,
    pub honest_rate: f64,
    /// Exact binomial prediction `P(Bin(l_k, 1-p) >= ceil(alpha * l_k))`.
    pub predicted_honest_rate: f64,
    pub blocks: usize,
    pub good_blocks: usize,
    pub good_rate: f64,
}

#[derive(Clone, Debug)]
pub struct GoodBlockAudit {
    pub levels: Vec<LevelAudit>,
}

/// Audit the ground-truth-side events: an adjacency is honest when at
/// least a fraction `alpha` of its cross pairs agree with the truth
/// product, and a block is good when at most `b_max` of its sub-blocks
/// are bad and all sub-block adjacencies inside it are honest. Level-0
/// blocks are good by definition.
pub fn audit_good_blocks(
    inst: &Instance,
    schedule: &BlockSchedule,
) -> Result<GoodBlockAudit, MultiscaleError> {
    let (obs, side) = z2_signs(inst)?;
    schedule.validate(side)?;
    let ElementArray::Signs(truth) = &inst.truth else {
        return Err(MultiscaleError::TruthMissing);
    };
    let flip_p = match inst.channel {
        crate::channel::ChannelSpec::Z2Flip { p } => p,
        _ => return Err(MultiscaleError::NotZ2),
    };
    let g = &inst.graph;

    let mut audits: Vec<LevelAudit> = Vec::new();
    let mut prev_good: Vec<bool> = Vec::new();
    let mut prev_honest: Option<(Vec<bool>, Vec<bool>)> = None;

    for (k, &bs) in schedule.sides.iter().enumerate() {
        let nb = side / bs;
        let threshold = (schedule.alpha * bs as f64).ceil() as i64;
        let mut honest_h = vec![false; nb * nb.saturating_sub(1)];
        let mut honest_v = vec![false; nb.saturating_sub(1) * nb];
        let mut honest_count = 0usize;
        for r in 0..nb {
            for c in 0..nb.saturating_sub(1) {
                let col = bs * (c + 1) - 1;
                let mut agree = 0i64;
                for row in bs * r..bs * (r + 1) {
                    let e = g.edge_from(&[col, row], 0).unwrap();
                    let u = g.vertex_index(&[col, row]);
                    let w = g.vertex_index(&[col + 1, row]);
                    if obs[e] == truth[u] * truth[w] {
                        agree += 1;
                    }
                }
                if agree >= threshold {
                    honest_h[r * (nb - 1) + c] = true;
                    honest_count += 1;
                }
            }
        }
        for r in 0..nb.saturating_sub(1) {
            for c in 0..nb {
                let row = bs * (r + 1) - 1;
                let mut agree = 0i64;
                for col in bs * c..bs * (c + 1) {
                    let e = g.edge_from(&[col, row], 1).unwrap();
                    let u = g.vertex_index(&[col, row]);
                    let w = g.vertex_index(&[col, row + 1]);
                    if obs[e] == truth[u] * truth[w] {
                        agree += 1;
                    }
                }
                if agree >= threshold {
                    honest_v[r * nb + c] = true;
                    honest_count += 1;
                }
            }
        }
        let adjacent_pairs = 2 * nb * nb.saturating_sub(1);

        let good: Vec<bool> = if k == 0 {
            vec![true; nb * nb]
        } else {
            let bs_prev = schedule.sides[k - 1];
            let gg = bs / bs_prev;
            let nb_prev = side / bs_prev;
            let (ph, pv) = prev_honest.as_ref().expect("previous level audited");
            (0..nb * nb)
                .map(|b| {
                    let (br, bc) = (b / nb, b % nb);
                    let (r0, c0) = (br * gg, bc * gg);
                    let mut bad_subs = 0usize;
                    for r in 0..gg {
                        for c in 0..gg {
                            if !prev_good[(r0 + r) * nb_prev + (c0 + c)] {
                                bad_subs += 1;
                            }
                        }
                    }
                    if bad_subs > schedule.b_max {
                        return false;
                    }
                    for r in 0..gg {
                        for c in 0..gg.saturating_sub(1) {
                            if !ph[(r0 + r) * (nb_prev - 1) + (c0 + c)] {
                                return false;
                            }
                        }
                    }
                    for r in 0..gg.saturating_sub(1) {
                        for c in 0..gg {
                            if !pv[(r0 + r) * nb_prev + (c0 + c)] {
                                return false;
                            }
                        }
                    }
                    true
                })
                .collect()
        };
        let good_count = good.iter().filter(|&&b| b).count();

        audits.push(LevelAudit {
            level: k,
            block_side: bs,
            adjacent_pairs,
            honest_edges: honest_count,
            honest_rate: honest_count as f64 / adjacent_pairs.max(1) as f64,
            predicted_honest_rate: binomial_tail_geq(
                bs as u64,
                1.0 - flip_p,
                threshold.max(0) as u64,
            ),
            blocks: nb * nb,
            good_blocks: good_count,
            good_rate: good_count as f64 / (nb * nb) as f64,
        });
        prev_good = good;
        prev_honest = Some((honest_h, honest_v));
    }
    Ok(GoodBlockAudit { levels: audits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_instance, ChannelSpec, TruthMode};
    use crate::grid::{Boundary, GridGraph};

    fn z2_instance(side: usize, p: f64, seed: u64) -> Instance {
        let g = GridGraph::build(&[side, side], Boundary::Free).unwrap();
        generate_instance(&g, ChannelSpec::Z2Flip { p }, TruthMode::HaarRandom, seed).unwrap()
    }

    #[test]
    fn tree_structure_counts() {
        let inst = z2_instance(16, 0.0, 1);
        let schedule = BlockSchedule::from_sides(vec![1, 4, 16]);
        let tree = build_block_tree(&inst, &schedule).unwrap();
        assert_eq!(tree.levels[0].w.len(), 256);
        assert_eq!(tree.levels[1].w.len(), 16);
        assert_eq!(tree.levels[2].w.len(), 1);
        // same level-1 block for (0,0) and (3,3)
        assert_eq!(tree.block_of(1, 0, 0), tree.block_of(1, 3, 3));
        assert_ne!(tree.block_of(1, 0, 0), tree.block_of(1, 0, 4));
    }

    #[test]
    fn adjacent_level1_blocks_share_exactly_block_side_pairs() {
        // in a 16^2 grid with l_1 = 4, adjacent level-1 blocks share 4
        // cross pairs; count them straight off the graph
        let inst = z2_instance(16, 0.0, 1);
        let g = &inst.graph;
        let mut cross = 0;
        for row in 0..16 {
            for col in 0..16 {
                if col == 3 && row < 4 {
                    assert!(g.edge_from(&[col, row], 0).is_some());
                }
                if col == 3 {
                    cross += usize::from(row < 4);
                }
            }
        }
        assert_eq!(cross, 4);
    }

    #[test]
    fn schedule_validation() {
        let inst = z2_instance(16, 0.0, 1);
        assert!(matches!(
            build_block_tree(&inst, &BlockSchedule::from_sides(vec![1, 3, 16])),
            Err(MultiscaleError::SidesMustNest { .. })
        ));
        assert!(matches!(
            build_block_tree(&inst, &BlockSchedule::from_sides(vec![1, 5])),
            Err(MultiscaleError::GridNotDivisible { .. })
        ));
        assert!(matches!(
            build_block_tree(&inst, &BlockSchedule::from_sides(vec![2, 4])),
            Err(MultiscaleError::ScheduleMustStartAtOne)
        ));
        let mut bad_alpha = BlockSchedule::from_sides(vec![1, 4]);
        bad_alpha.alpha = 0.4;
        assert!(matches!(
            build_block_tree(&inst, &bad_alpha),
            Err(MultiscaleError::BadAlpha(_))
        ));
    }

    #[test]
    fn noiseless_recovery_is_exact_for_all_pairs() {
        let inst = z2_instance(32, 0.0, 2);
        let schedule = BlockSchedule::from_sides(vec![1, 4, 16]);
        let tree = synchronize_all(&inst, &schedule, &SyncOptions::default()).unwrap();
        for level in &tree.levels {
            assert_eq!(level.incoherent_quartets, 0);
            assert_eq!(level.h_failures, 0);
        }
        let pairs: Vec<(usize, usize)> =
            (0..inst.graph.vertex_count()).map(|v| (0, v)).collect();
        let res = recover_pairs(&inst, &tree, &pairs);
        assert_eq!(res.success_rate, Some(1.0));
    }

    #[test]
    fn same_vertex_pair_estimate_is_plus_one() {
        let inst = z2_instance(16, 0.1, 3);
        let schedule = BlockSchedule::from_sides(vec![1, 4]);
        let tree = synchronize_all(&inst, &schedule, &SyncOptions::default()).unwrap();
        for v in [0usize, 5, 100, 255] {
            assert_eq!(tree.pair_estimate(v, v), 1);
        }
    }

    #[test]
    fn single_interior_flip_leaves_block_pair_signs_intact() {
        // one flipped edge strictly inside a level-1 block: the quartet
        // filter excises its neighborhood, and every level-1 block-pair
        // sign keeps a solid majority, so the W assignment above the flip
        // is untouched and recovery is exact outside the flipped block
        let side = 32usize;
        let mut inst = z2_instance(side, 0.0, 4);
        let schedule = BlockSchedule::from_sides(vec![1, 8]);
        let clean_tree = synchronize_all(&inst, &schedule, &SyncOptions::default()).unwrap();

        let e = inst.graph.edge_between(&[11, 11], &[12, 11]).unwrap().0;
        let ElementArray::Signs(obs) = &mut inst.observations else { panic!() };
        obs[e] = -obs[e];
        let tree = synchronize_all(&inst, &schedule, &SyncOptions::default()).unwrap();

        // the level-1 W assignment is unchanged by the flip
        assert_eq!(clean_tree.levels[1].w, tree.levels[1].w);
        // the only casualties are the handful of excised vertices around
        // the flip; everything outside the flipped 8-block stays exact
        let in_flipped_block =
            |v: usize| -> bool { tree.block_of(1, v / side, v % side) == tree.block_of(1, 11, 11) };
        let pairs: Vec<(usize, usize)> = sample_pairs(&inst, 1, side, 800, 99)
            .into_iter()
            .filter(|&(u, v)| !in_flipped_block(u) && !in_flipped_block(v))
            .collect();
        assert!(pairs.len() > 500);
        let res = recover_pairs(&inst, &tree, &pairs);
        assert_eq!(res.success_rate, Some(1.0));
        // and the excised neighborhood is small
        assert!(tree.levels[0].excluded_blocks <= 8);
    }

    #[test]
    fn desk_scale_far_pair_recovery_at_low_noise() {
        // p = 0.005 sits inside the regime where the desk schedule works
        let mut succ = 0usize;
        let mut tot = 0usize;
        for seed in 0..4u64 {
            let inst = z2_instance(64, 0.005, 50 + seed);
            let schedule = BlockSchedule::from_sides(vec![1, 8, 64]);
            let tree = synchronize_all(&inst, &schedule, &SyncOptions::default()).unwrap();
            let pairs = sample_pairs(&inst, 16, 32, 100, seed);
            let res = recover_pairs(&inst, &tree, &pairs);
            succ += res.pairs.iter().filter(|o| o.success == Some(true)).count();
            tot += res.pairs.len();
        }
        let rate = succ as f64 / tot as f64;
        assert!(rate >= 0.85, "success rate {rate}");
    }

    #[test]
    fn gauge_freedom_root_flip_preserves_pair_estimates() {
        // The two valid assignments of a parent differ by a global sign;
        // pair estimates are invariant under the root choice whenever no
        // block is excluded (excluded blocks pin W = +1, which does not
        // flip, so exclusion-adjacent mixed terms can leak the gauge).
        // Build a case with nontrivial noise but no exclusions: flips
        // placed only on boundaries between level-1 parents, where no
        // within-parent quartet sees them.
        let side = 27usize;
        let g = GridGraph::build(&[side, side], Boundary::Free).unwrap();
        let mut inst =
            generate_instance(&g, ChannelSpec::Z2Flip { p: 0.0 }, TruthMode::HaarRandom, 5)
                .unwrap();
        {
            let ElementArray::Signs(obs) = &mut inst.observations else { panic!() };
            // horizontal edges crossing the col = 2|3 and col = 11|12
            // parent boundaries, one flip per boundary per few rows
            for &(col, row) in &[(2usize, 4usize), (2, 19), (11, 7), (20, 13), (2, 22)] {
                let e = inst.graph.edge_between(&[col, row], &[col + 1, row]).unwrap().0;
                obs[e] = -obs[e];
            }
        }
        let schedule = BlockSchedule::from_sides(vec![1, 3, 9]);
        let plus = synchronize_all(&inst, &schedule, &SyncOptions { root_sign: 1 }).unwrap();
        let minus = synchronize_all(&inst, &schedule, &SyncOptions { root_sign: -1 }).unwrap();
        for level in &plus.levels {
            assert_eq!(level.excluded_blocks, 0, "flips leaked into a quartet");
            assert_eq!(level.h_failures, 0);
        }
        let flipped = plus.levels[0]
            .w
            .iter()
            .zip(&minus.levels[0].w)
            .filter(|(a, b)| a != b)
            .count();
        assert!(flipped > 0, "root flip had no effect at all");
        let pairs = sample_pairs(&inst, 1, 2 * side, 400, 7);
        for &(u, v) in &pairs {
            assert_eq!(plus.pair_estimate(u, v), minus.pair_estimate(u, v));
        }
        // and recovery is still exact despite the boundary flips
        let res = recover_pairs(&inst, &plus, &pairs);
        assert_eq!(res.success_rate, Some(1.0));
    }

    #[test]
    fn assignment_constraints_hold_where_h_holds() {
        let inst = z2_instance(64, 0.02, 6);
        let schedule = BlockSchedule::from_sides(vec![1, 8]);
        let mut tree = build_block_tree(&inst, &schedule).unwrap();
        synchronize_level(&inst, &mut tree, 0, &SyncOptions::default()).unwrap();
        let (obs, side) = super::z2_signs(&inst).unwrap();
        let w_unit = vec![1i8; inst.graph.vertex_count()];
        let signs = block_pair_signs(&inst, obs, &w_unit, side, 1);
        let level = &tree.levels[0];
        let nb = level.blocks_per_side;
        for r in 0..nb {
            for c in 0..nb {
                let idx = r * nb + c;
                if !level.in_largest_component[idx] {
                    continue;
                }
                // same parent (no 8-boundary crossing) and both accepted
                if c + 1 < nb && (c + 1) % 8 != 0 && level.in_largest_component[idx + 1] {
                    assert_eq!(
                        level.w[idx] * level.w[idx + 1],
                        signs.h[r * (nb - 1) + c],
                        "violated horizontal constraint at ({r},{c})"
                    );
                }
                if r + 1 < nb && (r + 1) % 8 != 0 && level.in_largest_component[idx + nb] {
                    assert_eq!(
                        level.w[idx] * level.w[idx + nb],
                        signs.v[r * nb + c],
                        "violated vertical constraint at ({r},{c})"
                    );
                }
            }
        }
    }

    #[test]
    fn audit_noiseless_everything_honest_and_good() {
        let inst = z2_instance(32, 0.0, 7);
        let audit =
            audit_good_blocks(&inst, &BlockSchedule::from_sides(vec![1, 4, 16])).unwrap();
        for level in &audit.levels {
            assert_eq!(level.honest_edges, level.adjacent_pairs);
            assert_eq!(level.good_blocks, level.blocks);
        }
    }

    #[test]
    fn audit_honest_rate_tracks_binomial_oracle() {
        // pooled over instances, the empirical honest-edge rate at level 1
        // matches P(Bin(8, 0.98) >= 8) within 3 sigma
        let schedule = BlockSchedule::from_sides(vec![1, 8]);
        let mut honest = 0usize;
        let mut total = 0usize;
        let mut predicted = 0.0;
        for seed in 0..12u64 {
            let inst = z2_instance(64, 0.02, 300 + seed);
            let audit = audit_good_blocks(&inst, &schedule).unwrap();
            let l1 = &audit.levels[1];
            honest += l1.honest_edges;
            total += l1.adjacent_pairs;
            predicted = l1.predicted_honest_rate;
        }
        let rate = honest as f64 / total as f64;
        let sigma = (predicted * (1.0 - predicted) / total as f64).sqrt();
        assert!(
            (rate - predicted).abs() <= 3.0 * sigma,
            "rate {rate} vs predicted {predicted} (sigma {sigma})"
        );
    }

    #[test]
    fn audit_honesty_rate_monotone_in_p() {
        let schedule = BlockSchedule::from_sides(vec![1, 8]);
        let mut rates = Vec::new();
        for &p in &[0.01, 0.05, 0.12, 0.25] {
            let mut honest = 0usize;
            let mut total = 0usize;
            for seed in 0..6u64 {
                let inst = z2_instance(64, p, 400 + seed);
                let audit = audit_good_blocks(&inst, &schedule).unwrap();
                honest += audit.levels[1].honest_edges;
                total += audit.levels[1].adjacent_pairs;
            }
            rates.push(honest as f64 / total as f64);
        }
        for w in rates.windows(2) {
            assert!(w[0] >= w[1] - 1e-9, "honesty rate not monotone: {rates:?}");
        }
    }

    #[test]
    fn audit_requires_truth_and_z2() {
        let g = GridGraph::build(&[8, 8], Boundary::Free).unwrap();
        let inst = generate_instance(
            &g,
            ChannelSpec::OrthGaussian { m: 2, sigma: 0.1, project: true },
            TruthMode::HaarRandom,
            1,
        )
        .unwrap();
        assert!(matches!(
            audit_good_blocks(&inst, &BlockSchedule::from_sides(vec![1, 4])),
            Err(MultiscaleError::NotZ2)
        ));
    }
}
