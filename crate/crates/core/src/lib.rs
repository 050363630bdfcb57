//! # gridsync
//!
//! A simulation and estimation laboratory for group synchronization on
//! d-dimensional grid graphs. Per-vertex elements of a compact group
//! (Z2, U(1) or O(m)) are observed through noisy pairwise differences on
//! the edges of a grid, and the crate provides:
//!
//! - path-product estimators over random increasing lattice paths with
//!   reflection completion and per-axis composition (`paths`, `estimator`),
//! - a hierarchical block synchronization algorithm for Z2 on the 2D grid
//!   (`multiscale`),
//! - heat-bath Gibbs sampling of the Bayes posterior on the Nishimori line
//!   for the random-bond Ising model (`gibbs`),
//! - exact least-squares analysis of the translation toy model, bond
//!   percolation probes and spin-wave non-recovery bounds (`bounds`),
//! - channel models with calibration of the signal parameter lambda
//!   (`channel`),
//! - a reproducible experiment layer with seeded sweeps and checksummed
//!   instance files (`experiment`), driven by the `gridsync` CLI.
//!
//! The guide under `book/` walks through the concepts chapter by chapter;
//! its code snippets compile and run as doctests of this crate.

pub mod bounds;
pub mod channel;
pub mod estimator;
pub mod experiment;
pub mod gibbs;
pub mod grid;
pub mod group;
pub mod multiscale;
pub mod paths;
pub mod rng;
pub mod stats;

#[cfg(doctest)]
mod book;

pub use channel::{ChannelSpec, DensitySpec, Instance, TruthMode};
pub use grid::{Boundary, GridGraph};
pub use group::{GroupElement, GroupVariant, RawMatrix};
