//! Finite d-dimensional grid and torus graphs with a canonical positive
//! edge orientation and dense vertex/edge indices.
//!
//! Every edge points in the positive direction of exactly one axis:
//! `(x, x + e_j)` (wrapping on a torus). Consumers that walk an edge
//! backwards invert the attached group observation; the graph itself never
//! stores both orientations.
//!
//! Vertex indices are row-major with axis 0 fastest, so sweeping vertices
//! in index order walks axis 0 contiguously. Edges are enumerated
//! axis-major, then in vertex order of their source.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Free,
    Torus,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("grid needs at least one axis")]
    NoAxes,
    #[error("axis {axis} has extent {extent}, need >= 2")]
    ExtentTooSmall { axis: usize, extent: usize },
    #[error("coordinate {coord:?} outside grid extents {extents:?}")]
    CoordOutOfRange { coord: Vec<usize>, extents: Vec<usize> },
}

/// Immutable grid/torus graph. Cheap to clone conceptually but typically
/// shared by reference; all queries are `&self`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGraph {
    extents: Vec<usize>,
    boundary: Boundary,
    strides: Vec<usize>,
    /// Edge-id offset of each axis block, plus a final total.
    axis_offsets: Vec<usize>,
    n_vertices: usize,
}

impl GridGraph {
    pub fn build(extents: &[usize], boundary: Boundary) -> Result<Self, GridError> {
        if extents.is_empty() {
            return Err(GridError::NoAxes);
        }
        for (axis, &extent) in extents.iter().enumerate() {
            if extent < 2 {
                return Err(GridError::ExtentTooSmall { axis, extent });
            }
        }
        let d = extents.len();
        let mut strides = vec![1usize; d];
        for j in 1..d {
            strides[j] = strides[j - 1] * extents[j - 1];
        }
        let n_vertices: usize = extents.iter().product();
        let mut axis_offsets = Vec::with_capacity(d + 1);
        let mut acc = 0usize;
        for j in 0..d {
            axis_offsets.push(acc);
            acc += match boundary {
                Boundary::Torus => n_vertices,
                Boundary::Free => n_vertices / extents[j] * (extents[j] - 1),
            };
        }
        axis_offsets.push(acc);
        Ok(Self {
            extents: extents.to_vec(),
            boundary,
            strides,
            axis_offsets,
            n_vertices,
        })
    }

    pub fn dims(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn vertex_count(&self) -> usize {
        self.n_vertices
    }

    pub fn edge_count(&self) -> usize {
        *self.axis_offsets.last().unwrap()
    }

    pub fn contains(&self, coord: &[usize]) -> bool {
        coord.len() == self.dims() && coord.iter().zip(&self.extents).all(|(&c, &l)| c < l)
    }

    pub fn vertex_index(&self, coord: &[usize]) -> usize {
        debug_assert!(self.contains(coord), "coordinate out of range");
        coord
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| c * s)
            .sum()
    }

    pub fn checked_vertex_index(&self, coord: &[usize]) -> Result<usize, GridError> {
        if !self.contains(coord) {
            return Err(GridError::CoordOutOfRange {
                coord: coord.to_vec(),
                extents: self.extents.clone(),
            });
        }
        Ok(self.vertex_index(coord))
    }

    pub fn vertex_coord(&self, mut index: usize) -> Vec<usize> {
        debug_assert!(index < self.n_vertices);
        let mut coord = vec![0usize; self.dims()];
        for j in 0..self.dims() {
            coord[j] = index % self.extents[j];
            index /= self.extents[j];
        }
        coord
    }

    /// Edge leaving `from` in the +axis direction, if it exists.
    pub fn edge_from(&self, from: &[usize], axis: usize) -> Option<usize> {
        debug_assert!(axis < self.dims());
        match self.boundary {
            Boundary::Torus => {
                Some(self.axis_offsets[axis] + self.vertex_index(from))
            }
            Boundary::Free => {
                if from[axis] + 1 >= self.extents[axis] {
                    return None;
                }
                // index of `from` in the reduced grid where this axis has
                // extent L_j - 1
                let mut idx = 0usize;
                let mut stride = 1usize;
                for j in 0..self.dims() {
                    idx += from[j] * stride;
                    stride *= if j == axis {
                        self.extents[j] - 1
                    } else {
                        self.extents[j]
                    };
                }
                Some(self.axis_offsets[axis] + idx)
            }
        }
    }

    pub fn edge_axis(&self, edge: usize) -> usize {
        debug_assert!(edge < self.edge_count());
        // axis blocks are small in number; linear scan is fine
        (0..self.dims())
            .find(|&j| edge < self.axis_offsets[j + 1])
            .expect("edge id within range")
    }

    /// Source coordinate and axis of an edge (the canonical orientation is
    /// source -> source + e_axis).
    pub fn edge_source(&self, edge: usize) -> (Vec<usize>, usize) {
        let axis = self.edge_axis(edge);
        let mut idx = edge - self.axis_offsets[axis];
        let mut coord = vec![0usize; self.dims()];
        for j in 0..self.dims() {
            let extent = match (self.boundary, j == axis) {
                (Boundary::Free, true) => self.extents[j] - 1,
                _ => self.extents[j],
            };
            coord[j] = idx % extent;
            idx /= extent;
        }
        (coord, axis)
    }

    /// Endpoint vertex indices of an edge in canonical orientation.
    pub fn edge_endpoints(&self, edge: usize) -> (usize, usize) {
        let (mut coord, axis) = self.edge_source(edge);
        let from = self.vertex_index(&coord);
        coord[axis] = (coord[axis] + 1) % self.extents[axis];
        (from, self.vertex_index(&coord))
    }

    /// Oriented edge between two coordinates: `(edge id, forward?)`, or
    /// `None` when the vertices are not adjacent.
    pub fn edge_between(&self, x: &[usize], y: &[usize]) -> Option<(usize, bool)> {
        debug_assert!(self.contains(x) && self.contains(y));
        for axis in 0..self.dims() {
            let same_elsewhere = (0..self.dims()).all(|j| j == axis || x[j] == y[j]);
            if !same_elsewhere {
                continue;
            }
            let l = self.extents[axis];
            let fwd = (x[axis] + 1) % l == y[axis]
                && (self.boundary == Boundary::Torus || x[axis] + 1 == y[axis]);
            if fwd {
                if let Some(e) = self.edge_from(x, axis) {
                    return Some((e, true));
                }
            }
            let rev = (y[axis] + 1) % l == x[axis]
                && (self.boundary == Boundary::Torus || y[axis] + 1 == x[axis]);
            if rev {
                if let Some(e) = self.edge_from(y, axis) {
                    return Some((e, false));
                }
            }
        }
        None
    }

    /// L1 grid distance, wrapping on a torus.
    pub fn graph_distance(&self, x: &[usize], y: &[usize]) -> usize {
        debug_assert!(self.contains(x) && self.contains(y));
        x.iter()
            .zip(y)
            .zip(&self.extents)
            .map(|((&a, &b), &l)| {
                let d = a.abs_diff(b);
                match self.boundary {
                    Boundary::Free => d,
                    Boundary::Torus => d.min(l - d),
                }
            })
            .sum()
    }

    /// Step from a vertex along `axis` in direction `dir` (+1/-1).
    /// Returns `(edge id, traversed forward?, next vertex coord)`.
    pub fn step(&self, from: &[usize], axis: usize, dir: i8) -> Option<(usize, bool, Vec<usize>)> {
        debug_assert!(dir == 1 || dir == -1);
        let l = self.extents[axis];
        let mut next = from.to_vec();
        if dir == 1 {
            match self.boundary {
                Boundary::Free if from[axis] + 1 >= l => return None,
                Boundary::Free => next[axis] += 1,
                Boundary::Torus => next[axis] = (from[axis] + 1) % l,
            }
            let e = self.edge_from(from, axis)?;
            Some((e, true, next))
        } else {
            match self.boundary {
                Boundary::Free if from[axis] == 0 => return None,
                Boundary::Free => next[axis] -= 1,
                Boundary::Torus => next[axis] = (from[axis] + l - 1) % l,
            }
            let e = self.edge_from(&next, axis)?;
            Some((e, false, next))
        }
    }

    /// Incident edges of a vertex as `(edge id, points away from v?)`.
    pub fn incident_edges(&self, v: usize) -> Vec<(usize, bool)> {
        let coord = self.vertex_coord(v);
        let mut out = Vec::with_capacity(2 * self.dims());
        for axis in 0..self.dims() {
            if let Some((e, fwd, _)) = self.step(&coord, axis, 1) {
                out.push((e, fwd));
            }
            if let Some((e, fwd, _)) = self.step(&coord, axis, -1) {
                out.push((e, fwd));
            }
        }
        out
    }
}
