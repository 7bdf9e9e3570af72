//! Uniform grids over the state space and the controller-parameter space.
//!
//! Both grids are products of per-axis uniform subdivisions. Cells are closed
//! boxes whose interiors are pairwise disjoint; membership on shared faces is
//! resolved deterministically to the cell with the lowest id, so the `abs`
//! maps are total on the domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{AxisBox, Interval};

/// Index of an abstract state (a state-grid cell).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId(pub usize);

/// Index of a controller partition (a controller-grid cell).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartId(pub usize);

/// One abstract state: a grid cell of the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractState {
    pub id: CellId,
    #[serde(rename = "box")]
    pub cell: AxisBox,
}

impl AbstractState {
    pub fn center(&self) -> Vec<f64> {
        self.cell.center()
    }
}

/// Product grid over the state domain. Axis 0 varies fastest in the id order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatePartition {
    domain: AxisBox,
    counts: Vec<usize>,
    periods: Vec<Option<f64>>,
    cells: Vec<AbstractState>,
}

/// Build the state grid with the given per-axis cell counts.
pub fn build_state_grid(
    domain: AxisBox,
    counts: &[usize],
    periods: Vec<Option<f64>>,
) -> Result<StatePartition> {
    if counts.len() != domain.dim() || periods.len() != domain.dim() {
        return Err(Error::DimensionMismatch {
            expected: domain.dim(),
            got: counts.len(),
        });
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::DegenerateGrid("cell counts must be >= 1".into()));
    }
    if domain.widths().iter().any(|&w| w <= 0.0) {
        return Err(Error::DegenerateGrid("domain has zero measure".into()));
    }
    let n_cells: usize = counts.iter().product();
    let mut cells = Vec::with_capacity(n_cells);
    for id in 0..n_cells {
        let idx = unflatten(id, counts);
        cells.push(AbstractState {
            id: CellId(id),
            cell: cell_box(&domain, counts, &idx),
        });
    }
    Ok(StatePartition {
        domain,
        counts: counts.to_vec(),
        periods,
        cells,
    })
}

impl StatePartition {
    pub fn domain(&self) -> &AxisBox {
        &self.domain
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn periods(&self) -> &[Option<f64>] {
        &self.periods
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[AbstractState] {
        &self.cells
    }

    pub fn cell(&self, id: CellId) -> &AbstractState {
        &self.cells[id.0]
    }

    pub fn center(&self, id: CellId) -> Vec<f64> {
        self.cells[id.0].center()
    }

    /// Cell containing `x`; exact boundary points resolve to the lower id.
    pub fn abs_x(&self, x: &[f64]) -> Result<CellId> {
        if x.len() != self.dim() || !self.domain.contains(x) {
            return Err(Error::OutOfDomain { coords: x.to_vec() });
        }
        let mut idx = Vec::with_capacity(self.dim());
        for axis in 0..self.dim() {
            idx.push(axis_index(
                x[axis],
                self.domain.lo()[axis],
                self.domain.hi()[axis],
                self.counts[axis],
            ));
        }
        Ok(CellId(flatten(&idx, &self.counts)))
    }

    /// Largest Euclidean diameter over all cells.
    pub fn delta_q(&self) -> f64 {
        self.cells
            .iter()
            .map(|c| c.cell.diameter())
            .fold(0.0, f64::max)
    }

    /// Cell ids whose boxes intersect `target` (closed intersection), with
    /// periodic axes matched modulo their period.
    pub fn cells_intersecting(&self, target: &AxisBox) -> Vec<CellId> {
        let mut axis_hits: Vec<Vec<usize>> = Vec::with_capacity(self.dim());
        for axis in 0..self.dim() {
            let w = (self.domain.hi()[axis] - self.domain.lo()[axis]) / self.counts[axis] as f64;
            let mut hits = Vec::new();
            let t = target.interval(axis);
            let shifts: &[f64] = match self.periods[axis] {
                Some(p) => &[-p, 0.0, p],
                None => &[0.0],
            };
            for i in 0..self.counts[axis] {
                let lo = self.domain.lo()[axis] + i as f64 * w;
                let hi = if i + 1 == self.counts[axis] {
                    self.domain.hi()[axis]
                } else {
                    self.domain.lo()[axis] + (i + 1) as f64 * w
                };
                if shifts
                    .iter()
                    .any(|s| lo + s <= t.hi && t.lo <= hi + s)
                {
                    hits.push(i);
                }
            }
            axis_hits.push(hits);
        }
        let mut out = Vec::new();
        cartesian(&axis_hits, &mut vec![0; self.dim()], 0, &mut |idx| {
            out.push(CellId(flatten(idx, &self.counts)));
        });
        out.sort_unstable();
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "domain": self.domain,
            "counts": self.counts,
            "cells": self.cells.iter().map(|c| serde_json::json!({
                "id": c.id.0,
                "lo": c.cell.lo(),
                "hi": c.cell.hi(),
                "center": c.center(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Affine state feedback `u = K x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineGains {
    /// `m × n` gain matrix.
    pub k: Vec<Vec<f64>>,
    /// Offset of length `m`.
    pub b: Vec<f64>,
}

impl AffineGains {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.k
            .iter()
            .zip(&self.b)
            .map(|(row, &b)| row.iter().zip(x).map(|(&k, &v)| k * v).sum::<f64>() + b)
            .collect()
    }

    /// Row-major flattening of the combined `m × (n+1)` matrix `[K | b]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.b.len() * (self.k[0].len() + 1));
        for (row, &b) in self.k.iter().zip(&self.b) {
            out.extend_from_slice(row);
            out.push(b);
        }
        out
    }

    pub fn from_flat(flat: &[f64], m: usize, n: usize) -> Self {
        assert_eq!(flat.len(), m * (n + 1));
        let mut k = Vec::with_capacity(m);
        let mut b = Vec::with_capacity(m);
        for r in 0..m {
            let row = &flat[r * (n + 1)..(r + 1) * (n + 1)];
            k.push(row[..n].to_vec());
            b.push(row[n]);
        }
        Self { k, b }
    }
}

/// One controller partition: a box of flattened `[K | b]` parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerPartition {
    pub id: PartId,
    #[serde(rename = "box")]
    pub cell: AxisBox,
}

impl ControllerPartition {
    pub fn center_gains(&self, m: usize, n: usize) -> AffineGains {
        AffineGains::from_flat(&self.cell.center(), m, n)
    }
}

/// Product grid over the global controller-parameter box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerGrid {
    global: AxisBox,
    counts: Vec<usize>,
    parts: Vec<ControllerPartition>,
    input_dim: usize,
    state_dim: usize,
}

/// Build the controller grid; the global box lives in `R^{m×(n+1)}` flattened
/// row-major as `[K | b]`.
pub fn build_controller_grid(
    global: AxisBox,
    counts: &[usize],
    input_dim: usize,
    state_dim: usize,
) -> Result<ControllerGrid> {
    if global.dim() != input_dim * (state_dim + 1) {
        return Err(Error::DimensionMismatch {
            expected: input_dim * (state_dim + 1),
            got: global.dim(),
        });
    }
    if counts.len() != global.dim() {
        return Err(Error::DimensionMismatch {
            expected: global.dim(),
            got: counts.len(),
        });
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::DegenerateGrid("cell counts must be >= 1".into()));
    }
    let n_parts: usize = counts.iter().product();
    let mut parts = Vec::with_capacity(n_parts);
    for id in 0..n_parts {
        let idx = unflatten(id, counts);
        parts.push(ControllerPartition {
            id: PartId(id),
            cell: cell_box(&global, counts, &idx),
        });
    }
    Ok(ControllerGrid {
        global,
        counts: counts.to_vec(),
        parts,
        input_dim,
        state_dim,
    })
}

impl ControllerGrid {
    pub fn global(&self) -> &AxisBox {
        &self.global
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn parts(&self) -> &[ControllerPartition] {
        &self.parts
    }

    pub fn part(&self, id: PartId) -> &ControllerPartition {
        &self.parts[id.0]
    }

    pub fn center(&self, id: PartId) -> AffineGains {
        self.parts[id.0].center_gains(self.input_dim, self.state_dim)
    }

    /// Partition containing the flattened parameter vector.
    pub fn abs_p_flat(&self, flat: &[f64]) -> Result<PartId> {
        if flat.len() != self.global.dim() || !self.global.contains(flat) {
            return Err(Error::OutOfDomain {
                coords: flat.to_vec(),
            });
        }
        let mut idx = Vec::with_capacity(self.global.dim());
        for axis in 0..self.global.dim() {
            idx.push(axis_index(
                flat[axis],
                self.global.lo()[axis],
                self.global.hi()[axis],
                self.counts[axis],
            ));
        }
        Ok(PartId(flatten(&idx, &self.counts)))
    }

    pub fn abs_p(&self, gains: &AffineGains) -> Result<PartId> {
        self.abs_p_flat(&gains.flatten())
    }

    /// Largest per-entry width over all partitions (the max-norm diameter).
    pub fn delta_p(&self) -> f64 {
        self.parts
            .iter()
            .map(|p| p.cell.max_entry_width())
            .fold(0.0, f64::max)
    }
}

/// Interval image `{K(x) | K ∈ pbox, x ∈ xbox}` of a box of affine laws over a
/// box of states; one interval per input dimension.
pub fn gains_apply_interval(
    pbox: &AxisBox,
    input_dim: usize,
    state_dim: usize,
    xbox: &AxisBox,
) -> AxisBox {
    let mut rows = Vec::with_capacity(input_dim);
    for r in 0..input_dim {
        let base = r * (state_dim + 1);
        let mut acc = pbox.interval(base + state_dim); // offset entry
        for i in 0..state_dim {
            acc = acc.add(pbox.interval(base + i).mul(xbox.interval(i)));
        }
        rows.push(acc);
    }
    AxisBox::from_intervals(&rows)
}

/// Interval image at a fixed state point.
pub fn gains_apply_interval_at(
    pbox: &AxisBox,
    input_dim: usize,
    state_dim: usize,
    x: &[f64],
) -> Vec<Interval> {
    let mut rows = Vec::with_capacity(input_dim);
    for r in 0..input_dim {
        let base = r * (state_dim + 1);
        let mut acc = pbox.interval(base + state_dim);
        for i in 0..state_dim {
            acc = acc.add(pbox.interval(base + i).scale(x[i]));
        }
        rows.push(acc);
    }
    rows
}

fn axis_index(v: f64, lo: f64, hi: f64, count: usize) -> usize {
    let w = (hi - lo) / count as f64;
    let mut i = ((v - lo) / w).floor() as isize;
    i = i.clamp(0, count as isize - 1);
    let mut i = i as usize;
    // Exact face points belong to the lower-id cell.
    if i > 0 && v <= lo + i as f64 * w {
        i -= 1;
    }
    i
}

fn cell_box(domain: &AxisBox, counts: &[usize], idx: &[usize]) -> AxisBox {
    let mut lo = Vec::with_capacity(domain.dim());
    let mut hi = Vec::with_capacity(domain.dim());
    for axis in 0..domain.dim() {
        let w = (domain.hi()[axis] - domain.lo()[axis]) / counts[axis] as f64;
        lo.push(domain.lo()[axis] + idx[axis] as f64 * w);
        hi.push(if idx[axis] + 1 == counts[axis] {
            domain.hi()[axis]
        } else {
            domain.lo()[axis] + (idx[axis] + 1) as f64 * w
        });
    }
    AxisBox::new(lo, hi).expect("grid cells are well formed")
}

fn flatten(idx: &[usize], counts: &[usize]) -> usize {
    let mut id = 0;
    for axis in (0..idx.len()).rev() {
        id = id * counts[axis] + idx[axis];
    }
    id
}

fn unflatten(mut id: usize, counts: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(counts.len());
    for &c in counts {
        idx.push(id % c);
        id /= c;
    }
    idx
}

fn cartesian(axes: &[Vec<usize>], cur: &mut Vec<usize>, depth: usize, f: &mut impl FnMut(&[usize])) {
    if depth == axes.len() {
        f(cur);
        return;
    }
    for &v in &axes[depth] {
        cur[depth] = v;
        cartesian(axes, cur, depth + 1, f);
    }
}
