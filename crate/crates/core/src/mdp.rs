//! Finite MDP abstraction of the closed-loop dynamics.
//!
//! For every pair of state cell `q` and controller partition `P` the one-step
//! reachable set is over-approximated by interval evaluation of the nominal
//! model with the input ranging over the interval image of the affine laws in
//! `P`, inflated by the disturbance bound `D`. Cells overlapping that box form
//! `Next(q, P)`; transition probabilities integrate the Gaussian posterior at
//! the cell/partition centers over the target cells and are zero elsewhere.
//! Row mass that falls outside `Next` or outside the domain is deliberately
//! not renormalized: the deficit acts as absorbing failure mass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dynamics::{wrap_state, DisturbanceBound, NominalModel};
use crate::error::{Error, Result};
use crate::geom::AxisBox;
use crate::gp::ErrorModel;
use crate::partition::{gains_apply_interval, CellId, ControllerGrid, PartId, StatePartition};

/// Axis-aligned over-approximation of the one-step reachable set.
#[derive(Debug, Clone, PartialEq)]
pub struct PostBox(pub AxisBox);

/// Interval over-approximation of `{f(x, K(x)) | x ∈ cell, K ∈ pbox} ⊕ D`.
///
/// Periodic axes are left unwrapped; cell matching accounts for the period.
pub fn post_overapprox(
    cell: &AxisBox,
    pbox: &AxisBox,
    model: &NominalModel,
    d: &DisturbanceBound,
) -> PostBox {
    let ubox = gains_apply_interval(pbox, model.input_dim(), model.state_dim(), cell);
    let image = model.eval_interval(cell, &ubox);
    PostBox(image.minkowski_sum(d.box_()))
}

/// Abstract states overlapping the post box (closed intersection), plus a flag
/// set when part of the box escapes the domain along a non-periodic axis.
pub fn next_states(part: &StatePartition, post: &PostBox) -> (Vec<CellId>, bool) {
    let next = part.cells_intersecting(&post.0);
    let mut leaves = false;
    for axis in 0..part.dim() {
        if part.periods()[axis].is_some() {
            continue;
        }
        if post.0.lo()[axis] < part.domain().lo()[axis]
            || post.0.hi()[axis] > part.domain().hi()[axis]
        {
            leaves = true;
        }
    }
    (next, leaves)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Probability that a product of independent Gaussians lands in a box.
///
/// A zero-variance dimension contributes 1 when the mean lies in the closed
/// interval and 0 otherwise.
pub fn gaussian_box_prob(mean: &[f64], variance: &[f64], cell: &AxisBox) -> Result<f64> {
    if mean.len() != cell.dim() || variance.len() != cell.dim() {
        return Err(Error::DimensionMismatch {
            expected: cell.dim(),
            got: mean.len(),
        });
    }
    if variance.iter().any(|&v| v < 0.0) {
        return Err(Error::Config("negative variance".into()));
    }
    Ok(gaussian_box_prob_wrapped(
        mean,
        variance,
        cell,
        &vec![None; cell.dim()],
    ))
}

/// As [`gaussian_box_prob`] but with periodic axes integrated as a wrapped
/// Gaussian approximated by the three shifts `{-T, 0, +T}` of the target
/// interval. With per-step dispersion far below the period the truncation
/// error is negligible and errs on the conservative side.
pub fn gaussian_box_prob_wrapped(
    mean: &[f64],
    variance: &[f64],
    cell: &AxisBox,
    periods: &[Option<f64>],
) -> f64 {
    gaussian_box_prob_impl(mean, variance, cell, periods, false)
}

/// Zero-variance axes use half-open membership `[lo, hi)` so that a point
/// mass sitting exactly on a shared grid face is credited to exactly one cell
/// and row masses stay sub-stochastic.
pub(crate) fn row_cell_prob(
    mean: &[f64],
    variance: &[f64],
    cell: &AxisBox,
    periods: &[Option<f64>],
) -> f64 {
    gaussian_box_prob_impl(mean, variance, cell, periods, true)
}

fn gaussian_box_prob_impl(
    mean: &[f64],
    variance: &[f64],
    cell: &AxisBox,
    periods: &[Option<f64>],
    half_open: bool,
) -> f64 {
    let mut prob = 1.0;
    for axis in 0..cell.dim() {
        let (lo, hi) = (cell.lo()[axis], cell.hi()[axis]);
        let (m, v) = (mean[axis], variance[axis]);
        let shifts: &[f64] = match periods[axis] {
            Some(p) => &[-p, 0.0, p],
            None => &[0.0],
        };
        let mut axis_prob = 0.0;
        for &s in shifts {
            if v == 0.0 {
                let upper_ok = if half_open { m < hi + s } else { m <= hi + s };
                if m >= lo + s && upper_ok {
                    axis_prob += 1.0;
                }
            } else {
                let sd = v.sqrt();
                axis_prob += normal_cdf((hi + s - m) / sd) - normal_cdf((lo + s - m) / sd);
            }
        }
        prob *= axis_prob.min(1.0);
        if prob == 0.0 {
            return 0.0;
        }
    }
    prob
}

/// One MDP row: the allowed next cells for a `(q, P)` pair and the positive
/// transition probabilities supported inside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpRow {
    /// `Next(q, P)`, ascending.
    pub next: Vec<CellId>,
    /// `(q′, T̂(q′|q, P))` for the strictly positive entries, ascending by id.
    pub probs: Vec<(CellId, f64)>,
    /// The post box escaped the domain along a non-periodic axis.
    pub leaves_domain: bool,
}

impl MdpRow {
    pub fn mass(&self) -> f64 {
        self.probs.iter().map(|(_, p)| p).sum()
    }

    pub fn prob(&self, q: CellId) -> f64 {
        self.probs
            .iter()
            .find(|(id, _)| *id == q)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }
}

/// The finite MDP: states are grid cells, actions are controller partitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbstractMdp {
    pub n_states: usize,
    pub n_actions: usize,
    rows: Vec<MdpRow>,
}

impl AbstractMdp {
    /// Assemble from explicit rows, indexed `q * n_actions + p`. Validates the
    /// kernel-support and sub-stochasticity invariants.
    pub fn from_rows(n_states: usize, n_actions: usize, rows: Vec<MdpRow>) -> Result<Self> {
        if rows.len() != n_states * n_actions {
            return Err(Error::Config(format!(
                "expected {} rows, got {}",
                n_states * n_actions,
                rows.len()
            )));
        }
        for row in &rows {
            let mut mass = 0.0;
            for (id, p) in &row.probs {
                if id.0 >= n_states {
                    return Err(Error::Config(format!("state id {} out of range", id.0)));
                }
                if !(*p > 0.0) || *p > 1.0 {
                    return Err(Error::Config(format!("probability {p} out of range")));
                }
                if !row.next.contains(id) {
                    return Err(Error::Config(format!(
                        "support outside Next: state {}",
                        id.0
                    )));
                }
                mass += p;
            }
            if mass > 1.0 + 1e-12 {
                return Err(Error::Config(format!("row mass {mass} exceeds 1")));
            }
            if row.next.windows(2).any(|w| w[0] >= w[1])
                || row.probs.windows(2).any(|w| w[0].0 >= w[1].0)
            {
                return Err(Error::Config("row entries must be ascending".into()));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            rows,
        })
    }

    pub fn row(&self, q: CellId, p: PartId) -> &MdpRow {
        &self.rows[q.0 * self.n_actions + p.0]
    }

    pub fn prob(&self, q: CellId, p: PartId, q_next: CellId) -> f64 {
        self.row(q, p).prob(q_next)
    }

    pub fn rows(&self) -> &[MdpRow] {
        &self.rows
    }

    /// Number of transitions with strictly positive probability.
    pub fn transition_count(&self) -> usize {
        self.rows.iter().map(|r| r.probs.len()).sum()
    }

    /// Iterate `(q, p)` pairs in row order.
    pub fn pairs(&self) -> impl Iterator<Item = (CellId, PartId)> + '_ {
        (0..self.n_states).flat_map(move |q| {
            (0..self.n_actions).map(move |p| (CellId(q), PartId(p)))
        })
    }
}

/// Build the abstraction for every `(q, P)` pair.
///
/// The per-pair computation is pure, so rows are computed in parallel and
/// merged by index; the result is deterministic for a fixed configuration.
pub fn build_mdp(
    part: &StatePartition,
    grid: &ControllerGrid,
    model: &NominalModel,
    err: &ErrorModel,
    d: &DisturbanceBound,
) -> AbstractMdp {
    debug_assert_eq!(part.periods(), model.periods().as_slice());
    let n_states = part.n_cells();
    let n_actions = grid.n_parts();
    let periods = part.periods().to_vec();
    let rows: Vec<MdpRow> = (0..n_states * n_actions)
        .into_par_iter()
        .map(|flat| {
            let q = CellId(flat / n_actions);
            let p = PartId(flat % n_actions);
            let cell = &part.cell(q).cell;
            let pbox = &grid.part(p).cell;
            let post = post_overapprox(cell, pbox, model, d);
            let (next, leaves_domain) = next_states(part, &post);

            let z = part.center(q);
            let kappa = grid.center(p);
            let u = kappa.apply(&z);
            let mut mean = err.predict_mean_raw(model, &z, &u);
            wrap_state(&mut mean, &periods);
            let mut zin = z.clone();
            zin.extend_from_slice(&u);
            let variance = err.posterior_z(&zin).variance;

            let mut probs = Vec::new();
            for &qn in &next {
                let pr = row_cell_prob(&mean, &variance, &part.cell(qn).cell, &periods);
                if pr > 0.0 {
                    probs.push((qn, pr));
                }
            }
            MdpRow {
                next,
                probs,
                leaves_domain,
            }
        })
        .collect();
    AbstractMdp {
        n_states,
        n_actions,
        rows,
    }
}
