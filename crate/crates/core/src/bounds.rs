//! Constants and computable form of the liveness-optimality gap, plus
//! fine-grid value oracles for validating it on small instances.
//!
//! The gap bound needs, per safe cell: the Lipschitz constant of its local
//! policies (exact, from region gains), and the integrated Lipschitz
//! constants of the Gaussian transition kernel with respect to state and
//! input. The latter are bounded by enveloping the density's gradient with
//! interval bounds on the posterior mean, variance, and their sensitivities,
//! then integrated over the safe region by a midpoint rule at a documented
//! resolution. All quantities are upper bounds, so the final inequality is
//! sound even where the envelopes are loose.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::dynamics::NominalModel;
use crate::error::{Error, Result};
use crate::geom::{AxisBox, Interval};
use crate::gp::ErrorModel;
use crate::partition::{CellId, ControllerGrid, StatePartition};
use crate::policy::PolicyStore;
use crate::relu::{nn_to_cpwa_over, ShallowReluNet};
use crate::select::Selection;

/// Exact Lipschitz constant of a policy over its cell: the largest spectral
/// norm among its region gains.
pub fn nn_lipschitz(net: &ShallowReluNet, q: &AxisBox) -> Result<f64> {
    Ok(nn_to_cpwa_over(net, q)?.lipschitz())
}

/// Per-cell constants of the gap bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellBound {
    pub cell: CellId,
    /// Lipschitz constant of the local policies leaving this cell.
    pub l_i: f64,
    /// Integrated state-Lipschitz constant of the kernel.
    pub lambda_i: f64,
    /// Integrated input-Lipschitz constant of the kernel.
    pub gamma_i: f64,
}

/// Everything the gap formula consumes, all computed as upper bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub n_safe: usize,
    /// Largest Euclidean diameter of a safe cell.
    pub delta_q: f64,
    /// Largest per-entry width of a controller partition.
    pub delta_p: f64,
    /// Upper bound on `sup ‖x‖` over the safe region.
    pub l_x: f64,
    /// Upper bound on `sup ‖K‖` over the whole controller box.
    pub l_p: f64,
    pub per_cell: Vec<CellBound>,
    /// Variance floor substituted where the posterior variance vanishes.
    pub variance_floor: f64,
    /// Per-axis subdivisions of each safe cell in the quadrature.
    pub quadrature_subdiv: usize,
}

/// Midpoint-quadrature envelope of the kernel's Lipschitz constants at one
/// cell: `(Λ_i, Γ_i)`.
#[allow(clippy::too_many_arguments)]
pub fn kernel_lipschitz(
    q_i: CellId,
    part: &StatePartition,
    safe_cells: &BTreeSet<CellId>,
    model: &NominalModel,
    err: &ErrorModel,
    ubox: &AxisBox,
    subdiv: usize,
    variance_floor: f64,
) -> (f64, f64) {
    let n = model.state_dim();
    let m = model.input_dim();
    let cell = &part.cell(q_i).cell;
    let periods = model.periods();

    // Interval data over (x, u) ∈ q_i × U.
    let mut zlo = cell.lo().to_vec();
    zlo.extend_from_slice(ubox.lo());
    let mut zhi = cell.hi().to_vec();
    zhi.extend_from_slice(ubox.hi());
    let zbox = AxisBox::new(zlo, zhi).expect("product box is well formed");

    let f_iv = model.eval_interval(cell, ubox);
    let mu_iv = err.mean_interval(&zbox);
    let mean_iv: Vec<Interval> = (0..n).map(|d| f_iv.interval(d).add(mu_iv[d])).collect();

    let var_iv = err.variance_interval(&zbox);
    let sigma_iv: Vec<Interval> = var_iv
        .iter()
        .map(|v| {
            Interval::new(
                v.lo.max(variance_floor).sqrt(),
                v.hi.max(variance_floor).sqrt(),
            )
        })
        .collect();

    let jx = model.jacobian_x_interval(cell, ubox);
    let ju = model.jacobian_u_interval(cell, ubox);
    let mu_grad = err.mean_grad_bound(&zbox);
    let var_grad = err.variance_grad_bound(&zbox);

    // |∂m_d/∂x_j|, |∂m_d/∂u_l| and the corresponding σ sensitivities.
    let mut m_x = vec![vec![0.0; n]; n];
    let mut m_u = vec![vec![0.0; m]; n];
    let mut s_x = vec![vec![0.0; n]; n];
    let mut s_u = vec![vec![0.0; m]; n];
    for d in 0..n {
        // If the floor dominates everywhere the deviation is constant.
        let floored = var_iv[d].hi <= variance_floor;
        let two_sigma_lo = 2.0 * sigma_iv[d].lo;
        for j in 0..n {
            m_x[d][j] = jx[d][j].abs_max() + mu_grad[d][j];
            s_x[d][j] = if floored {
                0.0
            } else {
                var_grad[d][j] / two_sigma_lo
            };
        }
        for l in 0..m {
            m_u[d][l] = ju[d][l].abs_max() + mu_grad[d][n + l];
            s_u[d][l] = if floored {
                0.0
            } else {
                var_grad[d][n + l] / two_sigma_lo
            };
        }
    }

    // Midpoint quadrature of sup |∇t| over the safe region.
    let mut lambda = 0.0;
    let mut gamma = 0.0;
    for &qy in safe_cells {
        let ybox = &part.cell(qy).cell;
        let widths: Vec<f64> = ybox.widths().iter().map(|w| w / subdiv as f64).collect();
        let vol: f64 = widths.iter().product();
        let nodes: usize = subdiv.pow(n as u32);
        for node in 0..nodes {
            let mut idx = node;
            let mut y = Vec::with_capacity(n);
            for dim in 0..n {
                let i = idx % subdiv;
                idx /= subdiv;
                y.push(ybox.lo()[dim] + (i as f64 + 0.5) * widths[dim]);
            }
            let (ly, gy) = gradient_envelope(
                &y, &mean_iv, &sigma_iv, &m_x, &m_u, &s_x, &s_u, &periods,
            );
            lambda += ly * vol;
            gamma += gy * vol;
        }
    }
    (lambda, gamma)
}

/// Upper bounds on `‖∇_x t(y|·)‖` and `‖∇_u t(y|·)‖` at one density argument.
#[allow(clippy::too_many_arguments)]
fn gradient_envelope(
    y: &[f64],
    mean_iv: &[Interval],
    sigma_iv: &[Interval],
    m_x: &[Vec<f64>],
    m_u: &[Vec<f64>],
    s_x: &[Vec<f64>],
    s_u: &[Vec<f64>],
    periods: &[Option<f64>],
) -> (f64, f64) {
    let n = y.len();
    let m = m_u.first().map_or(0, |r| r.len());
    let inv_sqrt_tau = 1.0 / (std::f64::consts::TAU).sqrt();
    // Per-dimension factor caps: F_d ≥ sup (1/σ)φ(r), plus the φ-envelope
    // family needed for the gradient term. Wrapped axes sum three shifts.
    let mut f_cap = vec![0.0; n];
    let mut phi_max = vec![0.0; n];
    let mut dphi_max = vec![0.0; n];
    let mut r2phi_max = vec![0.0; n];
    for d in 0..n {
        let shifts: &[f64] = match periods[d] {
            Some(p) => &[-p, 0.0, p],
            None => &[0.0],
        };
        for &s in shifts {
            let num = Interval::new(y[d] + s - mean_iv[d].hi, y[d] + s - mean_iv[d].lo);
            let r_abs_lo = num.abs_min() / sigma_iv[d].hi;
            let r_abs_hi = num.abs_max() / sigma_iv[d].lo;
            let p0 = envelope_max(r_abs_lo, r_abs_hi, 0) * inv_sqrt_tau;
            phi_max[d] += p0;
            dphi_max[d] += envelope_max(r_abs_lo, r_abs_hi, 1) * inv_sqrt_tau;
            r2phi_max[d] += envelope_max(r_abs_lo, r_abs_hi, 2) * inv_sqrt_tau;
            f_cap[d] += p0 / sigma_iv[d].lo;
        }
    }

    let term = |d: usize, sens_m: f64, sens_s: f64| -> f64 {
        let s_lo = sigma_iv[d].lo;
        (dphi_max[d] * sens_m + (r2phi_max[d] + phi_max[d]) * sens_s) / (s_lo * s_lo)
    };
    let mut lambda_sq = 0.0;
    for j in 0..n {
        let mut bj = 0.0;
        for d in 0..n {
            let mut rest = 1.0;
            for e in 0..n {
                if e != d {
                    rest *= f_cap[e];
                }
            }
            bj += term(d, m_x[d][j], s_x[d][j]) * rest;
        }
        lambda_sq += bj * bj;
    }
    let mut gamma_sq = 0.0;
    for l in 0..m {
        let mut bl = 0.0;
        for d in 0..n {
            let mut rest = 1.0;
            for e in 0..n {
                if e != d {
                    rest *= f_cap[e];
                }
            }
            bl += term(d, m_u[d][l], s_u[d][l]) * rest;
        }
        gamma_sq += bl * bl;
    }
    (lambda_sq.sqrt(), gamma_sq.sqrt())
}

/// Maximum of `t^p · exp(-t²/2)` for `t` in `[lo, hi]` (absolute values of a
/// standardized residual); the unnormalized φ-envelope family.
fn envelope_max(lo: f64, hi: f64, p: u32) -> f64 {
    let h = |t: f64| t.powi(p as i32) * (-0.5 * t * t).exp();
    let peak = (p as f64).sqrt();
    let mut best = h(lo).max(h(hi));
    if lo <= peak && peak <= hi {
        best = best.max(h(peak));
    }
    best
}

/// Upper bound on `sup ‖x‖` over the union of the given cells.
fn sup_state_norm(part: &StatePartition, cells: &BTreeSet<CellId>) -> f64 {
    let mut best = 0.0f64;
    for &q in cells {
        for corner in part.cell(q).cell.corners() {
            let norm = corner.iter().map(|v| v * v).sum::<f64>().sqrt();
            best = best.max(norm);
        }
    }
    best
}

/// Upper bound on `sup ‖K‖` over the controller box: the Frobenius norm of
/// the entry-wise worst case (exact for single-row boxes).
fn sup_gain_norm(grid: &ControllerGrid) -> f64 {
    let b = grid.global();
    (0..b.dim())
        .map(|i| {
            let v = b.lo()[i].abs().max(b.hi()[i].abs());
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Compute every constant of the gap bound for one selection.
#[allow(clippy::too_many_arguments)]
pub fn compute_constants(
    part: &StatePartition,
    grid: &ControllerGrid,
    selection: &Selection,
    store: &PolicyStore,
    model: &NominalModel,
    err: &ErrorModel,
    ubox: &AxisBox,
    subdiv: usize,
    variance_floor: f64,
) -> Result<BoundConstants> {
    let safe = &selection.safe.safe;
    let delta_q = safe
        .iter()
        .map(|&q| part.cell(q).cell.diameter())
        .fold(0.0, f64::max);
    // Fallback policy Lipschitz bound: any projected net realizes gains
    // inside the controller box, so its slope never exceeds this.
    let global_gain_cap = {
        let b = grid.global();
        let n = grid.state_dim();
        (0..grid.input_dim())
            .map(|r| {
                (0..n)
                    .map(|i| {
                        let idx = r * (n + 1) + i;
                        let v = b.lo()[idx].abs().max(b.hi()[idx].abs());
                        v * v
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    };

    let cells: Vec<CellId> = safe.iter().cloned().collect();
    let per_cell: Vec<CellBound> = cells
        .par_iter()
        .map(|&q| {
            let qbox = &part.cell(q).cell;
            let mut l_i = 0.0f64;
            let mut any = false;
            for policy in store.iter().filter(|p| p.key.q == q) {
                any = true;
                let lip = nn_to_cpwa_over(&policy.net, qbox)
                    .map(|c| c.lipschitz())
                    .unwrap_or(global_gain_cap);
                l_i = l_i.max(lip);
            }
            if !any {
                l_i = global_gain_cap;
            }
            let (lambda_i, gamma_i) = kernel_lipschitz(
                q,
                part,
                safe,
                model,
                err,
                ubox,
                subdiv,
                variance_floor,
            );
            CellBound {
                cell: q,
                l_i,
                lambda_i,
                gamma_i,
            }
        })
        .collect();

    Ok(BoundConstants {
        n_safe: safe.len(),
        delta_q,
        delta_p: grid.delta_p(),
        l_x: sup_state_norm(part, safe),
        l_p: sup_gain_norm(grid),
        per_cell,
        variance_floor,
        quadrature_subdiv: subdiv,
    })
}

/// The evaluated gap: `bound(k) = (H−k)(Δ_policy + Δ_optimal)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityGap {
    pub delta_nn: f64,
    pub delta_star: f64,
    pub horizon: usize,
}

impl OptimalityGap {
    pub fn bound(&self, k: usize) -> f64 {
        (self.horizon.saturating_sub(k)) as f64 * (self.delta_nn + self.delta_star)
    }
}

/// Evaluate the gap formula from computed constants.
pub fn theorem2_bound(
    constants: &BoundConstants,
    input_dim: usize,
    state_dim: usize,
    horizon: usize,
) -> OptimalityGap {
    let s = (input_dim as f64 * (state_dim as f64 + 1.0)).sqrt();
    let mut delta_nn = 0.0f64;
    let mut delta_star = 0.0f64;
    for c in &constants.per_cell {
        delta_nn = delta_nn.max(
            c.lambda_i * constants.delta_q
                + c.gamma_i * c.l_i * constants.delta_q
                + s * constants.l_x * c.gamma_i * constants.delta_p,
        );
        delta_star = delta_star.max(
            c.lambda_i * constants.delta_q
                + c.gamma_i * constants.l_p * constants.delta_q
                + 2.0 * s * constants.l_x * c.gamma_i * constants.delta_p,
        );
    }
    OptimalityGap {
        delta_nn,
        delta_star,
        horizon,
    }
}

/// Resolution of the fine-grid value oracles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    /// Per-axis subdivisions of each abstract cell.
    pub refine: usize,
    /// Control levels per partition and input dimension (at least 10).
    pub u_levels: usize,
    pub variance_floor: f64,
}

/// Fine-grid approximations of the optimal and composed-controller reach
/// probabilities at step 0.
#[derive(Debug, Clone)]
pub struct OracleValues {
    pub centers: Vec<Vec<f64>>,
    pub boxes: Vec<AxisBox>,
    pub parents: Vec<CellId>,
    pub v_star: Vec<f64>,
    pub v_nn: Vec<f64>,
}

/// Brute-force backward recursions on a fine grid restricted to the safe
/// region. The optimal recursion maximizes over a discretization of the safe
/// control set (always including the composed controller's own action, so the
/// composed value never exceeds the optimal one).
pub fn oracle_values(
    part: &StatePartition,
    grid: &ControllerGrid,
    selection: &Selection,
    store: &PolicyStore,
    model: &NominalModel,
    err: &ErrorModel,
    spec: &OracleSpec,
) -> Result<OracleValues> {
    let n = model.state_dim();
    let m = model.input_dim();
    if n > 2 {
        return Err(Error::OracleInfeasible(format!(
            "state dimension {n} exceeds 2"
        )));
    }
    if m > 1 {
        return Err(Error::OracleInfeasible(format!(
            "input dimension {m} exceeds 1"
        )));
    }
    if spec.u_levels < 10 {
        return Err(Error::OracleInfeasible(
            "need at least 10 control levels per partition".into(),
        ));
    }
    if part.periods().iter().any(|p| p.is_some()) {
        return Err(Error::OracleInfeasible(
            "periodic axes are not supported by the fine-grid oracle".into(),
        ));
    }
    let safe = &selection.safe.safe;
    let fine_per_cell = spec.refine.pow(n as u32);
    let fine_count = safe.len() * fine_per_cell;
    if fine_count > 10_000 {
        return Err(Error::OracleInfeasible(format!(
            "{fine_count} fine cells exceed the 10000 cap"
        )));
    }

    // Global fine grid: the abstract grid refined per axis. Fine axis edges
    // are uniform over the domain.
    let counts = part.counts();
    let domain = part.domain();
    let fine_counts: Vec<usize> = counts.iter().map(|&c| c * spec.refine).collect();
    let axis_edges: Vec<Vec<f64>> = (0..n)
        .map(|axis| {
            let c = fine_counts[axis];
            let w = (domain.hi()[axis] - domain.lo()[axis]) / c as f64;
            (0..=c).map(|i| domain.lo()[axis] + i as f64 * w).collect()
        })
        .collect();

    // Active fine cells: those whose parent abstract cell is safe.
    let mut centers = Vec::with_capacity(fine_count);
    let mut boxes = Vec::with_capacity(fine_count);
    let mut parents = Vec::with_capacity(fine_count);
    let mut fine_index = std::collections::HashMap::new();
    for &q in safe {
        let cell = &part.cell(q).cell;
        let widths: Vec<f64> = cell.widths().iter().map(|w| w / spec.refine as f64).collect();
        for sub in 0..fine_per_cell {
            let mut idx = sub;
            let mut lo = Vec::with_capacity(n);
            let mut hi = Vec::with_capacity(n);
            let mut center = Vec::with_capacity(n);
            let mut global = Vec::with_capacity(n);
            for axis in 0..n {
                let i = idx % spec.refine;
                idx /= spec.refine;
                let l = cell.lo()[axis] + i as f64 * widths[axis];
                lo.push(l);
                hi.push(l + widths[axis]);
                center.push(l + 0.5 * widths[axis]);
                // Global fine index along this axis.
                let gi = ((l - domain.lo()[axis])
                    / ((domain.hi()[axis] - domain.lo()[axis]) / fine_counts[axis] as f64))
                    .round() as usize;
                global.push(gi.min(fine_counts[axis] - 1));
            }
            fine_index.insert(global.clone(), centers.len());
            centers.push(center);
            boxes.push(AxisBox::new(lo, hi)?);
            parents.push(q);
        }
    }

    let goal_flag: Vec<bool> = centers
        .iter()
        .map(|c| selection.task.goal.contains(c))
        .collect();

    // Candidate controls per fine cell: a uniform grid over each safe
    // partition's control interval at the cell center, plus the composed
    // controller's action where defined (time-specific nets resolved below).
    let horizon = selection.task.horizon;
    let mut v_star: Vec<f64> = goal_flag.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let mut v_nn = v_star.clone();

    // Mass of N(mean, var) over a fine cell, restricted to active cells,
    // computed from per-axis CDF tables.
    let axis_cdf = |mean: f64, sd: f64, edges: &[f64]| -> Vec<f64> {
        edges
            .iter()
            .map(|&e| 0.5 * statrs::function::erf::erfc(-((e - mean) / sd) / std::f64::consts::SQRT_2))
            .collect()
    };

    for k in (0..horizon).rev() {
        let step = |prev: &Vec<f64>, u: f64, x: &[f64]| -> f64 {
            let mut z = x.to_vec();
            z.push(u);
            let mut mean = err.predict_mean_raw(model, x, &[u]);
            let var: Vec<f64> = err
                .posterior_z(&z)
                .variance
                .iter()
                .map(|&v| v.max(spec.variance_floor))
                .collect();
            let tables: Vec<Vec<f64>> = (0..n)
                .map(|axis| axis_cdf(mean[axis], var[axis].sqrt(), &axis_edges[axis]))
                .collect();
            let _ = &mut mean;
            let mut acc = 0.0;
            for (i, global) in fine_index.iter() {
                let mut mass = 1.0;
                for axis in 0..n {
                    let gi = i[axis];
                    mass *= tables[axis][gi + 1] - tables[axis][gi];
                    if mass == 0.0 {
                        break;
                    }
                }
                acc += mass * prev[*global];
            }
            acc
        };

        let v_star_prev = v_star.clone();
        let v_nn_prev = v_nn.clone();
        let results: Vec<(f64, f64)> = (0..centers.len())
            .into_par_iter()
            .map(|i| {
                if goal_flag[i] {
                    return (1.0, 1.0);
                }
                let x = &centers[i];
                let q = parents[i];
                // Composed controller action at (k, x).
                let nn_action = selection
                    .map
                    .get(k, q)
                    .and_then(|key| store.get(key))
                    .map(|p| p.net.forward(x)[0]);
                let nn_value = nn_action.map(|u| step(&v_nn_prev, u, x)).unwrap_or(0.0);

                let mut best = 0.0f64;
                for &p in &selection.safe.p_safe[&q] {
                    let iv = crate::partition::gains_apply_interval_at(
                        &grid.part(p).cell,
                        1,
                        n,
                        x,
                    )[0];
                    for level in 0..spec.u_levels {
                        let t = level as f64 / (spec.u_levels - 1) as f64;
                        let u = iv.lo + t * (iv.hi - iv.lo);
                        best = best.max(step(&v_star_prev, u, x));
                    }
                }
                if let Some(u) = nn_action {
                    best = best.max(step(&v_star_prev, u, x));
                }
                (best, nn_value)
            })
            .collect();
        for (i, (vs, vn)) in results.into_iter().enumerate() {
            v_star[i] = vs;
            v_nn[i] = vn;
        }
    }

    Ok(OracleValues {
        centers,
        boxes,
        parents,
        v_star,
        v_nn,
    })
}
