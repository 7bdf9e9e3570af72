//! Shallow ReLU policies, their exact piecewise-affine form over a box, and
//! the weight projection that pins every realized affine piece inside a
//! controller partition.
//!
//! A one-hidden-layer net is affine on each region of the hyperplane
//! arrangement cut by its hidden neurons. Over a box `q` the feasible
//! activation patterns are enumerated exactly: neurons whose pre-activation
//! interval does not cross zero are fixed, the rest are branched and each
//! candidate pattern is kept when its region (the sign polytope intersected
//! with `q`) has a nonempty vertex set. Region gains follow in closed form,
//! which makes containment in a parameter box exactly checkable — the
//! property the safety argument stands on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::AxisBox;
use crate::partition::AffineGains;

/// Cap on branched activation patterns.
const MAX_PATTERNS: u64 = 1 << 20;
/// Neurons whose pre-activation interval comes closer than this to zero are
/// branched rather than fixed, so grazing regions are never silently dropped.
const SIGN_MARGIN: f64 = 1e-9;
/// Slack when testing vertices against region constraints.
const FEAS_TOL: f64 = 1e-9;

/// One-hidden-layer ReLU network with an affine output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowReluNet {
    /// `h × n`
    pub w1: Vec<Vec<f64>>,
    /// `h`
    pub b1: Vec<f64>,
    /// `m × h`
    pub w2: Vec<Vec<f64>>,
    /// `m`
    pub b2: Vec<f64>,
}

impl ShallowReluNet {
    pub fn zeros(in_dim: usize, out_dim: usize, hidden: usize) -> Self {
        Self {
            w1: vec![vec![0.0; in_dim]; hidden],
            b1: vec![0.0; hidden],
            w2: vec![vec![0.0; hidden]; out_dim],
            b2: vec![0.0; out_dim],
        }
    }

    pub fn random<R: rand::Rng>(
        in_dim: usize,
        out_dim: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(in_dim, out_dim, hidden);
        for row in net.w1.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        for v in net.b1.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
        for row in net.w2.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        for v in net.b2.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
        net
    }

    pub fn in_dim(&self) -> usize {
        self.w1.first().map_or(0, |r| r.len())
    }

    pub fn out_dim(&self) -> usize {
        self.b2.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.b1.len()
    }

    /// Hidden pre-activations `W¹x + b¹`.
    pub fn preactivations(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .iter()
            .zip(&self.b1)
            .map(|(row, &b)| row.iter().zip(x).map(|(&w, &v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self.preactivations(x).iter().map(|&a| a.max(0.0)).collect();
        self.w2
            .iter()
            .zip(&self.b2)
            .map(|(row, &b)| row.iter().zip(&hidden).map(|(&w, &h)| w * h).sum::<f64>() + b)
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.w1.iter().flatten().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().flatten().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }

    /// Gains of the affine piece selected by an activation mask.
    fn piece_gains(&self, active: &[bool]) -> AffineGains {
        let (n, m) = (self.in_dim(), self.out_dim());
        let mut k = vec![vec![0.0; n]; m];
        let mut b = self.b2.clone();
        for (j, &on) in active.iter().enumerate() {
            if !on {
                continue;
            }
            for r in 0..m {
                let w2 = self.w2[r][j];
                for (i, ki) in k[r].iter_mut().enumerate() {
                    *ki += w2 * self.w1[j][i];
                }
                b[r] += w2 * self.b1[j];
            }
        }
        AffineGains { k, b }
    }
}

/// One affine piece of the network over the box.
#[derive(Debug, Clone)]
pub struct AffinePiece {
    /// Hidden activation mask.
    pub active: Vec<bool>,
    pub gains: AffineGains,
    /// A point of the region (centroid of its vertex set).
    pub witness: Vec<f64>,
}

/// Exact continuous piecewise-affine form of a net over a box.
#[derive(Debug, Clone)]
pub struct CpwaFunction {
    pub over: AxisBox,
    pub pieces: Vec<AffinePiece>,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
}

impl CpwaFunction {
    /// Evaluate through the piece whose sign pattern matches `x`.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.piece_for(x).gains.apply(x)
    }

    /// The piece containing `x`; pre-activations that are exactly zero match
    /// either side.
    pub fn piece_for(&self, x: &[f64]) -> &AffinePiece {
        let acts: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, &b)| row.iter().zip(x).map(|(&w, &v)| w * v).sum::<f64>() + b)
            .collect();
        self.pieces
            .iter()
            .find(|p| {
                p.active
                    .iter()
                    .zip(&acts)
                    .all(|(&on, &a)| if on { a >= 0.0 } else { a <= 0.0 })
            })
            .unwrap_or(&self.pieces[0])
    }

    /// Worst componentwise overflow of any piece's `[K | b]` outside `pbox`
    /// (0 when every piece is contained).
    pub fn containment_violation(&self, pbox: &AxisBox) -> f64 {
        let mut worst = 0.0f64;
        for piece in &self.pieces {
            let flat = piece.gains.flatten();
            for (i, &v) in flat.iter().enumerate() {
                worst = worst.max(pbox.lo()[i] - v).max(v - pbox.hi()[i]);
            }
        }
        worst
    }

    /// Largest spectral norm of a region gain: the Lipschitz constant of the
    /// network over the box.
    pub fn lipschitz(&self) -> f64 {
        self.pieces
            .iter()
            .map(|p| spectral_norm(&p.gains.k))
            .fold(0.0, f64::max)
    }
}

/// Induced 2-norm of a small dense matrix.
pub fn spectral_norm(rows: &[Vec<f64>]) -> f64 {
    let m = rows.len();
    let n = rows[0].len();
    let mat = DMatrix::from_fn(m, n, |r, c| rows[r][c]);
    mat.singular_values().max()
}

/// Enumerate the affine pieces of `net` over the box `q`.
pub fn nn_to_cpwa_over(net: &ShallowReluNet, q: &AxisBox) -> Result<CpwaFunction> {
    let n = net.in_dim();
    let h = net.hidden_dim();
    debug_assert_eq!(q.dim(), n);

    #[derive(Clone, Copy, PartialEq)]
    enum Sign {
        On,
        Off,
        Branch,
    }

    let mut signs = Vec::with_capacity(h);
    let mut branched = Vec::new();
    for j in 0..h {
        let mut iv = crate::geom::Interval::point(net.b1[j]);
        for i in 0..n {
            iv = iv.add(q.interval(i).scale(net.w1[j][i]));
        }
        if iv.lo >= SIGN_MARGIN {
            signs.push(Sign::On);
        } else if iv.hi <= -SIGN_MARGIN {
            signs.push(Sign::Off);
        } else {
            signs.push(Sign::Branch);
            branched.push(j);
        }
    }

    let count = 1u64.checked_shl(branched.len() as u32).unwrap_or(u64::MAX);
    if count > MAX_PATTERNS {
        return Err(Error::PatternBlowup {
            count,
            cap: MAX_PATTERNS,
        });
    }

    // Box faces as linear constraints g·x ≤ c.
    let mut box_cons: Vec<(Vec<f64>, f64)> = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut g = vec![0.0; n];
        g[i] = 1.0;
        box_cons.push((g.clone(), q.hi()[i]));
        g[i] = -1.0;
        box_cons.push((g, -q.lo()[i]));
    }

    let mut pieces = Vec::new();
    for mask in 0..count {
        let mut active: Vec<bool> = signs.iter().map(|s| matches!(s, Sign::On)).collect();
        for (bit, &j) in branched.iter().enumerate() {
            active[j] = mask >> bit & 1 == 1;
        }

        let witness = if branched.is_empty() {
            Some(q.center())
        } else {
            let mut cons = box_cons.clone();
            for &j in &branched {
                // active: w·x + b ≥ 0  ⇔  -w·x ≤ b
                let (g, c): (Vec<f64>, f64) = if active[j] {
                    (net.w1[j].iter().map(|v| -v).collect(), net.b1[j])
                } else {
                    (net.w1[j].clone(), -net.b1[j])
                };
                cons.push((g, c));
            }
            region_witness(&cons, n)
        };

        if let Some(witness) = witness {
            pieces.push(AffinePiece {
                gains: net.piece_gains(&active),
                active,
                witness,
            });
        }
    }

    Ok(CpwaFunction {
        over: q.clone(),
        pieces,
        w1: net.w1.clone(),
        b1: net.b1.clone(),
    })
}

/// Centroid of the vertex set of `{x | g_k·x ≤ c_k}` when the polytope is
/// nonempty, `None` otherwise.
fn region_witness(cons: &[(Vec<f64>, f64)], n: usize) -> Option<Vec<f64>> {
    let mut vertices: Vec<Vec<f64>> = Vec::new();
    let mut combo: Vec<usize> = (0..n).collect();
    loop {
        if let Some(v) = solve_active_set(cons, &combo, n) {
            let feasible = cons.iter().all(|(g, c)| {
                let lhs: f64 = g.iter().zip(&v).map(|(&a, &b)| a * b).sum();
                lhs <= c + FEAS_TOL * (1.0 + c.abs())
            });
            if feasible && !vertices.iter().any(|w| close(w, &v)) {
                vertices.push(v);
            }
        }
        if !next_combination(&mut combo, cons.len(), n) {
            break;
        }
    }
    if vertices.is_empty() {
        return None;
    }
    let mut centroid = vec![0.0; n];
    for v in &vertices {
        for (c, &x) in centroid.iter_mut().zip(v) {
            *c += x;
        }
    }
    for c in centroid.iter_mut() {
        *c /= vertices.len() as f64;
    }
    Some(centroid)
}

fn solve_active_set(cons: &[(Vec<f64>, f64)], combo: &[usize], n: usize) -> Option<Vec<f64>> {
    let a = DMatrix::from_fn(n, n, |r, c| cons[combo[r]].0[c]);
    let b = DVector::from_fn(n, |r, _| cons[combo[r]].1);
    let lu = a.lu();
    let x = lu.solve(&b)?;
    if x.iter().all(|v| v.is_finite() && v.abs() < 1e12) {
        Some(x.iter().cloned().collect())
    } else {
        None
    }
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(&x, &y)| (x - y).abs() <= 1e-9)
}

fn next_combination(combo: &mut [usize], total: usize, k: usize) -> bool {
    if k > total {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < total - (k - i) {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Which projection path produced the returned network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjStage {
    /// Every piece already inside the partition; weights untouched.
    AlreadyCompliant,
    /// Single-region net moved exactly onto the componentwise clamp of its
    /// gains by a minimal-norm output-layer update.
    SingleRegionClamp,
    /// Uniform per-row rescale and offset shift of the output layer fitted
    /// the realized gain ranges into the partition.
    OutputAffine,
    /// Constrained least-squares correction of the output layer.
    ConstrainedLsq,
    /// Hidden layer rebuilt as an always-active basis realizing the clamped
    /// affine fit of the original net.
    AffineRebuild,
}

/// Containment certificate attached to every stored policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCert {
    pub stage: ProjStage,
    pub violation_before: f64,
    pub violation_after: f64,
}

/// Project `net` so that every affine piece it realizes over `q` has its
/// `[K | b]` inside `pbox`, verified by exact region enumeration. Stages are
/// tried from least to most invasive and the first one whose result verifies
/// is returned.
pub fn project(
    net: &ShallowReluNet,
    pbox: &AxisBox,
    q: &AxisBox,
) -> Result<(ShallowReluNet, ProjectionCert)> {
    let cpwa = nn_to_cpwa_over(net, q)?;
    let violation_before = cpwa.containment_violation(pbox);
    if violation_before <= 0.0 {
        return Ok((
            net.clone(),
            ProjectionCert {
                stage: ProjStage::AlreadyCompliant,
                violation_before,
                violation_after: violation_before,
            },
        ));
    }

    let mut candidates: Vec<(ProjStage, Option<ShallowReluNet>)> = Vec::new();
    if cpwa.pieces.len() == 1 {
        candidates.push((
            ProjStage::SingleRegionClamp,
            clamp_single_region(net, &cpwa, pbox),
        ));
    }
    candidates.push((
        ProjStage::OutputAffine,
        output_affine_correction(net, &cpwa, pbox),
    ));
    candidates.push((ProjStage::ConstrainedLsq, constrained_lsq(net, &cpwa, pbox)));

    for (stage, candidate) in candidates {
        let Some(out) = candidate else { continue };
        if !out.all_finite() {
            continue;
        }
        let check = nn_to_cpwa_over(&out, q)?;
        let violation_after = check.containment_violation(pbox);
        if violation_after <= 0.0 {
            return Ok((
                out,
                ProjectionCert {
                    stage,
                    violation_before,
                    violation_after,
                },
            ));
        }
    }

    // Last resort: rebuild as an always-active affine net at the clamped fit.
    let out = affine_rebuild(net, &cpwa, pbox, q)?;
    let check = nn_to_cpwa_over(&out, q)?;
    let violation_after = check.containment_violation(pbox);
    if violation_after > 0.0 {
        return Err(Error::ProjectionInfeasible(format!(
            "rebuilt net still violates the partition by {violation_after:e}"
        )));
    }
    Ok((
        out,
        ProjectionCert {
            stage: ProjStage::AffineRebuild,
            violation_before,
            violation_after,
        },
    ))
}

fn clamp_flat(flat: &[f64], pbox: &AxisBox, inset: f64) -> Vec<f64> {
    flat.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (lo, hi) = (pbox.lo()[i], pbox.hi()[i]);
            let margin = inset.min((hi - lo) / 4.0);
            v.clamp(lo + margin, hi - margin)
        })
        .collect::<Vec<f64>>()
}

/// Row of the linear map from output-layer weights `(w2_row, b2_row)` to one
/// flattened `[K | b]` entry of a piece.
fn gain_row(net: &ShallowReluNet, active: &[bool], col: usize) -> Vec<f64> {
    let h = net.hidden_dim();
    let n = net.in_dim();
    let mut row = vec![0.0; h + 1];
    for j in 0..h {
        if !active[j] {
            continue;
        }
        row[j] = if col < n { net.w1[j][col] } else { net.b1[j] };
    }
    if col == n {
        row[h] = 1.0;
    }
    row
}

fn apply_output_rows(net: &ShallowReluNet, rows: &[Vec<f64>]) -> ShallowReluNet {
    let mut out = net.clone();
    let h = net.hidden_dim();
    for (r, w) in rows.iter().enumerate() {
        out.w2[r] = w[..h].to_vec();
        out.b2[r] = w[h];
    }
    out
}

fn clamp_single_region(
    net: &ShallowReluNet,
    cpwa: &CpwaFunction,
    pbox: &AxisBox,
) -> Option<ShallowReluNet> {
    let piece = &cpwa.pieces[0];
    let n = net.in_dim();
    let h = net.hidden_dim();
    let target = clamp_flat(&piece.gains.flatten(), pbox, 0.0);
    let mut rows = Vec::with_capacity(net.out_dim());
    for r in 0..net.out_dim() {
        // Minimal-norm solve of A·w = t from the current output row.
        let a = DMatrix::from_fn(n + 1, h + 1, |row, colw| {
            gain_row(net, &piece.active, row)[colw]
        });
        let t = DVector::from_fn(n + 1, |row, _| target[r * (n + 1) + row]);
        let mut w0 = net.w2[r].clone();
        w0.push(net.b2[r]);
        let w0 = DVector::from_vec(w0);
        let resid = &t - &a * &w0;
        let svd = a.clone().svd(true, true);
        let delta = svd.solve(&resid, 1e-12).ok()?;
        let w = &w0 + &delta;
        if ((&a * &w) - &t).amax() > 1e-9 {
            return None;
        }
        rows.push(w.iter().cloned().collect());
    }
    Some(apply_output_rows(net, &rows))
}

fn output_affine_correction(
    net: &ShallowReluNet,
    cpwa: &CpwaFunction,
    pbox: &AxisBox,
) -> Option<ShallowReluNet> {
    let n = net.in_dim();
    let mut out = net.clone();
    for r in 0..net.out_dim() {
        // Realized range per flattened entry across pieces.
        let mut lo = vec![f64::INFINITY; n + 1];
        let mut hi = vec![f64::NEG_INFINITY; n + 1];
        for piece in &cpwa.pieces {
            let flat = piece.gains.flatten();
            for c in 0..=n {
                lo[c] = lo[c].min(flat[r * (n + 1) + c]);
                hi[c] = hi[c].max(flat[r * (n + 1) + c]);
            }
        }
        // Feasible uniform scales for the gain columns.
        let (mut s_lo, mut s_hi) = (0.0f64, f64::INFINITY);
        for c in 0..n {
            let (plo, phi) = (pbox.lo()[r * (n + 1) + c], pbox.hi()[r * (n + 1) + c]);
            for (g, p, upper) in [(lo[c], plo, false), (hi[c], phi, true)] {
                // upper: s·g ≤ p; lower: s·g ≥ p
                if g.abs() < 1e-15 {
                    if (upper && p < -1e-15) || (!upper && p > 1e-15) {
                        return None;
                    }
                    continue;
                }
                let ratio = p / g;
                match (upper, g > 0.0) {
                    (true, true) | (false, false) => s_hi = s_hi.min(ratio),
                    _ => s_lo = s_lo.max(ratio),
                }
            }
        }
        if s_lo > s_hi {
            return None;
        }
        let s = 1.0f64.clamp(s_lo, s_hi.max(s_lo));
        // Offset shift for the b column.
        let (plo, phi) = (pbox.lo()[r * (n + 1) + n], pbox.hi()[r * (n + 1) + n]);
        let (blo, bhi) = (s * lo[n], s * hi[n]);
        if bhi - blo > phi - plo {
            return None;
        }
        let t = 0.0f64.clamp(plo - blo, (phi - bhi).max(plo - blo));
        for w in out.w2[r].iter_mut() {
            *w *= s;
        }
        out.b2[r] = s * net.b2[r] + t;
    }
    Some(out)
}

/// Minimal output-layer change subject to all per-piece interval constraints,
/// by Hildreth coordinate ascent on the dual of the projection QP.
fn constrained_lsq(
    net: &ShallowReluNet,
    cpwa: &CpwaFunction,
    pbox: &AxisBox,
) -> Option<ShallowReluNet> {
    let n = net.in_dim();
    let h = net.hidden_dim();
    let tighten: f64 = 1e-9;
    let mut rows = Vec::with_capacity(net.out_dim());
    for r in 0..net.out_dim() {
        // Constraints a·w ≤ c.
        let mut cons: Vec<(Vec<f64>, f64)> = Vec::new();
        for piece in &cpwa.pieces {
            for col in 0..=n {
                let a = gain_row(net, &piece.active, col);
                let (plo, phi) = (pbox.lo()[r * (n + 1) + col], pbox.hi()[r * (n + 1) + col]);
                let margin = tighten.min((phi - plo) / 4.0);
                if a.iter().all(|&v| v.abs() < 1e-15) {
                    if plo > 0.0 || phi < 0.0 {
                        return None; // structurally zero entry outside the box
                    }
                    continue;
                }
                cons.push((a.iter().map(|&v| -v).collect(), -(plo + margin)));
                cons.push((a, phi - margin));
            }
        }
        let mut w = net.w2[r].clone();
        w.push(net.b2[r]);
        let norms: Vec<f64> = cons
            .iter()
            .map(|(a, _)| a.iter().map(|v| v * v).sum::<f64>())
            .collect();
        let mut lambda = vec![0.0; cons.len()];
        let mut feasible = false;
        for _sweep in 0..5000 {
            let mut worst = 0.0f64;
            for (k, (a, c)) in cons.iter().enumerate() {
                if norms[k] < 1e-18 {
                    continue;
                }
                let resid: f64 = a.iter().zip(&w).map(|(&x, &y)| x * y).sum::<f64>() - c;
                worst = worst.max(resid);
                let delta = (resid / norms[k]).max(-lambda[k]);
                if delta != 0.0 {
                    lambda[k] += delta;
                    for (wi, &ai) in w.iter_mut().zip(a) {
                        *wi -= delta * ai;
                    }
                }
            }
            if worst <= 0.0 {
                feasible = true;
                break;
            }
        }
        if !feasible {
            // The final iterate may satisfy everything even when the sweep
            // cap was reached mid-progress.
            feasible = cons.iter().all(|(a, c)| {
                a.iter().zip(&w).map(|(&x, &y)| x * y).sum::<f64>() <= *c + tighten / 2.0
            });
        }
        if !feasible || w.iter().any(|v| !v.is_finite()) {
            return None;
        }
        rows.push(w[..=h].to_vec());
    }
    Some(apply_output_rows(net, &rows))
}

/// Rebuild the hidden layer as an always-active coordinate basis realizing
/// exactly the clamp of the net's affine least-squares fit over `q`.
fn affine_rebuild(
    net: &ShallowReluNet,
    cpwa: &CpwaFunction,
    pbox: &AxisBox,
    q: &AxisBox,
) -> Result<ShallowReluNet> {
    let n = net.in_dim();
    let m = net.out_dim();
    let h = net.hidden_dim();
    if h < n {
        return Err(Error::ProjectionInfeasible(format!(
            "hidden width {h} below state dimension {n}; cannot rebuild an affine policy"
        )));
    }

    // Affine least-squares fit of the net at the box corners and center.
    let mut samples = q.corners();
    samples.push(q.center());
    let a = DMatrix::from_fn(samples.len(), n + 1, |r, c| {
        if c < n {
            samples[r][c]
        } else {
            1.0
        }
    });
    let svd = a.svd(true, true);
    let mut fit = Vec::with_capacity(m);
    for r in 0..m {
        let y = DVector::from_fn(samples.len(), |s, _| cpwa.eval(&samples[s])[r]);
        let sol = svd
            .solve(&y, 1e-12)
            .map_err(|e| Error::ProjectionInfeasible(e.to_string()))?;
        fit.push(sol.iter().cloned().collect::<Vec<f64>>());
    }
    // Flatten row-major [K | b] and clamp strictly inside the partition.
    let flat: Vec<f64> = fit.iter().flatten().cloned().collect();
    let target = clamp_flat(&flat, pbox, 1e-9);

    let mut out = ShallowReluNet::zeros(n, m, h);
    let margin = q.widths().iter().fold(1.0f64, |a, &b| a.max(b));
    for i in 0..n {
        out.w1[i][i] = 1.0;
        out.b1[i] = -q.lo()[i] + margin;
    }
    for j in n..h {
        out.b1[j] = -margin; // dormant neuron, inactive over q
    }
    for r in 0..m {
        let row = &target[r * (n + 1)..(r + 1) * (n + 1)];
        let mut b2 = row[n];
        for i in 0..n {
            out.w2[r][i] = row[i];
            b2 -= row[i] * out.b1[i];
        }
        out.b2[r] = b2;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box(n: usize) -> AxisBox {
        AxisBox::new(vec![0.0; n], vec![1.0; n]).unwrap()
    }

    #[test]
    fn always_active_net_is_one_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = ShallowReluNet::random(2, 1, 4, 0.5, &mut rng);
        for b in net.b1.iter_mut() {
            *b = 10.0; // every neuron strictly positive over the unit box
        }
        let cpwa = nn_to_cpwa_over(&net, &unit_box(2)).unwrap();
        assert_eq!(cpwa.pieces.len(), 1);
        for i in 0..2 {
            let expect: f64 = (0..4).map(|j| net.w2[0][j] * net.w1[j][i]).sum();
            assert_relative_eq!(cpwa.pieces[0].gains.k[0][i], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_crossing_neuron_gives_two_regions() {
        let mut net = ShallowReluNet::zeros(2, 1, 3);
        // neuron 0 crosses x0 = 0.5; neurons 1, 2 fixed on/off
        net.w1[0] = vec![1.0, 0.0];
        net.b1[0] = -0.5;
        net.w1[1] = vec![0.2, 0.1];
        net.b1[1] = 5.0;
        net.w1[2] = vec![-0.3, 0.4];
        net.b1[2] = -7.0;
        net.w2[0] = vec![1.0, 2.0, 3.0];
        net.b2[0] = 0.1;
        let cpwa = nn_to_cpwa_over(&net, &unit_box(2)).unwrap();
        assert_eq!(cpwa.pieces.len(), 2);
    }

    #[test]
    fn cpwa_matches_network_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = AxisBox::new(vec![-1.0, 0.5, 2.0], vec![1.0, 2.5, 3.0]).unwrap();
        for _ in 0..10 {
            let net = ShallowReluNet::random(3, 2, 6, 1.0, &mut rng);
            let cpwa = nn_to_cpwa_over(&net, &q).unwrap();
            for _ in 0..1000 {
                let x = q.sample_uniform(&mut rng);
                let direct = net.forward(&x);
                let via_pieces = cpwa.eval(&x);
                for (a, b) in direct.iter().zip(&via_pieces) {
                    assert!((a - b).abs() <= 1e-9, "net {a} vs cpwa {b}");
                }
            }
        }
    }

    #[test]
    fn region_gain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = unit_box(2);
        let net = ShallowReluNet::random(2, 1, 6, 1.5, &mut rng);
        let cpwa = nn_to_cpwa_over(&net, &q).unwrap();
        let h = 1e-7;
        for piece in &cpwa.pieces {
            let x = &piece.witness;
            if x.iter().zip(q.lo()).any(|(&v, &l)| v - l < 2.0 * h)
                || x.iter().zip(q.hi()).any(|(&v, &u)| u - v < 2.0 * h)
            {
                continue;
            }
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (net.forward(&xp)[0] - net.forward(&xm)[0]) / (2.0 * h);
                assert!(
                    (fd - piece.gains.k[0][i]).abs() < 1e-5,
                    "fd {fd} vs analytic {}",
                    piece.gains.k[0][i]
                );
            }
        }
    }

    #[test]
    fn pattern_blowup_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 25 neurons all crossing the box.
        let mut net = ShallowReluNet::random(2, 1, 25, 0.1, &mut rng);
        for b in net.b1.iter_mut() {
            *b = 0.0;
        }
        match nn_to_cpwa_over(&net, &unit_box(2)) {
            Err(Error::PatternBlowup { count, .. }) => assert!(count > MAX_PATTERNS),
            other => panic!("expected blow-up error, got {other:?}"),
        }
    }

    #[test]
    fn compliant_net_returned_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ShallowReluNet::random(2, 1, 6, 0.3, &mut rng);
        let pbox = AxisBox::new(vec![-50.0; 3], vec![50.0; 3]).unwrap();
        let (out, cert) = project(&net, &pbox, &unit_box(2)).unwrap();
        assert_eq!(cert.stage, ProjStage::AlreadyCompliant);
        assert_eq!(out, net);
    }

    #[test]
    fn single_region_clamps_componentwise() {
        let mut net = ShallowReluNet::zeros(2, 1, 4);
        // Always-active pair realizing K = [2.0, -0.5], b = 0.3 over the box.
        net.w1[0] = vec![1.0, 0.0];
        net.b1[0] = 2.0;
        net.w1[1] = vec![0.0, 1.0];
        net.b1[1] = 2.0;
        net.w2[0] = vec![2.0, -0.5, 0.0, 0.0];
        net.b2[0] = 0.3 - (2.0 * 2.0 - 0.5 * 2.0);
        net.b1[2] = -9.0;
        net.b1[3] = -9.0;
        let q = unit_box(2);
        let pbox = AxisBox::new(vec![-1.0, -1.0, -1.0], vec![1.0, 1.0, 1.0]).unwrap();
        let (out, cert) = project(&net, &pbox, &q).unwrap();
        assert_eq!(cert.stage, ProjStage::SingleRegionClamp);
        let cpwa = nn_to_cpwa_over(&out, &q).unwrap();
        assert_eq!(cpwa.pieces.len(), 1);
        let flat = cpwa.pieces[0].gains.flatten();
        assert_relative_eq!(flat[0], 1.0, epsilon = 1e-9); // clamped from 2.0
        assert_relative_eq!(flat[1], -0.5, epsilon = 1e-9); // unchanged
        assert_relative_eq!(flat[2], 0.3, epsilon = 1e-9); // unchanged
    }

    #[test]
    fn multi_region_projection_certifies_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = unit_box(2);
        let pbox = AxisBox::new(vec![-0.6, -0.6, -1.0], vec![0.6, 0.6, 1.0]).unwrap();
        let mut stages = std::collections::BTreeSet::new();
        for _ in 0..25 {
            let net = ShallowReluNet::random(2, 1, 6, 1.2, &mut rng);
            let (out, cert) = project(&net, &pbox, &q).unwrap();
            assert!(cert.violation_after <= 0.0, "{cert:?}");
            let cpwa = nn_to_cpwa_over(&out, &q).unwrap();
            assert!(cpwa.containment_violation(&pbox) <= 0.0);
            stages.insert(format!("{:?}", cert.stage));

            // Finite-difference oracle: sampled slopes live in the box. A
            // difference quotient across a kink mixes region gains convexly,
            // so membership holds everywhere in the interior.
            let h = 1e-6;
            for _ in 0..40 {
                let x = q.sample_uniform(&mut rng);
                if x.iter().any(|&v| v < 2.0 * h || v > 1.0 - 2.0 * h) {
                    continue;
                }
                for i in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (out.forward(&xp)[0] - out.forward(&xm)[0]) / (2.0 * h);
                    assert!(
                        fd >= pbox.lo()[i] - 1e-6 && fd <= pbox.hi()[i] + 1e-6,
                        "fd gain {fd} escapes partition entry {i}"
                    );
                }
            }
        }
        assert!(stages.len() >= 2, "stages seen: {stages:?}");
    }

    #[test]
    fn projection_infeasible_when_zero_map_excluded() {
        // All neurons off over the box: the net realizes only K ≡ 0, but the
        // partition demands K ≥ 1. With h < n the rebuild must refuse too.
        let mut net = ShallowReluNet::zeros(2, 1, 1);
        net.w1[0] = vec![0.1, 0.1];
        net.b1[0] = -10.0;
        net.b2[0] = 5.0;
        let pbox = AxisBox::new(vec![1.0, 1.0, -10.0], vec![2.0, 2.0, 10.0]).unwrap();
        let err = project(&net, &pbox, &unit_box(2)).unwrap_err();
        assert!(matches!(err, Error::ProjectionInfeasible(_)));
    }

    #[test]
    fn projection_lands_far_partitions() {
        // Partition excluding the zero map; whichever stage fires must verify.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = unit_box(2);
        let pbox = AxisBox::new(vec![3.0, 3.0, 3.0], vec![4.0, 4.0, 4.0]).unwrap();
        let net = ShallowReluNet::random(2, 1, 6, 0.5, &mut rng);
        let (out, cert) = project(&net, &pbox, &q).unwrap();
        assert!(cert.violation_after <= 0.0);
        let cpwa = nn_to_cpwa_over(&out, &q).unwrap();
        assert!(cpwa.containment_violation(&pbox) <= 0.0);
    }

    #[test]
    fn rebuild_handles_structurally_zero_gains() {
        // Every neuron off over q: K ≡ 0 no matter the output layer, so only
        // the hidden-layer rebuild can reach a partition with K ∈ [3, 4].
        let mut net = ShallowReluNet::zeros(2, 1, 6);
        for j in 0..6 {
            net.w1[j] = vec![0.3, -0.2];
            net.b1[j] = -10.0;
        }
        net.b2[0] = 1.0;
        let q = unit_box(2);
        let pbox = AxisBox::new(vec![3.0, 3.0, -10.0], vec![4.0, 4.0, 10.0]).unwrap();
        let (out, cert) = project(&net, &pbox, &q).unwrap();
        assert_eq!(cert.stage, ProjStage::AffineRebuild);
        let cpwa = nn_to_cpwa_over(&out, &q).unwrap();
        assert!(cpwa.containment_violation(&pbox) <= 0.0);
    }

    #[test]
    fn lipschitz_of_linear_and_zero_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q = unit_box(2);

        let zero = ShallowReluNet::zeros(2, 1, 4);
        assert_eq!(nn_to_cpwa_over(&zero, &q).unwrap().lipschitz(), 0.0);

        let mut net = ShallowReluNet::random(2, 2, 4, 0.8, &mut rng);
        for b in net.b1.iter_mut() {
            *b = 10.0;
        }
        let cpwa = nn_to_cpwa_over(&net, &q).unwrap();
        let mut k = vec![vec![0.0; 2]; 2];
        for (r, row) in k.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|j| net.w2[r][j] * net.w1[j][i]).sum();
            }
        }
        assert_relative_eq!(cpwa.lipschitz(), spectral_norm(&k), epsilon = 1e-12);
    }

    #[test]
    fn lipschitz_dominates_sampled_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let q = unit_box(2);
        let net = ShallowReluNet::random(2, 1, 6, 1.0, &mut rng);
        let lip = nn_to_cpwa_over(&net, &q).unwrap().lipschitz();
        for _ in 0..1000 {
            let a = q.sample_uniform(&mut rng);
            let b = q.sample_uniform(&mut rng);
            let df: f64 = net.forward(&a)[0] - net.forward(&b)[0];
            let dx: f64 = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if dx > 1e-9 {
                assert!(df.abs() / dx <= lip + 1e-9);
            }
        }
    }
}
