//! Gaussian-process regression of the model error from transition residuals.
//!
//! Each output dimension gets an independent scalar GP with a
//! squared-exponential kernel and per-input lengthscales. Hyperparameters are
//! fixed from the run configuration; there is no marginal-likelihood
//! optimization. A small jitter is always added to the Gram diagonal so the
//! Cholesky factorization stays well posed.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::dynamics::{step_nominal, step_true, wrapped_sub, ControlInput, ModelErrorTruth, NominalModel, State};
use crate::error::{Error, Result};
use crate::geom::{AxisBox, Interval};

/// Jitter added to the Gram diagonal on top of the configured noise.
pub const NOISE_FLOOR: f64 = 1e-6;

/// Kernel hyperparameters of one scalar GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_variance: f64,
    /// One lengthscale per input dimension (state dims then input dims).
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl GpHyper {
    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let s: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((&x, &y), &l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum();
        self.signal_variance * (-0.5 * s).exp()
    }
}

/// Rows of `(z, r)` with `z = (x, u)` and `r = x⁺ − f(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDataset {
    pub inputs: Vec<Vec<f64>>,
    pub residuals: Vec<Vec<f64>>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ResidualDataset {
    pub fn empty(in_dim: usize, out_dim: usize) -> Self {
        Self {
            inputs: Vec::new(),
            residuals: Vec::new(),
            in_dim,
            out_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Persist as CSV with columns `z1..z_{n+m}, r1..r_n`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = Vec::new();
        for i in 1..=self.in_dim {
            header.push(format!("z{i}"));
        }
        for i in 1..=self.out_dim {
            header.push(format!("r{i}"));
        }
        wtr.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
        for (z, r) in self.inputs.iter().zip(&self.residuals) {
            let row: Vec<String> = z.iter().chain(r).map(|v| format!("{v:.17e}")).collect();
            wtr.write_record(&row).map_err(|e| Error::Csv(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut out = Self::empty(in_dim, out_dim);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            if rec.len() != in_dim + out_dim {
                return Err(Error::Csv(format!(
                    "expected {} columns, got {}",
                    in_dim + out_dim,
                    rec.len()
                )));
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Csv(e.to_string())))
                .collect::<Result<_>>()?;
            out.inputs.push(vals[..in_dim].to_vec());
            out.residuals.push(vals[in_dim..].to_vec());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, in_dim, out_dim)
    }
}

/// Sample transitions uniformly over `X × U` and record residuals against the
/// nominal model. Periodic axes are differenced on the circle so a wrap at the
/// domain boundary does not fake a large residual.
pub fn collect_residuals(
    model: &NominalModel,
    gtruth: &ModelErrorTruth,
    state_box: &AxisBox,
    input_box: &AxisBox,
    count: usize,
    seed: u64,
) -> Result<ResidualDataset> {
    if count == 0 {
        return Err(Error::Config("residual sample count must be >= 1".into()));
    }
    let periods = model.periods();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = ResidualDataset::empty(
        model.state_dim() + model.input_dim(),
        model.state_dim(),
    );
    for _ in 0..count {
        let x = State::new(state_box.sample_uniform(&mut rng));
        let u = ControlInput::new(input_box.sample_uniform(&mut rng));
        let observed = step_true(model, gtruth, &x, &u)?;
        let nominal = step_nominal(model, &x, &u)?;
        let r = wrapped_sub(&observed.coords, &nominal.coords, &periods);
        let mut z = x.coords.clone();
        z.extend_from_slice(&u.coords);
        data.inputs.push(z);
        data.residuals.push(r);
    }
    Ok(data)
}

/// One fitted scalar GP.
#[derive(Debug, Clone)]
struct GpDim {
    hyper: GpHyper,
    train: Vec<Vec<f64>>,
    /// `(K + (σ_n² + floor)·I)^{-1} y`
    alpha: Vec<f64>,
    /// Explicit inverse of the regularized Gram matrix; kept for posterior
    /// variances and for the sensitivity bounds used by the gap constants.
    gram_inv: DMatrix<f64>,
}

impl GpDim {
    fn kvec(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.train.len(), self.train.iter().map(|t| self.hyper.kernel(z, t)))
    }

    fn posterior(&self, z: &[f64]) -> (f64, f64) {
        if self.train.is_empty() {
            return (0.0, self.hyper.signal_variance);
        }
        let k = self.kvec(z);
        let mean = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let quad = (&self.gram_inv * &k).dot(&k);
        let mut var = self.hyper.signal_variance - quad;
        debug_assert!(var >= -1e-12, "posterior variance {var} below clamp threshold");
        if var < 0.0 {
            var = 0.0;
        }
        (mean, var)
    }
}

/// Independent per-output-dimension GP regression model.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub in_dim: usize,
    pub out_dim: usize,
    dims: Vec<GpDim>,
}

/// Posterior mean and per-dimension (diagonal) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Fit one GP per output dimension with fixed hyperparameters.
///
/// `hypers` must hold one entry per output dimension; lengthscale vectors must
/// match the input dimension.
pub fn fit(data: &ResidualDataset, hypers: &[GpHyper]) -> Result<GpModel> {
    if hypers.len() != data.out_dim {
        return Err(Error::Config(format!(
            "expected {} hyperparameter sets, got {}",
            data.out_dim,
            hypers.len()
        )));
    }
    for h in hypers {
        if h.lengthscales.len() != data.in_dim {
            return Err(Error::Config(format!(
                "lengthscales must have {} entries, got {}",
                data.in_dim,
                h.lengthscales.len()
            )));
        }
        if !(h.noise_variance > 0.0) {
            return Err(Error::Config("noise variance must be positive".into()));
        }
        if h.lengthscales.iter().any(|&l| !(l > 0.0)) || !(h.signal_variance > 0.0) {
            return Err(Error::Config("kernel hyperparameters must be positive".into()));
        }
    }
    let n = data.len();
    let mut dims = Vec::with_capacity(data.out_dim);
    for (d, hyper) in hypers.iter().enumerate() {
        if n == 0 {
            dims.push(GpDim {
                hyper: hyper.clone(),
                train: Vec::new(),
                alpha: Vec::new(),
                gram_inv: DMatrix::zeros(0, 0),
            });
            continue;
        }
        let jitter = hyper.noise_variance + NOISE_FLOOR;
        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let k = hyper.kernel(&data.inputs[i], &data.inputs[j]);
                gram[(i, j)] = k;
                gram[(j, i)] = k;
            }
            gram[(i, i)] += jitter;
        }
        let chol = gram.clone().cholesky().ok_or(Error::GramFactorization {
            suggested_noise: jitter * 10.0,
        })?;
        let y = DVector::from_iterator(n, data.residuals.iter().map(|r| r[d]));
        let alpha = chol.solve(&y);
        let gram_inv = chol.inverse();
        dims.push(GpDim {
            hyper: hyper.clone(),
            train: data.inputs.clone(),
            alpha: alpha.iter().cloned().collect(),
            gram_inv,
        });
    }
    Ok(GpModel {
        in_dim: data.in_dim,
        out_dim: data.out_dim,
        dims,
    })
}

impl GpModel {
    /// Posterior at a concatenated input `z = (x, u)`.
    pub fn posterior_z(&self, z: &[f64]) -> PosteriorStats {
        let mut mean = Vec::with_capacity(self.out_dim);
        let mut variance = Vec::with_capacity(self.out_dim);
        for dim in &self.dims {
            let (m, v) = dim.posterior(z);
            mean.push(m);
            variance.push(v);
        }
        PosteriorStats { mean, variance }
    }
}

/// Posterior of the fitted model at `(x, u)`.
pub fn posterior(gp: &GpModel, x: &State, u: &ControlInput) -> PosteriorStats {
    let mut z = x.coords.clone();
    z.extend_from_slice(&u.coords);
    gp.posterior_z(&z)
}

/// Model error as seen by the pipeline: exactly zero, a constant-dispersion
/// stand-in, or a fitted GP posterior.
#[derive(Debug, Clone)]
pub enum ErrorModel {
    /// `g ≡ 0` with zero uncertainty; transitions become deterministic.
    Zero { out_dim: usize },
    /// Constant mean and dispersion, independent of the input; handy for
    /// small instances where the dispersion should be controlled exactly.
    Fixed { mean: Vec<f64>, variance: Vec<f64> },
    Gp(GpModel),
}

impl ErrorModel {
    pub fn out_dim(&self) -> usize {
        match self {
            ErrorModel::Zero { out_dim } => *out_dim,
            ErrorModel::Fixed { mean, .. } => mean.len(),
            ErrorModel::Gp(gp) => gp.out_dim,
        }
    }

    pub fn posterior_z(&self, z: &[f64]) -> PosteriorStats {
        match self {
            ErrorModel::Zero { out_dim } => PosteriorStats {
                mean: vec![0.0; *out_dim],
                variance: vec![0.0; *out_dim],
            },
            ErrorModel::Fixed { mean, variance } => PosteriorStats {
                mean: mean.clone(),
                variance: variance.clone(),
            },
            ErrorModel::Gp(gp) => gp.posterior_z(z),
        }
    }

    /// Predicted mean next state `f(x, u) + μ_g(x, u)`, unwrapped.
    pub fn predict_mean_raw(&self, model: &NominalModel, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut next = model.eval_raw(x, u);
        let mut z = x.to_vec();
        z.extend_from_slice(u);
        let post = self.posterior_z(&z);
        for (v, m) in next.iter_mut().zip(&post.mean) {
            *v += m;
        }
        next
    }

    /// Interval bound on the posterior mean over a box of inputs.
    pub fn mean_interval(&self, zbox: &AxisBox) -> Vec<Interval> {
        match self {
            ErrorModel::Zero { out_dim } => vec![Interval::point(0.0); *out_dim],
            ErrorModel::Fixed { mean, .. } => mean.iter().map(|&m| Interval::point(m)).collect(),
            ErrorModel::Gp(gp) => gp
                .dims
                .iter()
                .map(|dim| {
                    let mut acc = Interval::point(0.0);
                    for (t, &a) in dim.train.iter().zip(&dim.alpha) {
                        acc = acc.add(kernel_interval(&dim.hyper, zbox, t).scale(a));
                    }
                    acc
                })
                .collect(),
        }
    }

    /// Entry-wise bound on `|∂μ_g/∂z|` over a box of inputs
    /// (rows: output dims, cols: input dims).
    pub fn mean_grad_bound(&self, zbox: &AxisBox) -> Vec<Vec<f64>> {
        match self {
            ErrorModel::Zero { out_dim } => vec![vec![0.0; zbox.dim()]; *out_dim],
            ErrorModel::Fixed { mean, .. } => vec![vec![0.0; zbox.dim()]; mean.len()],
            ErrorModel::Gp(gp) => gp
                .dims
                .iter()
                .map(|dim| {
                    let mut row = vec![0.0; gp.in_dim];
                    for (t, &a) in dim.train.iter().zip(&dim.alpha) {
                        let k_hi = kernel_interval(&dim.hyper, zbox, t).hi;
                        for (j, r) in row.iter_mut().enumerate() {
                            *r += a.abs() * kernel_grad_bound(&dim.hyper, zbox, t, j, k_hi);
                        }
                    }
                    row
                })
                .collect(),
        }
    }

    /// Interval bound on the posterior variance over a box of inputs.
    pub fn variance_interval(&self, zbox: &AxisBox) -> Vec<Interval> {
        match self {
            ErrorModel::Zero { out_dim } => vec![Interval::point(0.0); *out_dim],
            ErrorModel::Fixed { variance, .. } => {
                variance.iter().map(|&v| Interval::point(v)).collect()
            }
            ErrorModel::Gp(gp) => gp
                .dims
                .iter()
                .map(|dim| {
                    if dim.train.is_empty() {
                        return Interval::point(dim.hyper.signal_variance);
                    }
                    let k_his: Vec<f64> = dim
                        .train
                        .iter()
                        .map(|t| kernel_interval(&dim.hyper, zbox, t).hi)
                        .collect();
                    // σ² = σ_f² − k*ᵀ A k* with A ⪰ 0, so σ² ≤ σ_f²; the
                    // quadratic term is bounded above entry by entry.
                    let mut quad_hi = 0.0;
                    for (s, &ks) in k_his.iter().enumerate() {
                        for (t, &kt) in k_his.iter().enumerate() {
                            quad_hi += dim.gram_inv[(s, t)].abs() * ks * kt;
                        }
                    }
                    let lo = (dim.hyper.signal_variance - quad_hi).max(0.0);
                    Interval::new(lo, dim.hyper.signal_variance)
                })
                .collect(),
        }
    }

    /// Entry-wise bound on `|∂σ²_g/∂z|` over a box of inputs.
    pub fn variance_grad_bound(&self, zbox: &AxisBox) -> Vec<Vec<f64>> {
        match self {
            ErrorModel::Zero { out_dim } => vec![vec![0.0; zbox.dim()]; *out_dim],
            ErrorModel::Fixed { mean, .. } => vec![vec![0.0; zbox.dim()]; mean.len()],
            ErrorModel::Gp(gp) => gp
                .dims
                .iter()
                .map(|dim| {
                    let mut row = vec![0.0; gp.in_dim];
                    if dim.train.is_empty() {
                        return row;
                    }
                    let k_his: Vec<f64> = dim
                        .train
                        .iter()
                        .map(|t| kernel_interval(&dim.hyper, zbox, t).hi)
                        .collect();
                    // |∂σ²/∂z_j| = |2 Σ_s (A k*)_s ∂k_s/∂z_j|
                    for (s, ts) in dim.train.iter().enumerate() {
                        let mut ak_s = 0.0;
                        for (t, &kt) in k_his.iter().enumerate() {
                            ak_s += dim.gram_inv[(s, t)].abs() * kt;
                        }
                        for (j, r) in row.iter_mut().enumerate() {
                            *r += 2.0
                                * ak_s
                                * kernel_grad_bound(&dim.hyper, zbox, ts, j, k_his[s]);
                        }
                    }
                    row
                })
                .collect(),
        }
    }
}

/// Range of `k(z, t)` for `z` in a box.
fn kernel_interval(hyper: &GpHyper, zbox: &AxisBox, t: &[f64]) -> Interval {
    let mut s_lo = 0.0;
    let mut s_hi = 0.0;
    for j in 0..zbox.dim() {
        let d = zbox.interval(j).offset(-t[j]).scale(1.0 / hyper.lengthscales[j]);
        let lo = d.abs_min();
        let hi = d.abs_max();
        s_lo += lo * lo;
        s_hi += hi * hi;
    }
    Interval::new(
        hyper.signal_variance * (-0.5 * s_hi).exp(),
        hyper.signal_variance * (-0.5 * s_lo).exp(),
    )
}

/// Upper bound on `|∂k(z, t)/∂z_j|` for `z` in a box, given an upper bound on
/// the kernel value over the same box.
fn kernel_grad_bound(hyper: &GpHyper, zbox: &AxisBox, t: &[f64], j: usize, k_hi: f64) -> f64 {
    let l = hyper.lengthscales[j];
    let dist = zbox.interval(j).offset(-t[j]).abs_max();
    let local = k_hi * dist / (l * l);
    // Global envelope: |r|·e^{-r²/2} peaks at |r| = 1.
    let global = hyper.signal_variance * (-0.5f64).exp() / l;
    local.min(global)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn hyper(ls: Vec<f64>, noise: f64) -> GpHyper {
        GpHyper {
            signal_variance: 1.0,
            lengthscales: ls,
            noise_variance: noise,
        }
    }

    /// Dense solve of `(K + jitter·I) α = y` by Gauss elimination with partial
    /// pivoting, independent of the Cholesky path used by `fit`.
    fn dense_solve(k: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let n = y.len();
        let mut a: Vec<Vec<f64>> = k.iter().cloned().collect();
        let mut b = y.to_vec();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for c in col..n {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut s = b[row];
            for c in row + 1..n {
                s -= a[row][c] * x[c];
            }
            x[row] = s / a[row][row];
        }
        x
    }

    fn gram(hy: &GpHyper, pts: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = pts.len();
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = hy.kernel(&pts[i], &pts[j]);
            }
            k[i][i] += hy.noise_variance + NOISE_FLOOR;
        }
        k
    }

    #[test]
    fn empty_dataset_gives_prior() {
        let data = ResidualDataset::empty(2, 1);
        let gp = fit(&data, &[hyper(vec![1.0, 1.0], 1e-4)]).unwrap();
        let p = gp.posterior_z(&[0.3, -0.7]);
        assert_eq!(p.mean, vec![0.0]);
        assert_eq!(p.variance, vec![1.0]);
    }

    #[test]
    fn single_point_interpolates() {
        let mut data = ResidualDataset::empty(1, 1);
        data.inputs.push(vec![0.5]);
        data.residuals.push(vec![2.0]);
        let gp = fit(&data, &[hyper(vec![1.0], 1e-8)]).unwrap();
        let p = gp.posterior_z(&[0.5]);
        assert!((p.mean[0] - 2.0).abs() < 1e-4, "mean {}", p.mean[0]);
    }

    #[test]
    fn five_point_sine_matches_dense_solve() {
        let hy = hyper(vec![0.8], 1e-6);
        let mut data = ResidualDataset::empty(1, 1);
        for i in 0..5 {
            let x = i as f64 * 0.5;
            data.inputs.push(vec![x]);
            data.residuals.push(vec![x.sin()]);
        }
        let gp = fit(&data, &[hy.clone()]).unwrap();

        let k = gram(&hy, &data.inputs);
        let y: Vec<f64> = data.residuals.iter().map(|r| r[0]).collect();
        let alpha = dense_solve(&k, &y);
        let noise_std = (hy.noise_variance + NOISE_FLOOR).sqrt();
        for (i, z) in data.inputs.iter().enumerate() {
            let oracle: f64 = data
                .inputs
                .iter()
                .zip(&alpha)
                .map(|(t, a)| hy.kernel(z, t) * a)
                .sum();
            let got = gp.posterior_z(z).mean[0];
            assert_relative_eq!(got, oracle, epsilon = 1e-9);
            assert!((got - y[i]).abs() < 3.0 * noise_std, "at {z:?}");
        }
    }

    #[test]
    fn far_query_returns_prior() {
        let mut data = ResidualDataset::empty(1, 1);
        data.inputs.push(vec![0.0]);
        data.residuals.push(vec![1.0]);
        let gp = fit(&data, &[hyper(vec![0.5], 1e-6)]).unwrap();
        let p = gp.posterior_z(&[50.0]);
        assert!(p.mean[0].abs() < 0.01);
        assert!((p.variance[0] - 1.0).abs() < 0.01);
    }

    #[test]
    fn symmetric_targets_cancel_at_midpoint() {
        let hy = hyper(vec![1.0], 1e-6);
        let mut data = ResidualDataset::empty(1, 1);
        data.inputs.push(vec![-1.0]);
        data.inputs.push(vec![1.0]);
        data.residuals.push(vec![0.7]);
        data.residuals.push(vec![-0.7]);
        let gp = fit(&data, &[hy.clone()]).unwrap();
        let got = gp.posterior_z(&[0.0]).mean[0];

        let k = gram(&hy, &data.inputs);
        let alpha = dense_solve(&k, &[0.7, -0.7]);
        let oracle = hy.kernel(&[0.0], &[-1.0]) * alpha[0] + hy.kernel(&[0.0], &[1.0]) * alpha[1];
        assert_relative_eq!(got, oracle, epsilon = 1e-12);
        assert!(got.abs() < 1e-12, "midpoint mean {got}");
    }

    #[test]
    fn variance_bounded_and_monotone_under_data() {
        let hy = hyper(vec![1.0], 1e-4);
        let mut data = ResidualDataset::empty(1, 1);
        for i in 0..4 {
            data.inputs.push(vec![i as f64]);
            data.residuals.push(vec![(i as f64).cos()]);
        }
        let gp4 = fit(&data, &[hy.clone()]).unwrap();
        data.inputs.push(vec![1.7]);
        data.residuals.push(vec![1.7f64.cos()]);
        let gp5 = fit(&data, &[hy.clone()]).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let z = [rng.gen_range(-2.0..6.0)];
            let v4 = gp4.posterior_z(&z).variance[0];
            let v5 = gp5.posterior_z(&z).variance[0];
            assert!(v4 >= 0.0 && v4 <= hy.signal_variance + hy.noise_variance);
            assert!(v5 <= v4 + 1e-9, "variance grew at {z:?}: {v5} > {v4}");
        }
    }

    #[test]
    fn output_dims_are_independent() {
        let hy = vec![hyper(vec![1.0], 1e-5), hyper(vec![1.0], 1e-5)];
        let mut data = ResidualDataset::empty(1, 2);
        for i in 0..3 {
            let x = i as f64;
            data.inputs.push(vec![x]);
            data.residuals.push(vec![x.sin(), x.cos()]);
        }
        let gp = fit(&data, &hy).unwrap();

        let mut swapped = data.clone();
        for r in &mut swapped.residuals {
            r.swap(0, 1);
        }
        let gp_swapped = fit(&swapped, &hy).unwrap();
        let p = gp.posterior_z(&[0.4]);
        let q = gp_swapped.posterior_z(&[0.4]);
        assert_eq!(p.mean[0], q.mean[1]);
        assert_eq!(p.mean[1], q.mean[0]);
        assert_eq!(p.variance[0], q.variance[1]);
    }

    #[test]
    fn residuals_zero_when_error_free() {
        let model = NominalModel::Dubins { speed: 3.0, dt: 0.1 };
        let xb = AxisBox::new(vec![0.0, 0.0, 0.0], vec![5.0, 5.0, 6.0]).unwrap();
        let ub = AxisBox::new(vec![-4.0], vec![4.0]).unwrap();
        let data = collect_residuals(&model, &ModelErrorTruth::Zero, &xb, &ub, 50, 1).unwrap();
        for r in &data.residuals {
            for &v in r {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residuals_stay_in_bound_and_rerun_is_identical() {
        let model = NominalModel::Dubins { speed: 3.0, dt: 0.1 };
        let truth = ModelErrorTruth::Trig { amp: vec![0.05, 0.05, 0.0] };
        let d = DisturbanceBoundForTest();
        let xb = AxisBox::new(vec![0.0, 0.0, 0.0], vec![10.0, 10.0, 6.2]).unwrap();
        let ub = AxisBox::new(vec![-8.0], vec![8.0]).unwrap();
        let a = collect_residuals(&model, &truth, &xb, &ub, 100, 42).unwrap();
        let b = collect_residuals(&model, &truth, &xb, &ub, 100, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        for r in &a.residuals {
            assert!(d.contains(r), "{r:?}");
        }
    }

    #[allow(non_snake_case)]
    fn DisturbanceBoundForTest() -> crate::dynamics::DisturbanceBound {
        crate::dynamics::DisturbanceBound(
            AxisBox::new(vec![0.0, 0.0, 0.0], vec![0.1, 0.1, 0.0]).unwrap(),
        )
    }

    #[test]
    fn csv_round_trip() {
        let model = NominalModel::DoubleIntegrator { dt: 0.2 };
        let truth = ModelErrorTruth::Constant { value: vec![0.01, -0.02] };
        let xb = AxisBox::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let ub = AxisBox::new(vec![-2.0], vec![2.0]).unwrap();
        let data = collect_residuals(&model, &truth, &xb, &ub, 20, 9).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = ResidualDataset::read_csv(buf.as_slice(), 3, 2).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn interval_bounds_cover_posterior() {
        let hy = hyper(vec![0.7, 1.3], 1e-4);
        let mut data = ResidualDataset::empty(2, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..12 {
            let z: Vec<f64> = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            data.residuals.push(vec![(z[0] * 2.0).sin() * 0.1]);
            data.inputs.push(z);
        }
        let em = ErrorModel::Gp(fit(&data, &[hy]).unwrap());
        let zbox = AxisBox::new(vec![-0.4, 0.1], vec![0.2, 0.8]).unwrap();
        let mi = em.mean_interval(&zbox);
        let vi = em.variance_interval(&zbox);
        for _ in 0..500 {
            let z = zbox.sample_uniform(&mut rng);
            let p = em.posterior_z(&z);
            assert!(mi[0].contains(p.mean[0]), "{} not in {:?}", p.mean[0], mi[0]);
            assert!(
                p.variance[0] >= vi[0].lo - 1e-12 && p.variance[0] <= vi[0].hi + 1e-12,
                "{} not in {:?}",
                p.variance[0],
                vi[0]
            );
        }
    }

    #[test]
    fn gradient_bounds_cover_finite_differences() {
        let hy = hyper(vec![0.7], 1e-4);
        let mut data = ResidualDataset::empty(1, 1);
        for i in 0..8 {
            let x = -1.0 + 0.3 * i as f64;
            data.inputs.push(vec![x]);
            data.residuals.push(vec![(3.0 * x).sin() * 0.2]);
        }
        let em = ErrorModel::Gp(fit(&data, &[hy]).unwrap());
        let zbox = AxisBox::new(vec![-0.5], vec![0.5]).unwrap();
        let gb = em.mean_grad_bound(&zbox)[0][0];
        let vb = em.variance_grad_bound(&zbox)[0][0];
        let h = 1e-6;
        let mut max_fd_mean: f64 = 0.0;
        let mut max_fd_var: f64 = 0.0;
        for i in 0..=100 {
            let z = -0.5 + i as f64 / 100.0;
            let a = em.posterior_z(&[z - h]);
            let b = em.posterior_z(&[z + h]);
            max_fd_mean = max_fd_mean.max(((b.mean[0] - a.mean[0]) / (2.0 * h)).abs());
            max_fd_var = max_fd_var.max(((b.variance[0] - a.variance[0]) / (2.0 * h)).abs());
        }
        assert!(max_fd_mean <= gb + 1e-6, "fd {max_fd_mean} > bound {gb}");
        assert!(max_fd_var <= vb + 1e-6, "fd {max_fd_var} > bound {vb}");
    }
}
