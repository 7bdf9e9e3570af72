//! Per-transition policy training.
//!
//! Each MDP transition `(q, P, q′)` gets its own small Gaussian policy: the
//! mean is a shallow ReLU net, the log standard deviation is a learnable
//! state-independent vector. Rollouts run on the learned mean dynamics
//! `f + μ_g`, never on the real system. The reward pulls the predicted next
//! state into `q′` and the control toward the partition's center law; the
//! clipped surrogate is ascended by plain full-batch gradient steps with a
//! linear value baseline refit per batch. Everything is seeded and runs in
//! f64, so training is bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_state, wrapped_sub, NominalModel};
use crate::error::{Error, Result};
use crate::geom::AxisBox;
use crate::gp::ErrorModel;
use crate::partition::AffineGains;
use crate::relu::ShallowReluNet;

/// Training knobs; defaults follow the experiment setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    /// Hidden width of every local policy.
    pub hidden: usize,
    /// Rollout length per episode, starting from a uniform state in `q`.
    pub steps_per_episode: usize,
    /// Episodes gathered between gradient updates.
    pub batch_episodes: usize,
    /// Full-batch ascent passes per update.
    pub epochs: usize,
    /// Gradient step size.
    pub step_size: f64,
    /// Surrogate clip ratio.
    pub clip: f64,
    /// Weight of the distance-to-target reward term.
    pub w1: f64,
    /// Weight of the gain-centering reward term.
    pub w2: f64,
    /// Initial log standard deviation of the exploration noise.
    pub init_log_std: f64,
    /// Weight scale of the random initialization.
    pub init_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: 6,
            steps_per_episode: 10,
            batch_episodes: 8,
            epochs: 4,
            step_size: 3e-3,
            clip: 0.2,
            w1: 1.0,
            w2: 0.1,
            init_log_std: -0.7,
            init_scale: 0.2,
        }
    }
}

/// Training environment of one transition.
pub struct TransitionEnv<'a> {
    pub q: &'a AxisBox,
    pub q_next: &'a AxisBox,
    pub kappa: AffineGains,
    pub model: &'a NominalModel,
    pub err: &'a ErrorModel,
    pub w1: f64,
    pub w2: f64,
    periods: Vec<Option<f64>>,
    target_center: Vec<f64>,
}

impl<'a> TransitionEnv<'a> {
    pub fn new(
        q: &'a AxisBox,
        q_next: &'a AxisBox,
        kappa: AffineGains,
        model: &'a NominalModel,
        err: &'a ErrorModel,
        w1: f64,
        w2: f64,
    ) -> Self {
        Self {
            target_center: q_next.center(),
            periods: model.periods(),
            q,
            q_next,
            kappa,
            model,
            err,
            w1,
            w2,
        }
    }

    /// Predicted next state under the learned model, wrapped.
    pub fn step_mean(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut next = self.err.predict_mean_raw(self.model, x, u);
        wrap_state(&mut next, &self.periods);
        next
    }

    pub fn predicted_in_target(&self, x: &[f64], u: &[f64]) -> bool {
        self.q_next.contains(&self.step_mean(x, u))
    }

    /// Reward of applying `u` at `x`: zero at best, increasingly negative as
    /// the predicted next state misses `q′` or the control strays from the
    /// partition's center law.
    pub fn reward(&self, x: &[f64], u: &[f64]) -> f64 {
        let next = self.step_mean(x, u);
        let gain_dev: f64 = u
            .iter()
            .zip(self.kappa.apply(x))
            .map(|(&a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if self.q_next.contains(&next) {
            -self.w2 * gain_dev
        } else {
            let miss: f64 = wrapped_sub(&next, &self.target_center, &self.periods)
                .iter()
                .map(|d| d * d)
                .sum::<f64>()
                .sqrt();
            -self.w1 * miss - self.w2 * gain_dev
        }
    }
}

fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    let a: f64 = 1.0 - rng.gen::<f64>();
    let b: f64 = rng.gen();
    (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos()
}

struct Sample {
    x: Vec<f64>,
    u: Vec<f64>,
    logp_old: f64,
    advantage: f64,
}

/// Train the mean network of a Gaussian policy for one transition.
///
/// Deterministic for a fixed seed. `init` warm-starts the mean network
/// (transfer); otherwise weights are randomly initialized and the output is
/// re-centered onto the partition's center law at the cell center.
pub fn ppo_train(
    env: &TransitionEnv,
    cfg: &PpoConfig,
    episodes: usize,
    seed: u64,
    init: Option<&ShallowReluNet>,
) -> Result<ShallowReluNet> {
    if episodes == 0 {
        return Err(Error::Config("episode count must be >= 1".into()));
    }
    let n = env.model.state_dim();
    let m = env.model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut net = match init {
        Some(net) => net.clone(),
        None => {
            let mut net = ShallowReluNet::random(n, m, cfg.hidden, cfg.init_scale, &mut rng);
            // Center the initial policy on the partition's center law.
            let center = env.q.center();
            let want = env.kappa.apply(&center);
            let have = net.forward(&center);
            for r in 0..m {
                net.b2[r] += want[r] - have[r];
            }
            net
        }
    };
    let mut log_std = vec![cfg.init_log_std; m];

    let mut done = 0usize;
    while done < episodes {
        let batch = cfg.batch_episodes.min(episodes - done);
        let mut samples: Vec<Sample> = Vec::with_capacity(batch * cfg.steps_per_episode);
        let mut returns: Vec<f64> = Vec::with_capacity(batch * cfg.steps_per_episode);

        for _ in 0..batch {
            let mut x = env.q.sample_uniform(&mut rng);
            let mut rewards = Vec::with_capacity(cfg.steps_per_episode);
            for _ in 0..cfg.steps_per_episode {
                let mean = net.forward(&x);
                let u: Vec<f64> = mean
                    .iter()
                    .zip(&log_std)
                    .map(|(&mu, &ls)| mu + ls.exp() * sample_normal(&mut rng))
                    .collect();
                let logp = log_prob(&mean, &log_std, &u);
                rewards.push(env.reward(&x, &u));
                let next = env.step_mean(&x, &u);
                samples.push(Sample {
                    x: x.clone(),
                    u,
                    logp_old: logp,
                    advantage: 0.0,
                });
                x = next;
            }
            // Undiscounted reward-to-go in episode order.
            let mut togo = vec![0.0; rewards.len()];
            let mut acc = 0.0;
            for (i, &r) in rewards.iter().enumerate().rev() {
                acc += r;
                togo[i] = acc;
            }
            returns.extend_from_slice(&togo);
        }
        debug_assert_eq!(returns.len(), samples.len());

        let baseline = fit_linear_baseline(&samples, &returns, n);
        let count = samples.len() as f64;
        let mut mean_adv = 0.0;
        for (s, &g) in samples.iter_mut().zip(&returns) {
            s.advantage = g - baseline.eval(&s.x);
            mean_adv += s.advantage;
        }
        mean_adv /= count;
        let mut var = 0.0;
        for s in &samples {
            var += (s.advantage - mean_adv) * (s.advantage - mean_adv);
        }
        let std = (var / count).sqrt().max(1e-8);
        for s in samples.iter_mut() {
            s.advantage = (s.advantage - mean_adv) / std;
        }

        for _ in 0..cfg.epochs {
            ascend_clipped_surrogate(&mut net, &mut log_std, &samples, cfg);
        }
        for ls in log_std.iter_mut() {
            *ls = ls.clamp(-5.0, 1.0);
        }
        done += batch;

        if !net.all_finite() || log_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged {
                episode: done,
                detail: "non-finite policy parameters".into(),
            });
        }
    }
    Ok(net)
}

fn log_prob(mean: &[f64], log_std: &[f64], u: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(u)
        .map(|((&mu, &ls), &v)| {
            let sd = ls.exp();
            let z = (v - mu) / sd;
            -0.5 * z * z - ls - 0.5 * (std::f64::consts::TAU).ln()
        })
        .sum()
}

struct LinearBaseline {
    /// `n` weights followed by an intercept.
    theta: Vec<f64>,
}

impl LinearBaseline {
    fn eval(&self, x: &[f64]) -> f64 {
        let n = self.theta.len() - 1;
        x.iter()
            .zip(&self.theta[..n])
            .map(|(&a, &b)| a * b)
            .sum::<f64>()
            + self.theta[n]
    }
}

fn fit_linear_baseline(samples: &[Sample], returns: &[f64], n: usize) -> LinearBaseline {
    use nalgebra::{DMatrix, DVector};
    let rows = samples.len();
    let a = DMatrix::from_fn(rows, n + 1, |r, c| {
        if c < n {
            samples[r].x[c]
        } else {
            1.0
        }
    });
    let y = DVector::from_fn(rows, |r, _| returns[r]);
    let mut ata = a.transpose() * &a;
    for i in 0..n + 1 {
        ata[(i, i)] += 1e-6;
    }
    let aty = a.transpose() * y;
    let theta = ata
        .cholesky()
        .map(|c| c.solve(&aty))
        .unwrap_or_else(|| DVector::zeros(n + 1));
    LinearBaseline {
        theta: theta.iter().cloned().collect(),
    }
}

fn ascend_clipped_surrogate(
    net: &mut ShallowReluNet,
    log_std: &mut [f64],
    samples: &[Sample],
    cfg: &PpoConfig,
) {
    let n = net.in_dim();
    let m = net.out_dim();
    let h = net.hidden_dim();
    let mut g_w1 = vec![vec![0.0; n]; h];
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![vec![0.0; h]; m];
    let mut g_b2 = vec![0.0; m];
    let mut g_ls = vec![0.0; m];
    let scale = 1.0 / samples.len() as f64;

    for s in samples {
        let pre = net.preactivations(&s.x);
        let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
        let mean: Vec<f64> = net
            .w2
            .iter()
            .zip(&net.b2)
            .map(|(row, &b)| row.iter().zip(&hidden).map(|(&w, &v)| w * v).sum::<f64>() + b)
            .collect();
        let logp = log_prob(&mean, log_std, &s.u);
        let ratio = (logp - s.logp_old).exp();
        // Clipped-branch samples contribute no gradient.
        let clipped = (s.advantage > 0.0 && ratio > 1.0 + cfg.clip)
            || (s.advantage < 0.0 && ratio < 1.0 - cfg.clip);
        if clipped || !ratio.is_finite() {
            continue;
        }
        let coeff = s.advantage * ratio * scale;
        for r in 0..m {
            let sd = log_std[r].exp();
            let z = (s.u[r] - mean[r]) / sd;
            let d_mean = coeff * z / sd;
            g_b2[r] += d_mean;
            for j in 0..h {
                g_w2[r][j] += d_mean * hidden[j];
            }
            g_ls[r] += coeff * (z * z - 1.0);
        }
        for j in 0..h {
            if pre[j] <= 0.0 {
                continue;
            }
            let mut gh = 0.0;
            for r in 0..m {
                let sd = log_std[r].exp();
                gh += coeff * (s.u[r] - mean[r]) / (sd * sd) * net.w2[r][j];
            }
            g_b1[j] += gh;
            for i in 0..n {
                g_w1[j][i] += gh * s.x[i];
            }
        }
    }

    let lr = cfg.step_size;
    for j in 0..h {
        for i in 0..n {
            net.w1[j][i] += lr * g_w1[j][i];
        }
        net.b1[j] += lr * g_b1[j];
    }
    for r in 0..m {
        for j in 0..h {
            net.w2[r][j] += lr * g_w2[r][j];
        }
        net.b2[r] += lr * g_b2[r];
        log_std[r] += lr * g_ls[r];
    }
}

/// Fraction of uniformly sampled states in `q` whose predicted next state
/// under the deterministic mean network lands in `q′`.
pub fn success_rate(net: &ShallowReluNet, env: &TransitionEnv, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let x = env.q.sample_uniform(&mut rng);
        let u = net.forward(&x);
        if env.predicted_in_target(&x, &u) {
            hits += 1;
        }
    }
    hits as f64 / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relu::{nn_to_cpwa_over, project};
    use approx::assert_relative_eq;
    use std::f64::consts::TAU;

    fn dubins() -> NominalModel {
        NominalModel::Dubins { speed: 3.0, dt: 0.1 }
    }

    /// Heading-neighbor transition on a wide-open plane: the partition's laws
    /// steer the heading from the first cell into the second.
    struct EasyCase {
        q: AxisBox,
        q_next: AxisBox,
        pbox: AxisBox,
    }

    fn easy_case() -> EasyCase {
        EasyCase {
            q: AxisBox::new(vec![0.0, 0.0, 0.0], vec![20.0, 20.0, TAU / 8.0]).unwrap(),
            q_next: AxisBox::new(vec![0.0, 0.0, TAU / 8.0], vec![20.0, 20.0, TAU / 4.0])
                .unwrap(),
            pbox: AxisBox::new(
                vec![-0.02, -0.02, -12.0, 10.0],
                vec![0.02, 0.02, -8.0, 14.0],
            )
            .unwrap(),
        }
    }

    fn env_for<'a>(
        case: &'a EasyCase,
        model: &'a NominalModel,
        err: &'a ErrorModel,
    ) -> TransitionEnv<'a> {
        let kappa = AffineGains::from_flat(&case.pbox.center(), 1, 3);
        TransitionEnv::new(&case.q, &case.q_next, kappa, model, err, 1.0, 0.1)
    }

    #[test]
    fn reward_cases() {
        let model = dubins();
        let err = ErrorModel::Zero { out_dim: 3 };
        let case = easy_case();
        let env = env_for(&case, &model, &err);

        // u = κ(x) and predicted next in target: both terms vanish.
        let x = vec![10.0, 10.0, 0.35];
        let u = env.kappa.apply(&x);
        assert!(env.predicted_in_target(&x, &u));
        assert_relative_eq!(env.reward(&x, &u), 0.0, epsilon = 1e-12);

        // u = κ(x) but next misses the target: -w1 · distance.
        let x_miss = vec![10.0, 10.0, 0.01];
        let u_miss = vec![0.0]; // keeps the heading inside the starting cell
        let next = env.step_mean(&x_miss, &u_miss);
        assert!(!env.q_next.contains(&next));
        let dist: f64 = wrapped_sub(&next, &case.q_next.center(), &model.periods())
            .iter()
            .map(|d| d * d)
            .sum::<f64>()
            .sqrt();
        let dev: f64 = (u_miss[0] - env.kappa.apply(&x_miss)[0]).abs();
        assert_relative_eq!(
            env.reward(&x_miss, &u_miss),
            -dist - 0.1 * dev,
            epsilon = 1e-12
        );
    }

    #[test]
    fn reward_weighted_gain_term() {
        // w1 = 1, w2 = 0.1, ‖u − κ(x)‖ = 2 with the next state in target.
        let model = dubins();
        let err = ErrorModel::Zero { out_dim: 3 };
        let case = easy_case();
        let env = env_for(&case, &model, &err);
        let x = vec![10.0, 10.0, 0.3];
        let mut u = env.kappa.apply(&x);
        u[0] += 2.0;
        assert!(env.predicted_in_target(&x, &u), "case must keep the target");
        assert_relative_eq!(env.reward(&x, &u), -0.2, epsilon = 1e-12);
    }

    #[test]
    fn smoke_single_episode() {
        let model = dubins();
        let err = ErrorModel::Zero { out_dim: 3 };
        let case = easy_case();
        let env = env_for(&case, &model, &err);
        let net = ppo_train(&env, &PpoConfig::default(), 1, 7, None).unwrap();
        assert!(net.all_finite());
    }

    #[test]
    fn same_seed_same_weights() {
        let model = dubins();
        let err = ErrorModel::Zero { out_dim: 3 };
        let case = easy_case();
        let env = env_for(&case, &model, &err);
        let cfg = PpoConfig::default();
        let a = ppo_train(&env, &cfg, 40, 123, None).unwrap();
        let b = ppo_train(&env, &cfg, 40, 123, None).unwrap();
        assert_eq!(a, b);
        let c = ppo_train(&env, &cfg, 40, 124, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn trained_projected_policy_reaches_adjacent_heading_cell() {
        let model = dubins();
        let err = ErrorModel::Zero { out_dim: 3 };
        let case = easy_case();
        let env = env_for(&case, &model, &err);
        let cfg = PpoConfig::default();
        let net = ppo_train(&env, &cfg, 800, 42, None).unwrap();
        let (net, cert) = project(&net, &case.pbox, &case.q).unwrap();
        assert!(cert.violation_after <= 0.0);
        assert!(
            nn_to_cpwa_over(&net, &case.q)
                .unwrap()
                .containment_violation(&case.pbox)
                <= 0.0
        );
        let rate = success_rate(&net, &env, 100, 99);
        assert!(rate >= 0.9, "success rate {rate}");
    }
}
