//! Partial-library training and online gap filling.
//!
//! Instead of training every transition of the MDP, the offline pass trains
//! only the policies a training task's activation map actually assigns at
//! step zero. At runtime, when an unseen task asks for a policy that was
//! never trained, the nearest stored policy under a center-distance metric
//! seeds a short fine-tuning run; the result is projected like any other
//! policy, so the safety certificate is preserved.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;

use crate::dynamics::{
    ControlInput, DisturbanceBound, ModelErrorTruth, NominalModel, State, Trajectory,
};
use crate::error::{Error, Result};
use crate::gp::ErrorModel;
use crate::partition::{ControllerGrid, StatePartition};
use crate::policy::{train_one, LocalPolicyKey, PolicyStore, StoredPolicy};
use crate::ppo::{ppo_train, PpoConfig, TransitionEnv};
use crate::relu::project;
use crate::select::Selection;
use crate::sim::{disturbed_step, DisturbanceMode};

/// Weights of the transition-distance metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl TransferWeights {
    pub fn new(alpha: [f64; 3]) -> Result<Self> {
        if alpha.iter().any(|&a| a < 0.0) || alpha.iter().all(|&a| a == 0.0) {
            return Err(Error::Config(
                "transfer weights must be nonnegative and not all zero".into(),
            ));
        }
        Ok(Self {
            alpha1: alpha[0],
            alpha2: alpha[1],
            alpha3: alpha[2],
        })
    }
}

/// Distance between two transitions: weighted Euclidean distances between the
/// source and target cell centers plus the max-norm distance between the
/// partition centers.
pub fn distance(
    a: &LocalPolicyKey,
    b: &LocalPolicyKey,
    part: &StatePartition,
    grid: &ControllerGrid,
    w: &TransferWeights,
) -> f64 {
    let norm2 = |x: &[f64], y: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let src = norm2(&part.center(a.q), &part.center(b.q));
    let dst = norm2(&part.center(a.q_next), &part.center(b.q_next));
    let pa = grid.part(a.p).cell.center();
    let pb = grid.part(b.p).cell.center();
    let law = pa
        .iter()
        .zip(&pb)
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    w.alpha1 * src + w.alpha2 * dst + w.alpha3 * law
}

/// Offline pass over one training task: train the policy assigned by the
/// step-zero activation map at every safe non-goal cell.
#[allow(clippy::too_many_arguments)]
pub fn train_transfer(
    selection: &Selection,
    part: &StatePartition,
    grid: &ControllerGrid,
    model: &NominalModel,
    err: &ErrorModel,
    cfg: &PpoConfig,
    episodes: usize,
    seed_root: u64,
) -> (PolicyStore, Vec<(LocalPolicyKey, String)>) {
    let mut store = PolicyStore::new();
    let mut failures = Vec::new();
    for (q, key) in selection.map.step_zero_keys() {
        if selection.marks.goals.contains(&q) {
            continue; // execution halts on goal entry; no policy is consumed there
        }
        let seed = crate::policy::key_seed(seed_root, &key);
        match train_one(key, part, grid, model, err, cfg, episodes, seed, None) {
            Ok(policy) => store.insert(policy),
            Err(e) => failures.push((key, e.to_string())),
        }
    }
    store.complete = failures.is_empty();
    (store, failures)
}

/// Record of one closed-loop run with online gap filling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferRun {
    pub trajectory: Trajectory,
    /// Policy key applied at each step.
    pub keys: Vec<LocalPolicyKey>,
    /// Keys trained online during this run, in insertion order.
    pub online_trained: Vec<LocalPolicyKey>,
    pub reached_goal: bool,
    /// Step at which the run ended (goal entry, domain exit, or horizon).
    pub steps: usize,
    /// The run left the certified safe region (liveness failure).
    pub controller_exit: bool,
}

/// Execute a task with the true system, training missing policies online.
///
/// At each step the current cell's assigned transition is looked up; when the
/// store lacks it, the nearest stored policy (under [`distance`]) initializes
/// a short training run whose projected result is inserted before use. The
/// per-step disturbance source follows `mode`.
#[allow(clippy::too_many_arguments)]
pub fn run_with_transfer(
    x0: State,
    selection: &Selection,
    store: &mut PolicyStore,
    part: &StatePartition,
    grid: &ControllerGrid,
    model: &NominalModel,
    err: &ErrorModel,
    gtruth: &ModelErrorTruth,
    d: &DisturbanceBound,
    mode: DisturbanceMode,
    weights: &TransferWeights,
    cfg: &PpoConfig,
    online_episodes: usize,
    seed_root: u64,
) -> Result<TransferRun> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::config::derive_seed(
        seed_root,
        "transfer_run",
        &[],
    ));
    let horizon = selection.task.horizon;
    let mut run = TransferRun {
        trajectory: Trajectory {
            states: vec![x0],
            inputs: Vec::new(),
        },
        keys: Vec::new(),
        online_trained: Vec::new(),
        reached_goal: false,
        steps: 0,
        controller_exit: false,
    };
    for k in 0..horizon {
        let x = run.trajectory.last().clone();
        if selection.task.goal.contains(&x.coords) {
            run.reached_goal = true;
            return Ok(run);
        }
        let Ok(q) = part.abs_x(&x.coords) else {
            run.controller_exit = true;
            return Ok(run);
        };
        let Some(&key) = selection.map.get(k, q) else {
            run.controller_exit = true;
            return Ok(run);
        };
        if !store.contains(&key) {
            let policy = train_missing(
                key, store, part, grid, model, err, weights, cfg, online_episodes, seed_root,
            )?;
            store.insert(policy);
            run.online_trained.push(key);
        }
        let net = &store.get(&key).expect("inserted above").net;
        let u = ControlInput::new(net.forward(&x.coords));
        let next = disturbed_step(model, gtruth, d, mode, &x, &u, &mut rng);
        run.trajectory.inputs.push(u);
        run.trajectory.states.push(next);
        run.keys.push(key);
        run.steps = k + 1;
    }
    run.reached_goal = selection
        .task
        .goal
        .contains(&run.trajectory.last().coords);
    Ok(run)
}

/// Train one missing policy online: nearest-donor initialization, short
/// fine-tune, projection.
#[allow(clippy::too_many_arguments)]
fn train_missing(
    key: LocalPolicyKey,
    store: &PolicyStore,
    part: &StatePartition,
    grid: &ControllerGrid,
    model: &NominalModel,
    err: &ErrorModel,
    weights: &TransferWeights,
    cfg: &PpoConfig,
    online_episodes: usize,
    seed_root: u64,
) -> Result<StoredPolicy> {
    let donor = store
        .iter()
        .map(|p| (distance(&p.key, &key, part, grid, weights), p))
        .min_by(|(da, pa), (db, pb)| {
            da.partial_cmp(db)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(pa.key.cmp(&pb.key))
        })
        .map(|(_, p)| p)
        .ok_or(Error::NoDonorPolicy)?;

    let q = &part.cell(key.q).cell;
    let q_next = &part.cell(key.q_next).cell;
    let pbox = &grid.part(key.p).cell;
    let kappa = grid.center(key.p);
    let env = TransitionEnv::new(q, q_next, kappa, model, err, cfg.w1, cfg.w2);
    let seed = crate::policy::key_seed(seed_root, &key);
    let net = ppo_train(&env, cfg, online_episodes, seed, Some(&donor.net))?;
    let (net, cert) = project(&net, pbox, q)?;
    Ok(StoredPolicy {
        key,
        net,
        cert,
        episodes: online_episodes,
        seed,
    })
}
