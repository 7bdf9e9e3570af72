//! The policy library: one projected network per MDP transition.
//!
//! Keys are `(q, P, q′)` triples. Every stored network carries its projection
//! certificate, the episode count it was trained for, and the seed that
//! produced it, so a library on disk can be audited and reproduced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::dynamics::NominalModel;
use crate::error::{Error, Result};
use crate::gp::ErrorModel;
use crate::mdp::AbstractMdp;
use crate::partition::{CellId, ControllerGrid, PartId, StatePartition};
use crate::ppo::{ppo_train, PpoConfig, TransitionEnv};
use crate::relu::{project, ProjectionCert, ShallowReluNet};

/// Identifier of a local policy: the MDP transition it was trained for.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct LocalPolicyKey {
    pub q: CellId,
    pub p: PartId,
    pub q_next: CellId,
}

impl fmt::Display for LocalPolicyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}_p{}_q{}", self.q.0, self.p.0, self.q_next.0)
    }
}

/// A trained, projected local policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPolicy {
    pub key: LocalPolicyKey,
    pub net: ShallowReluNet,
    pub cert: ProjectionCert,
    pub episodes: usize,
    pub seed: u64,
}

/// Map from transitions to trained policies.
#[derive(Debug, Clone, Default)]
pub struct PolicyStore {
    policies: BTreeMap<LocalPolicyKey, StoredPolicy>,
    /// Every transition requested at build time was trained and projected.
    pub complete: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    complete: bool,
    keys: Vec<LocalPolicyKey>,
}

impl PolicyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn get(&self, key: &LocalPolicyKey) -> Option<&StoredPolicy> {
        self.policies.get(key)
    }

    pub fn contains(&self, key: &LocalPolicyKey) -> bool {
        self.policies.contains_key(key)
    }

    pub fn insert(&mut self, policy: StoredPolicy) {
        self.policies.insert(policy.key, policy);
    }

    pub fn keys(&self) -> impl Iterator<Item = &LocalPolicyKey> {
        self.policies.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredPolicy> {
        self.policies.values()
    }

    /// Persist one file per key plus a manifest stamped with the config hash.
    /// Writes go through a temp file and a rename.
    pub fn save_dir(&self, dir: &Path, config_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for policy in self.policies.values() {
            let tmp = dir.join(format!("{}.json.tmp", policy.key));
            std::fs::write(&tmp, serde_json::to_vec_pretty(policy)?)?;
            std::fs::rename(&tmp, dir.join(format!("{}.json", policy.key)))?;
        }
        let manifest = Manifest {
            config_hash: config_hash.to_string(),
            complete: self.complete,
            keys: self.policies.keys().cloned().collect(),
        };
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
        std::fs::rename(&tmp, dir.join("manifest.json"))?;
        Ok(())
    }

    /// Load a store written by [`PolicyStore::save_dir`], refusing a manifest
    /// stamped with a different config hash.
    pub fn load_dir(dir: &Path, config_hash: &str) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if manifest.config_hash != config_hash {
            return Err(Error::HashMismatch {
                artifact_hash: manifest.config_hash,
                config_hash: config_hash.to_string(),
            });
        }
        let mut store = PolicyStore {
            complete: manifest.complete,
            ..Default::default()
        };
        for key in manifest.keys {
            let policy: StoredPolicy =
                serde_json::from_slice(&std::fs::read(dir.join(format!("{key}.json")))?)?;
            store.insert(policy);
        }
        Ok(store)
    }
}

/// Result of a batch training run: the (possibly partial) store plus the
/// per-key failures.
#[derive(Debug)]
pub struct TrainOutcome {
    pub store: PolicyStore,
    pub failures: Vec<(LocalPolicyKey, String)>,
}

/// Train and project the policy of a single transition.
#[allow(clippy::too_many_arguments)]
pub fn train_one(
    key: LocalPolicyKey,
    part: &StatePartition,
    grid: &ControllerGrid,
    model: &NominalModel,
    err: &ErrorModel,
    cfg: &PpoConfig,
    episodes: usize,
    seed: u64,
    init: Option<&ShallowReluNet>,
) -> Result<StoredPolicy> {
    let q = &part.cell(key.q).cell;
    let q_next = &part.cell(key.q_next).cell;
    let pbox = &grid.part(key.p).cell;
    let kappa = grid.center(key.p);
    let env = TransitionEnv::new(q, q_next, kappa, model, err, cfg.w1, cfg.w2);
    let net = ppo_train(&env, cfg, episodes, seed, init)?;
    let (net, cert) = project(&net, pbox, q)?;
    Ok(StoredPolicy {
        key,
        net,
        cert,
        episodes,
        seed,
    })
}

/// Train one local policy per positive-probability transition of the MDP.
///
/// Per-key jobs are independent and run in parallel; failures are collected
/// rather than aborting the batch, and the store's completeness flag records
/// whether every requested key made it in.
pub fn train_all(
    mdp: &AbstractMdp,
    part: &StatePartition,
    grid: &ControllerGrid,
    model: &NominalModel,
    err: &ErrorModel,
    cfg: &PpoConfig,
    episodes: usize,
    seed_root: u64,
) -> TrainOutcome {
    let mut keys = Vec::new();
    for (q, p) in mdp.pairs() {
        for &(q_next, _) in &mdp.row(q, p).probs {
            keys.push(LocalPolicyKey { q, p, q_next });
        }
    }
    train_keys(&keys, part, grid, model, err, cfg, episodes, seed_root)
}

/// Train an explicit set of transitions.
#[allow(clippy::too_many_arguments)]
pub fn train_keys(
    keys: &[LocalPolicyKey],
    part: &StatePartition,
    grid: &ControllerGrid,
    model: &NominalModel,
    err: &ErrorModel,
    cfg: &PpoConfig,
    episodes: usize,
    seed_root: u64,
) -> TrainOutcome {
    let results: Vec<(LocalPolicyKey, Result<StoredPolicy>)> = keys
        .par_iter()
        .map(|&key| {
            let seed = key_seed(seed_root, &key);
            (
                key,
                train_one(key, part, grid, model, err, cfg, episodes, seed, None),
            )
        })
        .collect();
    let mut store = PolicyStore::new();
    let mut failures = Vec::new();
    for (key, result) in results {
        match result {
            Ok(policy) => store.insert(policy),
            Err(e) => failures.push((key, e.to_string())),
        }
    }
    store.complete = failures.is_empty();
    TrainOutcome { store, failures }
}

/// Stable per-transition seed derived from the root seed.
pub fn key_seed(root: u64, key: &LocalPolicyKey) -> u64 {
    crate::config::derive_seed(
        root,
        "ppo",
        &[key.q.0 as u64, key.p.0 as u64, key.q_next.0 as u64],
    )
}
