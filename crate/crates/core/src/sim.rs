//! Closed-loop execution with an independent safety monitor.
//!
//! The executor steps the true system under the composed controller and
//! checks the continuous state against the task's obstacle boxes at every
//! step — deliberately not the abstract cells, so the monitor tests the
//! actual specification rather than the abstraction. Disturbances can come
//! from the configured ground truth, uniform draws over `D`, or extreme
//! points of `D`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    step_true, wrap_state, ControlInput, DisturbanceBound, ModelErrorTruth, NominalModel, State,
    Trajectory,
};
use crate::partition::StatePartition;
use crate::policy::{LocalPolicyKey, PolicyStore};
use crate::select::Selection;

/// Where the per-step disturbance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMode {
    /// The configured ground-truth model error.
    Truth,
    /// Uniform sample from `D` each step.
    RandomInD,
    /// A random extreme point of `D` each step.
    AdversarialCorners,
}

/// Why a rollout ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RolloutOutcome {
    ReachedGoal { step: usize },
    SafetyViolation { step: usize },
    /// The state left the certified region (or had no assigned policy);
    /// a liveness failure, never a crash.
    ControllerExit { step: usize },
    /// An assigned policy was absent from the store.
    MissingPolicy { step: usize, key: String },
    HorizonExhausted,
}

/// One rollout: the trajectory, the policy used at each step, and the
/// terminal cause.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutReport {
    pub trajectory: Trajectory,
    pub keys: Vec<LocalPolicyKey>,
    pub outcome: RolloutOutcome,
}

impl RolloutReport {
    pub fn reached_goal(&self) -> bool {
        matches!(self.outcome, RolloutOutcome::ReachedGoal { .. })
    }

    pub fn violated_safety(&self) -> bool {
        matches!(self.outcome, RolloutOutcome::SafetyViolation { .. })
    }
}

fn in_any_obstacle(x: &[f64], selection: &Selection) -> bool {
    selection.task.obstacles.iter().any(|o| o.contains(x))
}

/// One step of the true system under the selected disturbance source.
pub fn disturbed_step<R: Rng>(
    model: &NominalModel,
    gtruth: &ModelErrorTruth,
    d: &DisturbanceBound,
    mode: DisturbanceMode,
    x: &State,
    u: &ControlInput,
    rng: &mut R,
) -> State {
    match mode {
        DisturbanceMode::Truth => {
            step_true(model, gtruth, x, u).expect("dimensions fixed by construction")
        }
        DisturbanceMode::RandomInD => {
            let mut y = model.eval_raw(&x.coords, &u.coords);
            for (v, di) in y.iter_mut().zip(d.sample(rng)) {
                *v += di;
            }
            wrap_state(&mut y, &model.periods());
            State::new(y)
        }
        DisturbanceMode::AdversarialCorners => {
            let corner = d.corner(rng.gen_range(0..1usize << d.box_().dim()));
            let mut y = model.eval_raw(&x.coords, &u.coords);
            for (v, di) in y.iter_mut().zip(corner) {
                *v += di;
            }
            wrap_state(&mut y, &model.periods());
            State::new(y)
        }
    }
}

/// Execute the composed controller from `x0` for at most the task horizon.
#[allow(clippy::too_many_arguments)]
pub fn execute(
    x0: State,
    selection: &Selection,
    store: &PolicyStore,
    part: &StatePartition,
    model: &NominalModel,
    gtruth: &ModelErrorTruth,
    d: &DisturbanceBound,
    mode: DisturbanceMode,
    seed: u64,
) -> RolloutReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = RolloutReport {
        trajectory: Trajectory {
            states: vec![x0],
            inputs: Vec::new(),
        },
        keys: Vec::new(),
        outcome: RolloutOutcome::HorizonExhausted,
    };
    for k in 0..selection.task.horizon {
        let x = report.trajectory.last().clone();
        if in_any_obstacle(&x.coords, selection) {
            report.outcome = RolloutOutcome::SafetyViolation { step: k };
            return report;
        }
        if selection.task.goal.contains(&x.coords) {
            report.outcome = RolloutOutcome::ReachedGoal { step: k };
            return report;
        }
        let Ok(q) = part.abs_x(&x.coords) else {
            report.outcome = RolloutOutcome::ControllerExit { step: k };
            return report;
        };
        let Some(key) = selection.map.get(k, q) else {
            report.outcome = RolloutOutcome::ControllerExit { step: k };
            return report;
        };
        let Some(policy) = store.get(key) else {
            report.outcome = RolloutOutcome::MissingPolicy {
                step: k,
                key: key.to_string(),
            };
            return report;
        };
        let u = ControlInput::new(policy.net.forward(&x.coords));
        let next = disturbed_step(model, gtruth, d, mode, &x, &u, &mut rng);
        report.keys.push(*key);
        report.trajectory.inputs.push(u);
        report.trajectory.states.push(next);
    }
    // Terminal checks on the last state.
    let last = report.trajectory.last().coords.clone();
    if in_any_obstacle(&last, selection) {
        report.outcome = RolloutOutcome::SafetyViolation {
            step: selection.task.horizon,
        };
    } else if selection.task.goal.contains(&last) {
        report.outcome = RolloutOutcome::ReachedGoal {
            step: selection.task.horizon,
        };
    }
    report
}

/// Uniform samples from the certified initial region: a safe cell chosen
/// uniformly, then a uniform point inside it.
pub fn sample_x_init(
    selection: &Selection,
    part: &StatePartition,
    count: usize,
    seed: u64,
) -> Vec<State> {
    let cells: Vec<_> = selection.safe.safe.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let q = cells[rng.gen_range(0..cells.len())];
            State::new(part.cell(q).cell.sample_uniform(&mut rng))
        })
        .collect()
}

/// Aggregate of one batch of rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub label: String,
    pub mode: DisturbanceMode,
    pub rollouts: usize,
    pub successes: usize,
    pub violations: usize,
    pub controller_exits: usize,
    pub missing_policies: usize,
    pub mean_length: f64,
}

impl BatchSummary {
    pub fn success_rate(&self) -> f64 {
        if self.rollouts == 0 {
            0.0
        } else {
            self.successes as f64 / self.rollouts as f64
        }
    }
}

/// Run seeded rollouts from sampled initial states and summarize. Rollouts
/// are independent; per-rollout seeds derive from the root seed.
#[allow(clippy::too_many_arguments)]
pub fn batch_stats(
    label: &str,
    selection: &Selection,
    store: &PolicyStore,
    part: &StatePartition,
    model: &NominalModel,
    gtruth: &ModelErrorTruth,
    d: &DisturbanceBound,
    mode: DisturbanceMode,
    count: usize,
    seed_root: u64,
) -> BatchSummary {
    let starts = sample_x_init(
        selection,
        part,
        count,
        crate::config::derive_seed(seed_root, "x_init", &[]),
    );
    let reports: Vec<RolloutReport> = starts
        .into_par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let seed = crate::config::derive_seed(seed_root, "rollout", &[i as u64]);
            execute(x0, selection, store, part, model, gtruth, d, mode, seed)
        })
        .collect();
    let mut summary = BatchSummary {
        label: label.to_string(),
        mode,
        rollouts: reports.len(),
        successes: 0,
        violations: 0,
        controller_exits: 0,
        missing_policies: 0,
        mean_length: 0.0,
    };
    for r in &reports {
        match r.outcome {
            RolloutOutcome::ReachedGoal { .. } => summary.successes += 1,
            RolloutOutcome::SafetyViolation { .. } => summary.violations += 1,
            RolloutOutcome::ControllerExit { .. } => summary.controller_exits += 1,
            RolloutOutcome::MissingPolicy { .. } => summary.missing_policies += 1,
            RolloutOutcome::HorizonExhausted => {}
        }
        summary.mean_length += (r.trajectory.len() - 1) as f64;
    }
    if !reports.is_empty() {
        summary.mean_length /= reports.len() as f64;
    }
    summary
}

/// Trajectory as CSV rows `k, x..., u..., key`.
pub fn trajectory_csv(traj: &Trajectory, keys: &[LocalPolicyKey]) -> String {
    let n = traj.states.first().map_or(0, |s| s.dim());
    let m = traj.inputs.first().map_or(0, |u| u.dim());
    let mut out = String::from("k");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    for i in 1..=m {
        out.push_str(&format!(",u{i}"));
    }
    out.push_str(",policy\n");
    for (k, s) in traj.states.iter().enumerate() {
        out.push('0');
        out.pop();
        out.push_str(&k.to_string());
        for v in &s.coords {
            out.push_str(&format!(",{v:.9}"));
        }
        if k < traj.inputs.len() {
            for v in &traj.inputs[k].coords {
                out.push_str(&format!(",{v:.9}"));
            }
            out.push_str(&format!(",{}", keys.get(k).map(|x| x.to_string()).unwrap_or_default()));
        } else {
            for _ in 0..m {
                out.push(',');
            }
            out.push(',');
        }
        out.push('\n');
    }
    out
}

/// Plot the x–y plane: obstacles in blue, goal in green, trajectory in red.
pub fn trajectory_svg(domain: &crate::geom::AxisBox, selection: &Selection, traj: &Trajectory) -> String {
    let (x0, y0) = (domain.lo()[0], domain.lo()[1]);
    let (x1, y1) = (domain.hi()[0], domain.hi()[1]);
    let scale = 600.0 / (x1 - x0).max(y1 - y0);
    let w = (x1 - x0) * scale;
    let h = (y1 - y0) * scale;
    let px = |x: f64| (x - x0) * scale;
    let py = |y: f64| h - (y - y0) * scale;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.1} {h:.1}">
<rect x="0" y="0" width="{w:.1}" height="{h:.1}" fill="white" stroke="black"/>
"#
    );
    for obs in &selection.task.obstacles {
        svg.push_str(&format!(
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="steelblue" fill-opacity="0.8"/>
"#,
            px(obs.lo()[0]),
            py(obs.hi()[1]),
            (obs.hi()[0] - obs.lo()[0]) * scale,
            (obs.hi()[1] - obs.lo()[1]) * scale,
        ));
    }
    let goal = &selection.task.goal;
    svg.push_str(&format!(
        r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="seagreen" fill-opacity="0.7"/>
"#,
        px(goal.lo()[0]),
        py(goal.hi()[1]),
        (goal.hi()[0] - goal.lo()[0]) * scale,
        (goal.hi()[1] - goal.lo()[1]) * scale,
    ));
    let pts: Vec<String> = traj
        .states
        .iter()
        .map(|s| format!("{:.1},{:.1}", px(s.coords[0]), py(s.coords[1])))
        .collect();
    svg.push_str(&format!(
        r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="2"/>
"#,
        pts.join(" ")
    ));
    if let Some(first) = traj.states.first() {
        svg.push_str(&format!(
            r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="black"/>
"#,
            px(first.coords[0]),
            py(first.coords[1])
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
