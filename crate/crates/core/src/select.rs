//! Runtime task selection: safety backtracking plus finite-horizon dynamic
//! programming over the abstract MDP.
//!
//! Given a reach-avoid task, cells touching an obstacle are marked unsafe and
//! the marking is backtracked to a fixed point: a cell becomes unsafe when
//! every controller partition can reach the unsafe set in one step. On the
//! surviving cells a backward recursion maximizes the probability of reaching
//! the goal within the horizon, restricted to the safe partitions, and emits
//! a time-varying activation map assigning one stored policy per cell.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::AxisBox;
use crate::mdp::AbstractMdp;
use crate::partition::{CellId, PartId, StatePartition};
use crate::policy::{LocalPolicyKey, PolicyStore};

/// A reach-avoid task: one goal box, any number of obstacle boxes, and a step
/// horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub goal: AxisBox,
    #[serde(default)]
    pub obstacles: Vec<AxisBox>,
    pub horizon: usize,
}

impl Task {
    pub fn validate(&self, part: &StatePartition) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("task horizon must be >= 1".into()));
        }
        let dim = part.dim();
        if self.goal.dim() != dim || self.obstacles.iter().any(|o| o.dim() != dim) {
            return Err(Error::Config(format!(
                "task boxes must have dimension {dim}"
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Obstacle- and goal-marked cells.
///
/// Obstacle marking uses closed intersection (touching counts); goal marking
/// requires full containment.
#[derive(Debug, Clone, PartialEq)]
pub struct Marks {
    pub obstacles: BTreeSet<CellId>,
    pub goals: BTreeSet<CellId>,
}

pub fn mark_states(part: &StatePartition, task: &Task) -> Marks {
    let mut obstacles = BTreeSet::new();
    for obs in &task.obstacles {
        for id in part.cells_intersecting(obs) {
            obstacles.insert(id);
        }
    }
    let goals = part
        .cells()
        .iter()
        .filter(|c| task.goal.contains_box(&c.cell))
        .map(|c| c.id)
        .collect();
    Marks { obstacles, goals }
}

/// Result of the safety fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeSets {
    pub safe: BTreeSet<CellId>,
    /// Partitions whose one-step successors avoid the unsafe set, per cell.
    pub p_safe: BTreeMap<CellId, Vec<PartId>>,
    /// Iterations until the fixed point stabilized.
    pub iterations: usize,
    /// Unsafe-set size after each iteration (monotonically nondecreasing).
    pub unsafe_sizes: Vec<usize>,
}

impl SafeSets {
    pub fn is_empty(&self) -> bool {
        self.safe.is_empty()
    }

    /// Boxes of the safe cells; their union is the certified initial set.
    pub fn init_region<'a>(&'a self, part: &'a StatePartition) -> impl Iterator<Item = &'a AxisBox> {
        self.safe.iter().map(move |&q| &part.cell(q).cell)
    }
}

/// Backtrack unsafe cells from the obstacle marking until stable.
pub fn backtrack_safety(mdp: &AbstractMdp, marks: &Marks) -> SafeSets {
    let mut is_unsafe = vec![false; mdp.n_states];
    for &q in &marks.obstacles {
        is_unsafe[q.0] = true;
    }
    let mut unsafe_sizes = vec![marks.obstacles.len()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut grew = false;
        let mut next_unsafe = is_unsafe.clone();
        for q in 0..mdp.n_states {
            if is_unsafe[q] {
                continue;
            }
            let all_hit = (0..mdp.n_actions).all(|p| {
                mdp.row(CellId(q), PartId(p))
                    .next
                    .iter()
                    .any(|&qn| is_unsafe[qn.0])
            });
            if all_hit {
                next_unsafe[q] = true;
                grew = true;
            }
        }
        is_unsafe = next_unsafe;
        unsafe_sizes.push(is_unsafe.iter().filter(|&&b| b).count());
        if !grew {
            break;
        }
    }

    let mut safe = BTreeSet::new();
    let mut p_safe = BTreeMap::new();
    for q in 0..mdp.n_states {
        if is_unsafe[q] {
            continue;
        }
        let q = CellId(q);
        let parts: Vec<PartId> = (0..mdp.n_actions)
            .map(PartId)
            .filter(|&p| mdp.row(q, p).next.iter().all(|&qn| !is_unsafe[qn.0]))
            .collect();
        debug_assert!(!parts.is_empty(), "safe cell without safe partitions");
        safe.insert(q);
        p_safe.insert(q, parts);
    }
    SafeSets {
        safe,
        p_safe,
        iterations,
        unsafe_sizes,
    }
}

/// `V̂*_k(q)` for `k = 0..=H` over all cells (zero outside the safe set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub horizon: usize,
    pub n_states: usize,
    values: Vec<f64>,
}

impl ValueTable {
    fn zeroed(horizon: usize, n_states: usize) -> Self {
        Self {
            horizon,
            n_states,
            values: vec![0.0; (horizon + 1) * n_states],
        }
    }

    pub fn value(&self, k: usize, q: CellId) -> f64 {
        self.values[k * self.n_states + q.0]
    }

    fn set(&mut self, k: usize, q: CellId, v: f64) {
        self.values[k * self.n_states + q.0] = v;
    }
}

/// Time-varying assignment of stored policies to safe cells.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationMap {
    pub horizon: usize,
    assignments: BTreeMap<(usize, CellId), LocalPolicyKey>,
}

impl ActivationMap {
    pub fn get(&self, k: usize, q: CellId) -> Option<&LocalPolicyKey> {
        self.assignments.get(&(k, q))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, CellId), &LocalPolicyKey)> {
        self.assignments.iter()
    }

    /// Distinct policy keys referenced anywhere in the map.
    pub fn distinct_keys(&self) -> BTreeSet<LocalPolicyKey> {
        self.assignments.values().cloned().collect()
    }

    /// Keys assigned at step `k = 0`, one per cell (the offline training set).
    pub fn step_zero_keys(&self) -> BTreeMap<CellId, LocalPolicyKey> {
        self.assignments
            .iter()
            .filter(|((k, _), _)| *k == 0)
            .map(|((_, q), key)| (*q, *key))
            .collect()
    }
}

/// Backward recursion maximizing the reach probability through safe
/// partitions; ties in both argmaxes break to the lowest id.
pub fn dp_liveness(
    mdp: &AbstractMdp,
    safe: &SafeSets,
    goals: &BTreeSet<CellId>,
    horizon: usize,
) -> (ActivationMap, ValueTable) {
    let mut values = ValueTable::zeroed(horizon, mdp.n_states);
    let mut map = ActivationMap {
        horizon,
        ..Default::default()
    };
    for &q in &safe.safe {
        if goals.contains(&q) {
            values.set(horizon, q, 1.0);
        }
    }
    for k in (0..horizon).rev() {
        for &q in &safe.safe {
            let parts = &safe.p_safe[&q];
            let in_goal = goals.contains(&q);
            let mut best_p = parts[0];
            let mut best_v = f64::NEG_INFINITY;
            for &p in parts {
                let v = if in_goal {
                    1.0
                } else {
                    mdp.row(q, p)
                        .probs
                        .iter()
                        .filter(|(qn, _)| safe.safe.contains(qn))
                        .map(|&(qn, pr)| values.value(k + 1, qn) * pr)
                        .sum()
                };
                if v > best_v {
                    best_v = v;
                    best_p = p;
                }
            }
            values.set(k, q, best_v);

            // Most likely safe successor under the chosen partition.
            let mut q_star: Option<(CellId, f64)> = None;
            for &(qn, pr) in &mdp.row(q, best_p).probs {
                if !safe.safe.contains(&qn) {
                    continue;
                }
                if q_star.map_or(true, |(_, best)| pr > best) {
                    q_star = Some((qn, pr));
                }
            }
            if let Some((q_next, _)) = q_star {
                map.assignments.insert(
                    (k, q),
                    LocalPolicyKey {
                        q,
                        p: best_p,
                        q_next,
                    },
                );
            }
        }
    }
    (map, values)
}

/// Full selection output for one task.
#[derive(Debug, Clone)]
pub struct Selection {
    pub task: Task,
    pub marks: Marks,
    pub safe: SafeSets,
    pub map: ActivationMap,
    pub values: ValueTable,
    /// Keys referenced by the map but absent from the store; the transfer
    /// runtime fills these on demand.
    pub missing: Vec<LocalPolicyKey>,
}

/// Selection result; an empty safe set is an explicit outcome, not an error.
#[derive(Debug, Clone)]
pub enum SelectionOutcome {
    NoSafeStates,
    Selected(Box<Selection>),
}

/// Run the full selection for a task against a built MDP and the current
/// policy store.
pub fn select(
    task: &Task,
    part: &StatePartition,
    mdp: &AbstractMdp,
    store: Option<&PolicyStore>,
) -> Result<SelectionOutcome> {
    task.validate(part)?;
    let marks = mark_states(part, task);
    let safe = backtrack_safety(mdp, &marks);
    if safe.is_empty() {
        return Ok(SelectionOutcome::NoSafeStates);
    }
    let (map, values) = dp_liveness(mdp, &safe, &marks.goals, task.horizon);
    let missing = map
        .distinct_keys()
        .into_iter()
        .filter(|key| store.map_or(true, |s| !s.contains(key)))
        .collect();
    Ok(SelectionOutcome::Selected(Box::new(Selection {
        task: task.clone(),
        marks,
        safe,
        map,
        values,
        missing,
    })))
}

impl Selection {
    /// JSON report: certified initial cells, step-0 values, the activation
    /// map, and the missing-key work list.
    pub fn report(&self, part: &StatePartition) -> serde_json::Value {
        serde_json::json!({
            "x_init_cells": self.safe.safe.iter().map(|q| q.0).collect::<Vec<_>>(),
            "x_init_boxes": self.safe.init_region(part).collect::<Vec<_>>(),
            "values_k0": self.safe.safe.iter()
                .map(|&q| serde_json::json!({"cell": q.0, "value": self.values.value(0, q)}))
                .collect::<Vec<_>>(),
            "activation": self.map.iter().map(|((k, q), key)| serde_json::json!({
                "k": k, "cell": q.0,
                "policy": {"q": key.q.0, "p": key.p.0, "q_next": key.q_next.0},
            })).collect::<Vec<_>>(),
            "missing_policies": self.missing.iter().map(|k| k.to_string()).collect::<Vec<_>>(),
            "goal_cells": self.marks.goals.iter().map(|q| q.0).collect::<Vec<_>>(),
            "obstacle_cells": self.marks.obstacles.iter().map(|q| q.0).collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::MdpRow;
    use crate::partition::build_state_grid;

    fn row(next: Vec<usize>, probs: Vec<(usize, f64)>) -> MdpRow {
        MdpRow {
            next: next.into_iter().map(CellId).collect(),
            probs: probs.into_iter().map(|(q, p)| (CellId(q), p)).collect(),
            leaves_domain: false,
        }
    }

    /// Four-state, two-action MDP with nine transitions: the toy instance
    /// used throughout. q3 is a sink with no outgoing transitions; q1 → q3
    /// under P0 is deterministic, q3 → q3 absorbs under P0.
    /// (Cell ids are zero-based here: q0..q3.)
    fn toy_mdp() -> AbstractMdp {
        AbstractMdp::from_rows(
            4,
            2,
            vec![
                row(vec![1], vec![(1, 1.0)]),               // q0, P0
                row(vec![2, 3], vec![(2, 0.05), (3, 0.1)]), // q0, P1
                row(vec![3], vec![(3, 1.0)]),               // q1, P0
                row(vec![0, 2], vec![(0, 0.6), (2, 0.2)]),  // q1, P1
                row(vec![], vec![]),                        // q2, P0
                row(vec![], vec![]),                        // q2, P1
                row(vec![3], vec![(3, 1.0)]),               // q3, P0
                row(vec![2, 3], vec![(2, 0.1), (3, 0.8)]),  // q3, P1
            ],
        )
        .unwrap()
    }

    /// 2×2 grid over the unit square matching the toy MDP's four cells.
    fn toy_part() -> StatePartition {
        build_state_grid(
            AxisBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            &[2, 2],
            vec![None, None],
        )
        .unwrap()
    }

    fn goal_q3() -> AxisBox {
        // Exactly the box of cell q3 = [0.5,1]×[0.5,1].
        AxisBox::new(vec![0.5, 0.5], vec![1.0, 1.0]).unwrap()
    }

    fn obstacle_q1() -> AxisBox {
        // Inside cell q1 = [0.5,1]×[0,0.5].
        AxisBox::new(vec![0.6, 0.1], vec![0.9, 0.4]).unwrap()
    }

    #[test]
    fn marking_conventions() {
        let part = toy_part();
        // Obstacle touching a cell face marks both cells (closed overlap).
        let touching = Task {
            goal: goal_q3(),
            obstacles: vec![AxisBox::new(vec![0.2, 0.2], vec![0.5, 0.3]).unwrap()],
            horizon: 3,
        };
        let marks = mark_states(&part, &touching);
        assert!(marks.obstacles.contains(&CellId(0)));
        assert!(marks.obstacles.contains(&CellId(1)));

        // Goal box equal to one cell marks exactly that cell.
        assert_eq!(marks.goals.iter().cloned().collect::<Vec<_>>(), vec![CellId(3)]);

        // A goal covering one and a half cells only keeps the covered cell.
        let partial = Task {
            goal: AxisBox::new(vec![0.0, 0.5], vec![0.75, 1.0]).unwrap(),
            obstacles: vec![],
            horizon: 3,
        };
        let marks = mark_states(&part, &partial);
        assert_eq!(marks.goals.iter().cloned().collect::<Vec<_>>(), vec![CellId(2)]);
    }

    #[test]
    fn no_obstacles_keeps_every_cell_safe() {
        let mdp = toy_mdp();
        let marks = Marks {
            obstacles: BTreeSet::new(),
            goals: BTreeSet::from([CellId(3)]),
        };
        let safe = backtrack_safety(&mdp, &marks);
        assert_eq!(safe.safe.len(), 4);
        for q in 0..4 {
            assert_eq!(
                safe.p_safe[&CellId(q)],
                vec![PartId(0), PartId(1)],
                "cell {q}"
            );
        }
    }

    #[test]
    fn chain_backtracks_one_step() {
        // q0 -P0-> q1 -both-> q2(obstacle): q1 unsafe after one iteration,
        // q0 survives through P1 (self loop).
        let mdp = AbstractMdp::from_rows(
            3,
            2,
            vec![
                row(vec![1], vec![(1, 1.0)]), // q0, P0
                row(vec![0], vec![(0, 1.0)]), // q0, P1
                row(vec![2], vec![(2, 1.0)]), // q1, P0
                row(vec![2], vec![(2, 0.9)]), // q1, P1
                row(vec![2], vec![(2, 1.0)]), // q2, P0
                row(vec![2], vec![(2, 1.0)]), // q2, P1
            ],
        )
        .unwrap();
        let marks = Marks {
            obstacles: BTreeSet::from([CellId(2)]),
            goals: BTreeSet::new(),
        };
        let safe = backtrack_safety(&mdp, &marks);
        assert_eq!(safe.safe.iter().cloned().collect::<Vec<_>>(), vec![CellId(0)]);
        assert_eq!(safe.p_safe[&CellId(0)], vec![PartId(1)]);
        // Unsafe set grew monotonically and stabilized within |X| iterations.
        assert!(safe.iterations <= 3);
        assert!(safe.unsafe_sizes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn obstacle_task_excludes_partition_into_it() {
        // Task with the obstacle inside q1: at q0 only P1 is safe, and the
        // activation at q0 must point to (q0, P1, q3).
        let part = toy_part();
        let mdp = toy_mdp();
        let task = Task {
            goal: goal_q3(),
            obstacles: vec![obstacle_q1()],
            horizon: 2,
        };
        let outcome = select(&task, &part, &mdp, None).unwrap();
        let sel = match outcome {
            SelectionOutcome::Selected(sel) => sel,
            SelectionOutcome::NoSafeStates => panic!("expected a safe set"),
        };
        assert_eq!(sel.safe.p_safe[&CellId(0)], vec![PartId(1)]);
        let key = sel.map.get(0, CellId(0)).unwrap();
        assert_eq!(
            *key,
            LocalPolicyKey {
                q: CellId(0),
                p: PartId(1),
                q_next: CellId(3)
            }
        );
    }

    #[test]
    fn goal_cells_hold_value_one_at_every_step() {
        let mdp = toy_mdp();
        let marks = Marks {
            obstacles: BTreeSet::new(),
            goals: BTreeSet::from([CellId(3)]),
        };
        let safe = backtrack_safety(&mdp, &marks);
        let (_, values) = dp_liveness(&mdp, &safe, &marks.goals, 4);
        for k in 0..=4 {
            assert_eq!(values.value(k, CellId(3)), 1.0);
        }
    }

    #[test]
    fn detour_beats_direct_low_probability_jump() {
        // Goal q3, no obstacles, horizon 2: going q0 → q1 → q3 reaches the
        // goal with probability 1 and beats the direct 0.1 jump under P1.
        let mdp = toy_mdp();
        let marks = Marks {
            obstacles: BTreeSet::new(),
            goals: BTreeSet::from([CellId(3)]),
        };
        let safe = backtrack_safety(&mdp, &marks);
        let (map, values) = dp_liveness(&mdp, &safe, &marks.goals, 2);
        assert_eq!(values.value(0, CellId(0)), 1.0);
        let key = map.get(0, CellId(0)).unwrap();
        assert_eq!(key.p, PartId(0));
        assert_eq!(key.q_next, CellId(1));
        // And the sink q2 has no useful assignment (no safe successor mass).
        assert!(map.get(0, CellId(2)).is_none());
    }

    #[test]
    fn short_horizon_cannot_cross_a_long_chain() {
        // Deterministic chain q0 → q1 → q2 → q3(goal); horizon 2 < 3 steps.
        let mdp = AbstractMdp::from_rows(
            4,
            1,
            vec![
                row(vec![1], vec![(1, 1.0)]),
                row(vec![2], vec![(2, 1.0)]),
                row(vec![3], vec![(3, 1.0)]),
                row(vec![3], vec![(3, 1.0)]),
            ],
        )
        .unwrap();
        let marks = Marks {
            obstacles: BTreeSet::new(),
            goals: BTreeSet::from([CellId(3)]),
        };
        let safe = backtrack_safety(&mdp, &marks);
        let (_, v2) = dp_liveness(&mdp, &safe, &marks.goals, 2);
        assert_eq!(v2.value(0, CellId(0)), 0.0);
        let (_, v3) = dp_liveness(&mdp, &safe, &marks.goals, 3);
        assert_eq!(v3.value(0, CellId(0)), 1.0);
    }

    #[test]
    fn goal_covering_domain_trivializes_selection() {
        let part = toy_part();
        let mdp = toy_mdp();
        let task = Task {
            goal: AxisBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            obstacles: vec![],
            horizon: 3,
        };
        let outcome = select(&task, &part, &mdp, None).unwrap();
        let sel = match outcome {
            SelectionOutcome::Selected(sel) => sel,
            _ => panic!(),
        };
        for &q in &sel.safe.safe {
            assert_eq!(sel.values.value(0, q), 1.0);
        }
    }

    #[test]
    fn blocked_domain_reports_no_safe_states() {
        let part = toy_part();
        let mdp = toy_mdp();
        let task = Task {
            goal: goal_q3(),
            obstacles: vec![AxisBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()],
            horizon: 2,
        };
        assert!(matches!(
            select(&task, &part, &mdp, None).unwrap(),
            SelectionOutcome::NoSafeStates
        ));
    }

    #[test]
    fn values_bounded_and_monotone_in_remaining_horizon() {
        let mdp = toy_mdp();
        let marks = Marks {
            obstacles: BTreeSet::new(),
            goals: BTreeSet::from([CellId(3)]),
        };
        let safe = backtrack_safety(&mdp, &marks);
        let (_, values) = dp_liveness(&mdp, &safe, &marks.goals, 5);
        for k in 0..5 {
            for &q in &safe.safe {
                let now = values.value(k, q);
                let later = values.value(k + 1, q);
                assert!((0.0..=1.0).contains(&now));
                assert!(now >= later - 1e-15, "k={k} q={q:?}: {now} < {later}");
            }
        }
    }

    #[test]
    fn safety_closure_holds_exhaustively() {
        let part = toy_part();
        let mdp = toy_mdp();
        let task = Task {
            goal: goal_q3(),
            obstacles: vec![obstacle_q1()],
            horizon: 2,
        };
        let marks = mark_states(&part, &task);
        let safe = backtrack_safety(&mdp, &marks);
        for (&q, parts) in &safe.p_safe {
            for &p in parts {
                for qn in &mdp.row(q, p).next {
                    assert!(safe.safe.contains(qn), "{q:?} under {p:?} reaches {qn:?}");
                }
            }
        }
    }

    #[test]
    fn argmax_invariant_under_uniform_row_scaling() {
        // One-step decisions: scaling every transition probability by a
        // common positive factor changes values but not the chosen partition
        // or successor.
        let mdp = toy_mdp();
        let scaled_rows: Vec<MdpRow> = mdp
            .rows()
            .iter()
            .map(|r| MdpRow {
                next: r.next.clone(),
                probs: r.probs.iter().map(|&(q, p)| (q, 0.37 * p)).collect(),
                leaves_domain: r.leaves_domain,
            })
            .collect();
        let scaled = AbstractMdp::from_rows(4, 2, scaled_rows).unwrap();
        let marks = Marks {
            obstacles: BTreeSet::new(),
            goals: BTreeSet::from([CellId(3)]),
        };
        let safe = backtrack_safety(&mdp, &marks);
        let (map_a, va) = dp_liveness(&mdp, &safe, &marks.goals, 1);
        let (map_b, vb) = dp_liveness(&scaled, &safe, &marks.goals, 1);
        for &q in &safe.safe {
            assert_eq!(map_a.get(0, q), map_b.get(0, q), "assignment moved at {q:?}");
            if !marks.goals.contains(&q) {
                assert!((va.value(0, q) * 0.37 - vb.value(0, q)).abs() < 1e-15);
            }
        }
    }

    /// Independent oracle for the safety fixed point: shrink the candidate
    /// set from above instead of growing the unsafe set from below.
    fn greatest_safe_set(mdp: &AbstractMdp, obstacles: &BTreeSet<CellId>) -> BTreeSet<CellId> {
        let mut safe: BTreeSet<CellId> = (0..mdp.n_states)
            .map(CellId)
            .filter(|q| !obstacles.contains(q))
            .collect();
        loop {
            let keep: BTreeSet<CellId> = safe
                .iter()
                .cloned()
                .filter(|&q| {
                    (0..mdp.n_actions).any(|p| {
                        mdp.row(q, PartId(p)).next.iter().all(|qn| safe.contains(qn))
                    })
                })
                .collect();
            if keep == safe {
                return safe;
            }
            safe = keep;
        }
    }

    #[test]
    fn random_grids_match_dual_fixed_point_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n_states = rng.gen_range(4..=16);
            let n_actions = rng.gen_range(1..=4);
            let mut rows = Vec::new();
            for _ in 0..n_states * n_actions {
                let fanout = rng.gen_range(0..=3usize);
                let mut nexts = BTreeSet::new();
                for _ in 0..fanout {
                    nexts.insert(CellId(rng.gen_range(0..n_states)));
                }
                let next: Vec<CellId> = nexts.into_iter().collect();
                let weights: Vec<f64> = next.iter().map(|_| rng.gen_range(0.01..1.0)).collect();
                let total: f64 = weights.iter().sum();
                let mass = rng.gen_range(0.1..0.99);
                let probs = next
                    .iter()
                    .zip(&weights)
                    .map(|(&q, &w)| (q, w / total * mass))
                    .collect();
                rows.push(MdpRow {
                    next,
                    probs,
                    leaves_domain: false,
                });
            }
            let mdp = AbstractMdp::from_rows(n_states, n_actions, rows).unwrap();
            let mut obstacles = BTreeSet::new();
            for _ in 0..rng.gen_range(0..=2usize) {
                obstacles.insert(CellId(rng.gen_range(0..n_states)));
            }
            let marks = Marks {
                obstacles: obstacles.clone(),
                goals: BTreeSet::new(),
            };
            let safe = backtrack_safety(&mdp, &marks);
            assert_eq!(safe.safe, greatest_safe_set(&mdp, &obstacles));
            assert!(safe.iterations <= n_states + 1);
        }
    }
}
