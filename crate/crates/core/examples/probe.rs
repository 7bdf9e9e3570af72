use ctrlsynth::config::{derive_seed, RunConfig};
use ctrlsynth::gp::{collect_residuals, fit, ErrorModel};
use ctrlsynth::mdp::build_mdp;
use ctrlsynth::policy::train_keys;
use ctrlsynth::select::{select, SelectionOutcome, Task};
use ctrlsynth::sim::*;
use ctrlsynth::geom::AxisBox;
use ctrlsynth::dynamics::State;
use rand::{Rng, SeedableRng};
use std::f64::consts::TAU;

fn main() {
    let cfg = RunConfig::example_dubins();
    let model = cfg.dynamics.model.clone();
    let part = cfg.build_partition().unwrap();
    let grid = cfg.build_controller_grid().unwrap();
    let d = cfg.disturbance().unwrap();
    let data = collect_residuals(&model, &cfg.truth, part.domain(), &cfg.input_box().unwrap(),
        cfg.gp.samples, derive_seed(cfg.seed, "residuals", &[])).unwrap();
    let err = ErrorModel::Gp(fit(&data, &cfg.gp_hypers()).unwrap());
    let mdp = build_mdp(&part, &grid, &model, &err, &d);

    let task = Task {
        goal: AxisBox::new(vec![2.8, 0.4, 0.0], vec![4.0, 1.6, TAU]).unwrap(),
        obstacles: vec![],
        horizon: 60,
    };
    let sel = match select(&task, &part, &mdp, None).unwrap() {
        SelectionOutcome::Selected(s) => *s,
        _ => panic!("no safe states"),
    };
    println!("safe {} / {}, goal cells {}", sel.safe.safe.len(), mdp.n_states, sel.marks.goals.len());
    let mut hi_count = 0; let mut mid = 0; let mut low = 0;
    for &q in &sel.safe.safe {
        let v = sel.values.value(0, q);
        if v > 0.8 { hi_count += 1 } else if v > 0.3 { mid += 1 } else { low += 1 }
    }
    println!("V0 > 0.8: {hi_count}, 0.3..0.8: {mid}, < 0.3: {low}");

    let keys: Vec<_> = sel.map.distinct_keys().into_iter().collect();
    println!("distinct keys {}", keys.len());
    let t0 = std::time::Instant::now();
    let out = train_keys(&keys, &part, &grid, &model, &err, &cfg.training.ppo, 120, cfg.seed);
    println!("trained {} ({} failures) in {:?}", out.store.len(), out.failures.len(), t0.elapsed());

    for mode in [DisturbanceMode::Truth, DisturbanceMode::RandomInD, DisturbanceMode::AdversarialCorners] {
        let s = batch_stats("probe", &sel, &out.store, &part, &model, &cfg.truth, &d, mode, 1000, 11);
        println!("{mode:?}: success {}/{} viol {} exit {} missing {} meanlen {:.1}",
            s.successes, s.rollouts, s.violations, s.controller_exits, s.missing_policies, s.mean_length);
    }

    let cells: Vec<_> = sel.safe.safe.iter().cloned()
        .filter(|&q| sel.values.value(0, q) > 0.8 && !sel.marks.goals.contains(&q)).collect();
    println!("non-goal high-value cells: {}", cells.len());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut ok = 0; let mut lens = vec![];
    for i in 0..200 {
        let q = cells[rng.gen_range(0..cells.len())];
        let x0 = State::new(part.cell(q).cell.sample_uniform(&mut rng));
        let r = execute(x0, &sel, &out.store, &part, &model, &cfg.truth, &d, DisturbanceMode::Truth, i);
        if r.reached_goal() { ok += 1; lens.push(r.trajectory.len() - 1); }
        assert!(!r.violated_safety());
    }
    let mean: f64 = lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64;
    let max = lens.iter().max().cloned().unwrap_or(0);
    println!("high-value starts: {ok}/200 reached, mean len {mean:.1}, max {max}");
}
