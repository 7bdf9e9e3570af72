//! End-to-end driver: abstract → train → select → run → bound.
//!
//! All artifacts on disk carry the hash of the synthesis-relevant config
//! sections; subcommands refuse artifacts whose stamp disagrees with the
//! active config and are idempotent given warm caches.
//!
//! Exit codes: 0 ok, 2 config error, 3 missing prerequisite, 4 runtime
//! failure.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ctrlsynth::bounds;
use ctrlsynth::config::{derive_seed, load_stamped, save_stamped, RunConfig};
use ctrlsynth::dynamics::{DisturbanceBound, NominalModel, State};
use ctrlsynth::geom::AxisBox;
use ctrlsynth::gp::{collect_residuals, fit, ErrorModel, ResidualDataset};
use ctrlsynth::mdp::{build_mdp, AbstractMdp};
use ctrlsynth::partition::{ControllerGrid, StatePartition};
use ctrlsynth::policy::{train_all, PolicyStore};
use ctrlsynth::select::{select, Selection, SelectionOutcome, Task};
use ctrlsynth::sim::{trajectory_csv, trajectory_svg, DisturbanceMode};
use ctrlsynth::transfer::{run_with_transfer, train_transfer, TransferWeights};

#[derive(Parser)]
#[command(name = "ctrlsynth", version, about = "Finite-abstraction synthesis of composable neural controllers")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Truth,
    Random,
    Corners,
}

impl From<ModeArg> for DisturbanceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Truth => DisturbanceMode::Truth,
            ModeArg::Random => DisturbanceMode::RandomInD,
            ModeArg::Corners => DisturbanceMode::AdversarialCorners,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build grids, fit the model-error GP, and cache the abstract MDP.
    Abstract {
        /// Rebuild even when a cache with the current config hash exists.
        #[arg(long)]
        force: bool,
    },
    /// Train local policies into the store directory.
    Train {
        /// Train only the policies assigned by this task's activation map.
        #[arg(long, conflicts_with = "all")]
        task: Option<PathBuf>,
        /// Train one policy per MDP transition.
        #[arg(long)]
        all: bool,
        /// Override the configured offline episode count.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Solve a reach-avoid task: safe sets, values, activation map.
    Select {
        #[arg(long)]
        task: PathBuf,
        /// Output file (defaults into the configured out dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute the composed controller, training missing policies online.
    Run {
        #[arg(long)]
        task: PathBuf,
        /// Initial state as comma-separated coordinates.
        #[arg(long, conflicts_with = "sample")]
        x0: Option<String>,
        /// Number of initial states sampled from the certified region.
        #[arg(long)]
        sample: Option<usize>,
        /// Disturbance source for the true system steps.
        #[arg(long, value_enum, default_value = "truth")]
        mode: ModeArg,
        /// Also write an x-y plane SVG per rollout.
        #[arg(long)]
        svg: bool,
    },
    /// Compute the optimality-gap constants and bound for a task.
    Bound {
        #[arg(long)]
        task: PathBuf,
        /// Per-axis quadrature subdivisions for the kernel constants.
        #[arg(long, default_value_t = 3)]
        subdiv: usize,
    },
}

enum Failure {
    Config(String),
    Missing(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Missing(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Missing(m) | Failure::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Loaded config plus everything derivable from it without touching caches.
struct Pipeline {
    cfg: RunConfig,
    hash: String,
    model: NominalModel,
    part: StatePartition,
    grid: ControllerGrid,
    ubox: AxisBox,
    d: DisturbanceBound,
}

impl Pipeline {
    fn load(path: &Path) -> Result<Self, Failure> {
        let cfg = RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?;
        let hash = cfg.config_hash();
        let model = cfg.dynamics.model.clone();
        let part = cfg.build_partition().map_err(|e| Failure::Config(e.to_string()))?;
        let grid = cfg
            .build_controller_grid()
            .map_err(|e| Failure::Config(e.to_string()))?;
        let ubox = cfg.input_box().map_err(|e| Failure::Config(e.to_string()))?;
        let d = cfg.disturbance().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(Self {
            cfg,
            hash,
            model,
            part,
            grid,
            ubox,
            d,
        })
    }

    fn cache_dir(&self) -> PathBuf {
        std::env::var_os("CTRLSYNTH_CACHE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| self.cfg.paths.cache_dir.clone())
    }

    fn mdp_path(&self) -> PathBuf {
        self.cache_dir().join(format!("mdp_{}.json", self.hash))
    }

    fn residuals_path(&self) -> PathBuf {
        self.cache_dir().join(format!("residuals_{}.csv", self.hash))
    }

    fn store_dir(&self) -> PathBuf {
        self.cfg.paths.store_dir.join(&self.hash)
    }

    fn out_dir(&self) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(&self.cfg.paths.out_dir).map_err(runtime)?;
        Ok(self.cfg.paths.out_dir.clone())
    }

    fn load_mdp(&self) -> Result<AbstractMdp, Failure> {
        if !self.mdp_path().exists() {
            return Err(Failure::Missing(format!(
                "no MDP cache at {}; run `ctrlsynth abstract` first",
                self.mdp_path().display()
            )));
        }
        load_stamped(&self.mdp_path(), &self.hash).map_err(|e| Failure::Missing(e.to_string()))
    }

    fn load_error_model(&self) -> Result<ErrorModel, Failure> {
        if !self.residuals_path().exists() {
            return Err(Failure::Missing(format!(
                "no residual dataset at {}; run `ctrlsynth abstract` first",
                self.residuals_path().display()
            )));
        }
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        let data =
            ResidualDataset::load(&self.residuals_path(), n + m, n).map_err(runtime)?;
        let gp = fit(&data, &self.cfg.gp_hypers()).map_err(runtime)?;
        Ok(ErrorModel::Gp(gp))
    }

    fn load_store(&self) -> Result<PolicyStore, Failure> {
        let dir = self.store_dir();
        if dir.join("manifest.json").exists() {
            PolicyStore::load_dir(&dir, &self.hash).map_err(|e| Failure::Missing(e.to_string()))
        } else {
            Ok(PolicyStore::new())
        }
    }

    fn load_task(&self, path: &Path) -> Result<Task, Failure> {
        let task = Task::load(path).map_err(|e| Failure::Config(e.to_string()))?;
        task.validate(&self.part)
            .map_err(|e| Failure::Config(e.to_string()))?;
        Ok(task)
    }

    fn selection(
        &self,
        task: &Task,
        store: Option<&PolicyStore>,
        mdp: &AbstractMdp,
    ) -> Result<Option<Selection>, Failure> {
        match select(task, &self.part, mdp, store).map_err(runtime)? {
            SelectionOutcome::NoSafeStates => Ok(None),
            SelectionOutcome::Selected(sel) => Ok(Some(*sel)),
        }
    }
}

fn cmd_abstract(pipe: &Pipeline, force: bool) -> Result<(), Failure> {
    if pipe.mdp_path().exists() && !force {
        if load_stamped::<AbstractMdp>(&pipe.mdp_path(), &pipe.hash).is_ok() {
            println!("cache hit: {} (config {})", pipe.mdp_path().display(), pipe.hash);
            return Ok(());
        }
    }
    std::fs::create_dir_all(pipe.cache_dir()).map_err(runtime)?;

    let domain = pipe.part.domain().clone();
    let data = collect_residuals(
        &pipe.model,
        &pipe.cfg.truth,
        &domain,
        &pipe.ubox,
        pipe.cfg.gp.samples,
        derive_seed(pipe.cfg.seed, "residuals", &[]),
    )
    .map_err(runtime)?;
    data.save(&pipe.residuals_path()).map_err(runtime)?;
    let gp = fit(&data, &pipe.cfg.gp_hypers()).map_err(runtime)?;
    let err = ErrorModel::Gp(gp);

    let mdp = build_mdp(&pipe.part, &pipe.grid, &pipe.model, &err, &pipe.d);
    save_stamped(&pipe.mdp_path(), &pipe.hash, &mdp).map_err(runtime)?;

    let leaky = mdp.rows().iter().filter(|r| r.leaves_domain).count();
    println!(
        "abstracted: {} states x {} actions, {} transitions ({} rows reach past the domain)",
        mdp.n_states,
        mdp.n_actions,
        mdp.transition_count(),
        leaky
    );
    println!("cached: {}", pipe.mdp_path().display());
    Ok(())
}

fn cmd_train(
    pipe: &Pipeline,
    task: Option<PathBuf>,
    all: bool,
    episodes: Option<usize>,
) -> Result<(), Failure> {
    if task.is_none() && !all {
        return Err(Failure::Config(
            "pass --task <file> for task-directed training or --all for every transition".into(),
        ));
    }
    let mdp = pipe.load_mdp()?;
    let err = pipe.load_error_model()?;
    let mut store = pipe.load_store()?;
    let episodes = episodes.unwrap_or(pipe.cfg.training.episodes_offline);
    let cfg = &pipe.cfg.training.ppo;

    let (trained, failures) = if all {
        let before = store.len();
        let out = train_all(
            &mdp,
            &pipe.part,
            &pipe.grid,
            &pipe.model,
            &err,
            cfg,
            episodes,
            pipe.cfg.seed,
        );
        let failures = out.failures;
        for p in out.store.iter() {
            store.insert(p.clone());
        }
        (store.len() - before, failures)
    } else {
        let task = pipe.load_task(&task.expect("checked above"))?;
        let Some(sel) = pipe.selection(&task, Some(&store), &mdp)? else {
            println!("no safe states for this task; nothing to train");
            return Ok(());
        };
        let before = store.len();
        let (fresh, failures) = train_transfer(
            &sel,
            &pipe.part,
            &pipe.grid,
            &pipe.model,
            &err,
            cfg,
            episodes,
            pipe.cfg.seed,
        );
        for p in fresh.iter() {
            if !store.contains(&p.key) {
                store.insert(p.clone());
            }
        }
        (store.len() - before, failures)
    };

    store.complete = failures.is_empty();
    store
        .save_dir(&pipe.store_dir(), &pipe.hash)
        .map_err(runtime)?;
    println!(
        "trained {} new policies ({} total in store, {} failures)",
        trained,
        store.len(),
        failures.len()
    );
    for (key, why) in &failures {
        eprintln!("  failed {key}: {why}");
    }
    Ok(())
}

fn cmd_select(pipe: &Pipeline, task_path: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let mdp = pipe.load_mdp()?;
    let store = pipe.load_store()?;
    let task = pipe.load_task(task_path)?;
    let stem = task_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into());
    let out_path = match out {
        Some(p) => p,
        None => pipe.out_dir()?.join(format!("selection_{stem}.json")),
    };
    let report = match pipe.selection(&task, Some(&store), &mdp)? {
        None => {
            println!("no safe initial states for this task");
            serde_json::json!({
                "config_hash": pipe.hash,
                "task": task,
                "no_safe_states": true,
            })
        }
        Some(sel) => {
            println!(
                "safe cells: {} / {}; missing policies: {}",
                sel.safe.safe.len(),
                mdp.n_states,
                sel.missing.len()
            );
            let mut doc = sel.report(&pipe.part);
            doc["config_hash"] = serde_json::json!(pipe.hash);
            doc["task"] = serde_json::json!(task);
            doc
        }
    };
    std::fs::write(&out_path, serde_json::to_vec_pretty(&report).map_err(runtime)?)
        .map_err(runtime)?;
    println!("selection written: {}", out_path.display());
    Ok(())
}

fn cmd_run(
    pipe: &Pipeline,
    task_path: &Path,
    x0: Option<String>,
    sample: Option<usize>,
    mode: DisturbanceMode,
    svg: bool,
) -> Result<(), Failure> {
    let mdp = pipe.load_mdp()?;
    let err = pipe.load_error_model()?;
    let mut store = pipe.load_store()?;
    let task = pipe.load_task(task_path)?;
    let Some(sel) = pipe.selection(&task, Some(&store), &mdp)? else {
        return Err(Failure::Runtime(
            "no safe initial states for this task".into(),
        ));
    };
    let weights = TransferWeights::new(pipe.cfg.transfer.alpha)
        .map_err(|e| Failure::Config(e.to_string()))?;

    let starts: Vec<State> = match (x0, sample) {
        (Some(text), _) => {
            let coords: Vec<f64> = text
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Failure::Config(format!("bad --x0: {e}")))?;
            vec![State::new(coords)]
        }
        (None, Some(n)) => ctrlsynth::sim::sample_x_init(
            &sel,
            &pipe.part,
            n,
            derive_seed(pipe.cfg.seed, "cli_x_init", &[]),
        ),
        (None, None) => {
            return Err(Failure::Config("pass --x0 or --sample N".into()));
        }
    };

    // Safety precondition: starts must lie in the certified region.
    for s in &starts {
        let inside = pipe
            .part
            .abs_x(&s.coords)
            .map(|q| sel.safe.safe.contains(&q))
            .unwrap_or(false);
        if !inside {
            return Err(Failure::Runtime(format!(
                "initial state {:?} is outside the certified initial set; refusing to run",
                s.coords
            )));
        }
    }

    let out_dir = pipe.out_dir()?;
    let stem = task_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into());
    let mut reached = 0usize;
    for (i, x0) in starts.into_iter().enumerate() {
        let run = run_with_transfer(
            x0,
            &sel,
            &mut store,
            &pipe.part,
            &pipe.grid,
            &pipe.model,
            &err,
            &pipe.cfg.truth,
            &pipe.d,
            mode,
            &weights,
            &pipe.cfg.training.ppo,
            pipe.cfg.training.episodes_online,
            derive_seed(pipe.cfg.seed, "cli_run", &[i as u64]),
        )
        .map_err(runtime)?;
        reached += run.reached_goal as usize;

        let doc = serde_json::json!({
            "config_hash": pipe.hash,
            "mode": mode,
            "reached_goal": run.reached_goal,
            "steps": run.steps,
            "controller_exit": run.controller_exit,
            "online_trained": run.online_trained.iter().map(|k| k.to_string()).collect::<Vec<_>>(),
            "trajectory": run.trajectory,
            "keys": run.keys,
        });
        let path = out_dir.join(format!("run_{stem}_{i}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&doc).map_err(runtime)?)
            .map_err(runtime)?;
        std::fs::write(
            out_dir.join(format!("run_{stem}_{i}.csv")),
            trajectory_csv(&run.trajectory, &run.keys),
        )
        .map_err(runtime)?;
        if svg && pipe.part.dim() >= 2 {
            std::fs::write(
                out_dir.join(format!("run_{stem}_{i}.svg")),
                trajectory_svg(pipe.part.domain(), &sel, &run.trajectory),
            )
            .map_err(runtime)?;
        }
        println!(
            "rollout {i}: {} in {} steps, {} policies trained online",
            if run.reached_goal { "goal" } else { "no goal" },
            run.steps,
            run.online_trained.len()
        );
    }
    store
        .save_dir(&pipe.store_dir(), &pipe.hash)
        .map_err(runtime)?;
    println!(
        "{} rollouts reached the goal; store now holds {} policies",
        reached,
        store.len()
    );
    Ok(())
}

fn cmd_bound(pipe: &Pipeline, task_path: &Path, subdiv: usize) -> Result<(), Failure> {
    let mdp = pipe.load_mdp()?;
    let err = pipe.load_error_model()?;
    let store = pipe.load_store()?;
    let task = pipe.load_task(task_path)?;
    let Some(sel) = pipe.selection(&task, Some(&store), &mdp)? else {
        return Err(Failure::Runtime(
            "no safe initial states for this task".into(),
        ));
    };
    let floor = 1e-6;
    let constants = bounds::compute_constants(
        &pipe.part,
        &pipe.grid,
        &sel,
        &store,
        &pipe.model,
        &err,
        &pipe.ubox,
        subdiv,
        floor,
    )
    .map_err(runtime)?;
    let gap = bounds::theorem2_bound(
        &constants,
        pipe.model.input_dim(),
        pipe.model.state_dim(),
        task.horizon,
    );
    let per_k: Vec<f64> = (0..=task.horizon).map(|k| gap.bound(k)).collect();
    let doc = serde_json::json!({
        "config_hash": pipe.hash,
        "task": task,
        "constants": constants,
        "delta_nn": gap.delta_nn,
        "delta_star": gap.delta_star,
        "bound_per_k": per_k,
    });
    let stem = task_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into());
    let path = pipe.out_dir()?.join(format!("bound_{stem}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&doc).map_err(runtime)?).map_err(runtime)?;
    println!(
        "gap per step: {:.6} + {:.6}; bound(0) over {} steps = {:.6}",
        gap.delta_nn,
        gap.delta_star,
        task.horizon,
        gap.bound(0)
    );
    println!("report written: {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let pipe = Pipeline::load(&cli.config)?;
    match cli.command {
        Command::Abstract { force } => cmd_abstract(&pipe, force),
        Command::Train {
            task,
            all,
            episodes,
        } => cmd_train(&pipe, task, all, episodes),
        Command::Select { task, out } => cmd_select(&pipe, &task, out),
        Command::Run {
            task,
            x0,
            sample,
            mode,
            svg,
        } => cmd_run(&pipe, &task, x0, sample, mode.into(), svg),
        Command::Bound { task, subdiv } => cmd_bound(&pipe, &task, subdiv),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
