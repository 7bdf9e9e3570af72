//! Nominal dynamics, ground-truth model error, and closed-loop trajectories.
//!
//! The system evolves as `x⁺ = f(x, u) + g(x, u)` where `f` is the known
//! nominal model and `g` is an unknown deterministic model error bounded by a
//! compact box `D`. The ground truth for `g` exists here only so the simulator
//! and the residual collector have something to sample; the synthesis pipeline
//! never reads it directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{interval_cos, interval_sin, AxisBox, Interval};

/// Continuous state; periodic axes are stored wrapped into `[0, period)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub coords: Vec<f64>,
}

impl State {
    pub fn new(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// Control input vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub coords: Vec<f64>,
}

impl ControlInput {
    pub fn new(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// Known nominal model `f`.
///
/// Every instance exposes a raw evaluator, a natural interval extension, and
/// interval bounds on its Jacobians; the latter drive the reachability routine
/// and the kernel Lipschitz constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum NominalModel {
    /// Unicycle kinematics: position advances along the heading at constant
    /// speed, the input is the turn rate. The heading axis wraps at 2π.
    Dubins { speed: f64, dt: f64 },
    /// Position–velocity chain with the input driving the velocity.
    DoubleIntegrator { dt: f64 },
    /// Constant drift; ignores the input (single dummy input dimension).
    Drift { dt: f64, rates: Vec<f64> },
}

impl NominalModel {
    pub fn state_dim(&self) -> usize {
        match self {
            NominalModel::Dubins { .. } => 3,
            NominalModel::DoubleIntegrator { .. } => 2,
            NominalModel::Drift { rates, .. } => rates.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            NominalModel::Dubins { .. } => 1,
            NominalModel::DoubleIntegrator { .. } => 1,
            NominalModel::Drift { .. } => 1,
        }
    }

    /// Wrap period per state axis (`None` for non-periodic axes).
    pub fn periods(&self) -> Vec<Option<f64>> {
        match self {
            NominalModel::Dubins { .. } => vec![None, None, Some(std::f64::consts::TAU)],
            _ => vec![None; self.state_dim()],
        }
    }

    /// Raw evaluation of `f(x, u)` without wrapping.
    pub fn eval_raw(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            NominalModel::Dubins { speed, dt } => {
                let (zx, zy, th) = (x[0], x[1], x[2]);
                vec![
                    zx + dt * speed * th.cos(),
                    zy + dt * speed * th.sin(),
                    th + dt * u[0],
                ]
            }
            NominalModel::DoubleIntegrator { dt } => {
                vec![x[0] + dt * x[1], x[1] + dt * u[0]]
            }
            NominalModel::Drift { dt, rates } => {
                x.iter().zip(rates).map(|(&v, &r)| v + dt * r).collect()
            }
        }
    }

    /// Natural interval extension of `f` over a state box and an input box.
    pub fn eval_interval(&self, x: &AxisBox, u: &AxisBox) -> AxisBox {
        match self {
            NominalModel::Dubins { speed, dt } => {
                let th = x.interval(2);
                let fx = x.interval(0).add(interval_cos(th).scale(dt * speed));
                let fy = x.interval(1).add(interval_sin(th).scale(dt * speed));
                let fth = th.add(u.interval(0).scale(*dt));
                AxisBox::from_intervals(&[fx, fy, fth])
            }
            NominalModel::DoubleIntegrator { dt } => {
                let f0 = x.interval(0).add(x.interval(1).scale(*dt));
                let f1 = x.interval(1).add(u.interval(0).scale(*dt));
                AxisBox::from_intervals(&[f0, f1])
            }
            NominalModel::Drift { dt, rates } => AxisBox::from_intervals(
                &(0..x.dim())
                    .map(|i| x.interval(i).offset(dt * rates[i]))
                    .collect::<Vec<_>>(),
            ),
        }
    }

    /// Interval bounds on `∂f/∂x` over a state box (input range unused by the
    /// implemented instances but kept for uniformity).
    pub fn jacobian_x_interval(&self, x: &AxisBox, _u: &AxisBox) -> Vec<Vec<Interval>> {
        let n = self.state_dim();
        let mut jac = vec![vec![Interval::point(0.0); n]; n];
        match self {
            NominalModel::Dubins { speed, dt } => {
                let th = x.interval(2);
                jac[0][0] = Interval::point(1.0);
                jac[0][2] = interval_sin(th).scale(-dt * speed);
                jac[1][1] = Interval::point(1.0);
                jac[1][2] = interval_cos(th).scale(dt * speed);
                jac[2][2] = Interval::point(1.0);
            }
            NominalModel::DoubleIntegrator { dt } => {
                jac[0][0] = Interval::point(1.0);
                jac[0][1] = Interval::point(*dt);
                jac[1][1] = Interval::point(1.0);
            }
            NominalModel::Drift { .. } => {
                for (i, row) in jac.iter_mut().enumerate() {
                    row[i] = Interval::point(1.0);
                }
            }
        }
        jac
    }

    /// Interval bounds on `∂f/∂u`.
    pub fn jacobian_u_interval(&self, _x: &AxisBox, _u: &AxisBox) -> Vec<Vec<Interval>> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut jac = vec![vec![Interval::point(0.0); m]; n];
        match self {
            NominalModel::Dubins { dt, .. } => jac[2][0] = Interval::point(*dt),
            NominalModel::DoubleIntegrator { dt } => jac[1][0] = Interval::point(*dt),
            NominalModel::Drift { .. } => {}
        }
        jac
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }
}

/// Wrap periodic coordinates into `[0, period)`.
pub fn wrap_state(coords: &mut [f64], periods: &[Option<f64>]) {
    for (v, p) in coords.iter_mut().zip(periods) {
        if let Some(period) = p {
            *v = v.rem_euclid(*period);
        }
    }
}

/// Difference `a − b` with periodic axes reduced to `(−period/2, period/2]`.
pub fn wrapped_sub(a: &[f64], b: &[f64], periods: &[Option<f64>]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .zip(periods)
        .map(|((&av, &bv), p)| {
            let d = av - bv;
            match p {
                Some(period) => {
                    let r = d.rem_euclid(*period);
                    if r > period / 2.0 {
                        r - period
                    } else {
                        r
                    }
                }
                None => d,
            }
        })
        .collect()
}

/// Ground-truth model error `g`; simulation-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelErrorTruth {
    Zero,
    /// Smooth trigonometric field: dimension 0 follows `amp·(1+sin x₀)/2`,
    /// dimension 1 `amp·(1+cos x₁)/2`, higher dimensions the sine form.
    /// The image of dimension `d` is `[0, amp_d]`.
    Trig { amp: Vec<f64> },
    /// Constant offset.
    Constant { value: Vec<f64> },
}

impl ModelErrorTruth {
    pub fn eval(&self, x: &[f64], _u: &[f64]) -> Vec<f64> {
        match self {
            ModelErrorTruth::Zero => vec![0.0; x.len()],
            ModelErrorTruth::Trig { amp } => amp
                .iter()
                .enumerate()
                .map(|(d, &a)| {
                    let t = if d == 1 { x[1].cos() } else { x[d].sin() };
                    a * (1.0 + t) / 2.0
                })
                .collect(),
            ModelErrorTruth::Constant { value } => value.clone(),
        }
    }
}

/// A-priori bound `D` on the model error, an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceBound(pub AxisBox);

impl DisturbanceBound {
    pub fn contains(&self, g: &[f64]) -> bool {
        self.0.contains(g)
    }

    pub fn box_(&self) -> &AxisBox {
        &self.0
    }

    /// A disturbance sampled uniformly from `D`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.0.sample_uniform(rng)
    }

    /// One of the `2^n` extreme points of `D`, selected by `mask`.
    pub fn corner(&self, mask: usize) -> Vec<f64> {
        (0..self.0.dim())
            .map(|i| {
                if mask >> i & 1 == 0 {
                    self.0.lo()[i]
                } else {
                    self.0.hi()[i]
                }
            })
            .collect()
    }
}

/// One step of the nominal model, with periodic axes wrapped.
pub fn step_nominal(model: &NominalModel, x: &State, u: &ControlInput) -> Result<State> {
    model.check_dims(&x.coords, &u.coords)?;
    let mut next = model.eval_raw(&x.coords, &u.coords);
    wrap_state(&mut next, &model.periods());
    Ok(State::new(next))
}

/// One step of the true system `f + g`; used only by the simulator and by
/// residual collection.
pub fn step_true(
    model: &NominalModel,
    gtruth: &ModelErrorTruth,
    x: &State,
    u: &ControlInput,
) -> Result<State> {
    model.check_dims(&x.coords, &u.coords)?;
    let mut next = model.eval_raw(&x.coords, &u.coords);
    let g = gtruth.eval(&x.coords, &u.coords);
    for (v, gi) in next.iter_mut().zip(&g) {
        *v += gi;
    }
    wrap_state(&mut next, &model.periods());
    Ok(State::new(next))
}

/// Closed-loop trajectory: `K+1` states and the `K` inputs between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub inputs: Vec<ControlInput>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &State {
        self.states.last().expect("trajectory holds at least x0")
    }
}

/// Roll the true system under a feedback law for at most `horizon` steps,
/// stopping early as soon as `stop` fires on a stored state.
pub fn simulate<C, S>(
    mut controller: C,
    x0: State,
    horizon: usize,
    model: &NominalModel,
    gtruth: &ModelErrorTruth,
    stop: S,
) -> Result<Trajectory>
where
    C: FnMut(&State, usize) -> Result<ControlInput>,
    S: Fn(&State) -> bool,
{
    let mut traj = Trajectory {
        states: vec![x0],
        inputs: Vec::new(),
    };
    for k in 0..horizon {
        if stop(traj.last()) {
            break;
        }
        let u = controller(traj.last(), k).map_err(|e| Error::ControllerFailure {
            step: k,
            detail: e.to_string(),
        })?;
        let next = step_true(model, gtruth, traj.last(), &u)?;
        traj.inputs.push(u);
        traj.states.push(next);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    fn dubins() -> NominalModel {
        NominalModel::Dubins { speed: 3.0, dt: 0.1 }
    }

    #[test]
    fn dubins_straight_step() {
        let x = State::new(vec![0.0, 0.0, 0.0]);
        let u = ControlInput::new(vec![0.0]);
        let next = step_nominal(&dubins(), &x, &u).unwrap();
        assert_relative_eq!(next.coords[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(next.coords[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(next.coords[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn dubins_heading_up() {
        let x = State::new(vec![1.0, 2.0, FRAC_PI_2]);
        let u = ControlInput::new(vec![0.0]);
        let next = step_nominal(&dubins(), &x, &u).unwrap();
        assert_relative_eq!(next.coords[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(next.coords[1], 2.3, epsilon = 1e-15);
        assert_relative_eq!(next.coords[2], FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn dubins_turn_step() {
        let x = State::new(vec![0.0, 0.0, 0.0]);
        let u = ControlInput::new(vec![PI]);
        let next = step_nominal(&dubins(), &x, &u).unwrap();
        assert_relative_eq!(next.coords[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(next.coords[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(next.coords[2], 0.1 * PI, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let x = State::new(vec![0.0, 0.0]);
        let u = ControlInput::new(vec![0.0]);
        assert!(step_nominal(&dubins(), &x, &u).is_err());
    }

    #[test]
    fn heading_stays_wrapped() {
        use rand::Rng;
        let model = dubins();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let x = State::new(vec![
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.0..TAU),
            ]);
            let u = ControlInput::new(vec![rng.gen_range(-80.0..80.0)]);
            let next = step_nominal(&model, &x, &u).unwrap();
            assert!((0.0..TAU).contains(&next.coords[2]), "{}", next.coords[2]);
        }
    }

    #[test]
    fn step_true_adds_error() {
        let x = State::new(vec![0.0, 0.0, 0.0]);
        let u = ControlInput::new(vec![0.0]);
        let zero = step_true(&dubins(), &ModelErrorTruth::Zero, &x, &u).unwrap();
        assert_eq!(zero, step_nominal(&dubins(), &x, &u).unwrap());

        let g = ModelErrorTruth::Constant { value: vec![0.1, 0.1, 0.0] };
        let next = step_true(&dubins(), &g, &x, &u).unwrap();
        assert_relative_eq!(next.coords[0], 0.4, epsilon = 1e-15);
        assert_relative_eq!(next.coords[1], 0.1, epsilon = 1e-15);
        assert_relative_eq!(next.coords[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn trig_truth_stays_in_declared_bound() {
        use rand::Rng;
        let g = ModelErrorTruth::Trig { amp: vec![0.05, 0.05, 0.0] };
        let d = DisturbanceBound(
            AxisBox::new(vec![0.0, 0.0, 0.0], vec![0.1, 0.1, 0.0]).unwrap(),
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let x = [
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(0.0..TAU),
            ];
            let u = [rng.gen_range(-10.0..10.0)];
            assert!(d.contains(&g.eval(&x, &u)));
        }
    }

    #[test]
    fn simulate_zero_horizon() {
        let x0 = State::new(vec![0.0, 0.0, 0.0]);
        let traj = simulate(
            |_, _| Ok(ControlInput::new(vec![0.0])),
            x0.clone(),
            0,
            &dubins(),
            &ModelErrorTruth::Zero,
            |_| false,
        )
        .unwrap();
        assert_eq!(traj.states, vec![x0]);
        assert!(traj.inputs.is_empty());
    }

    #[test]
    fn simulate_constant_heading() {
        let traj = simulate(
            |_, _| Ok(ControlInput::new(vec![0.0])),
            State::new(vec![0.0, 0.0, 0.0]),
            3,
            &dubins(),
            &ModelErrorTruth::Zero,
            |_| false,
        )
        .unwrap();
        let xs: Vec<f64> = traj.states.iter().map(|s| s.coords[0]).collect();
        for (got, want) in xs.iter().zip([0.0, 0.3, 0.6, 0.9]) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn simulate_stop_predicate() {
        let traj = simulate(
            |_, _| Ok(ControlInput::new(vec![0.0])),
            State::new(vec![0.0, 0.0, 0.0]),
            10,
            &dubins(),
            &ModelErrorTruth::Zero,
            |s| s.coords[0] >= 0.5,
        )
        .unwrap();
        assert_eq!(traj.len(), 3);
    }

    #[test]
    fn controller_failure_carries_step() {
        let err = simulate(
            |_, k| {
                if k == 2 {
                    Err(Error::Config("boom".into()))
                } else {
                    Ok(ControlInput::new(vec![0.0]))
                }
            },
            State::new(vec![0.0, 0.0, 0.0]),
            10,
            &dubins(),
            &ModelErrorTruth::Zero,
            |_| false,
        )
        .unwrap_err();
        match err {
            Error::ControllerFailure { step, .. } => assert_eq!(step, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn determinism() {
        let x = State::new(vec![0.4, 1.1, 2.2]);
        let u = ControlInput::new(vec![0.7]);
        let a = step_nominal(&dubins(), &x, &u).unwrap();
        let b = step_nominal(&dubins(), &x, &u).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interval_extension_is_sound_for_dubins() {
        let model = dubins();
        let xbox = AxisBox::new(vec![0.0, -1.0, 0.5], vec![1.0, 1.0, 2.0]).unwrap();
        let ubox = AxisBox::new(vec![-4.0], vec![4.0]).unwrap();
        let image = model.eval_interval(&xbox, &ubox);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let x = xbox.sample_uniform(&mut rng);
            let u = ubox.sample_uniform(&mut rng);
            let y = model.eval_raw(&x, &u);
            assert!(image.contains(&y), "{y:?} outside {image:?}");
        }
    }
}
