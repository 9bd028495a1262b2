//! Deterministic continuous-control tasks and the rollout / fitness
//! evaluation procedure.
//!
//! Both tasks accept actions in `[-1, 1]^action_dim`; out-of-range actions
//! are clamped and flagged on the step outcome. Episodes always run to
//! `max_episode_steps` (neither task has terminal states).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{GeneticMemory, SharedReplayBuffer, Transition};
use crate::nn::Mlp;
use crate::seeding::{derive_seed, rng_from};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a finished episode; call reset first")]
    StepAfterDone,
    #[error("action has {actual} components, expected {expected}")]
    ActionShape { expected: usize, actual: usize },
    #[error("action contains a non-finite component")]
    NonFiniteAction,
    #[error("trial count must be at least 1")]
    NoTrials,
    #[error("unknown environment {0:?}")]
    UnknownEnv(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    PointMass2d,
    PendulumSwingUp,
}

impl EnvId {
    pub fn spec(self) -> EnvSpec {
        match self {
            EnvId::PointMass2d => EnvSpec {
                env_id: self,
                state_dim: 4,
                action_dim: 2,
                max_episode_steps: 100,
            },
            EnvId::PendulumSwingUp => EnvSpec {
                env_id: self,
                state_dim: 3,
                action_dim: 1,
                max_episode_steps: 200,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::PointMass2d => "point_mass_2d",
            EnvId::PendulumSwingUp => "pendulum_swing_up",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s {
            "point_mass_2d" => Ok(EnvId::PointMass2d),
            "pendulum_swing_up" => Ok(EnvId::PendulumSwingUp),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_episode_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Episode over (time limit reached).
    pub done: bool,
    /// True terminal state; always false for the bundled tasks.
    pub terminal: bool,
    /// The submitted action was outside `[-1, 1]` and got clamped.
    pub clamped: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError>;
}

pub fn make(id: EnvId) -> Box<dyn Environment> {
    match id {
        EnvId::PointMass2d => Box::new(PointMass::default()),
        EnvId::PendulumSwingUp => Box::new(Pendulum::default()),
    }
}

fn clamp_action(action: &[f64], dim: usize) -> Result<(Vec<f64>, bool), EnvError> {
    if action.len() != dim {
        return Err(EnvError::ActionShape {
            expected: dim,
            actual: action.len(),
        });
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(EnvError::NonFiniteAction);
    }
    let clamped = action.iter().any(|a| a.abs() > 1.0);
    Ok((action.iter().map(|a| a.clamp(-1.0, 1.0)).collect(), clamped))
}

/// A point in the plane steered by a velocity command toward a goal.
///
/// State: `[x, y, goal_x - x, goal_y - y]`. Each step moves the point by
/// `STEP_LEN * action` (per axis), then clamps it to the arena. There are no
/// passive dynamics. Reward is `exp(-2 * distance_to_goal)` after the move.
#[derive(Clone, Debug, Default)]
pub struct PointMass {
    pos: [f64; 2],
    goal: [f64; 2],
    t: usize,
    done: bool,
}

impl PointMass {
    pub const STEP_LEN: f64 = 0.05;
    pub const ARENA: f64 = 2.0;
    pub const START_RANGE: f64 = 1.0;

    pub fn observe(&self) -> Vec<f64> {
        vec![
            self.pos[0],
            self.pos[1],
            self.goal[0] - self.pos[0],
            self.goal[1] - self.pos[1],
        ]
    }

    pub fn reward_at(distance: f64) -> f64 {
        (-2.0 * distance).exp()
    }
}

impl Environment for PointMass {
    fn spec(&self) -> EnvSpec {
        EnvId::PointMass2d.spec()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed, &[0x504d]);
        let r = Self::START_RANGE;
        self.pos = [rng.random_range(-r..=r), rng.random_range(-r..=r)];
        self.goal = [rng.random_range(-r..=r), rng.random_range(-r..=r)];
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        let (a, clamped) = clamp_action(action, 2)?;
        for i in 0..2 {
            self.pos[i] = (self.pos[i] + Self::STEP_LEN * a[i]).clamp(-Self::ARENA, Self::ARENA);
        }
        let dx = self.goal[0] - self.pos[0];
        let dy = self.goal[1] - self.pos[1];
        self.t += 1;
        self.done = self.t >= self.spec().max_episode_steps;
        Ok(StepOutcome {
            next_state: self.observe(),
            reward: Self::reward_at(dx.hypot(dy)),
            done: self.done,
            terminal: false,
            clamped,
        })
    }
}

/// Torque-limited pendulum that must be swung up and balanced.
///
/// `theta` is measured from the hanging position (upright is `pi`). State:
/// `[cos theta, sin theta, omega]`. Dynamics, integrated with semi-implicit
/// Euler:
///
/// ```text
/// omega' = clamp(omega + dt * (-(3g / 2l) sin theta + (3 / (m l^2)) * u), -MAX_SPEED, MAX_SPEED)
/// theta' = theta + dt * omega'
/// ```
///
/// with `u = MAX_TORQUE * action`. Reward after the step is
/// `(1 - cos theta') / 2 - 0.001 u^2`: 1 when upright, 0 when hanging.
#[derive(Clone, Debug, Default)]
pub struct Pendulum {
    theta: f64,
    omega: f64,
    t: usize,
    done: bool,
}

impl Pendulum {
    pub const G: f64 = 10.0;
    pub const LENGTH: f64 = 1.0;
    pub const MASS: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;

    /// Places the pendulum in an explicit configuration (tests, fixtures).
    pub fn set_state(&mut self, theta: f64, omega: f64) {
        self.theta = theta;
        self.omega = omega;
        self.t = 0;
        self.done = false;
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> EnvSpec {
        EnvId::PendulumSwingUp.spec()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed, &[0x5045]);
        self.set_state(rng.random_range(-PI..PI), rng.random_range(-1.0..1.0));
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        let (a, clamped) = clamp_action(action, 1)?;
        let u = Self::MAX_TORQUE * a[0];
        let accel = -(3.0 * Self::G / (2.0 * Self::LENGTH)) * self.theta.sin()
            + 3.0 / (Self::MASS * Self::LENGTH * Self::LENGTH) * u;
        self.omega = (self.omega + Self::DT * accel).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += Self::DT * self.omega;
        // keep theta bounded without changing the physical configuration
        if self.theta > PI {
            self.theta -= 2.0 * PI;
        } else if self.theta < -PI {
            self.theta += 2.0 * PI;
        }
        self.t += 1;
        self.done = self.t >= self.spec().max_episode_steps;
        Ok(StepOutcome {
            next_state: self.observe(),
            reward: 0.5 * (1.0 - self.theta.cos()) - 0.001 * u * u,
            done: self.done,
            terminal: false,
            clamped,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub total_reward: f64,
    pub transitions: Vec<Transition>,
    pub steps: usize,
}

/// Runs one episode from `reset(seed)` to completion.
pub fn run_episode<P>(
    env: &mut dyn Environment,
    seed: u64,
    mut policy: P,
) -> Result<EpisodeResult, EnvError>
where
    P: FnMut(&[f64]) -> Vec<f64>,
{
    let mut state = env.reset(seed);
    let mut transitions = Vec::with_capacity(env.spec().max_episode_steps);
    let mut total_reward = 0.0;
    loop {
        let action = policy(&state);
        let out = env.step(&action)?;
        total_reward += out.reward;
        let action = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        transitions.push(Transition {
            state,
            action,
            reward: out.reward,
            next_state: out.next_state.clone(),
            done: out.terminal,
        });
        state = out.next_state;
        if out.done {
            break;
        }
    }
    Ok(EpisodeResult {
        total_reward,
        steps: transitions.len(),
        transitions,
    })
}

/// Deterministic action function of a policy network.
pub fn greedy_policy(net: &Mlp) -> impl FnMut(&[f64]) -> Vec<f64> + '_ {
    let mut ws = net.workspace();
    move |s: &[f64]| net.forward_ws(s, &mut ws).to_vec()
}

/// Seed of evaluation trial `trial` under `base_seed`.
pub fn trial_seed(base_seed: u64, trial: usize) -> u64 {
    derive_seed(base_seed, &[trial as u64])
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitnessEval {
    pub fitness: f64,
    pub episode_rewards: Vec<f64>,
    pub frames: usize,
}

/// Where evaluated transitions go: the agent's genetic memory and the
/// shared replay buffer.
pub struct TransitionStores<'a> {
    pub memory: &'a mut GeneticMemory,
    pub buffer: &'a mut SharedReplayBuffer,
}

/// Mean total reward over `trials` episodes seeded from `base_seed`.
/// Visited transitions are appended, in visitation order, to both stores.
pub fn evaluate_fitness<P>(
    env: &mut dyn Environment,
    trials: usize,
    base_seed: u64,
    mut policy: P,
    mut stores: Option<TransitionStores<'_>>,
) -> Result<FitnessEval, EnvError>
where
    P: FnMut(&[f64]) -> Vec<f64>,
{
    if trials == 0 {
        return Err(EnvError::NoTrials);
    }
    let mut episode_rewards = Vec::with_capacity(trials);
    let mut frames = 0;
    for trial in 0..trials {
        let ep = run_episode(env, trial_seed(base_seed, trial), &mut policy)?;
        frames += ep.steps;
        episode_rewards.push(ep.total_reward);
        if let Some(st) = stores.as_mut() {
            for t in ep.transitions {
                let t = Arc::new(t);
                st.memory.push_shared(Arc::clone(&t));
                st.buffer.push(t);
            }
        }
    }
    Ok(FitnessEval {
        fitness: episode_rewards.iter().sum::<f64>() / trials as f64,
        episode_rewards,
        frames,
    })
}

/// Hand-written controllers used as performance references and as teachers
/// for benchmark parents.
pub mod scripted {
    use super::{Pendulum, PointMass, PI};

    /// Moves each axis toward the goal as fast as allowed without overshoot.
    /// Every per-axis gap shrinks as fast as possible, so the distance (and
    /// hence the per-step reward) is optimal at every step.
    pub fn point_mass_optimal(state: &[f64]) -> Vec<f64> {
        vec![
            (state[2] / PointMass::STEP_LEN).clamp(-1.0, 1.0),
            (state[3] / PointMass::STEP_LEN).clamp(-1.0, 1.0),
        ]
    }

    /// A family of imperfect goal-seeking controllers: proportional gain on
    /// the goal offset, rotated by `rotation` radians.
    #[derive(Clone, Copy, Debug)]
    pub struct PointMassSeeker {
        pub gain: f64,
        pub rotation: f64,
    }

    impl PointMassSeeker {
        pub fn act(&self, state: &[f64]) -> Vec<f64> {
            let (s, c) = self.rotation.sin_cos();
            let (dx, dy) = (state[2], state[3]);
            vec![
                (self.gain * (c * dx - s * dy)).tanh(),
                (self.gain * (s * dx + c * dy)).tanh(),
            ]
        }
    }

    /// Energy pumping far from upright, PD stabilization near it.
    #[derive(Clone, Copy, Debug)]
    pub struct PendulumSwingUp {
        pub energy_gain: f64,
        pub kp: f64,
        pub kd: f64,
        pub capture_angle: f64,
    }

    impl Default for PendulumSwingUp {
        fn default() -> Self {
            Self {
                energy_gain: 0.5,
                kp: 10.0,
                kd: 2.0,
                capture_angle: 0.5,
            }
        }
    }

    impl PendulumSwingUp {
        pub fn act(&self, state: &[f64]) -> Vec<f64> {
            let theta = state[1].atan2(state[0]);
            let omega = state[2];
            // angle away from upright, wrapped to (-pi, pi]
            let mut phi = theta - PI;
            if phi <= -PI {
                phi += 2.0 * PI;
            }
            let w0 = 3.0 * Pendulum::G / (2.0 * Pendulum::LENGTH);
            if phi.abs() < self.capture_angle {
                return vec![(-(self.kp * phi + self.kd * omega)).clamp(-1.0, 1.0)];
            }
            let energy = 0.5 * omega * omega + w0 * (1.0 - theta.cos());
            let target = 2.0 * w0;
            vec![(self.energy_gain * (target - energy) * omega).clamp(-1.0, 1.0)]
        }
    }
}
