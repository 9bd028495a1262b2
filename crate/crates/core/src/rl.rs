//! Off-policy deterministic actor-critic agent (DDPG-style).
//!
//! The agent learns from the shared replay buffer, lends its critic to the
//! distillation crossover, and its actor is periodically cloned into the
//! population.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{GeneticMemory, MemoryError, SharedReplayBuffer};
use crate::nn::{soft_update, AdamState, Mlp, NetworkSpec, NnError, Workspace};

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("invalid RL configuration: {0}")]
    Config(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

/// Anything that scores state-action pairs.
pub trait Critic {
    fn q_value(&self, state: &[f64], action: &[f64]) -> f64;
}

impl<F> Critic for F
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    fn q_value(&self, state: &[f64], action: &[f64]) -> f64 {
        self(state, action)
    }
}

/// A critic network evaluated on the concatenation `[state; action]`.
impl Critic for Mlp {
    fn q_value(&self, state: &[f64], action: &[f64]) -> f64 {
        let mut input = Vec::with_capacity(state.len() + action.len());
        input.extend_from_slice(state);
        input.extend_from_slice(action);
        let mut ws = self.workspace();
        self.forward_ws(&input, &mut ws)[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Std of the Gaussian exploration noise on actions.
    pub exploration_noise: f64,
    /// Gradient steps per environment frame collected in a generation.
    pub updates_per_frame: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            actor_lr: 5e-5,
            critic_lr: 5e-4,
            gamma: 0.99,
            tau: 0.001,
            batch_size: 128,
            buffer_capacity: SharedReplayBuffer::DEFAULT_CAPACITY,
            exploration_noise: 0.1,
            updates_per_frame: 1.0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("rl.gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("rl.tau must lie in [0, 1]");
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return bad("rl.actor_lr and rl.critic_lr must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("rl.batch_size and rl.buffer_capacity must be positive");
        }
        if self.exploration_noise < 0.0 || self.updates_per_frame < 0.0 {
            return bad("rl.exploration_noise and rl.updates_per_frame must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainOutcome {
    /// Not enough transitions in the buffer yet.
    Skipped { needed: usize, available: usize },
    Trained(TrainDiagnostics),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    /// Mean squared TD error before the critic update.
    pub critic_loss: f64,
    /// Mean `Q(s, mu(s))` over the batch before the actor update.
    pub mean_q: f64,
}

#[derive(Clone, Debug)]
struct Scratch {
    actor: Workspace,
    critic: Workspace,
    actor_target: Workspace,
    critic_target: Workspace,
    critic_input: Vec<f64>,
    d_actor: Vec<f64>,
    d_critic: Vec<f64>,
    d_critic_input: Vec<f64>,
}

impl Scratch {
    fn new(actor: &Mlp, critic: &Mlp) -> Self {
        Self {
            actor: actor.workspace(),
            critic: critic.workspace(),
            actor_target: actor.workspace(),
            critic_target: critic.workspace(),
            critic_input: vec![0.0; critic.input_dim()],
            d_actor: vec![0.0; actor.param_count()],
            d_critic: vec![0.0; critic.param_count()],
            d_critic_input: vec![0.0; critic.input_dim()],
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RlCheckpoint {
    actor: Mlp,
    actor_target: Mlp,
    critic: Mlp,
    critic_target: Mlp,
    actor_opt: AdamState,
    critic_opt: AdamState,
    gamma: f64,
    tau: f64,
    train_steps: u64,
}

#[derive(Clone, Debug)]
pub struct RlAgent {
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critic: Mlp,
    pub critic_target: Mlp,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub gamma: f64,
    pub tau: f64,
    /// Personal genetic memory of the agent's own rollouts; seeds the memory
    /// of its clones in the population.
    pub memory: GeneticMemory,
    train_steps: u64,
    scratch: Scratch,
}

impl RlAgent {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        cfg: &RlConfig,
        memory_capacity: usize,
        rng: &mut R,
    ) -> Result<Self, RlError> {
        cfg.validate()?;
        let actor = Mlp::random(NetworkSpec::policy(state_dim, action_dim, hidden), rng)?;
        let critic = Mlp::random(NetworkSpec::critic(state_dim, action_dim, hidden), rng)?;
        Self::from_networks(actor, critic, cfg, memory_capacity)
    }

    /// Builds an agent around given live networks; targets start as copies.
    pub fn from_networks(
        actor: Mlp,
        critic: Mlp,
        cfg: &RlConfig,
        memory_capacity: usize,
    ) -> Result<Self, RlError> {
        cfg.validate()?;
        if critic.input_dim() != actor.input_dim() + actor.output_dim() || critic.output_dim() != 1 {
            return Err(RlError::Config(
                "critic must map [state; action] to a scalar".into(),
            ));
        }
        let scratch = Scratch::new(&actor, &critic);
        Ok(Self {
            actor_opt: AdamState::new(actor.param_count(), cfg.actor_lr),
            critic_opt: AdamState::new(critic.param_count(), cfg.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            gamma: cfg.gamma,
            tau: cfg.tau,
            memory: GeneticMemory::new(memory_capacity)?,
            train_steps: 0,
            scratch,
        })
    }

    /// Number of completed gradient steps.
    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn is_trained(&self) -> bool {
        self.train_steps > 0
    }

    pub fn act(&self, state: &[f64]) -> Vec<f64> {
        let mut ws = self.actor.workspace();
        self.actor.forward_ws(state, &mut ws).to_vec()
    }

    /// `mu(state)` plus Gaussian noise of std `noise_scale`, clamped to [-1, 1].
    pub fn exploration_action<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        noise_scale: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        let mut a = self.act(state);
        if noise_scale > 0.0 {
            let normal = Normal::new(0.0, noise_scale).expect("finite noise scale");
            for v in &mut a {
                *v = (*v + normal.sample(rng)).clamp(-1.0, 1.0);
            }
        }
        a
    }

    /// One critic and one actor update on a uniformly sampled batch, followed
    /// by soft target updates. The buffer is only read.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        buffer: &SharedReplayBuffer,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<TrainOutcome, RlError> {
        if batch_size == 0 || buffer.len() < batch_size {
            return Ok(TrainOutcome::Skipped {
                needed: batch_size.max(1),
                available: buffer.len(),
            });
        }
        let batch = buffer.sample(batch_size, rng)?;
        let n = batch.len() as f64;
        let sd = self.actor.input_dim();
        let sc = &mut self.scratch;

        // critic: regress Q(s, a) onto r + gamma * (1 - done) * Q'(s', mu'(s'))
        sc.d_critic.fill(0.0);
        let mut critic_loss = 0.0;
        for t in &batch {
            let next_q = if t.done {
                0.0
            } else {
                let a_next = self.actor_target.forward_ws(&t.next_state, &mut sc.actor_target);
                sc.critic_input[..sd].copy_from_slice(&t.next_state);
                sc.critic_input[sd..].copy_from_slice(a_next);
                self.critic_target
                    .forward_ws(&sc.critic_input, &mut sc.critic_target)[0]
            };
            let y = t.reward + self.gamma * next_q;
            sc.critic_input[..sd].copy_from_slice(&t.state);
            sc.critic_input[sd..].copy_from_slice(&t.action);
            let q = self.critic.forward_ws(&sc.critic_input, &mut sc.critic)[0];
            let err = q - y;
            critic_loss += err * err;
            self.critic
                .backward_ws(&mut sc.critic, &[2.0 * err / n], Some(&mut sc.d_critic), None);
        }
        critic_loss /= n;
        if !critic_loss.is_finite() {
            return Err(NnError::NonFiniteGradient.into());
        }
        self.critic_opt
            .apply(self.critic.params_mut(), &sc.d_critic)?;

        // actor: ascend Q(s, mu(s)) through the freshly updated critic
        sc.d_actor.fill(0.0);
        let mut mean_q = 0.0;
        for t in &batch {
            let a = self.actor.forward_ws(&t.state, &mut sc.actor);
            sc.critic_input[..sd].copy_from_slice(&t.state);
            sc.critic_input[sd..].copy_from_slice(a);
            mean_q += self.critic.forward_ws(&sc.critic_input, &mut sc.critic)[0];
            sc.d_critic_input.fill(0.0);
            self.critic.backward_ws(
                &mut sc.critic,
                &[-1.0 / n],
                None,
                Some(&mut sc.d_critic_input),
            );
            self.actor
                .backward_ws(&mut sc.actor, &sc.d_critic_input[sd..], Some(&mut sc.d_actor), None);
        }
        mean_q /= n;
        self.actor_opt.apply(self.actor.params_mut(), &sc.d_actor)?;

        soft_update(self.actor_target.params_mut(), self.actor.params(), self.tau)?;
        soft_update(self.critic_target.params_mut(), self.critic.params(), self.tau)?;
        self.train_steps += 1;
        Ok(TrainOutcome::Trained(TrainDiagnostics {
            critic_loss,
            mean_q,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<(), RlError> {
        let ck = RlCheckpoint {
            actor: self.actor.clone(),
            actor_target: self.actor_target.clone(),
            critic: self.critic.clone(),
            critic_target: self.critic_target.clone(),
            actor_opt: self.actor_opt.clone(),
            critic_opt: self.critic_opt.clone(),
            gamma: self.gamma,
            tau: self.tau,
            train_steps: self.train_steps,
        };
        fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    /// Restores networks and optimizer states. The personal memory is not
    /// part of the checkpoint and starts empty with `memory_capacity`.
    pub fn load(path: &Path, memory_capacity: usize) -> Result<Self, RlError> {
        let ck: RlCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        let scratch = Scratch::new(&ck.actor, &ck.critic);
        Ok(Self {
            actor: ck.actor,
            actor_target: ck.actor_target,
            critic: ck.critic,
            critic_target: ck.critic_target,
            actor_opt: ck.actor_opt,
            critic_opt: ck.critic_opt,
            gamma: ck.gamma,
            tau: ck.tau,
            memory: GeneticMemory::new(memory_capacity)?,
            train_steps: ck.train_steps,
            scratch,
        })
    }
}

/// The live critic.
impl Critic for RlAgent {
    fn q_value(&self, state: &[f64], action: &[f64]) -> f64 {
        self.critic.q_value(state, action)
    }
}
