//! The generation loop.
//!
//! Each generation:
//! 1. every agent is evaluated for `trials` episodes (transitions go to its
//!    genetic memory and the shared buffer), then the RL agent runs one
//!    exploration episode into its personal memory and the shared buffer;
//! 2. if the frame budget is spent, the run stops here;
//! 3. the top `ceil(elite_fraction * k)` agents keep their slots unchanged;
//! 4. every other slot receives a crossover child of a selected pair, mutated
//!    with probability `mutation_prob`;
//! 5. the RL agent trains on the shared buffer;
//! 6. every `sync_period` generations the RL actor replaces the slot ranked
//!    last, carrying a copy of the RL agent's memory.
//!
//! Slots keep their index across generations, so a report's provenance
//! refers to the same indices as its fitness list.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, EnvError, EnvId, Environment, TransitionStores};
use crate::memory::{GeneticMemory, MemoryError, SharedReplayBuffer};
use crate::nn::{Mlp, NetworkSpec, NnError};
use crate::operators::{
    self, Agent, CrossoverConfig, MutationConfig, OperatorError, SelectionMode,
};
use crate::rl::{RlAgent, RlConfig, RlError, TrainOutcome};
use crate::seeding::{derive_seed, rng_from};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid evolution configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which operator pair the population uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// n-point crossover, Gaussian mutation.
    Erl,
    /// n-point crossover, proximal mutation.
    Perl,
    /// Distillation crossover, Gaussian mutation.
    Derl,
    /// Distillation crossover, proximal mutation.
    #[default]
    Pderl,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Erl, Mode::Perl, Mode::Derl, Mode::Pderl];

    pub fn crossover(self) -> CrossoverKind {
        match self {
            Mode::Erl | Mode::Perl => CrossoverKind::NPoint,
            Mode::Derl | Mode::Pderl => CrossoverKind::Distillation,
        }
    }

    pub fn mutation(self) -> MutationKind {
        match self {
            Mode::Erl | Mode::Derl => MutationKind::Gaussian,
            Mode::Perl | Mode::Pderl => MutationKind::Proximal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Erl => "erl",
            Mode::Perl => "perl",
            Mode::Derl => "derl",
            Mode::Pderl => "pderl",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected erl, perl, derl or pderl)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverKind {
    NPoint,
    Distillation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    Gaussian,
    Proximal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub elite_fraction: f64,
    /// Evaluation episodes per agent per generation.
    pub trials: usize,
    /// Generations between RL-actor injections.
    pub sync_period: u64,
    pub mutation_prob: f64,
    pub mode: Mode,
    pub selection: SelectionMode,
    /// States drawn from each memory by the distance mating score.
    pub distance_sample: usize,
    /// Genetic memory capacity of every agent.
    pub memory_capacity: usize,
    pub frame_budget: u64,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population_size: 10,
            elite_fraction: 0.2,
            trials: 1,
            sync_period: 1,
            mutation_prob: 0.9,
            mode: Mode::Pderl,
            selection: SelectionMode::Greedy,
            distance_sample: 64,
            memory_capacity: GeneticMemory::DEFAULT_CAPACITY,
            frame_budget: 200_000,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn elite_count(&self) -> usize {
        elite_count(self.elite_fraction, self.population_size)
    }

    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |m: &str| Err(EvolutionError::Config(m.into()));
        if self.population_size < 2 {
            return bad("evolution.population_size must be at least 2");
        }
        if !(self.elite_fraction * (self.population_size as f64) >= 0.95) {
            return bad("evolution.elite_fraction times population_size must be at least 1");
        }
        if self.elite_count() >= self.population_size {
            return bad("evolution.elite_fraction leaves no slot for offspring");
        }
        if self.trials == 0 {
            return bad("evolution.trials must be positive");
        }
        if self.sync_period == 0 {
            return bad("evolution.sync_period must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return bad("evolution.mutation_prob must lie in [0, 1]");
        }
        if self.distance_sample == 0 {
            return bad("evolution.distance_sample must be positive");
        }
        if self.memory_capacity == 0 {
            return bad("evolution.memory_capacity must be positive");
        }
        Ok(())
    }
}

/// `ceil(psi * k)`. Products within 0.05 of an integer snap to it first, so
/// a fraction written to two decimals (0.34 for a third of 3) counts as meant.
pub fn elite_count(elite_fraction: f64, k: usize) -> usize {
    let raw = elite_fraction * k as f64;
    let snapped = if (raw - raw.round()).abs() <= 0.05 {
        raw.round()
    } else {
        raw.ceil()
    };
    (snapped.max(0.0) as usize).min(k)
}

/// Indices sorted by fitness, best first; ties go to the lower index.
pub fn ranking(fitnesses: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fitnesses.len()).collect();
    idx.sort_by(|&a, &b| fitnesses[b].total_cmp(&fitnesses[a]).then(a.cmp(&b)));
    idx
}

/// Splits the population into the top `ceil(psi * k)` (elites, best first)
/// and the rest (in rank order).
pub fn rank_and_elites(fitnesses: &[f64], elite_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let order = ranking(fitnesses);
    let m = elite_count(elite_fraction, fitnesses.len());
    let rest = order[m..].to_vec();
    let mut elites = order;
    elites.truncate(m);
    (elites, rest)
}

/// Slot replaced by the RL clone: the agent ranked last.
pub fn weakest(fitnesses: &[f64]) -> Option<usize> {
    ranking(fitnesses).last().copied()
}

/// Replaces the weakest member with a clone of the RL actor when
/// `generation` is a multiple of `sync_period`. The clone carries a copy of
/// the RL agent's personal memory. Returns the replaced slot.
pub fn sync_rl_to_population(
    population: &mut [Agent],
    rl: &RlAgent,
    fitnesses: &[f64],
    sync_period: u64,
    generation: u64,
) -> Option<usize> {
    if sync_period == 0 || !generation.is_multiple_of(sync_period) {
        return None;
    }
    let slot = weakest(fitnesses)?;
    population[slot] = Agent::new(rl.actor.clone(), rl.memory.inherit_full());
    Some(slot)
}

/// What became of the most recent RL clone in the generation after it was
/// injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlStatus {
    Elite,
    Selected,
    Discarded,
    NotSynced,
}

/// Elite beats selected beats discarded.
pub fn clone_fate(slot: usize, elites: &[usize], pairs: &[(usize, usize)]) -> RlStatus {
    if elites.contains(&slot) {
        RlStatus::Elite
    } else if pairs.iter().any(|&(a, b)| a == slot || b == slot) {
        RlStatus::Selected
    } else {
        RlStatus::Discarded
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlStatusRates {
    pub synced: usize,
    pub elite: f64,
    pub selected: f64,
    pub discarded: f64,
    /// False until at least one synced generation has been seen.
    pub defined: bool,
}

/// Cumulative percentages of elite / selected / discarded outcomes among the
/// generations that had a clone to judge.
pub fn track_rl_status<'a, I>(statuses: I) -> RlStatusRates
where
    I: IntoIterator<Item = &'a RlStatus>,
{
    let (mut e, mut s, mut d) = (0usize, 0usize, 0usize);
    for st in statuses {
        match st {
            RlStatus::Elite => e += 1,
            RlStatus::Selected => s += 1,
            RlStatus::Discarded => d += 1,
            RlStatus::NotSynced => {}
        }
    }
    let n = e + s + d;
    if n == 0 {
        return RlStatusRates::default();
    }
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    RlStatusRates {
        synced: n,
        elite: pct(e),
        selected: pct(s),
        discarded: pct(d),
        defined: true,
    }
}

/// Where the agent in a slot of the next population came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotOrigin {
    Elite,
    Offspring {
        parents: (usize, usize),
        crossover: CrossoverKind,
        mutation: Option<MutationKind>,
    },
    RlClone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    /// 1-based.
    pub generation: u64,
    pub fitness: Vec<f64>,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    /// Index of the best agent in `fitness`.
    pub champion: usize,
    /// Cumulative frames after this generation's rollouts.
    pub frames: u64,
    pub rl_episode_reward: f64,
    pub rl_status: RlStatus,
    pub elites: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    /// Provenance of each slot of the next population; empty when the run
    /// stopped after evaluation.
    pub slots: Vec<SlotOrigin>,
    pub rl_train_steps: u64,
    pub critic_loss: Option<f64>,
    /// True when the frame budget ended the run in this generation.
    pub stopped: bool,
}

const TAG_INIT: u64 = 1;
const TAG_EVAL: u64 = 2;
const TAG_RL_EPISODE: u64 = 3;
const TAG_VARIATION: u64 = 4;
const TAG_TRAIN: u64 = 5;
const TAG_RL_INIT: u64 = 6;

/// Everything needed to build a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSetup {
    pub env: EnvId,
    pub hidden: Vec<usize>,
    pub evolution: EvolutionConfig,
    pub crossover: CrossoverConfig,
    pub mutation: MutationConfig,
    pub rl: RlConfig,
}

impl RunSetup {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        self.evolution.validate()?;
        self.crossover.validate()?;
        self.mutation.validate()?;
        self.rl.validate()?;
        let spec = self.env.spec();
        NetworkSpec::policy(spec.state_dim, spec.action_dim, &self.hidden).validate()?;
        Ok(())
    }
}

pub struct Evolution {
    setup: RunSetup,
    env: Box<dyn Environment>,
    population: Vec<Agent>,
    rl: RlAgent,
    buffer: SharedReplayBuffer,
    generation: u64,
    frames: u64,
    pending_clone: Option<usize>,
    finished: bool,
}

impl Evolution {
    pub fn new(setup: RunSetup) -> Result<Self, EvolutionError> {
        setup.validate()?;
        let evo = &setup.evolution;
        let spec = setup.env.spec();
        let policy_spec = NetworkSpec::policy(spec.state_dim, spec.action_dim, &setup.hidden);
        let population = (0..evo.population_size)
            .map(|i| -> Result<Agent, EvolutionError> {
                let mut rng = rng_from(evo.seed, &[TAG_INIT, i as u64]);
                Ok(Agent::new(
                    Mlp::random(policy_spec.clone(), &mut rng)?,
                    GeneticMemory::new(evo.memory_capacity)?,
                ))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let rl = RlAgent::new(
            spec.state_dim,
            spec.action_dim,
            &setup.hidden,
            &setup.rl,
            evo.memory_capacity,
            &mut rng_from(evo.seed, &[TAG_RL_INIT]),
        )?;
        Ok(Self {
            env: env::make(setup.env),
            buffer: SharedReplayBuffer::new(setup.rl.buffer_capacity)?,
            finished: evo.frame_budget == 0,
            setup,
            population,
            rl,
            generation: 0,
            frames: 0,
            pending_clone: None,
        })
    }

    pub fn setup(&self) -> &RunSetup {
        &self.setup
    }

    pub fn population(&self) -> &[Agent] {
        &self.population
    }

    pub fn rl_agent(&self) -> &RlAgent {
        &self.rl
    }

    pub fn buffer(&self) -> &SharedReplayBuffer {
        &self.buffer
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Runs one generation; `None` once the frame budget has been spent.
    pub fn step(&mut self) -> Result<Option<GenerationReport>, EvolutionError> {
        if self.finished {
            return Ok(None);
        }
        self.generation += 1;
        let g = self.generation;
        let evo = self.setup.evolution.clone();
        let frames_before = self.frames;

        // evaluation
        let eval_seed = derive_seed(evo.seed, &[TAG_EVAL, g]);
        let mut fitness = Vec::with_capacity(self.population.len());
        for agent in &mut self.population {
            let eval = env::evaluate_fitness(
                self.env.as_mut(),
                evo.trials,
                eval_seed,
                env::greedy_policy(&agent.policy),
                Some(TransitionStores {
                    memory: &mut agent.memory,
                    buffer: &mut self.buffer,
                }),
            )?;
            agent.fitness = Some(eval.fitness);
            fitness.push(eval.fitness);
            self.frames += eval.frames as u64;
        }
        let rl_episode_reward = self.rl_rollout(g)?;

        let order = ranking(&fitness);
        let champion = order[0];
        let best_fitness = fitness[champion];
        let mean_fitness = fitness.iter().sum::<f64>() / fitness.len() as f64;
        let (elites, _) = rank_and_elites(&fitness, evo.elite_fraction);

        let mut report = GenerationReport {
            generation: g,
            best_fitness,
            mean_fitness,
            champion,
            frames: self.frames,
            rl_episode_reward,
            rl_status: RlStatus::NotSynced,
            elites: elites.clone(),
            pairs: Vec::new(),
            slots: Vec::new(),
            rl_train_steps: self.rl.train_steps(),
            critic_loss: None,
            stopped: false,
            fitness,
        };

        if self.frames >= evo.frame_budget {
            if let Some(slot) = self.pending_clone.take() {
                report.rl_status = if elites.contains(&slot) {
                    RlStatus::Elite
                } else {
                    RlStatus::Discarded
                };
            }
            report.stopped = true;
            self.finished = true;
            return Ok(Some(report));
        }

        // selection and variation
        let mut rng = rng_from(evo.seed, &[TAG_VARIATION, g]);
        let all: Vec<usize> = (0..self.population.len()).collect();
        let n_children = self.population.len() - elites.len();
        let pairs = operators::select_parents(
            &self.population,
            &all,
            evo.selection,
            n_children,
            evo.distance_sample,
            &mut rng,
        )?;
        if let Some(slot) = self.pending_clone.take() {
            report.rl_status = clone_fate(slot, &elites, &pairs);
        }

        let mut slots = vec![SlotOrigin::Elite; self.population.len()];
        let mut children = Vec::with_capacity(n_children);
        for &(x, y) in &pairs {
            let (px, py) = (&self.population[x], &self.population[y]);
            let mut child = match evo.mode.crossover() {
                CrossoverKind::NPoint => operators::npoint_crossover(px, py, &mut rng)?,
                CrossoverKind::Distillation => operators::distillation_crossover(
                    px,
                    py,
                    &self.rl,
                    &self.setup.crossover,
                    &mut rng,
                )?,
            };
            let mut mutation = None;
            if rng.random_bool(evo.mutation_prob) {
                let kind = evo.mode.mutation();
                child = match kind {
                    MutationKind::Gaussian => operators::gaussian_mutation(
                        &child,
                        self.setup.mutation.sigma,
                        self.setup.mutation.gaussian_fraction,
                        &mut rng,
                    )?,
                    MutationKind::Proximal if child.memory.is_empty() => child,
                    MutationKind::Proximal => {
                        operators::proximal_mutation(&child, &self.setup.mutation, &mut rng)?
                    }
                };
                mutation = Some(kind);
            }
            children.push((
                child,
                SlotOrigin::Offspring {
                    parents: (x, y),
                    crossover: evo.mode.crossover(),
                    mutation,
                },
            ));
        }
        let mut targets: Vec<usize> = (0..self.population.len())
            .filter(|i| !elites.contains(i))
            .collect();
        targets.sort_unstable();
        for (slot, (child, origin)) in targets.into_iter().zip(children) {
            self.population[slot] = child;
            slots[slot] = origin;
        }

        // RL training
        let updates =
            ((self.frames - frames_before) as f64 * self.setup.rl.updates_per_frame).round() as u64;
        let mut train_rng = rng_from(evo.seed, &[TAG_TRAIN, g]);
        let mut last_loss = None;
        for _ in 0..updates {
            if let TrainOutcome::Trained(d) =
                self.rl
                    .train_step(&self.buffer, self.setup.rl.batch_size, &mut train_rng)?
            {
                last_loss = Some(d.critic_loss);
            }
        }
        report.critic_loss = last_loss;
        report.rl_train_steps = self.rl.train_steps();

        // RL -> population
        if let Some(slot) = sync_rl_to_population(
            &mut self.population,
            &self.rl,
            &report.fitness,
            evo.sync_period,
            g,
        ) {
            slots[slot] = SlotOrigin::RlClone;
            self.pending_clone = Some(slot);
        }
        report.pairs = pairs;
        report.slots = slots;
        Ok(Some(report))
    }

    /// One exploration episode of the RL actor into its personal memory and
    /// the shared buffer.
    fn rl_rollout(&mut self, g: u64) -> Result<f64, EvolutionError> {
        let mut noise_rng = rng_from(self.setup.evolution.seed, &[TAG_RL_EPISODE, g, 1]);
        let noise = self.setup.rl.exploration_noise;
        let rl = &self.rl;
        let ep = env::run_episode(
            self.env.as_mut(),
            derive_seed(self.setup.evolution.seed, &[TAG_RL_EPISODE, g]),
            |s: &[f64]| rl.exploration_action(s, noise, &mut noise_rng),
        )?;
        self.frames += ep.steps as u64;
        for t in ep.transitions {
            let t = std::sync::Arc::new(t);
            self.rl.memory.push_shared(std::sync::Arc::clone(&t));
            self.buffer.push(t);
        }
        Ok(ep.total_reward)
    }

    /// Runs generations until the frame budget is spent, handing each report
    /// to `on_report`.
    pub fn run<F>(&mut self, mut on_report: F) -> Result<(), EvolutionError>
    where
        F: FnMut(&GenerationReport) -> Result<(), EvolutionError>,
    {
        while let Some(report) = self.step()? {
            on_report(&report)?;
        }
        Ok(())
    }

    /// Agent with the best cached fitness (ties to the lower index).
    pub fn champion(&self) -> Option<&Agent> {
        let fitness: Vec<f64> = self
            .population
            .iter()
            .map(|a| a.fitness.unwrap_or(f64::NEG_INFINITY))
            .collect();
        ranking(&fitness).first().map(|&i| &self.population[i])
    }
}
