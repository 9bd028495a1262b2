//! Operator benchmarks on trained parents.
//!
//! Parents are trained by imitating randomly parameterized scripted
//! controllers from independent initializations, so they behave well but
//! have unrelated hidden representations, as evolved population members do.
//! Their genetic memories are filled with their own greedy rollouts.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, Grid2d, Kde, VisitationSample};
use crate::env::{self, scripted, EnvError, EnvId, Environment};
use crate::memory::{GeneticMemory, MemoryError, SharedReplayBuffer};
use crate::nn::{AdamState, Mlp, NetworkSpec, NnError};
use crate::operators::{self, Agent, CrossoverConfig, MutationConfig, OperatorError};
use crate::rl::{RlAgent, RlConfig, RlError};
use crate::seeding::{derive_seed, rng_from};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("distillation needs a trained critic; train it on parent rollouts first")]
    UntrainedCritic,
    #[error("need at least {needed} parents, got {got}")]
    TooFewParents { needed: usize, got: usize },
    #[error("invalid bench configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Parent pairs in the crossover bench.
    pub pairs: usize,
    /// Parents in the mutation bench.
    pub parents: usize,
    /// Children per operator per pair (crossover) or parent (mutation).
    pub children: usize,
    /// Evaluation episodes per fitness measurement.
    pub eval_trials: usize,
    /// Episodes per visitation sample.
    pub visitation_episodes: usize,
    /// Grid cells along the longer axis for KL estimates.
    pub grid_cells: usize,
    /// Mutation magnitudes of the drift sweep.
    pub sigmas: Vec<f64>,
    /// Mutants per magnitude in the drift sweep.
    pub sweep_seeds: usize,
    pub imitation_steps: usize,
    pub imitation_batch: usize,
    pub imitation_lr: f64,
    /// Teacher episodes (with action noise) used as imitation data.
    pub imitation_episodes: usize,
    /// Gradient steps of the bench critic.
    pub critic_steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            pairs: 10,
            parents: 10,
            children: 1,
            eval_trials: 5,
            visitation_episodes: analysis::DEFAULT_VISITATION_EPISODES,
            grid_cells: 80,
            sigmas: vec![0.01, 0.05, 0.1, 0.5],
            sweep_seeds: 20,
            imitation_steps: 4000,
            imitation_batch: 64,
            imitation_lr: 1e-3,
            imitation_episodes: 20,
            critic_steps: 3000,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.into()));
        if self.pairs == 0 || self.parents == 0 || self.children == 0 {
            return bad("bench.pairs, bench.parents and bench.children must be positive");
        }
        if self.eval_trials == 0 || self.visitation_episodes == 0 {
            return bad("bench.eval_trials and bench.visitation_episodes must be positive");
        }
        if self.grid_cells < 2 {
            return bad("bench.grid_cells must be at least 2");
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return bad("bench.sigmas must be non-negative");
        }
        if self.imitation_batch == 0 || !(self.imitation_lr > 0.0) || self.imitation_episodes == 0 {
            return bad("bench imitation settings must be positive");
        }
        Ok(())
    }
}

/// Randomly parameterized scripted controller.
#[derive(Clone, Copy, Debug)]
pub enum Teacher {
    PointMass(scripted::PointMassSeeker),
    Pendulum(scripted::PendulumSwingUp),
}

impl Teacher {
    pub fn random<R: Rng + ?Sized>(env: EnvId, rng: &mut R) -> Self {
        match env {
            EnvId::PointMass2d => Teacher::PointMass(scripted::PointMassSeeker {
                gain: rng.random_range(3.0..12.0),
                rotation: rng.random_range(-0.5..0.5),
            }),
            EnvId::PendulumSwingUp => Teacher::Pendulum(scripted::PendulumSwingUp {
                energy_gain: rng.random_range(0.3..1.0),
                kp: rng.random_range(6.0..14.0),
                kd: rng.random_range(1.0..3.0),
                capture_angle: rng.random_range(0.3..0.7),
            }),
        }
    }

    pub fn act(&self, state: &[f64]) -> Vec<f64> {
        match self {
            Teacher::PointMass(t) => t.act(state),
            Teacher::Pendulum(t) => t.act(state),
        }
    }
}

/// The reference controller for `env`: the exact optimum on the point mass,
/// the default swing-up controller on the pendulum.
pub fn scripted_reference(env: EnvId) -> fn(&[f64]) -> Vec<f64> {
    match env {
        EnvId::PointMass2d => scripted::point_mass_optimal,
        EnvId::PendulumSwingUp => |s| scripted::PendulumSwingUp::default().act(s),
    }
}

/// Fits `net` to `teacher` by supervised regression on states from noisy
/// teacher rollouts plus one round of the student's own rollouts.
pub fn imitate<R: Rng + ?Sized>(
    net: &mut Mlp,
    teacher: &Teacher,
    env: &mut dyn Environment,
    cfg: &BenchConfig,
    seed: u64,
    rng: &mut R,
) -> Result<(), BenchError> {
    let mut states = Vec::new();
    for e in 0..cfg.imitation_episodes {
        let noise = rand_distr::Normal::new(0.0, 0.3).expect("valid std");
        let mut noise_rng = rng_from(seed, &[e as u64, 1]);
        let ep = env::run_episode(env, derive_seed(seed, &[e as u64]), |s: &[f64]| {
            teacher
                .act(s)
                .into_iter()
                .map(|a| a + rand_distr::Distribution::sample(&noise, &mut noise_rng))
                .collect()
        })?;
        states.extend(ep.transitions.into_iter().map(|t| t.state));
    }
    let half = cfg.imitation_steps / 2;
    fit_to_teacher(net, teacher, &states, half, cfg, rng)?;
    for e in 0..cfg.imitation_episodes / 2 {
        let ep = env::run_episode(env, derive_seed(seed, &[e as u64, 2]), env::greedy_policy(net))?;
        states.extend(ep.transitions.into_iter().map(|t| t.state));
    }
    fit_to_teacher(net, teacher, &states, cfg.imitation_steps - half, cfg, rng)
}

fn fit_to_teacher<R: Rng + ?Sized>(
    net: &mut Mlp,
    teacher: &Teacher,
    states: &[Vec<f64>],
    steps: usize,
    cfg: &BenchConfig,
    rng: &mut R,
) -> Result<(), BenchError> {
    let labels: Vec<Vec<f64>> = states.iter().map(|s| teacher.act(s)).collect();
    let mut opt = AdamState::new(net.param_count(), cfg.imitation_lr);
    let mut ws = net.workspace();
    let mut grad = vec![0.0; net.param_count()];
    let scale = 2.0 / cfg.imitation_batch as f64;
    for _ in 0..steps {
        grad.fill(0.0);
        for _ in 0..cfg.imitation_batch {
            let i = rng.random_range(0..states.len());
            let out = net.forward_ws(&states[i], &mut ws);
            let up: Vec<f64> = out.iter().zip(&labels[i]).map(|(o, t)| scale * (o - t)).collect();
            net.backward_ws(&mut ws, &up, Some(&mut grad), None);
        }
        opt.apply(net.params_mut(), &grad)?;
    }
    Ok(())
}

/// Fixed evaluation seed of the benches, shared by parents and children so
/// fitness comparisons are paired.
pub fn eval_seed(master: u64) -> u64 {
    derive_seed(master, &[0xE7A1])
}

/// Mean return over `trials` episodes; nothing is stored.
pub fn evaluate(env: &mut dyn Environment, policy: &Mlp, trials: usize, seed: u64) -> Result<f64, BenchError> {
    Ok(env::evaluate_fitness(env, trials, seed, env::greedy_policy(policy), None)?.fitness)
}

/// Mean return of an arbitrary controller.
pub fn evaluate_controller<P>(env: &mut dyn Environment, policy: P, trials: usize, seed: u64) -> Result<f64, BenchError>
where
    P: FnMut(&[f64]) -> Vec<f64>,
{
    Ok(env::evaluate_fitness(env, trials, seed, policy, None)?.fitness)
}

/// Trains parent `index` of the pool seeded by `master`, fills its memory
/// with its own rollouts and evaluates it.
pub fn train_parent(
    env_id: EnvId,
    hidden: &[usize],
    memory_capacity: usize,
    cfg: &BenchConfig,
    master: u64,
    index: usize,
) -> Result<Agent, BenchError> {
    let spec = env_id.spec();
    let mut rng = rng_from(master, &[0xA9E7, index as u64]);
    let teacher = Teacher::random(env_id, &mut rng);
    let mut net = Mlp::random(NetworkSpec::policy(spec.state_dim, spec.action_dim, hidden), &mut rng)?;
    let mut env = env::make(env_id);
    imitate(&mut net, &teacher, env.as_mut(), cfg, derive_seed(master, &[0xA9E7, index as u64, 1]), &mut rng)?;
    let mut memory = GeneticMemory::new(memory_capacity)?;
    let mut e = 0u64;
    while memory.len() < memory_capacity {
        let ep = env::run_episode(env.as_mut(), derive_seed(master, &[0xA9E7, index as u64, 2, e]), env::greedy_policy(&net))?;
        for t in ep.transitions {
            memory.push(t);
        }
        e += 1;
    }
    let mut agent = Agent::new(net, memory);
    agent.fitness = Some(evaluate(env.as_mut(), &agent.policy, cfg.eval_trials, eval_seed(master))?);
    Ok(agent)
}

pub fn trained_parents(
    env_id: EnvId,
    hidden: &[usize],
    memory_capacity: usize,
    cfg: &BenchConfig,
    master: u64,
    count: usize,
) -> Result<Vec<Agent>, BenchError> {
    (0..count)
        .map(|i| train_parent(env_id, hidden, memory_capacity, cfg, master, i))
        .collect()
}

/// Trains a DDPG agent on the parents' rollouts plus noisy rollouts of the
/// same parents; its critic scores actions during distillation.
pub fn train_critic(
    env_id: EnvId,
    hidden: &[usize],
    parents: &[Agent],
    rl_cfg: &RlConfig,
    cfg: &BenchConfig,
    master: u64,
) -> Result<RlAgent, BenchError> {
    let spec = env_id.spec();
    let mut rng = rng_from(master, &[0xC417]);
    let mut rl = RlAgent::new(spec.state_dim, spec.action_dim, hidden, rl_cfg, 1, &mut rng)?;
    let mut buffer = SharedReplayBuffer::new(rl_cfg.buffer_capacity)?;
    let mut env = env::make(env_id);
    for (i, p) in parents.iter().enumerate() {
        for t in p.memory.iter() {
            buffer.push(Arc::clone(t));
        }
        for e in 0..2u64 {
            let noise = rand_distr::Normal::new(0.0, 0.3).expect("valid std");
            let mut nrng = rng_from(master, &[0xC417, i as u64, e]);
            let mut ws = p.policy.workspace();
            let ep = env::run_episode(env.as_mut(), derive_seed(master, &[0xC418, i as u64, e]), |s: &[f64]| {
                p.policy
                    .forward_ws(s, &mut ws)
                    .iter()
                    .map(|a| a + rand_distr::Distribution::sample(&noise, &mut nrng))
                    .collect()
            })?;
            for t in ep.transitions {
                buffer.push(Arc::new(t));
            }
        }
    }
    for _ in 0..cfg.critic_steps {
        rl.train_step(&buffer, rl_cfg.batch_size, &mut rng)?;
    }
    Ok(rl)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow {
    pub pair: usize,
    pub parent1: usize,
    pub parent2: usize,
    pub operator: String,
    pub parent1_fitness: f64,
    pub parent2_fitness: f64,
    pub child_fitness: f64,
    /// Child fitness over parent 1's.
    pub normalized: f64,
    /// Child fitness over the better parent's.
    pub ratio_to_best: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorSummary {
    pub operator: String,
    pub children: usize,
    /// Fraction of children with fitness >= 80% of the better parent.
    pub at_least_80: f64,
    /// Fraction of children below 40% of the better parent.
    pub below_40: f64,
    pub median_ratio_to_best: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `num / den`, or `num` itself when `den` is too close to zero.
fn ratio(num: f64, den: f64) -> f64 {
    if den.abs() < analysis::NEAR_ZERO_FITNESS {
        num
    } else {
        num / den
    }
}

pub fn summarize_crossover(rows: &[CrossoverRow], operator: &str) -> OperatorSummary {
    let r: Vec<f64> = rows
        .iter()
        .filter(|r| r.operator == operator)
        .map(|r| r.ratio_to_best)
        .collect();
    let n = r.len().max(1) as f64;
    OperatorSummary {
        operator: operator.into(),
        children: r.len(),
        at_least_80: r.iter().filter(|&&x| x >= 0.8).count() as f64 / n,
        below_40: r.iter().filter(|&&x| x < 0.4).count() as f64 / n,
        median_ratio_to_best: median(&r),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub rows: Vec<CrossoverRow>,
    pub summaries: Vec<OperatorSummary>,
    /// Distillation child of a parent paired with itself, relative to it.
    pub identical_pair_ratio: Option<f64>,
    /// Visitation samples: (pair, role, sample), role in parent1/parent2/
    /// distillation/n_point.
    #[serde(skip)]
    pub visitation: Vec<(usize, String, VisitationSample)>,
}

pub const DISTILLATION: &str = "distillation";
pub const N_POINT: &str = "n_point";
pub const PROXIMAL: &str = "proximal";
pub const GAUSSIAN: &str = "gaussian";

/// `count` distinct unordered pairs of distinct parents, order within a pair
/// random (the first is parent 1).
pub fn random_pairs<R: Rng + ?Sized>(n_parents: usize, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..n_parents)
        .flat_map(|i| (i + 1..n_parents).map(move |j| (i, j)))
        .collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count && !all.is_empty() {
        let (i, j) = all.swap_remove(rng.random_range(0..all.len()));
        out.push(if rng.random_bool(0.5) { (i, j) } else { (j, i) });
    }
    out
}

/// Applies both crossovers to `cfg.pairs` random pairs of `parents`.
/// With `identical_row`, a parent paired with itself is added as a sanity row.
#[allow(clippy::too_many_arguments)]
pub fn crossover_bench(
    env_id: EnvId,
    parents: &[Agent],
    critic: &RlAgent,
    crossover: &CrossoverConfig,
    cfg: &BenchConfig,
    master: u64,
    identical_row: bool,
    with_visitation: bool,
) -> Result<CrossoverReport, BenchError> {
    if !critic.is_trained() {
        return Err(BenchError::UntrainedCritic);
    }
    if parents.len() < 2 {
        return Err(BenchError::TooFewParents { needed: 2, got: parents.len() });
    }
    let mut env = env::make(env_id);
    let seed = eval_seed(master);
    let mut rng = rng_from(master, &[0xC055]);
    let pairs = random_pairs(parents.len(), cfg.pairs, &mut rng);
    let mut rows = Vec::new();
    let mut visitation = Vec::new();
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let (x, y) = (&parents[i], &parents[j]);
        let (fx, fy) = (x.fresh_fitness()?, y.fresh_fitness()?);
        let best = fx.max(fy);
        if with_visitation {
            let vseed = derive_seed(master, &[0x7151, p as u64]);
            visitation.push((p, "parent1".to_string(), analysis::collect_visitation(env.as_mut(), &x.policy, cfg.visitation_episodes, vseed)?));
            visitation.push((p, "parent2".to_string(), analysis::collect_visitation(env.as_mut(), &y.policy, cfg.visitation_episodes, vseed)?));
        }
        for c in 0..cfg.children {
            for op in [DISTILLATION, N_POINT] {
                let child = match op {
                    DISTILLATION => operators::distillation_crossover(x, y, critic, crossover, &mut rng)?,
                    _ => operators::npoint_crossover(x, y, &mut rng)?,
                };
                let f = evaluate(env.as_mut(), &child.policy, cfg.eval_trials, seed)?;
                rows.push(CrossoverRow {
                    pair: p,
                    parent1: i,
                    parent2: j,
                    operator: op.into(),
                    parent1_fitness: fx,
                    parent2_fitness: fy,
                    child_fitness: f,
                    normalized: ratio(f, fx),
                    ratio_to_best: ratio(f, best),
                });
                if with_visitation && c == 0 {
                    let vseed = derive_seed(master, &[0x7151, p as u64]);
                    visitation.push((p, op.to_string(), analysis::collect_visitation(env.as_mut(), &child.policy, cfg.visitation_episodes, vseed)?));
                }
            }
        }
    }
    let identical_pair_ratio = if identical_row {
        let x = &parents[0];
        let child = operators::distillation_crossover(x, x, critic, crossover, &mut rng)?;
        let f = evaluate(env.as_mut(), &child.policy, cfg.eval_trials, seed)?;
        Some(ratio(f, x.fresh_fitness()?))
    } else {
        None
    };
    let summaries = vec![summarize_crossover(&rows, DISTILLATION), summarize_crossover(&rows, N_POINT)];
    Ok(CrossoverReport { rows, summaries, identical_pair_ratio, visitation })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationRow {
    pub parent: usize,
    pub operator: String,
    pub sigma: f64,
    pub parent_fitness: f64,
    pub child_fitness: f64,
    /// Child fitness over the parent's.
    pub retention: f64,
    /// Mean squared action gap on the parent's mutation batch.
    pub action_gap: f64,
    /// KL(parent || child) of the state-visitation densities.
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub seed: usize,
    pub parent: usize,
    /// Mean Euclidean action gap between parent and proximal mutant.
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationSummary {
    pub operator: String,
    pub median_retention: f64,
    pub median_kl: f64,
    pub median_action_gap: f64,
    /// Fraction of mutants keeping at least half the parent's fitness.
    pub at_least_50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sigma: f64,
    pub median_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationReport {
    pub rows: Vec<MutationRow>,
    pub summaries: Vec<MutationSummary>,
    pub sweep: Vec<SweepRow>,
    pub sweep_summary: Vec<SweepSummary>,
}

/// KL(parent || child) between visitation densities collected on the same
/// episode seeds.
pub fn visitation_kl(
    env: &mut dyn Environment,
    parent: &VisitationSample,
    child: &Mlp,
    episodes: usize,
    seed: u64,
    grid_cells: usize,
) -> Result<f64, BenchError> {
    let cs = analysis::collect_visitation(env, child, episodes, seed)?;
    let p = Kde::from_sample(parent, None)?;
    let q = Kde::from_sample(&cs, None)?;
    let grid = Grid2d::covering(&[&p, &q], grid_cells)?;
    Ok(analysis::kl_divergence(&p, &q, &grid).value)
}

pub fn summarize_mutation(rows: &[MutationRow], operator: &str) -> MutationSummary {
    let sel: Vec<&MutationRow> = rows.iter().filter(|r| r.operator == operator).collect();
    let col = |f: fn(&MutationRow) -> f64| sel.iter().map(|r| f(r)).collect::<Vec<_>>();
    MutationSummary {
        operator: operator.into(),
        median_retention: median(&col(|r| r.retention)),
        median_kl: median(&col(|r| r.kl)),
        median_action_gap: median(&col(|r| r.action_gap)),
        at_least_50: sel.iter().filter(|r| r.retention >= 0.5).count() as f64 / sel.len().max(1) as f64,
    }
}

/// Proximal vs Gaussian mutants of every parent at `mutation.sigma`, plus a
/// drift sweep of proximal mutants over `cfg.sigmas` (and sigma = 0).
pub fn mutation_bench(
    env_id: EnvId,
    parents: &[Agent],
    mutation: &MutationConfig,
    cfg: &BenchConfig,
    master: u64,
) -> Result<MutationReport, BenchError> {
    if parents.is_empty() {
        return Err(BenchError::TooFewParents { needed: 1, got: 0 });
    }
    let mut env = env::make(env_id);
    let seed = eval_seed(master);
    let vseed = derive_seed(master, &[0x7152]);
    let mut rows = Vec::new();
    for (i, parent) in parents.iter().enumerate() {
        let pf = parent.fresh_fitness()?;
        let pv = analysis::collect_visitation(env.as_mut(), &parent.policy, cfg.visitation_episodes, vseed)?;
        let mut batch_rng = rng_from(master, &[0x3A7C, i as u64]);
        let batch: Vec<Vec<f64>> = parent
            .memory
            .sample_states(mutation.batch_size, &mut batch_rng)?
            .into_iter()
            .map(<[f64]>::to_vec)
            .collect();
        for c in 0..cfg.children {
            for op in [PROXIMAL, GAUSSIAN] {
                let mut rng = rng_from(master, &[0x3A7D, i as u64, c as u64]);
                let child = match op {
                    PROXIMAL => operators::proximal_mutation(parent, mutation, &mut rng)?,
                    _ => operators::gaussian_mutation(parent, mutation.sigma, mutation.gaussian_fraction, &mut rng)?,
                };
                let f = evaluate(env.as_mut(), &child.policy, cfg.eval_trials, seed)?;
                let gap = operators::policy_distance(&parent.policy, &child.policy, &batch, &[]);
                let kl = visitation_kl(env.as_mut(), &pv, &child.policy, cfg.visitation_episodes, vseed, cfg.grid_cells)?;
                rows.push(MutationRow {
                    parent: i,
                    operator: op.into(),
                    sigma: mutation.sigma,
                    parent_fitness: pf,
                    child_fitness: f,
                    retention: ratio(f, pf),
                    action_gap: gap,
                    kl,
                });
            }
        }
    }
    let (sweep, sweep_summary) = drift_sweep(parents, mutation, &cfg.sigmas, cfg.sweep_seeds, master)?;
    Ok(MutationReport {
        summaries: vec![summarize_mutation(&rows, PROXIMAL), summarize_mutation(&rows, GAUSSIAN)],
        rows,
        sweep,
        sweep_summary,
    })
}

/// Proximal-mutant action drift for each magnitude, always including a
/// sigma = 0 row. Mutant `s` of every magnitude uses the same parent and
/// random stream, so magnitudes are compared on paired noise.
pub fn drift_sweep(
    parents: &[Agent],
    mutation: &MutationConfig,
    sigmas: &[f64],
    seeds: usize,
    master: u64,
) -> Result<(Vec<SweepRow>, Vec<SweepSummary>), BenchError> {
    let mut grid: Vec<f64> = sigmas.to_vec();
    if !grid.contains(&0.0) {
        grid.insert(0, 0.0);
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &sigma in &grid {
        let cfg = MutationConfig { sigma, ..mutation.clone() };
        let mut drifts = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let p = s % parents.len();
            let parent = &parents[p];
            let mut rng = rng_from(master, &[0x5EE9, s as u64]);
            let mut batch_rng = rng_from(master, &[0x5EEA, s as u64]);
            let batch = parent.memory.sample_states(mutation.batch_size, &mut batch_rng)?;
            let child = operators::proximal_mutation(parent, &cfg, &mut rng)?;
            let drift = analysis::action_drift(&parent.policy, &child.policy, &batch);
            drifts.push(drift);
            rows.push(SweepRow { sigma, seed: s, parent: p, drift });
        }
        summary.push(SweepSummary { sigma, median_drift: median(&drifts) });
    }
    Ok((rows, summary))
}

/// Saves an agent as `policy.json` plus `memory.jsonl` under `dir`.
pub fn save_agent(agent: &Agent, dir: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir)?;
    agent.policy.save(&dir.join("policy.json"))?;
    agent.memory.dump(&dir.join("memory.jsonl"))?;
    if let Some(f) = agent.fitness {
        std::fs::write(dir.join("fitness.json"), serde_json::to_string(&f).expect("f64 serializes"))?;
    }
    Ok(())
}

pub fn load_agent(dir: &Path) -> Result<Agent, BenchError> {
    let policy = Mlp::load(&dir.join("policy.json"))?;
    let memory = GeneticMemory::load(&dir.join("memory.jsonl"))?;
    let fit_path = dir.join("fitness.json");
    let fitness = if fit_path.exists() {
        let text = std::fs::read_to_string(fit_path)?;
        Some(serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("bad fitness.json: {e}")))?)
    } else {
        None
    };
    Ok(Agent { policy, memory, fitness })
}
