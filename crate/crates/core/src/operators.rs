//! Variation and selection operators.
//!
//! Learning-based operators:
//! - [`distillation_crossover`]: the child imitates, state by state, whichever
//!   parent's action the critic values higher.
//! - [`proximal_mutation`]: Gaussian perturbation scaled down per weight by
//!   how strongly that weight moves the policy's actions.
//!
//! Classic baselines: [`npoint_crossover`] (whole rows of each layer taken
//! from one parent) and [`gaussian_mutation`] (additive noise on a fraction
//! of the weights).
//!
//! Operators never modify their parents. Children come back with stale
//! fitness (`None`).

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{GeneticMemory, MemoryError};
use crate::nn::{AdamState, Mlp, NnError};
use crate::rl::Critic;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("parent has an empty genetic memory")]
    EmptyMemory,
    #[error("both parents have empty genetic memories; nothing to distill from")]
    NothingToDistill,
    #[error("parents have different network specs")]
    SpecMismatch,
    #[error("fitness of agent is stale; evaluate before selection")]
    StaleFitness,
    #[error("invalid operator configuration: {0}")]
    Config(String),
    #[error("need at least two candidates to form a pair, got {0}")]
    TooFewCandidates(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// A member of the population.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub policy: Mlp,
    pub memory: GeneticMemory,
    /// Cached fitness; `None` when the agent changed since its last evaluation.
    pub fitness: Option<f64>,
}

impl Agent {
    pub fn new(policy: Mlp, memory: GeneticMemory) -> Self {
        Self {
            policy,
            memory,
            fitness: None,
        }
    }

    pub fn fresh_fitness(&self) -> Result<f64, OperatorError> {
        self.fitness.ok_or(OperatorError::StaleFitness)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossoverConfig {
    /// States per distillation batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight on the output regularizer `(1/N) * sum ||mu_z(s)||^2`.
    pub reg_weight: f64,
}

impl Default for CrossoverConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 12,
            learning_rate: 1e-3,
            reg_weight: 1.0,
        }
    }
}

impl CrossoverConfig {
    pub fn validate(&self) -> Result<(), OperatorError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(OperatorError::Config(
                "crossover.batch_size and crossover.epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.reg_weight < 0.0 {
            return Err(OperatorError::Config(
                "crossover.learning_rate must be positive and crossover.reg_weight non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MutationConfig {
    /// Std of the Gaussian perturbation before sensitivity scaling.
    pub sigma: f64,
    /// States used to measure sensitivity.
    pub batch_size: usize,
    /// Lower bound on the sensitivity divisor.
    pub sensitivity_floor: f64,
    /// Fraction of weights touched by the Gaussian baseline.
    pub gaussian_fraction: f64,
}

impl Default for MutationConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            batch_size: 256,
            sensitivity_floor: 1e-8,
            gaussian_fraction: 0.1,
        }
    }
}

impl MutationConfig {
    pub fn validate(&self) -> Result<(), OperatorError> {
        if !(self.sigma >= 0.0) || !(self.sensitivity_floor > 0.0) || self.batch_size == 0 {
            return Err(OperatorError::Config(
                "mutation.sigma must be non-negative, mutation.sensitivity_floor positive and mutation.batch_size non-zero".into(),
            ));
        }
        if !(self.gaussian_fraction > 0.0 && self.gaussian_fraction <= 1.0) {
            return Err(OperatorError::Config(
                "mutation.gaussian_fraction must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn same_spec(x: &Agent, y: &Agent) -> Result<(), OperatorError> {
    if x.policy.spec() == y.policy.spec() {
        Ok(())
    } else {
        Err(OperatorError::SpecMismatch)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Q-filtered behaviour cloning loss on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct QFilterLoss {
    pub loss: f64,
    pub imitation_x: f64,
    pub imitation_y: f64,
    pub regularization: f64,
    /// Per sample: imitate parent x (otherwise y).
    pub imitate_x: Vec<bool>,
    /// Per sample: d loss / d child action.
    pub upstream: Vec<Vec<f64>>,
}

/// Which parent to imitate: x when `qx > qy`, y when `qy > qx`, x on ties.
#[inline]
pub fn prefers_x(qx: f64, qy: f64) -> bool {
    !(qy > qx)
}

/// `sum_i ||z_i - x_i||^2 [x preferred] + sum_i ||z_i - y_i||^2 [y preferred]
///  + (reg_weight / N) sum_i ||z_i||^2`.
pub fn qfilter_loss<A: AsRef<[f64]>>(
    child: &[A],
    x_actions: &[A],
    y_actions: &[A],
    qx: &[f64],
    qy: &[f64],
    reg_weight: f64,
) -> QFilterLoss {
    let n = child.len();
    assert!(
        x_actions.len() == n && y_actions.len() == n && qx.len() == n && qy.len() == n,
        "qfilter_loss: batch arrays must be aligned"
    );
    let reg_scale = if n == 0 { 0.0 } else { reg_weight / n as f64 };
    let mut out = QFilterLoss {
        loss: 0.0,
        imitation_x: 0.0,
        imitation_y: 0.0,
        regularization: 0.0,
        imitate_x: Vec::with_capacity(n),
        upstream: Vec::with_capacity(n),
    };
    for i in 0..n {
        let z = child[i].as_ref();
        let use_x = prefers_x(qx[i], qy[i]);
        let target = if use_x {
            x_actions[i].as_ref()
        } else {
            y_actions[i].as_ref()
        };
        let d = sq_dist(z, target);
        if use_x {
            out.imitation_x += d;
        } else {
            out.imitation_y += d;
        }
        out.regularization += reg_scale * z.iter().map(|v| v * v).sum::<f64>();
        out.upstream.push(
            z.iter()
                .zip(target)
                .map(|(zi, ti)| 2.0 * (zi - ti) + 2.0 * reg_scale * zi)
                .collect(),
        );
        out.imitate_x.push(use_x);
    }
    out.loss = out.imitation_x + out.imitation_y + out.regularization;
    out
}

/// Per-state imitation target of the distillation crossover.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTarget {
    pub x_action: Vec<f64>,
    pub y_action: Vec<f64>,
    pub qx: f64,
    pub qy: f64,
}

impl DistillTarget {
    pub fn imitate_x(&self) -> bool {
        prefers_x(self.qx, self.qy)
    }
}

/// Evaluates both parents and the critic on each state. Parents are fixed
/// during distillation, so these values can be computed once per state.
pub fn distillation_targets<'s, C, I>(
    x: &Mlp,
    y: &Mlp,
    critic: &C,
    states: I,
) -> Vec<DistillTarget>
where
    C: Critic + ?Sized,
    I: IntoIterator<Item = &'s [f64]>,
{
    let mut wx = x.workspace();
    let mut wy = y.workspace();
    states
        .into_iter()
        .map(|s| {
            let x_action = x.forward_ws(s, &mut wx).to_vec();
            let y_action = y.forward_ws(s, &mut wy).to_vec();
            DistillTarget {
                qx: critic.q_value(s, &x_action),
                qy: critic.q_value(s, &y_action),
                x_action,
                y_action,
            }
        })
        .collect()
}

/// Q-filtered distillation crossover.
///
/// The child memory takes the newest half of each parent's memory (shuffled).
/// The child starts from the weights of a parent picked by a fair coin and is
/// trained with Adam for `cfg.epochs` epochs; each epoch runs
/// `ceil(|memory| / batch_size)` batches sampled uniformly from the child's
/// memory, minimizing [`qfilter_loss`].
pub fn distillation_crossover<C, R>(
    x: &Agent,
    y: &Agent,
    critic: &C,
    cfg: &CrossoverConfig,
    rng: &mut R,
) -> Result<Agent, OperatorError>
where
    C: Critic + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    same_spec(x, y)?;
    if x.memory.is_empty() && y.memory.is_empty() {
        return Err(OperatorError::NothingToDistill);
    }
    let capacity = x.memory.capacity();
    let memory = GeneticMemory::inherit_crossover(&x.memory, &y.memory, capacity, rng)?;
    let mut policy = if rng.random_bool(0.5) {
        x.policy.clone()
    } else {
        y.policy.clone()
    };

    let states: Vec<&[f64]> = memory.states().collect();
    let targets = distillation_targets(&x.policy, &y.policy, critic, states.iter().copied());
    let mut opt = AdamState::new(policy.param_count(), cfg.learning_rate);
    let mut ws = policy.workspace();
    let mut grad = vec![0.0; policy.param_count()];
    let iters = states.len().div_ceil(cfg.batch_size);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut child_actions: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);

    for _ in 0..cfg.epochs {
        for _ in 0..iters {
            batch.clear();
            batch.extend((0..cfg.batch_size).map(|_| rng.random_range(0..states.len())));
            child_actions.clear();
            for &i in &batch {
                child_actions.push(policy.forward_ws(states[i], &mut ws).to_vec());
            }
            let xs: Vec<&[f64]> = batch.iter().map(|&i| targets[i].x_action.as_slice()).collect();
            let ys: Vec<&[f64]> = batch.iter().map(|&i| targets[i].y_action.as_slice()).collect();
            let qx: Vec<f64> = batch.iter().map(|&i| targets[i].qx).collect();
            let qy: Vec<f64> = batch.iter().map(|&i| targets[i].qy).collect();
            let zs: Vec<&[f64]> = child_actions.iter().map(Vec::as_slice).collect();
            let loss = qfilter_loss(&zs, &xs, &ys, &qx, &qy, cfg.reg_weight);

            grad.fill(0.0);
            for (k, &i) in batch.iter().enumerate() {
                policy.forward_ws(states[i], &mut ws);
                policy.backward_ws(&mut ws, &loss.upstream[k], Some(&mut grad), None);
            }
            opt.apply(policy.params_mut(), &grad)?;
        }
    }
    Ok(Agent::new(policy, memory))
}

/// Per-weight sensitivity `s_j = sqrt(sum_k (sum_i d mu(s_i)_k / d theta_j)^2)`.
pub fn sensitivity<S: AsRef<[f64]>>(policy: &Mlp, states: &[S]) -> Result<Vec<f64>, OperatorError> {
    let per_output = policy.per_output_param_gradients(states)?;
    let mut s = vec![0.0; policy.param_count()];
    for row in &per_output {
        for (acc, g) in s.iter_mut().zip(row) {
            *acc += g * g;
        }
    }
    for v in &mut s {
        *v = v.sqrt();
    }
    Ok(s)
}

/// Proximal mutation: `theta_j += x_j / max(s_j, floor)` with
/// `x ~ N(0, sigma^2 I)` and `s` the sensitivity over a batch of
/// `cfg.batch_size` states from the parent's memory. The child inherits the
/// parent's memory entirely.
pub fn proximal_mutation<R: Rng + ?Sized>(
    parent: &Agent,
    cfg: &MutationConfig,
    rng: &mut R,
) -> Result<Agent, OperatorError> {
    cfg.validate()?;
    if parent.memory.is_empty() {
        return Err(OperatorError::EmptyMemory);
    }
    let batch = parent.memory.sample_states(cfg.batch_size, rng)?;
    let sens = sensitivity(&parent.policy, &batch)?;
    let mut policy = parent.policy.clone();
    for (theta, s) in policy.params_mut().iter_mut().zip(&sens) {
        let noise: f64 = rng.sample(StandardNormal);
        *theta += cfg.sigma * noise / s.max(cfg.sensitivity_floor);
    }
    Ok(Agent::new(policy, parent.memory.inherit_full()))
}

/// Gaussian mutation baseline: `ceil(fraction * |theta|)` distinct weights,
/// chosen uniformly, receive `N(0, sigma^2)` noise.
pub fn gaussian_mutation<R: Rng + ?Sized>(
    parent: &Agent,
    sigma: f64,
    fraction: f64,
    rng: &mut R,
) -> Result<Agent, OperatorError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(OperatorError::Config(
            "gaussian fraction must lie in (0, 1]".into(),
        ));
    }
    if !(sigma >= 0.0) {
        return Err(OperatorError::Config("sigma must be non-negative".into()));
    }
    let mut policy = parent.policy.clone();
    let n = policy.param_count();
    let count = ((fraction * n as f64).ceil() as usize).min(n);
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let params = policy.params_mut();
    for i in index::sample(rng, n, count) {
        params[i] += normal.sample(rng);
    }
    Ok(Agent::new(policy, parent.memory.inherit_full()))
}

/// Number of weights touched by [`gaussian_mutation`].
pub fn gaussian_mutation_count(param_count: usize, fraction: f64) -> usize {
    ((fraction * param_count as f64).ceil() as usize).min(param_count)
}

/// Total number of rows (units) across all layers.
pub fn row_count(policy: &Mlp) -> usize {
    policy.layout().iter().map(|l| l.fan_out).sum()
}

/// n-point crossover with an explicit row assignment: `rows_from_x[r]` says
/// whether row `r` (layers in order, units in order) comes from parent x.
/// A row carries its incoming weights and its bias.
pub fn npoint_crossover_with_rows<R: Rng + ?Sized>(
    x: &Agent,
    y: &Agent,
    rows_from_x: &[bool],
    rng: &mut R,
) -> Result<Agent, OperatorError> {
    same_spec(x, y)?;
    if rows_from_x.len() != row_count(&x.policy) {
        return Err(OperatorError::Config(format!(
            "row mask has {} entries, network has {} rows",
            rows_from_x.len(),
            row_count(&x.policy)
        )));
    }
    let mut policy = x.policy.clone();
    let layout = x.policy.layout().to_vec();
    let src_y = y.policy.params();
    let dst = policy.params_mut();
    let mut r = 0;
    for layer in &layout {
        for row in 0..layer.fan_out {
            if !rows_from_x[r] {
                let range = layer.row_range(row);
                dst[range.clone()].copy_from_slice(&src_y[range]);
                dst[layer.bias_offset + row] = src_y[layer.bias_offset + row];
            }
            r += 1;
        }
    }
    let memory = GeneticMemory::inherit_crossover(&x.memory, &y.memory, x.memory.capacity(), rng)?;
    Ok(Agent::new(policy, memory))
}

/// n-point crossover baseline with a fair coin per row.
pub fn npoint_crossover<R: Rng + ?Sized>(
    x: &Agent,
    y: &Agent,
    rng: &mut R,
) -> Result<Agent, OperatorError> {
    same_spec(x, y)?;
    let rows: Vec<bool> = (0..row_count(&x.policy)).map(|_| rng.random_bool(0.5)).collect();
    npoint_crossover_with_rows(x, y, &rows, rng)
}

/// Greedy mating score `f(x) + f(y)`.
pub fn mating_score_greedy(x: &Agent, y: &Agent) -> Result<f64, OperatorError> {
    Ok(x.fresh_fitness()? + y.fresh_fitness()?)
}

/// `mean_{s in xs} ||mu_x(s) - mu_y(s)||^2 + mean_{s in ys} ||mu_x(s) - mu_y(s)||^2`.
pub fn policy_distance<S: AsRef<[f64]>>(mu_x: &Mlp, mu_y: &Mlp, xs: &[S], ys: &[S]) -> f64 {
    let mut wx = mu_x.workspace();
    let mut wy = mu_y.workspace();
    let mut gap = |s: &[f64]| {
        let a = mu_x.forward_ws(s, &mut wx).to_vec();
        sq_dist(&a, mu_y.forward_ws(s, &mut wy))
    };
    let mut mean = |batch: &[S]| {
        if batch.is_empty() {
            0.0
        } else {
            batch.iter().map(|s| gap(s.as_ref())).sum::<f64>() / batch.len() as f64
        }
    };
    mean(xs) + mean(ys)
}

/// Distance-based mating score: Monte-Carlo estimate of the behavioural
/// distance using `sample_size` states from each parent's memory. States from
/// x's memory are drawn first.
pub fn mating_score_distance<R: Rng + ?Sized>(
    x: &Agent,
    y: &Agent,
    sample_size: usize,
    rng: &mut R,
) -> Result<f64, OperatorError> {
    if x.memory.is_empty() || y.memory.is_empty() {
        return Err(OperatorError::EmptyMemory);
    }
    let xs = x.memory.sample_states(sample_size, rng)?;
    let ys = y.memory.sample_states(sample_size, rng)?;
    Ok(policy_distance(&x.policy, &y.policy, &xs, &ys))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Greedy,
    Distance,
}

/// Mating score of every unordered pair `(i, j)`, `i < j`, of `candidates`.
pub fn pair_scores<R: Rng + ?Sized>(
    agents: &[Agent],
    candidates: &[usize],
    mode: SelectionMode,
    distance_sample: usize,
    rng: &mut R,
) -> Result<Vec<((usize, usize), f64)>, OperatorError> {
    let mut out = Vec::new();
    for (a, &i) in candidates.iter().enumerate() {
        for &j in &candidates[a + 1..] {
            let score = match mode {
                SelectionMode::Greedy => mating_score_greedy(&agents[i], &agents[j])?,
                SelectionMode::Distance => {
                    mating_score_distance(&agents[i], &agents[j], distance_sample, rng)?
                }
            };
            out.push(((i, j), score));
        }
    }
    Ok(out)
}

/// Turns scores into positive sampling weights. Positive scores are used as
/// they are; otherwise they are shifted so the lowest pair keeps 1% of the
/// score range. Equal scores give uniform weights.
pub fn selection_weights(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12 * hi.abs().max(1.0)) {
        return vec![1.0; scores.len()];
    }
    if lo > 0.0 {
        return scores.to_vec();
    }
    let shift = 0.01 * (hi - lo);
    scores.iter().map(|s| s - lo + shift).collect()
}

/// Samples `n_pairs` parent pairs with probability proportional to their
/// mating weight, without replacement until every pair has been used once.
pub fn select_parents<R: Rng + ?Sized>(
    agents: &[Agent],
    candidates: &[usize],
    mode: SelectionMode,
    n_pairs: usize,
    distance_sample: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>, OperatorError> {
    if candidates.len() < 2 {
        return Err(OperatorError::TooFewCandidates(candidates.len()));
    }
    let scored = pair_scores(agents, candidates, mode, distance_sample, rng)?;
    let scores: Vec<f64> = scored.iter().map(|&(_, s)| s).collect();
    let weights = selection_weights(&scores);
    Ok(weighted_draws(&weights, n_pairs, rng)
        .into_iter()
        .map(|k| scored[k].0)
        .collect())
}

/// Indices drawn proportionally to `weights`, without replacement within each
/// sweep over the index set.
pub fn weighted_draws<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut available = vec![true; weights.len()];
    while out.len() < n {
        let total: f64 = weights
            .iter()
            .zip(&available)
            .filter(|(_, &a)| a)
            .map(|(w, _)| w)
            .sum();
        if total <= 0.0 {
            available.fill(true);
            continue;
        }
        let mut u = rng.random_range(0.0..total);
        let mut pick = None;
        for (k, (&w, &a)) in weights.iter().zip(&available).enumerate() {
            if !a {
                continue;
            }
            pick = Some(k);
            if u < w {
                break;
            }
            u -= w;
        }
        let k = pick.expect("at least one available index");
        out.push(k);
        available[k] = false;
        if available.iter().all(|a| !a) {
            available.fill(true);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Transition;
    use crate::nn::{NetworkSpec, OutputActivation};
    use crate::seeding::rng_from;

    fn memory_with(states: &[Vec<f64>], capacity: usize) -> GeneticMemory {
        let mut m = GeneticMemory::new(capacity).unwrap();
        for s in states {
            m.push(Transition {
                state: s.clone(),
                action: vec![0.0],
                reward: 0.0,
                next_state: s.clone(),
                done: false,
            });
        }
        m
    }

    fn random_agent(seed: u64, n_states: usize) -> Agent {
        let mut rng = rng_from(seed, &[]);
        let policy = Mlp::random(NetworkSpec::policy(3, 2, &[8, 8]), &mut rng).unwrap();
        let states: Vec<Vec<f64>> = (0..n_states)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Agent::new(policy, memory_with(&states, 64))
    }

    fn linear_neuron(w: [f64; 2]) -> Mlp {
        let spec = NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![],
            output_dim: 1,
            output_activation: OutputActivation::Linear,
        };
        Mlp::from_params(spec, vec![w[0], w[1], 0.0].into()).unwrap()
    }

    #[test]
    fn defaults() {
        let c = CrossoverConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.learning_rate), (128, 12, 1e-3));
        let m = MutationConfig::default();
        assert_eq!((m.batch_size, m.sigma, m.sensitivity_floor), (256, 0.1, 1e-8));
    }

    #[test]
    fn qfilter_loss_small_cases() {
        let l = qfilter_loss(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]], &[vec![5.0, 5.0]], &[2.0], &[1.0], 0.0);
        assert_eq!(l.loss, 0.0);
        let l = qfilter_loss(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], &[vec![5.0, 5.0]], &[2.0], &[1.0], 0.0);
        assert_eq!(l.imitation_x, 1.0);
        assert_eq!(l.loss, 1.0);
        // tie imitates x
        let l = qfilter_loss(&[vec![0.0]], &[vec![1.0]], &[vec![-1.0]], &[0.5], &[0.5], 0.0);
        assert_eq!(l.imitate_x, vec![true]);
        let l = qfilter_loss(&[vec![0.0]], &[vec![1.0]], &[vec![-1.0]], &[0.4], &[0.5], 0.0);
        assert_eq!(l.imitate_x, vec![false]);
        assert_eq!(l.imitation_y, 1.0);
    }

    #[test]
    fn qfilter_loss_matches_loop_oracle() {
        let mut rng = rng_from(21, &[]);
        for _ in 0..50 {
            let n = rng.random_range(1..20);
            let gen = |rng: &mut crate::seeding::RunRng| -> Vec<Vec<f64>> {
                (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
            };
            let (z, x, y) = (gen(&mut rng), gen(&mut rng), gen(&mut rng));
            let qx: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let qy: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let reg = rng.random_range(0.0..2.0);
            let got = qfilter_loss(&z, &x, &y, &qx, &qy, reg);
            let mut want = 0.0;
            for i in 0..n {
                let mut a = 0.0;
                let mut b = 0.0;
                let mut c = 0.0;
                for k in 0..2 {
                    a += (z[i][k] - x[i][k]).powi(2);
                    b += (z[i][k] - y[i][k]).powi(2);
                    c += z[i][k].powi(2);
                }
                if qx[i] > qy[i] {
                    want += a;
                }
                if qy[i] > qx[i] {
                    want += b;
                }
                want += reg / n as f64 * c;
            }
            assert!((got.loss - want).abs() < 1e-12);
            // gradient seeds by central differences on the child actions
            for i in 0..n {
                for k in 0..2 {
                    let h = 1e-6;
                    let mut zp = z.clone();
                    zp[i][k] += h;
                    let mut zm = z.clone();
                    zm[i][k] -= h;
                    let fd = (qfilter_loss(&zp, &x, &y, &qx, &qy, reg).loss
                        - qfilter_loss(&zm, &x, &y, &qx, &qy, reg).loss)
                        / (2.0 * h);
                    assert!((fd - got.upstream[i][k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn distillation_targets_follow_critic() {
        // a*(s) = (s0, -s0); Q = -||a - a*||^2
        let critic = |s: &[f64], a: &[f64]| -((a[0] - s[0]).powi(2) + (a[1] + s[0]).powi(2));
        let x = random_agent(1, 50);
        let y = random_agent(2, 50);
        let states: Vec<&[f64]> = x.memory.states().collect();
        let targets = distillation_targets(&x.policy, &y.policy, &critic, states.iter().copied());
        for (s, t) in states.iter().zip(&targets) {
            let ax = x.policy.forward(s).unwrap();
            let ay = y.policy.forward(s).unwrap();
            let dx = (ax[0] - s[0]).powi(2) + (ax[1] + s[0]).powi(2);
            let dy = (ay[0] - s[0]).powi(2) + (ay[1] + s[0]).powi(2);
            assert_eq!(t.imitate_x(), dx <= dy);
        }
    }

    #[test]
    fn distillation_child_memory_and_errors() {
        let critic = |_: &[f64], a: &[f64]| a[0];
        let x = random_agent(3, 40);
        let y = random_agent(4, 40);
        let cfg = CrossoverConfig {
            batch_size: 16,
            epochs: 2,
            ..CrossoverConfig::default()
        };
        let mut rng = rng_from(5, &[]);
        let child = distillation_crossover(&x, &y, &critic, &cfg, &mut rng).unwrap();
        assert_eq!(child.fitness, None);
        assert_eq!(child.memory.len(), 64);
        let mut got: Vec<Vec<u64>> = child
            .memory
            .states()
            .map(|s| s.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut want: Vec<Vec<u64>> = x
            .memory
            .newest(32)
            .chain(y.memory.newest(32))
            .map(|t| t.state.iter().map(|v| v.to_bits()).collect())
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);

        let empty = Agent::new(x.policy.clone(), GeneticMemory::new(64).unwrap());
        assert!(matches!(
            distillation_crossover(&empty, &empty, &critic, &cfg, &mut rng),
            Err(OperatorError::NothingToDistill)
        ));
        let other = Agent::new(
            Mlp::zeros(NetworkSpec::policy(3, 2, &[4])).unwrap(),
            x.memory.clone(),
        );
        assert!(matches!(
            distillation_crossover(&x, &other, &critic, &cfg, &mut rng),
            Err(OperatorError::SpecMismatch)
        ));
    }

    #[test]
    fn distillation_moves_child_toward_preferred_parent() {
        // the critic always prefers y, so the child must end up closer to y
        let x = random_agent(6, 64);
        let y = random_agent(7, 64);
        let prefer_y = |s: &[f64], a: &[f64]| {
            let ay = y.policy.forward(s).unwrap();
            -sq_dist(a, &ay)
        };
        let cfg = CrossoverConfig {
            batch_size: 32,
            epochs: 30,
            reg_weight: 0.0,
            ..CrossoverConfig::default()
        };
        let mut rng = rng_from(8, &[]);
        let child = distillation_crossover(&x, &y, &prefer_y, &cfg, &mut rng).unwrap();
        let states: Vec<&[f64]> = child.memory.states().collect();
        let gap_y = policy_distance(&child.policy, &y.policy, &states, &states);
        let gap_x = policy_distance(&child.policy, &x.policy, &states, &states);
        assert!(gap_y < 0.1 * gap_x, "gap_y {gap_y} gap_x {gap_x}");
    }

    #[test]
    fn proximal_vanishing_sigma_keeps_parent() {
        let parent = random_agent(9, 30);
        let cfg = MutationConfig {
            sigma: 1e-12,
            ..MutationConfig::default()
        };
        let child = proximal_mutation(&parent, &cfg, &mut rng_from(1, &[])).unwrap();
        for (a, b) in child.policy.params().iter().zip(parent.policy.params().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(child.memory, parent.memory);
        let empty = Agent::new(parent.policy.clone(), GeneticMemory::new(4).unwrap());
        assert!(matches!(
            proximal_mutation(&empty, &cfg, &mut rng_from(1, &[])),
            Err(OperatorError::EmptyMemory)
        ));
    }

    #[test]
    fn sensitivity_of_linear_neuron() {
        let net = linear_neuron([0.2, 0.7]);
        let s = sensitivity(&net, &[vec![1.0, -2.0]]).unwrap();
        assert_eq!(s, vec![1.0, 2.0, 1.0]);
    }

    #[test]
    fn proximal_scales_noise_by_sensitivity() {
        let net = linear_neuron([0.0, 0.0]);
        let parent = Agent::new(net, memory_with(&[vec![1.0, -2.0]], 4));
        let cfg = MutationConfig {
            sigma: 1.0,
            batch_size: 1,
            ..MutationConfig::default()
        };
        let mut rng = rng_from(12, &[]);
        let n = 20_000;
        let (mut v1, mut v2) = (0.0, 0.0);
        for _ in 0..n {
            let c = proximal_mutation(&parent, &cfg, &mut rng).unwrap();
            v1 += c.policy.params()[0].powi(2);
            v2 += c.policy.params()[1].powi(2);
        }
        let (sd1, sd2) = ((v1 / n as f64).sqrt(), (v2 / n as f64).sqrt());
        assert!((sd1 - 1.0).abs() < 0.03, "{sd1}");
        assert!((sd2 - 0.5).abs() < 0.015, "{sd2}");
    }

    #[test]
    fn npoint_rows_come_from_one_parent() {
        let x = random_agent(13, 10);
        let y = random_agent(14, 10);
        let mut rng = rng_from(15, &[]);
        for _ in 0..20 {
            let child = npoint_crossover(&x, &y, &mut rng).unwrap();
            for layer in x.policy.layout() {
                for row in 0..layer.fan_out {
                    let r = layer.row_range(row);
                    let b = layer.bias_offset + row;
                    let c = (&child.policy.params()[r.clone()], child.policy.params()[b]);
                    let from_x = c.0 == &x.policy.params()[r.clone()] && c.1 == x.policy.params()[b];
                    let from_y = c.0 == &y.policy.params()[r.clone()] && c.1 == y.policy.params()[b];
                    assert!(from_x || from_y);
                }
            }
        }
    }

    #[test]
    fn npoint_degenerate_cases() {
        let x = random_agent(16, 10);
        let y = random_agent(17, 10);
        let mut rng = rng_from(18, &[]);
        let all_x = vec![true; row_count(&x.policy)];
        let child = npoint_crossover_with_rows(&x, &y, &all_x, &mut rng).unwrap();
        assert_eq!(child.policy, x.policy);
        let twin = npoint_crossover(&x, &x, &mut rng).unwrap();
        assert_eq!(twin.policy, x.policy);
        let other = Agent::new(Mlp::zeros(NetworkSpec::policy(3, 2, &[4])).unwrap(), x.memory.clone());
        assert!(matches!(npoint_crossover(&x, &other, &mut rng), Err(OperatorError::SpecMismatch)));
    }

    #[test]
    fn gaussian_mutation_mask() {
        let parent = random_agent(19, 5);
        let n = parent.policy.param_count();
        let mut rng = rng_from(20, &[]);
        let child = gaussian_mutation(&parent, 0.1, 0.1, &mut rng).unwrap();
        let changed = child
            .policy
            .params()
            .iter()
            .zip(parent.policy.params().iter())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
        assert_eq!(changed, gaussian_mutation_count(n, 0.1));
        assert_eq!(changed, (0.1 * n as f64).ceil() as usize);
        let one = 0.5 / n as f64;
        let still = gaussian_mutation(&parent, 0.0, one, &mut rng).unwrap();
        assert_eq!(still.policy, parent.policy);
        assert_eq!(gaussian_mutation_count(n, one), 1);
        assert!(gaussian_mutation(&parent, 0.1, 0.0, &mut rng).is_err());
    }

    #[test]
    fn greedy_score() {
        let mut x = random_agent(1, 2);
        let mut y = random_agent(2, 2);
        assert!(matches!(mating_score_greedy(&x, &y), Err(OperatorError::StaleFitness)));
        x.fitness = Some(3.0);
        y.fitness = Some(5.0);
        assert_eq!(mating_score_greedy(&x, &y).unwrap(), 8.0);
        assert_eq!(mating_score_greedy(&y, &x).unwrap(), 8.0);
    }

    #[test]
    fn distance_score_cases() {
        let x = random_agent(1, 20);
        let mut rng = rng_from(2, &[]);
        assert_eq!(mating_score_distance(&x, &x, 16, &mut rng).unwrap(), 0.0);
        // two linear policies on a fixed 4-state memory
        let states = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 2.0]];
        let a = Agent::new(linear_neuron([1.0, 0.0]), memory_with(&states, 8));
        let b = Agent::new(linear_neuron([0.0, 1.0]), memory_with(&states, 8));
        // gap on each state: (s0 - s1)^2 = 1, 1, 0, 9 -> mean 2.75, twice
        let d = policy_distance(&a.policy, &b.policy, &states, &states);
        assert!((d - 5.5).abs() < 1e-12);
        let xs = vec![vec![0.3, -0.1]];
        let ys = vec![vec![2.0, 1.0]];
        assert_eq!(
            policy_distance(&a.policy, &b.policy, &xs, &ys),
            policy_distance(&b.policy, &a.policy, &xs, &ys)
        );
        let empty = Agent::new(linear_neuron([0.0, 0.0]), GeneticMemory::new(2).unwrap());
        assert!(mating_score_distance(&a, &empty, 4, &mut rng).is_err());
    }

    #[test]
    fn selection_two_agents_and_weights() {
        let mut a = random_agent(1, 5);
        let mut b = random_agent(2, 5);
        a.fitness = Some(1.0);
        b.fitness = Some(2.0);
        let agents = vec![a, b];
        let pairs = select_parents(&agents, &[0, 1], SelectionMode::Greedy, 3, 8, &mut rng_from(1, &[])).unwrap();
        assert_eq!(pairs, vec![(0, 1); 3]);
        assert_eq!(selection_weights(&[2.0, 2.0]), vec![1.0, 1.0]);
        assert_eq!(selection_weights(&[9.0, 1.0]), vec![9.0, 1.0]);
        let w = selection_weights(&[-1.0, 1.0]);
        assert!(w.iter().all(|&v| v > 0.0) && w[1] > w[0]);
        assert!(select_parents(&agents, &[0], SelectionMode::Greedy, 1, 8, &mut rng_from(1, &[])).is_err());
    }

    #[test]
    fn selection_frequency_follows_weights() {
        let mut rng = rng_from(33, &[]);
        let draws = 10_000;
        let mut first = 0;
        for _ in 0..draws {
            if weighted_draws(&[9.0, 1.0], 1, &mut rng)[0] == 0 {
                first += 1;
            }
        }
        let p = 0.9;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((first as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{first}");
    }

    #[test]
    fn greedy_and_distance_rank_clones_differently() {
        let base = random_agent(40, 30);
        let mut clone_a = base.clone();
        let mut clone_b = base.clone();
        clone_a.fitness = Some(10.0);
        clone_b.fitness = Some(9.0);
        let mut weak = random_agent(41, 30);
        weak.fitness = Some(1.0);
        let agents = vec![clone_a, clone_b, weak];
        let mut rng = rng_from(1, &[]);
        let best = |scores: Vec<((usize, usize), f64)>| {
            scores
                .into_iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0
        };
        let g = pair_scores(&agents, &[0, 1, 2], SelectionMode::Greedy, 32, &mut rng).unwrap();
        let d = pair_scores(&agents, &[0, 1, 2], SelectionMode::Distance, 32, &mut rng).unwrap();
        assert_eq!(best(g), (0, 1));
        assert_ne!(best(d.clone()), (0, 1));
        assert_eq!(d[0].1, 0.0);
    }

    #[test]
    fn operators_leave_parents_untouched() {
        let x = random_agent(50, 20);
        let y = random_agent(51, 20);
        let (x0, y0) = (x.clone(), y.clone());
        let mut rng = rng_from(52, &[]);
        let critic = |_: &[f64], a: &[f64]| a[1];
        let cfg = CrossoverConfig { batch_size: 8, epochs: 1, ..CrossoverConfig::default() };
        distillation_crossover(&x, &y, &critic, &cfg, &mut rng).unwrap();
        npoint_crossover(&x, &y, &mut rng).unwrap();
        proximal_mutation(&x, &MutationConfig::default(), &mut rng).unwrap();
        gaussian_mutation(&y, 0.1, 0.1, &mut rng).unwrap();
        assert_eq!(x, x0);
        assert_eq!(y, y0);
    }
}
