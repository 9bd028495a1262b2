//! Dense feed-forward networks over a flat parameter list.
//!
//! A network is a [`NetworkSpec`] plus a [`ParameterVector`]. Parameters are
//! stored layer by layer; inside a layer the weight matrix comes first in
//! row-major order (one row per output unit, `fan_in` entries each) followed
//! by the bias vector. Every agent sharing a spec therefore shares the same
//! ordering, which the variation operators rely on.
//!
//! Hidden layers use `tanh`. The output layer is `tanh` for policies and
//! linear for critics.

use std::fs;
use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("{what}: expected length {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value produced in layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), NnError> {
    if expected == actual {
        Ok(())
    } else {
        Err(NnError::Shape {
            what,
            expected,
            actual,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub output_activation: OutputActivation,
}

/// Position of one dense layer inside the flat parameter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.bias_offset
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.fan_out
    }

    /// Index range of the weights feeding output unit `row`.
    pub fn row_range(&self, row: usize) -> std::ops::Range<usize> {
        let start = self.weight_offset + row * self.fan_in;
        start..start + self.fan_in
    }

    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

impl NetworkSpec {
    /// Deterministic policy: state in, bounded action out.
    pub fn policy(state_dim: usize, action_dim: usize, hidden_dims: &[usize]) -> Self {
        Self {
            input_dim: state_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim: action_dim,
            output_activation: OutputActivation::Tanh,
        }
    }

    /// Critic: concatenated `[state; action]` in, scalar value out.
    pub fn critic(state_dim: usize, action_dim: usize, hidden_dims: &[usize]) -> Self {
        Self {
            input_dim: state_dim + action_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim: 1,
            output_activation: OutputActivation::Linear,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NnError::InvalidSpec(
                "input and output dimensions must be positive".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(NnError::InvalidSpec(
                "hidden layer widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.output_dim);
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let layout = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset = layout.end();
                layout
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, LayerLayout::end)
    }
}

/// The genotype: a flat list of weights in canonical layer-major order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Gradient of `upstream · output` with respect to parameters and input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub d_params: Vec<f64>,
    pub d_input: Vec<f64>,
}

/// Scratch buffers for one forward/backward pass. Reusing a workspace avoids
/// allocating inside training loops.
#[derive(Clone, Debug)]
pub struct Workspace {
    // acts[0] is the input, acts[l + 1] the activated output of layer l.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &NetworkSpec) -> Self {
        let mut acts = vec![vec![0.0; spec.input_dim]];
        acts.extend(spec.hidden_dims.iter().map(|&h| vec![0.0; h]));
        acts.push(vec![0.0; spec.output_dim]);
        let widest = acts.iter().map(Vec::len).max().unwrap_or(0);
        Self {
            acts,
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("workspace has an output layer")
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A multilayer perceptron: spec, parameters, and cached layer layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct Mlp {
    spec: NetworkSpec,
    params: ParameterVector,
    layout: Vec<LayerLayout>,
}

const CHECKPOINT_FORMAT: &str = "pderl-mlp/1";

#[derive(Serialize, Deserialize)]
struct MlpRecord {
    format: String,
    spec: NetworkSpec,
    params: ParameterVector,
}

impl TryFrom<MlpRecord> for Mlp {
    type Error = NnError;
    fn try_from(rec: MlpRecord) -> Result<Self, NnError> {
        if rec.format != CHECKPOINT_FORMAT {
            return Err(NnError::InvalidSpec(format!(
                "unknown checkpoint format {:?}",
                rec.format
            )));
        }
        Mlp::from_params(rec.spec, rec.params)
    }
}

impl From<Mlp> for MlpRecord {
    fn from(m: Mlp) -> Self {
        MlpRecord {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: m.spec,
            params: m.params,
        }
    }
}

impl Mlp {
    pub fn from_params(spec: NetworkSpec, params: ParameterVector) -> Result<Self, NnError> {
        spec.validate()?;
        let layout = spec.layers();
        let expected = layout.last().map_or(0, LayerLayout::end);
        check_len("parameter vector", expected, params.len())?;
        Ok(Self {
            spec,
            params,
            layout,
        })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self, NnError> {
        let n = spec.param_count();
        Self::from_params(spec, ParameterVector::zeros(n))
    }

    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn random<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec)?;
        for layer in net.layout.clone() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for p in &mut net.params[layer.weight_offset..layer.end()] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.spec)
    }

    /// Replaces the parameters, keeping the spec.
    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        check_len("parameter vector", self.params.len(), params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Unchecked forward pass into a workspace. Callers guarantee the input
    /// length; the result stays in the workspace for a following backward pass.
    pub fn forward_ws<'w>(&self, input: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        debug_assert_eq!(input.len(), self.spec.input_dim);
        ws.acts[0].copy_from_slice(input);
        let last = self.layout.len() - 1;
        for (l, layer) in self.layout.iter().enumerate() {
            let (prev, rest) = ws.acts.split_at_mut(l + 1);
            let x = &prev[l];
            let y = &mut rest[0];
            let w = &self.params[layer.weight_range()];
            let b = &self.params[layer.bias_range()];
            let squash = l < last || self.spec.output_activation == OutputActivation::Tanh;
            for (j, yj) in y.iter_mut().enumerate() {
                let z = b[j] + dot(&w[j * layer.fan_in..(j + 1) * layer.fan_in], x);
                *yj = if squash { z.tanh() } else { z };
            }
        }
        ws.output()
    }

    /// Unchecked backward pass for the input most recently passed to
    /// [`Mlp::forward_ws`] on `ws`. Adds the gradient of `upstream · output`
    /// into `d_params` and/or `d_input` when provided.
    pub fn backward_ws(
        &self,
        ws: &mut Workspace,
        upstream: &[f64],
        mut d_params: Option<&mut [f64]>,
        d_input: Option<&mut [f64]>,
    ) {
        debug_assert_eq!(upstream.len(), self.spec.output_dim);
        let last = self.layout.len() - 1;
        let out = &ws.acts[last + 1];
        ws.delta.clear();
        match self.spec.output_activation {
            OutputActivation::Tanh => ws
                .delta
                .extend(upstream.iter().zip(out).map(|(g, y)| g * (1.0 - y * y))),
            OutputActivation::Linear => ws.delta.extend_from_slice(upstream),
        }
        let want_input = d_input.is_some();
        for l in (0..=last).rev() {
            let layer = self.layout[l];
            let x = &ws.acts[l];
            if let Some(dp) = d_params.as_deref_mut() {
                for (j, &dj) in ws.delta.iter().enumerate() {
                    if dj != 0.0 {
                        axpy(dj, x, &mut dp[layer.row_range(j)]);
                    }
                    dp[layer.bias_offset + j] += dj;
                }
            }
            if l == 0 && !want_input {
                break;
            }
            ws.delta_prev.clear();
            ws.delta_prev.resize(layer.fan_in, 0.0);
            let w = &self.params[layer.weight_range()];
            for (j, &dj) in ws.delta.iter().enumerate() {
                if dj != 0.0 {
                    axpy(dj, &w[j * layer.fan_in..(j + 1) * layer.fan_in], &mut ws.delta_prev);
                }
            }
            if l > 0 {
                for (d, a) in ws.delta_prev.iter_mut().zip(x) {
                    *d *= 1.0 - a * a;
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
        if let Some(di) = d_input {
            for (a, d) in di.iter_mut().zip(&ws.delta) {
                *a += d;
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        check_len("input", self.spec.input_dim, input.len())?;
        let mut ws = self.workspace();
        let out = self.forward_ws(input, &mut ws).to_vec();
        for (l, acts) in ws.acts.iter().enumerate().skip(1) {
            if acts.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: l - 1 });
            }
        }
        Ok(out)
    }

    /// Exact gradient of `upstream · forward(input)`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<GradientRecord, NnError> {
        check_len("input", self.spec.input_dim, input.len())?;
        check_len("upstream gradient", self.spec.output_dim, upstream.len())?;
        let mut ws = self.workspace();
        self.forward_ws(input, &mut ws);
        for (l, acts) in ws.acts.iter().enumerate().skip(1) {
            if acts.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: l - 1 });
            }
        }
        let mut rec = GradientRecord {
            d_params: vec![0.0; self.params.len()],
            d_input: vec![0.0; self.spec.input_dim],
        };
        self.backward_ws(&mut ws, upstream, Some(&mut rec.d_params), Some(&mut rec.d_input));
        for (l, layer) in self.layout.iter().enumerate() {
            if rec.d_params[layer.weight_offset..layer.end()]
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(NnError::NonFinite { layer: l });
            }
        }
        Ok(rec)
    }

    /// For each output dimension `k`, the sum over the batch of the parameter
    /// gradient of output `k`. Row `k` of the result is aligned with the
    /// parameter vector.
    pub fn per_output_param_gradients<S: AsRef<[f64]>>(
        &self,
        inputs: &[S],
    ) -> Result<Vec<Vec<f64>>, NnError> {
        if inputs.is_empty() {
            return Err(NnError::Precondition("empty state batch".into()));
        }
        let n_out = self.spec.output_dim;
        let mut sums = vec![vec![0.0; self.params.len()]; n_out];
        let mut ws = self.workspace();
        let mut one_hot = vec![0.0; n_out];
        for input in inputs {
            let input = input.as_ref();
            check_len("input", self.spec.input_dim, input.len())?;
            for (k, sum) in sums.iter_mut().enumerate() {
                // backward_ws consumes the delta buffers but not the activations
                if k == 0 {
                    self.forward_ws(input, &mut ws);
                }
                one_hot.fill(0.0);
                one_hot[k] = 1.0;
                self.backward_ws(&mut ws, &one_hot, Some(sum), None);
            }
        }
        if sums.iter().flatten().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGradient);
        }
        Ok(sums)
    }

    pub fn to_json(&self) -> Result<String, NnError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Adaptive-moment optimizer state for one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), NnError> {
        check_len("gradient", self.m.len(), grad.len())?;
        check_len("parameters", self.m.len(), params.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// `target <- (1 - tau) * target + tau * source`.
pub fn soft_update(target: &mut [f64], source: &[f64], tau: f64) -> Result<(), NnError> {
    check_len("soft update source", target.len(), source.len())?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(NnError::Precondition(format!("tau {tau} outside [0, 1]")));
    }
    for (t, s) in target.iter_mut().zip(source) {
        *t = (1.0 - tau) * *t + tau * s;
    }
    Ok(())
}
