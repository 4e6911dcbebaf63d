//! Small dense networks with hand-written backward passes.
//!
//! Every network is a stack of affine layers with ReLU on hidden layers and a
//! linear output head. Batches are row-major (`B x features`). The backward
//! pass yields both parameter gradients and the gradient with respect to the
//! network input, which is what the exploration step needs for `∇_a Q`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, CoxqError, Result};
use crate::quantile_critics::{band_batch, BoundConfig, CriticBounds, QuantileAtoms};
use crate::sigma_geometry::DiagCovariance;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Smooth map of the raw network output into `[LOG_STD_MIN, LOG_STD_MAX]`.
/// A hard clamp would zero the gradient past the bounds and trap the policy
/// at the widest allowed spread.
fn squash_log_std(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

fn squash_log_std_grad(raw: f64) -> f64 {
    let t = raw.tanh();
    0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - t * t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

/// A feed-forward network; the serialized form is its list of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    seed: u64,
}

pub struct ForwardCache {
    /// Input of every layer, then the final output.
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("non-empty cache")
    }
}

/// Parameter gradients, one `(dW, db)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|(w, b)| {
            [
                w.as_slice().expect("standard layout"),
                b.as_slice().expect("standard layout"),
            ]
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }
}

/// Orthogonal matrix of shape `rows x cols` scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut q = Array2::<f64>::zeros((tall, short));
    q.mapv_inplace(|_| StandardNormal.sample(rng));
    // Modified Gram-Schmidt on the columns.
    for j in 0..short {
        for k in 0..j {
            let proj = q.column(j).dot(&q.column(k));
            let ck = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-proj, &ck);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    let q = if rows >= cols { q } else { q.reversed_axes() };
    q.as_standard_layout().to_owned() * gain
}

impl Mlp {
    /// Orthogonal hidden layers with ReLU gain, small-uniform output head, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_scale: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let seed = rng.random();
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                if i == last {
                    let mut weights = Array2::zeros((fan_in, fan_out));
                    weights.mapv_inplace(|_: f64| rng.random_range(-output_scale..=output_scale));
                    Dense {
                        w: weights,
                        b: Array1::zeros(fan_out),
                        activation: Activation::Linear,
                    }
                } else {
                    Dense {
                        w: orthogonal(fan_in, fan_out, std::f64::consts::SQRT_2, rng),
                        b: Array1::zeros(fan_out),
                        activation: Activation::Relu,
                    }
                }
            })
            .collect();
        Self { layers, seed }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        for pair in layers.windows(2) {
            check_len(pair[0].w.ncols(), pair[1].w.nrows())?;
        }
        for l in &layers {
            check_len(l.w.ncols(), l.b.len())?;
        }
        if layers.is_empty() {
            return Err(CoxqError::invalid("network needs at least one layer"));
        }
        Ok(Self { layers, seed: 0 })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat views over `(W, b)` of every layer, in order.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.w.as_slice().expect("standard layout"),
                l.b.as_slice().expect("standard layout"),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Shapes matching [`Mlp::tensors`].
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [vec![l.w.nrows(), l.w.ncols()], vec![l.b.len()]])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for l in &self.layers {
            h = h.dot(&l.w) + &l.b;
            if l.activation == Activation::Relu {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for l in &self.layers {
            let mut h = activations.last().expect("non-empty").dot(&l.w) + &l.b;
            if l.activation == Activation::Relu {
                h.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(h);
        }
        ForwardCache { activations }
    }

    /// Backpropagates `grad_out` (d loss / d output) through a cached forward pass.
    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: Array2<f64>) -> (MlpGrads, Array2<f64>) {
        let mut delta = grad_out;
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Relu {
                // ReLU output > 0 exactly where the pre-activation was > 0.
                ndarray::Zip::from(&mut delta)
                    .and(&cache.activations[i + 1])
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let input = &cache.activations[i];
            let dw = input.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            let next = delta.dot(&l.w.t());
            layer_grads.push((dw, db));
            delta = next;
        }
        layer_grads.reverse();
        (MlpGrads { layers: layer_grads }, delta)
    }

    /// `self = (1 - tau) * self + tau * other`, elementwise.
    pub fn polyak_from(&mut self, other: &Mlp, tau: f64) -> Result<()> {
        if self.shapes() != other.shapes() {
            return Err(CoxqError::invalid("target network shape mismatch"));
        }
        for (t, s) in self.layers.iter_mut().zip(&other.layers) {
            t.w.zip_mut_with(&s.w, |a, b| *a = (1.0 - tau) * *a + tau * b);
            t.b.zip_mut_with(&s.b, |a, b| *a = (1.0 - tau) * *a + tau * b);
        }
        Ok(())
    }
}

/// Adaptive moment estimation state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub skipped: u64,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        let zeros: Vec<Vec<f64>> = net.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            skipped: 0,
        }
    }

    /// Single-tensor state, for scalar parameters such as the log temperature.
    pub fn scalar() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![vec![0.0]],
            v: vec![vec![0.0]],
            skipped: 0,
        }
    }

    /// One Adam step over parallel lists of parameter and gradient tensors.
    /// Returns `false` (and leaves everything untouched) for non-finite gradients.
    pub fn step_tensors(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> bool {
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            self.skipped += 1;
            log::warn!("skipping optimizer step with non-finite gradient ({} skipped)", self.skipped);
            return false;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        true
    }
}

pub fn apply_gradient_step(net: &mut Mlp, grads: &MlpGrads, state: &mut AdamState, lr: f64) -> bool {
    let g: Vec<&[f64]> = grads.tensors().collect();
    state.step_tensors(net.tensors_mut(), g, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBox {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        check_len(low.len(), high.len())?;
        if low.iter().zip(&high).any(|(l, h)| !(l <= h)) {
            return Err(CoxqError::invalid("action box needs low <= high"));
        }
        Ok(Self { low, high })
    }

    pub fn symmetric(n: usize, bound: f64) -> Self {
        Self {
            low: vec![-bound; n],
            high: vec![bound; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    /// Clips in place and returns the number of clipped coordinates.
    pub fn clip(&self, a: &mut [f64]) -> usize {
        let mut clipped = 0;
        for ((v, lo), hi) in a.iter_mut().zip(&self.low).zip(&self.high) {
            if *v < *lo {
                *v = *lo;
                clipped += 1;
            } else if *v > *hi {
                *v = *hi;
                clipped += 1;
            }
        }
        clipped
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.iter()
            .zip(&self.low)
            .zip(&self.high)
            .all(|((v, lo), hi)| lo <= v && v <= hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicyOutput {
    pub mu: Vec<f64>,
    /// Already squashed into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: Vec<f64>,
}

impl GaussianPolicyOutput {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn covariance(&self) -> Result<DiagCovariance> {
        DiagCovariance::from_log_std(&self.log_std)
    }
}

/// Log density of a diagonal Gaussian at `x`.
pub fn gaussian_log_prob(x: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
    x.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((x, m), l)| {
            let z = (x - m) / l.exp();
            -0.5 * z * z - l - HALF_LN_2PI
        })
        .sum()
}

/// Reparameterized draw `μ + σ ⊙ ξ`, clipped to the box. The log-probability is
/// that of the unclipped Gaussian sample.
pub fn sample_action<R: Rng + ?Sized>(out: &GaussianPolicyOutput, rng: &mut R, action_box: &ActionBox) -> (Vec<f64>, f64) {
    let raw: Vec<f64> = out
        .mu
        .iter()
        .zip(&out.log_std)
        .map(|(m, l)| {
            let xi: f64 = StandardNormal.sample(rng);
            m + l.exp() * xi
        })
        .collect();
    let log_prob = gaussian_log_prob(&raw, &out.mu, &out.log_std);
    let mut action = raw;
    action_box.clip(&mut action);
    (action, log_prob)
}

/// Diagonal Gaussian policy: the network emits `[μ, log σ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    act_dim: usize,
}

pub struct PolicyBatch {
    pub mu: Array2<f64>,
    pub log_std: Array2<f64>,
    cache: ForwardCache,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * act_dim);
        Self {
            net: Mlp::new(&sizes, 3e-3, rng),
            act_dim,
        }
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        let out = net.output_dim();
        if out % 2 != 0 {
            return Err(CoxqError::invalid("policy network output must be [mu, log_std]"));
        }
        Ok(Self { net, act_dim: out / 2 })
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn forward_batch(&self, obs: ArrayView2<'_, f64>) -> PolicyBatch {
        let cache = self.net.forward_cached(obs);
        let out = cache.output();
        let mu = out.slice(s![.., ..self.act_dim]).to_owned();
        let log_std = out
            .slice(s![.., self.act_dim..])
            .mapv(squash_log_std);
        PolicyBatch { mu, log_std, cache }
    }

    /// Backpropagates gradients on `(μ, log σ)` to parameter gradients.
    pub fn backward(&self, batch: &PolicyBatch, d_mu: &Array2<f64>, d_log_std: &Array2<f64>) -> MlpGrads {
        let raw = batch.cache.output();
        let mut grad_out = Array2::zeros(raw.raw_dim());
        grad_out.slice_mut(s![.., ..self.act_dim]).assign(d_mu);
        let mut gl = d_log_std.clone();
        ndarray::Zip::from(&mut gl)
            .and(raw.slice(s![.., self.act_dim..]))
            .for_each(|g, &r| *g *= squash_log_std_grad(r));
        grad_out.slice_mut(s![.., self.act_dim..]).assign(&gl);
        self.net.backward(&batch.cache, grad_out).0
    }

    pub fn policy_forward(&self, state: &[f64]) -> Result<GaussianPolicyOutput> {
        check_len(self.obs_dim(), state.len())?;
        let x = ArrayView2::from_shape((1, state.len()), state).expect("row vector");
        let b = self.forward_batch(x);
        let out = GaussianPolicyOutput {
            mu: b.mu.row(0).to_vec(),
            log_std: b.log_std.row(0).to_vec(),
        };
        if out.mu.iter().chain(&out.log_std).any(|v| !v.is_finite()) {
            return Err(CoxqError::NumericDivergence("policy produced non-finite output".into()));
        }
        Ok(out)
    }
}

/// `N` independent quantile critics over `[state, action]`, each with `M` heads.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileEnsemble {
    pub critics: Vec<Mlp>,
    obs_dim: usize,
    act_dim: usize,
}

pub struct EnsembleBatch {
    pub outputs: Vec<Array2<f64>>,
    caches: Vec<ForwardCache>,
}

impl QuantileEnsemble {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        n_critics: usize,
        n_quantiles: usize,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![obs_dim + act_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_quantiles);
        let critics = (0..n_critics).map(|_| Mlp::new(&sizes, 3e-3, rng)).collect();
        Self {
            critics,
            obs_dim,
            act_dim,
        }
    }

    pub fn from_critics(critics: Vec<Mlp>, obs_dim: usize, act_dim: usize) -> Result<Self> {
        if critics.is_empty() {
            return Err(CoxqError::invalid("ensemble needs at least one critic"));
        }
        for c in &critics {
            check_len(obs_dim + act_dim, c.input_dim())?;
            check_len(critics[0].output_dim(), c.output_dim())?;
        }
        Ok(Self {
            critics,
            obs_dim,
            act_dim,
        })
    }

    pub fn n_critics(&self) -> usize {
        self.critics.len()
    }

    pub fn n_quantiles(&self) -> usize {
        self.critics[0].output_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn join_inputs(obs: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[obs, actions]).expect("matching batch sizes")
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        self.critics.iter().map(|c| c.forward(inputs)).collect()
    }

    pub fn forward_cached(&self, inputs: ArrayView2<'_, f64>) -> EnsembleBatch {
        let caches: Vec<ForwardCache> = self.critics.iter().map(|c| c.forward_cached(inputs)).collect();
        let outputs = caches.iter().map(|c| c.output().clone()).collect();
        EnsembleBatch { outputs, caches }
    }

    /// Backward through every critic; returns per-critic parameter gradients and
    /// the summed gradient with respect to the shared input.
    pub fn backward(&self, batch: &EnsembleBatch, grad_outputs: Vec<Array2<f64>>) -> (Vec<MlpGrads>, Array2<f64>) {
        let mut input_grad: Option<Array2<f64>> = None;
        let mut grads = Vec::with_capacity(self.critics.len());
        for ((critic, cache), g) in self.critics.iter().zip(&batch.caches).zip(grad_outputs) {
            let (pg, ig) = critic.backward(cache, g);
            grads.push(pg);
            match input_grad.as_mut() {
                Some(acc) => *acc += &ig,
                None => input_grad = Some(ig),
            }
        }
        (grads, input_grad.expect("non-empty ensemble"))
    }

    pub fn predict_atoms(&self, state: &[f64], action: &[f64]) -> Result<QuantileAtoms> {
        check_len(self.obs_dim, state.len())?;
        check_len(self.act_dim, action.len())?;
        let input: Vec<f64> = state.iter().chain(action).copied().collect();
        let x = ArrayView2::from_shape((1, input.len()), &input).expect("row vector");
        let rows: Vec<Vec<f64>> = self.forward(x).into_iter().map(|o| o.row(0).to_vec()).collect();
        QuantileAtoms::from_rows(&rows)
    }
}

/// Action gradients of the three exploration bounds at `a = μ_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTriple {
    /// `∇_a Q_r^UB`
    pub g_r: Vec<f64>,
    /// `∇_a Q_c^LB`
    pub g_c: Vec<f64>,
    /// `∇_a Q_c^mean`
    pub g_m: Vec<f64>,
}

impl GradientTriple {
    pub fn is_finite(&self) -> bool {
        self.g_r.iter().chain(&self.g_c).chain(&self.g_m).all(|v| v.is_finite())
    }
}

/// Backpropagates a scalar band of one ensemble to the action input.
fn band_action_grad(ens: &QuantileEnsemble, batch: &EnsembleBatch, spec: crate::quantile_critics::BandSpec) -> Vec<f64> {
    let (_, grads) = band_batch(&batch.outputs, spec);
    let (_, input_grad) = ens.backward(batch, grads);
    input_grad.slice(s![0, ens.obs_dim..]).to_vec()
}

/// Bound values and their action gradients from the live critics.
pub fn critic_action_gradients(
    reward: &QuantileEnsemble,
    cost: &QuantileEnsemble,
    state: &[f64],
    cfg: &BoundConfig,
    at_action: &[f64],
) -> Result<(GradientTriple, CriticBounds)> {
    check_len(reward.obs_dim, state.len())?;
    check_len(reward.act_dim, at_action.len())?;
    cfg.validate(cost.n_quantiles())?;
    let input: Vec<f64> = state.iter().chain(at_action).copied().collect();
    let x = ArrayView2::from_shape((1, input.len()), &input).expect("row vector");
    let rb = reward.forward_cached(x);
    let cb = cost.forward_cached(x);
    let to_atoms = |b: &EnsembleBatch| {
        QuantileAtoms::from_rows(&b.outputs.iter().map(|o| o.row(0).to_vec()).collect::<Vec<_>>())
    };
    let bounds = crate::quantile_critics::critic_bounds(&to_atoms(&rb)?, &to_atoms(&cb)?, cfg)?;
    let triple = GradientTriple {
        g_r: band_action_grad(reward, &rb, cfg.reward_ub()),
        g_c: band_action_grad(cost, &cb, cfg.cost_lb()),
        g_m: band_action_grad(cost, &cb, crate::quantile_critics::BandSpec::mean()),
    };
    Ok((triple, bounds))
}
