//! Adversarial inverse reinforcement learning for mean-field games: the
//! empirical mean field, the reward network `f_ω`, the discriminator built from
//! it, and the entropy-regularised adaptive samplers `π_θ`.
//!
//! ```text
//! μ̂ᵗ(s)  = (1/M) Σ_j 1{s_jᵗ = s}
//! D_ω    = exp(f_ω) / (exp(f_ω) + π_θ(a|s))  =  σ(f_ω − log π_θ)
//! J(ω)   = E_expert[log D_ω] + E_sampler[log(1 − D_ω)]
//! ```
//!
//! Samplers are trained by likelihood-ratio policy gradient on the reward
//! `f_ω − log π_θ` (an entropy-augmented return) with a per-timestep mean
//! baseline. Context-blind training is the single-context special case of the
//! shared loop in [`crate::training`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::mfg::{
    sample_categorical, MeanField, MeanFieldFlow, PolicyFlow, PolicySlice, TabularEnv, Trajectory,
};
use crate::nn::{Activation, AdamState, FeatureCodec, Head, Layout, Mlp, LEAKY_SLOPE};
use crate::solver::{soft_backward, RewardTables};
use crate::training::{self, TrainConfig, TrainOutcome};

/// `μ̂ᵗ(s) = (1/M) Σ_j 1{s_jᵗ = s}`.
pub fn empirical_mean_field(
    trajectories: &[Trajectory],
    num_states: usize,
) -> Result<MeanFieldFlow> {
    let first = trajectories
        .first()
        .ok_or(Error::Empty("demonstration set"))?;
    let horizon = first.horizon();
    let mut counts = vec![vec![0.0; num_states]; horizon + 1];
    for tau in trajectories {
        if tau.horizon() != horizon {
            return Err(Error::DimensionMismatch {
                what: "demonstration horizon",
                expected: horizon,
                got: tau.horizon(),
            });
        }
        for (t, &(s, _)) in tau.steps.iter().enumerate() {
            if s >= num_states {
                return Err(Error::IndexOutOfRange {
                    what: "state",
                    index: s,
                    size: num_states,
                });
            }
            counts[t][s] += 1.0;
        }
    }
    let m = trajectories.len() as f64;
    let fields = counts
        .into_iter()
        .map(|row| MeanField::normalized(row.into_iter().map(|c| c / m).collect()))
        .collect::<Result<Vec<_>>>()?;
    MeanFieldFlow::new(fields)
}

/// `exp(f)/(exp(f) + π)`, evaluated as `σ(f − log π)`; exactly 1 when `π = 0`.
pub fn discriminator_value(f: f64, pi_prob: f64) -> f64 {
    if pi_prob <= 0.0 {
        return 1.0;
    }
    sigmoid(f - pi_prob.ln())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// The reward network `f_ω(s, a, μ, m)`; with one context it is context-blind.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub net: Mlp,
    pub codec: FeatureCodec,
}

impl RewardModel {
    /// `input → hidden → hidden → 1` with leaky rectifiers.
    pub fn new<R: Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        num_contexts: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let codec = FeatureCodec::new(num_states, num_actions, num_contexts, Layout::REWARD);
        let net = Mlp::new(
            vec![codec.dim(), hidden, hidden, 1],
            Activation::LeakyRelu(LEAKY_SLOPE),
            Head::Scalar,
            rng,
        )?;
        Ok(Self { net, codec })
    }

    pub fn num_contexts(&self) -> usize {
        self.codec.num_contexts
    }

    pub fn value(&self, s: usize, a: usize, mu: &MeanField, m: usize) -> Result<f64> {
        let x = self.codec.encode(Some(s), Some(a), Some(mu), Some(m))?;
        self.net.forward_scalar(&x)
    }

    /// First-layer pre-activation for the mean-field slice alone.
    pub(crate) fn mean_field_base(&self, mu: &MeanField) -> Vec<f64> {
        let mut x = vec![0.0; self.codec.dim()];
        let off = self.codec.mean_field_offset();
        x[off..off + mu.len()].copy_from_slice(mu.probs());
        self.net.first_layer(&x).expect("codec sized input")
    }

    /// Completes `f(s, a, μ, m)` from [`RewardModel::mean_field_base`].
    pub(crate) fn value_from_base(&self, base: &[f64], s: usize, a: usize, m: usize) -> f64 {
        let mut z = base.to_vec();
        self.net.add_input(&mut z, s, 1.0);
        self.net
            .add_input(&mut z, self.codec.action_offset() + a, 1.0);
        self.net
            .add_input(&mut z, self.codec.context_offset() + m, 1.0);
        self.net.forward_from_first(&z)[0]
    }

    /// `f(s, a, μ, m)` for every state-action pair, row-major.
    pub fn fill_rewards(&self, mu: &MeanField, m: usize, out: &mut [f64]) {
        let base = self.mean_field_base(mu);
        let na = self.codec.num_actions;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.value_from_base(&base, i / na, i % na, m);
        }
    }

    /// Reward tables along `mf` for learned context `m`.
    pub fn tables(&self, mf: &MeanFieldFlow, m: usize) -> RewardTables {
        let n = self.codec.num_states * self.codec.num_actions;
        (0..mf.horizon())
            .map(|t| {
                let mut row = vec![0.0; n];
                self.fill_rewards(mf.at(t), m, &mut row);
                row
            })
            .collect()
    }
}

/// The true dynamics with the learned reward `f_ω` in place of the true one.
/// Contexts are the learned context indices.
pub struct LearnedRewardEnv<'a> {
    inner: &'a dyn TabularEnv,
    reward: &'a RewardModel,
    contexts: Vec<f64>,
}

impl<'a> LearnedRewardEnv<'a> {
    pub fn new(inner: &'a dyn TabularEnv, reward: &'a RewardModel) -> Self {
        let contexts = (0..reward.num_contexts()).map(|m| m as f64).collect();
        Self {
            inner,
            reward,
            contexts,
        }
    }
}

impl TabularEnv for LearnedRewardEnv<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn contexts(&self) -> &[f64] {
        &self.contexts
    }

    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn initial_mean_field(&self) -> &MeanField {
        self.inner.initial_mean_field()
    }

    fn reward(&self, state: usize, action: usize, mu: &MeanField, context: usize) -> f64 {
        self.reward
            .value(state, action, mu, context)
            .unwrap_or(f64::NAN)
    }

    fn transition(&self, state: usize, action: usize, mu: &MeanField, out: &mut [f64]) {
        self.inner.transition(state, action, mu, out)
    }

    fn fill_rewards(&self, mu: &MeanField, context: usize, out: &mut [f64]) {
        self.reward.fill_rewards(mu, context, out)
    }
}

/// One softmax network per decision step `t = 0..T−1`, consuming
/// `encode(state, context)`. The terminal slice is uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerFlow {
    pub nets: Vec<Mlp>,
    pub codec: FeatureCodec,
}

impl SamplerFlow {
    /// `input → hidden → hidden → |A| → softmax(|A|)` per timestep.
    pub fn new<R: Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        num_contexts: usize,
        horizon: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let codec = FeatureCodec::new(num_states, num_actions, num_contexts, Layout::POLICY);
        let nets = (0..horizon)
            .map(|_| {
                Mlp::new(
                    vec![codec.dim(), hidden, hidden, num_actions, num_actions],
                    Activation::LeakyRelu(LEAKY_SLOPE),
                    Head::Softmax,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nets, codec })
    }

    pub fn horizon(&self) -> usize {
        self.nets.len()
    }

    pub fn probs(&self, t: usize, s: usize, m: usize) -> Result<Vec<f64>> {
        let x = self.codec.encode(Some(s), None, None, Some(m))?;
        self.nets[t].forward(&x)
    }

    /// Full tabular policy flow for context `m`.
    pub fn policy_flow(&self, m: usize) -> Result<PolicyFlow> {
        let (ns, na) = (self.codec.num_states, self.codec.num_actions);
        let mut slices = Vec::with_capacity(self.horizon() + 1);
        for t in 0..self.horizon() {
            let mut table = Vec::with_capacity(ns * na);
            for s in 0..ns {
                table.extend(self.probs(t, s, m)?);
            }
            slices.push(PolicySlice::from_table(na, renormalize_rows(table, na))?);
        }
        slices.push(PolicySlice::uniform(ns, na));
        PolicyFlow::new(slices)
    }
}

fn renormalize_rows(mut table: Vec<f64>, na: usize) -> Vec<f64> {
    for row in table.chunks_mut(na) {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
    }
    table
}

/// Lazily evaluated sampler probabilities `π_θᵗ(·|s, m)` for frozen parameters.
#[derive(Debug)]
pub struct PolicyCache {
    ns: usize,
    horizon: usize,
    rows: Vec<Option<Vec<f64>>>,
}

impl PolicyCache {
    pub fn new(samplers: &SamplerFlow) -> Self {
        let ns = samplers.codec.num_states;
        let horizon = samplers.horizon();
        Self {
            ns,
            horizon,
            rows: vec![None; samplers.codec.num_contexts * horizon * ns],
        }
    }

    pub fn row(&mut self, samplers: &SamplerFlow, t: usize, s: usize, m: usize) -> Result<&[f64]> {
        let i = (m * self.horizon + t) * self.ns + s;
        if self.rows[i].is_none() {
            self.rows[i] = Some(samplers.probs(t, s, m)?);
        }
        Ok(self.rows[i].as_deref().expect("filled above"))
    }
}

/// Samples one trajectory per entry of `contexts` from the samplers, with
/// transitions driven by the injected flow `flows[m]`. The terminal action is uniform.
pub fn sample_rollouts<R: Rng + ?Sized>(
    env: &dyn TabularEnv,
    samplers: &SamplerFlow,
    cache: &mut PolicyCache,
    flows: &[MeanFieldFlow],
    contexts: &[usize],
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let horizon = samplers.horizon();
    let na = env.num_actions();
    let uniform = vec![1.0 / na as f64; na];
    let mut kernel = vec![0.0; env.num_states()];
    let mut out = Vec::with_capacity(contexts.len());
    for &m in contexts {
        let mf = &flows[m];
        let mut steps = Vec::with_capacity(horizon + 1);
        let mut s = sample_categorical(env.initial_mean_field().probs(), rng);
        for t in 0..=horizon {
            let a = if t < horizon {
                sample_categorical(cache.row(samplers, t, s, m)?, rng)
            } else {
                sample_categorical(&uniform, rng)
            };
            steps.push((s, a));
            if t < horizon {
                env.transition(s, a, mf.at(t), &mut kernel);
                s = sample_categorical(&kernel, rng);
            }
        }
        out.push(Trajectory::new(steps));
    }
    Ok(out)
}

/// Per-(context, t, state, action) weights over decision steps, with a
/// deterministic iteration order.
#[derive(Debug, Clone)]
pub struct StepWeights {
    num_contexts: usize,
    horizon: usize,
    ns: usize,
    na: usize,
    weights: Vec<f64>,
    touched: Vec<usize>,
}

impl StepWeights {
    pub fn new(num_contexts: usize, horizon: usize, ns: usize, na: usize) -> Self {
        Self {
            num_contexts,
            horizon,
            ns,
            na,
            weights: vec![0.0; num_contexts * horizon * ns * na],
            touched: Vec::new(),
        }
    }

    pub fn add(&mut self, m: usize, t: usize, s: usize, a: usize, w: f64) {
        let i = ((m * self.horizon + t) * self.ns + s) * self.na + a;
        if self.weights[i] == 0.0 {
            self.touched.push(i);
        }
        self.weights[i] += w;
    }

    /// Adds `w` at every decision step of `tau` under context `m`.
    pub fn add_trajectory(&mut self, tau: &Trajectory, m: usize, w: f64) {
        for t in 0..self.horizon.min(tau.horizon()) {
            let (s, a) = tau.steps[t];
            self.add(m, t, s, a, w);
        }
    }

    /// `(m, t, s, a, weight)` for every touched key in index order.
    pub fn entries(&self) -> Vec<(usize, usize, usize, usize, f64)> {
        let mut idx = self.touched.clone();
        idx.sort_unstable();
        idx.dedup();
        idx.into_iter()
            .filter(|&i| self.weights[i] != 0.0)
            .map(|i| {
                let a = i % self.na;
                let s = (i / self.na) % self.ns;
                let t = (i / (self.na * self.ns)) % self.horizon;
                let m = i / (self.na * self.ns * self.horizon);
                (m, t, s, a, self.weights[i])
            })
            .collect()
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }
}

impl RewardModel {
    /// `Σ_key w·∂f/∂ω` into `grad_params` and, if given, `Σ_key w·∇_μ f` into
    /// `grad_mu[m][t]`. Keys with the same `(m,t)` share the flow slice `flows[m].at(t)`.
    pub fn accumulate(
        &self,
        weights: &StepWeights,
        flows: &[MeanFieldFlow],
        grad_params: Option<&mut [f64]>,
        mut grad_mu: Option<&mut [Vec<Vec<f64>>]>,
    ) -> Result<()> {
        let mut scratch;
        let gp: &mut [f64] = match grad_params {
            Some(g) => g,
            None => {
                scratch = vec![0.0; self.net.num_params()];
                &mut scratch
            }
        };
        let off = self.codec.mean_field_offset();
        let ns = self.codec.num_states;
        let mut gi = vec![0.0; self.codec.dim()];
        for (m, t, s, a, w) in weights.entries() {
            let x = self
                .codec
                .encode(Some(s), Some(a), Some(flows[m].at(t)), Some(m))?;
            let cache = self.net.forward_cached(&x)?;
            match grad_mu.as_deref_mut() {
                Some(h) => {
                    gi.iter_mut().for_each(|g| *g = 0.0);
                    self.net.backward(&cache, &[w], gp, Some(&mut gi))?;
                    for (dst, src) in h[m][t].iter_mut().zip(&gi[off..off + ns]) {
                        *dst += src;
                    }
                }
                None => self.net.backward(&cache, &[w], gp, None)?,
            }
        }
        Ok(())
    }

    /// `f` at each listed key, reusing the mean-field contribution per `(m, t)`.
    pub fn values_at(
        &self,
        keys: &[(usize, usize, usize, usize)],
        flows: &[MeanFieldFlow],
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(keys.len());
        let mut current: Option<((usize, usize), Vec<f64>)> = None;
        for &(m, t, s, a) in keys {
            let fresh = match &current {
                Some((key, _)) => *key != (m, t),
                None => true,
            };
            if fresh {
                current = Some(((m, t), self.mean_field_base(flows[m].at(t))));
            }
            let base = &current.as_ref().expect("set above").1;
            out.push(self.value_from_base(base, s, a, m));
        }
        out
    }
}

/// Expert and sampled trajectories (with their contexts) for one discriminator step.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorBatch<'a> {
    pub expert: &'a [Trajectory],
    pub expert_contexts: &'a [usize],
    pub sampled: &'a [Trajectory],
    pub sampled_contexts: &'a [usize],
}

/// Objective `J` (per-step averages over decision steps) and its ω-gradient.
pub fn discriminator_objective(
    reward: &RewardModel,
    samplers: &SamplerFlow,
    cache: &mut PolicyCache,
    flows: &[MeanFieldFlow],
    batch: DiscriminatorBatch<'_>,
) -> Result<(f64, Vec<f64>)> {
    if batch.expert.is_empty() || batch.sampled.is_empty() {
        return Err(Error::Empty("discriminator batch"));
    }
    let horizon = samplers.horizon();
    let (ns, na, nm) = (
        reward.codec.num_states,
        reward.codec.num_actions,
        reward.num_contexts(),
    );
    let mut expert = StepWeights::new(nm, horizon, ns, na);
    let mut sampled = StepWeights::new(nm, horizon, ns, na);
    let n_e = (batch.expert.len() * horizon) as f64;
    let n_s = (batch.sampled.len() * horizon) as f64;
    for (tau, &m) in batch.expert.iter().zip(batch.expert_contexts) {
        expert.add_trajectory(tau, m, 1.0 / n_e);
    }
    for (tau, &m) in batch.sampled.iter().zip(batch.sampled_contexts) {
        sampled.add_trajectory(tau, m, 1.0 / n_s);
    }
    // Merge both weight sets over the union of keys.
    let mut union = StepWeights::new(nm, horizon, ns, na);
    for (m, t, s, a, _) in expert.entries().into_iter().chain(sampled.entries()) {
        union.add(m, t, s, a, 1.0);
    }
    let keys: Vec<_> = union
        .entries()
        .into_iter()
        .map(|(m, t, s, a, _)| (m, t, s, a))
        .collect();
    let fvals = reward.values_at(&keys, flows);
    let lookup = |w: &StepWeights, m: usize, t: usize, s: usize, a: usize| -> f64 {
        w.weights[((m * w.horizon + t) * w.ns + s) * w.na + a]
    };
    let mut objective = 0.0;
    let mut upstream = StepWeights::new(nm, horizon, ns, na);
    for (&(m, t, s, a), &f) in keys.iter().zip(&fvals) {
        let pi = cache.row(samplers, t, s, m)?[a];
        let x = if pi > 0.0 { f - pi.ln() } else { f64::INFINITY };
        let (we, ws) = (lookup(&expert, m, t, s, a), lookup(&sampled, m, t, s, a));
        // log D = −softplus(−x), log(1 − D) = −softplus(x)
        objective += -we * softplus(-x) - ws * softplus(x);
        let g = we * sigmoid(-x) - ws * sigmoid(x);
        if g != 0.0 {
            upstream.add(m, t, s, a, g);
        }
    }
    if !objective.is_finite() {
        return Err(Error::NonFinite("discriminator objective"));
    }
    let mut grad = vec![0.0; reward.net.num_params()];
    reward.accumulate(&upstream, flows, Some(&mut grad), None)?;
    Ok((objective, grad))
}

/// One Adam ascent step on `J`; returns the pre-step objective.
pub fn discriminator_update(
    reward: &mut RewardModel,
    opt: &mut AdamState,
    samplers: &SamplerFlow,
    cache: &mut PolicyCache,
    flows: &[MeanFieldFlow],
    batch: DiscriminatorBatch<'_>,
) -> Result<f64> {
    let (objective, grad) = discriminator_objective(reward, samplers, cache, flows, batch)?;
    let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
    reward.net.adam_step(opt, &descent)?;
    Ok(objective)
}

/// One likelihood-ratio step on the samplers against `f − log π`; returns the
/// mean entropy-augmented return of the rollouts.
#[allow(clippy::too_many_arguments)]
pub fn sampler_update(
    samplers: &mut SamplerFlow,
    opts: &mut [AdamState],
    reward: &RewardModel,
    cache: &mut PolicyCache,
    flows: &[MeanFieldFlow],
    rollouts: &[Trajectory],
    contexts: &[usize],
) -> Result<f64> {
    if rollouts.is_empty() {
        return Err(Error::Empty("sampler rollouts"));
    }
    let horizon = samplers.horizon();
    let (ns, na, nm) = (
        samplers.codec.num_states,
        samplers.codec.num_actions,
        samplers.codec.num_contexts,
    );
    let n = rollouts.len() as f64;

    let mut visited = StepWeights::new(nm, horizon, ns, na);
    for (tau, &m) in rollouts.iter().zip(contexts) {
        visited.add_trajectory(tau, m, 1.0);
    }
    let keys: Vec<_> = visited
        .entries()
        .into_iter()
        .map(|(m, t, s, a, _)| (m, t, s, a))
        .collect();
    let fvals = reward.values_at(&keys, flows);
    let fmap: std::collections::BTreeMap<_, _> = keys.into_iter().zip(fvals).collect();

    // Returns-to-go per rollout and step.
    let mut returns = vec![vec![0.0; horizon]; rollouts.len()];
    for (i, (tau, &m)) in rollouts.iter().zip(contexts).enumerate() {
        let mut acc = 0.0;
        for t in (0..horizon).rev() {
            let (s, a) = tau.steps[t];
            let pi = cache.row(samplers, t, s, m)?[a];
            acc += fmap[&(m, t, s, a)] - pi.ln();
            returns[i][t] = acc;
        }
    }
    let mean_return = returns.iter().map(|r| r[0]).sum::<f64>() / n;
    if !mean_return.is_finite() {
        return Err(Error::NonFinite("sampler return"));
    }
    let baseline: Vec<f64> = (0..horizon)
        .map(|t| returns.iter().map(|r| r[t]).sum::<f64>() / n)
        .collect();

    let mut advantage = StepWeights::new(nm, horizon, ns, na);
    for (i, (tau, &m)) in rollouts.iter().zip(contexts).enumerate() {
        for t in 0..horizon {
            let (s, a) = tau.steps[t];
            let adv = (returns[i][t] - baseline[t]) / n;
            if adv != 0.0 {
                advantage.add(m, t, s, a, adv);
            }
        }
    }
    let mut grads: Vec<Vec<f64>> = samplers
        .nets
        .iter()
        .map(|net| vec![0.0; net.num_params()])
        .collect();
    let entries = advantage.entries();
    let mut k = 0;
    while k < entries.len() {
        let (m, t, s, _, _) = entries[k];
        let x = samplers.codec.encode(Some(s), None, None, Some(m))?;
        let fc = samplers.nets[t].forward_cached(&x)?;
        let p = fc.output().to_vec();
        // ∂/∂z Σ_a c_a log p_a = c − (Σ_a c_a) p
        let mut coef = vec![0.0; na];
        while k < entries.len() && entries[k].0 == m && entries[k].1 == t && entries[k].2 == s {
            coef[entries[k].3] += entries[k].4;
            k += 1;
        }
        let total: f64 = coef.iter().sum();
        let logits: Vec<f64> = coef.iter().zip(&p).map(|(c, pa)| c - total * pa).collect();
        samplers.nets[t].backward_from_logits(&fc, &logits, &mut grads[t], None)?;
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("sampler gradient"));
    }
    for ((net, opt), g) in samplers.nets.iter_mut().zip(opts.iter_mut()).zip(&grads) {
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let descent: Vec<f64> = g.iter().map(|v| -v).collect();
        net.adam_step(opt, &descent)?;
    }
    Ok(mean_return)
}

/// Soft-optimal policy flow against `f` under the injected flow, by backward
/// induction on known dynamics. Stands in for fully trained samplers.
pub fn exact_sampler(
    env: &dyn TabularEnv,
    reward: &RewardModel,
    mu_hat: &MeanFieldFlow,
    m: usize,
) -> Result<PolicyFlow> {
    let tables = reward.tables(mu_hat, m);
    Ok(soft_backward(env, mu_hat, &tables)?.policy)
}

/// Context-blind MF-AIRL on the observed demonstrations.
pub fn train(
    env: &dyn TabularEnv,
    demos: &[Trajectory],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    training::train(env, demos, config, training::Algorithm::MfAirl)
}
