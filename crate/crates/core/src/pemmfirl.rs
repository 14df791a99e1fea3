//! Context-aware meta inverse reinforcement learning for mean-field games.
//!
//! A trajectory encoder `q_ψ(m|τ)` assigns demonstrations soft context labels.
//! Those responsibilities define a context-conditioned empirical mean field
//!
//! ```text
//! μ̂ᵗ(s|m) = Σ_j q_ψ(m|τ_j)·1{s_jᵗ = s} / Σ_j q_ψ(m|τ_j)
//! ```
//!
//! and, with the reward network `f_ω`, the energy model
//!
//! ```text
//! p(τ|m) ∝ Π_{t=0..T} μ̂ᵗ(sᵗ|m) · exp Σ_{t<T} f_ω(sᵗ, aᵗ, μ̂ᵗ, m)
//! ```
//!
//! Training minimises `𝒦 − ℒ` where `𝒦` is the expected KL divergence from the
//! expert trajectory distribution to the energy model and
//! `ℒ = E_{m, τ~p(·|m)}[log q_ψ(m|τ)]` is a mutual-information lower bound.
//! The ψ-derivative of `log p(τ|m)` (before normalisation) is
//!
//! ```text
//! κ(τ, m) = Σ_t ⟨∇_μ f_ω(sᵗ,aᵗ,μ̂ᵗ,m) + e_{sᵗ}/μ̂ᵗ(sᵗ|m), ∂μ̂ᵗ(·|m)/∂ψ⟩
//! ```
//!
//! where the `f` terms run over decision steps `t < T` and the `1/μ̂` terms over
//! `t = 0..T`. The Jacobian `∂μ̂/∂ψ` is never formed: a contraction
//! `Σ_{t,s} H[t][s]·∂μ̂ᵗ(s|m)/∂ψ` equals a single backward pass through `q_ψ` per
//! demonstration `j` with upstream `(1/W_m) Σ_t (H[t][s_jᵗ] − ⟨H[t], μ̂ᵗ(·|m)⟩)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::{expected_return, policy_deviation_single};
use crate::mfairl::{LearnedRewardEnv, RewardModel, StepWeights};
use crate::mfg::{sample_categorical, MeanField, MeanFieldFlow, TabularEnv, Trajectory};
use crate::nn::{Activation, ForwardCache, Head, Mlp, LEAKY_SLOPE};
use crate::solver::{solve_ermfne, Ermfne, SolverConfig};
use crate::training::{self, TrainConfig, TrainOutcome};

/// Responsibilities below this total make a context degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// Floor applied to `μ̂ᵗ(sᵗ|m)` inside `1/μ̂`.
pub const MEAN_FIELD_FLOOR: f64 = 1e-12;

/// `q_ψ(m|τ)`: mean-pooled `(one-hot s ⧺ one-hot a)` over all `T + 1` steps,
/// then `hidden → hidden → softmax(|M|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextInferenceModel {
    pub net: Mlp,
    pub num_states: usize,
    pub num_actions: usize,
}

impl ContextInferenceModel {
    pub fn new<R: Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        num_contexts: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Mlp::new(
            vec![num_states + num_actions, hidden, hidden, num_contexts],
            Activation::LeakyRelu(LEAKY_SLOPE),
            Head::Softmax,
            rng,
        )?;
        Ok(Self {
            net,
            num_states,
            num_actions,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.net.output_dim()
    }

    /// Pooled trajectory features.
    pub fn features(&self, tau: &Trajectory) -> Result<Vec<f64>> {
        if tau.steps.is_empty() {
            return Err(Error::Empty("trajectory"));
        }
        let mut x = vec![0.0; self.num_states + self.num_actions];
        let w = 1.0 / tau.steps.len() as f64;
        for &(s, a) in &tau.steps {
            if s >= self.num_states {
                return Err(Error::IndexOutOfRange {
                    what: "state",
                    index: s,
                    size: self.num_states,
                });
            }
            if a >= self.num_actions {
                return Err(Error::IndexOutOfRange {
                    what: "action",
                    index: a,
                    size: self.num_actions,
                });
            }
            x[s] += w;
            x[self.num_states + a] += w;
        }
        Ok(x)
    }

    /// `q_ψ(·|τ)`.
    pub fn infer(&self, tau: &Trajectory) -> Result<Vec<f64>> {
        self.net.forward(&self.features(tau)?)
    }

    /// Accumulates `coef · ∂ log q_ψ(m|τ)/∂ψ`.
    pub fn add_score(&self, tau: &Trajectory, m: usize, coef: f64, grad: &mut [f64]) -> Result<()> {
        let cache = self.net.forward_cached(&self.features(tau)?)?;
        let logits: Vec<f64> = cache
            .output()
            .iter()
            .enumerate()
            .map(|(k, p)| coef * (f64::from(u8::from(k == m)) - p))
            .collect();
        self.net.backward_from_logits(&cache, &logits, grad, None)
    }
}

/// Draws `m̃ ~ q_ψ(·|τ_E)` for each trajectory.
pub fn synthetic_contexts<R: Rng + ?Sized>(
    q: &ContextInferenceModel,
    batch: &[Trajectory],
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch.is_empty() {
        return Err(Error::Empty("expert batch"));
    }
    batch
        .iter()
        .map(|tau| Ok(sample_categorical(&q.infer(tau)?, rng)))
        .collect()
}

/// `μ̂ᵗ(·|m)` for every context plus what its ψ-gradient needs.
#[derive(Debug, Clone)]
pub struct ConditionalMeanFieldEstimate {
    pub flows: Vec<MeanFieldFlow>,
    /// `q_ψ(m|τ_j)`, indexed `[j][m]`.
    pub responsibilities: Vec<Vec<f64>>,
    /// `W_m = Σ_j q_ψ(m|τ_j)`.
    pub totals: Vec<f64>,
    states: Vec<Vec<usize>>,
    /// Demonstrations with identical pooled features share one forward pass.
    groups: Vec<(ForwardCache, Vec<usize>)>,
}

/// Builds the normalised context-conditioned empirical mean field from all demonstrations.
pub fn conditional_empirical_mean_field(
    q: &ContextInferenceModel,
    demos: &[Trajectory],
) -> Result<ConditionalMeanFieldEstimate> {
    let first = demos.first().ok_or(Error::Empty("demonstration set"))?;
    let horizon = first.horizon();
    let (ns, nm) = (q.num_states, q.num_contexts());
    let mut sums = vec![vec![vec![0.0; ns]; horizon + 1]; nm];
    let mut totals = vec![0.0; nm];
    let mut responsibilities = Vec::with_capacity(demos.len());
    let mut states = Vec::with_capacity(demos.len());
    let mut groups: Vec<(ForwardCache, Vec<usize>)> = Vec::new();
    let mut index: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
    for (j, tau) in demos.iter().enumerate() {
        if tau.horizon() != horizon {
            return Err(Error::DimensionMismatch {
                what: "demonstration horizon",
                expected: horizon,
                got: tau.horizon(),
            });
        }
        let x = q.features(tau)?;
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        let g = match index.get(&key) {
            Some(&g) => g,
            None => {
                groups.push((q.net.forward_cached(&x)?, Vec::new()));
                index.insert(key, groups.len() - 1);
                groups.len() - 1
            }
        };
        groups[g].1.push(j);
        let w = groups[g].0.output().to_vec();
        for m in 0..nm {
            totals[m] += w[m];
            for (t, &(s, _)) in tau.steps.iter().enumerate() {
                sums[m][t][s] += w[m];
            }
        }
        responsibilities.push(w);
        states.push(tau.steps.iter().map(|&(s, _)| s).collect());
    }
    for (m, &total) in totals.iter().enumerate() {
        if !(total >= DEGENERACY_THRESHOLD) {
            return Err(Error::DegenerateContext {
                context: m,
                mass: total,
            });
        }
    }
    let flows = sums
        .into_iter()
        .zip(&totals)
        .map(|(per_t, &total)| {
            let fields = per_t
                .into_iter()
                .map(|row| MeanField::normalized(row.into_iter().map(|v| v / total).collect()))
                .collect::<Result<Vec<_>>>()?;
            MeanFieldFlow::new(fields)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionalMeanFieldEstimate {
        flows,
        responsibilities,
        totals,
        states,
        groups,
    })
}

impl ConditionalMeanFieldEstimate {
    pub fn num_contexts(&self) -> usize {
        self.flows.len()
    }

    pub fn horizon(&self) -> usize {
        self.flows[0].horizon()
    }

    pub fn num_states(&self) -> usize {
        self.flows[0].num_states()
    }

    /// Accumulates `Σ_{m,t,s} h[m][t][s] · ∂μ̂ᵗ(s|m)/∂ψ` into `grad`.
    pub fn contract(
        &self,
        q: &ContextInferenceModel,
        h: &[Vec<Vec<f64>>],
        grad: &mut [f64],
    ) -> Result<()> {
        let nm = self.num_contexts();
        // ⟨H[m][t], μ̂ᵗ(·|m)⟩ summed over t.
        let centre: Vec<f64> = (0..nm)
            .map(|m| {
                h[m].iter()
                    .zip(self.flows[m].fields())
                    .map(|(row, mu)| row.iter().zip(mu.probs()).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            })
            .collect();
        let active: Vec<bool> = h
            .iter()
            .map(|per_t| per_t.iter().flatten().any(|v| *v != 0.0))
            .collect();
        if !active.iter().any(|&a| a) {
            return Ok(());
        }
        let mut upstream = vec![0.0; nm];
        for (cache, members) in &self.groups {
            upstream.iter_mut().for_each(|u| *u = 0.0);
            for &j in members {
                for m in (0..nm).filter(|&m| active[m]) {
                    let along: f64 = self.states[j]
                        .iter()
                        .enumerate()
                        .map(|(t, &s)| h[m][t][s])
                        .sum();
                    upstream[m] += (along - centre[m]) / self.totals[m];
                }
            }
            if upstream.iter().all(|u| *u == 0.0) {
                continue;
            }
            q.net.backward(cache, &upstream, grad, None)?;
        }
        Ok(())
    }
}

/// Collects weighted `κ(τ, m)` terms so that all of them share one contraction.
#[derive(Debug, Clone)]
pub struct KappaAccumulator {
    h: Vec<Vec<Vec<f64>>>,
    f_weights: StepWeights,
    /// Number of `μ̂ᵗ(sᵗ|m)` values that had to be floored.
    pub clamped: usize,
}

impl KappaAccumulator {
    pub fn new(est: &ConditionalMeanFieldEstimate, num_actions: usize) -> Self {
        let (nm, horizon, ns) = (est.num_contexts(), est.horizon(), est.num_states());
        Self {
            h: vec![vec![vec![0.0; ns]; horizon + 1]; nm],
            f_weights: StepWeights::new(nm, horizon, ns, num_actions),
            clamped: 0,
        }
    }

    /// Adds `coef · κ(τ, m)`.
    pub fn add(
        &mut self,
        est: &ConditionalMeanFieldEstimate,
        tau: &Trajectory,
        m: usize,
        coef: f64,
    ) {
        if coef == 0.0 {
            return;
        }
        self.f_weights.add_trajectory(tau, m, coef);
        for (t, &(s, _)) in tau.steps.iter().enumerate() {
            let mu = est.flows[m].at(t).get(s);
            let mu = if mu < MEAN_FIELD_FLOOR {
                self.clamped += 1;
                MEAN_FIELD_FLOOR
            } else {
                mu
            };
            self.h[m][t][s] += coef / mu;
        }
    }

    /// Adds the accumulated ψ-vector into `grad`; returns the clamp count.
    pub fn finish(
        mut self,
        reward: &RewardModel,
        q: &ContextInferenceModel,
        est: &ConditionalMeanFieldEstimate,
        grad: &mut [f64],
    ) -> Result<usize> {
        reward.accumulate(&self.f_weights, &est.flows, None, Some(&mut self.h))?;
        est.contract(q, &self.h, grad)?;
        Ok(self.clamped)
    }
}

/// `κ(τ, m)` as a vector over the ψ-parameters.
pub fn kappa(
    tau: &Trajectory,
    m: usize,
    reward: &RewardModel,
    q: &ContextInferenceModel,
    est: &ConditionalMeanFieldEstimate,
) -> Result<Vec<f64>> {
    let mut acc = KappaAccumulator::new(est, reward.codec.num_actions);
    acc.add(est, tau, m, 1.0);
    let mut grad = vec![0.0; q.net.num_params()];
    acc.finish(reward, q, est, &mut grad)?;
    Ok(grad)
}

/// Trajectories sampled from the energy model, in two independent halves.
///
/// `main[i]` was drawn under `main_contexts[i]`; the reference half supplies
/// the inner expectations `E_τ̂'[·|m]`.
#[derive(Debug, Clone, Copy)]
pub struct SampledBatch<'a> {
    pub main: &'a [Trajectory],
    pub main_contexts: &'a [usize],
    pub reference: &'a [Trajectory],
    pub reference_contexts: &'a [usize],
}

impl SampledBatch<'_> {
    fn pools(&self, nm: usize) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); nm];
        for (i, &m) in self.reference_contexts.iter().enumerate() {
            pools[m].push(i);
        }
        pools
    }
}

/// Per-sample `(index, log q(m_i|τ̂_i), 1/N)` for samples whose context has a
/// non-empty reference pool.
fn valid_samples(
    q: &ContextInferenceModel,
    batch: &SampledBatch<'_>,
    pools: &[Vec<usize>],
) -> Result<(Vec<(usize, f64)>, f64)> {
    let mut out = Vec::new();
    for (i, (tau, &m)) in batch.main.iter().zip(batch.main_contexts).enumerate() {
        if pools[m].is_empty() {
            continue;
        }
        out.push((i, q.infer(tau)?[m].ln()));
    }
    let n = out.len() as f64;
    Ok((out, if n > 0.0 { 1.0 / n } else { 0.0 }))
}

/// `mean_i log q(m_i|τ̂_i)·(Σ_t ∂f/∂ω(τ̂_i) − mean_{τ̂'} Σ_t ∂f/∂ω(τ̂'))`.
pub fn grad_l_omega(
    reward: &RewardModel,
    q: &ContextInferenceModel,
    est: &ConditionalMeanFieldEstimate,
    batch: &SampledBatch<'_>,
) -> Result<Vec<f64>> {
    let nm = est.num_contexts();
    let pools = batch.pools(nm);
    let (samples, inv_n) = valid_samples(q, batch, &pools)?;
    let mut weights = StepWeights::new(
        nm,
        est.horizon(),
        est.num_states(),
        reward.codec.num_actions,
    );
    let mut centre = vec![0.0; nm];
    for &(i, lq) in &samples {
        let m = batch.main_contexts[i];
        weights.add_trajectory(&batch.main[i], m, lq * inv_n);
        centre[m] -= lq * inv_n / pools[m].len() as f64;
    }
    for (m, pool) in pools.iter().enumerate() {
        for &r in pool {
            weights.add_trajectory(&batch.reference[r], m, centre[m]);
        }
    }
    let mut grad = vec![0.0; reward.net.num_params()];
    reward.accumulate(&weights, &est.flows, Some(&mut grad), None)?;
    Ok(grad)
}

fn add_l_psi_terms(
    q: &ContextInferenceModel,
    est: &ConditionalMeanFieldEstimate,
    batch: &SampledBatch<'_>,
    sign: f64,
    acc: &mut KappaAccumulator,
    grad: &mut [f64],
) -> Result<()> {
    let nm = est.num_contexts();
    let pools = batch.pools(nm);
    let (samples, inv_n) = valid_samples(q, batch, &pools)?;
    let mut centre = vec![0.0; nm];
    for &(i, lq) in &samples {
        let m = batch.main_contexts[i];
        acc.add(est, &batch.main[i], m, sign * lq * inv_n);
        centre[m] -= sign * lq * inv_n / pools[m].len() as f64;
        q.add_score(&batch.main[i], m, sign * inv_n, grad)?;
    }
    for (m, pool) in pools.iter().enumerate() {
        for &r in pool {
            acc.add(est, &batch.reference[r], m, centre[m]);
        }
    }
    Ok(())
}

fn add_k_psi_terms(
    est: &ConditionalMeanFieldEstimate,
    expert: &[Trajectory],
    expert_contexts: &[usize],
    batch: &SampledBatch<'_>,
    sign: f64,
    acc: &mut KappaAccumulator,
) {
    let nm = est.num_contexts();
    let mut pools: Vec<Vec<&Trajectory>> = vec![Vec::new(); nm];
    for (tau, &m) in batch
        .main
        .iter()
        .zip(batch.main_contexts)
        .chain(batch.reference.iter().zip(batch.reference_contexts))
    {
        pools[m].push(tau);
    }
    let valid: Vec<usize> = (0..expert.len())
        .filter(|&i| !pools[expert_contexts[i]].is_empty())
        .collect();
    if valid.is_empty() {
        return;
    }
    let inv_n = 1.0 / valid.len() as f64;
    let mut share = vec![0.0; nm];
    for i in valid {
        let m = expert_contexts[i];
        share[m] += sign * inv_n / pools[m].len() as f64;
        acc.add(est, &expert[i], m, -sign * inv_n);
    }
    for (m, pool) in pools.iter().enumerate() {
        for tau in pool {
            acc.add(est, tau, m, share[m]);
        }
    }
}

/// `mean_i [log q(m_i|τ̂_i)·(κ(τ̂_i,m_i) − mean_{τ̂'} κ(τ̂',m_i)) + ∂log q(m_i|τ̂_i)/∂ψ]`.
pub fn grad_l_psi(
    reward: &RewardModel,
    q: &ContextInferenceModel,
    est: &ConditionalMeanFieldEstimate,
    batch: &SampledBatch<'_>,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; q.net.num_params()];
    let mut acc = KappaAccumulator::new(est, reward.codec.num_actions);
    add_l_psi_terms(q, est, batch, 1.0, &mut acc, &mut grad)?;
    acc.finish(reward, q, est, &mut grad)?;
    Ok(grad)
}

/// `mean_i [mean_{τ̃ ~ m̃_i} κ(τ̃, m̃_i) − κ(τ_E,i, m̃_i)]`, with `τ̃` drawn from
/// every sampled trajectory of context `m̃_i`.
pub fn grad_k_psi(
    reward: &RewardModel,
    q: &ContextInferenceModel,
    est: &ConditionalMeanFieldEstimate,
    expert: &[Trajectory],
    expert_contexts: &[usize],
    batch: &SampledBatch<'_>,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; q.net.num_params()];
    let mut acc = KappaAccumulator::new(est, reward.codec.num_actions);
    add_k_psi_terms(est, expert, expert_contexts, batch, 1.0, &mut acc);
    acc.finish(reward, q, est, &mut grad)?;
    Ok(grad)
}

/// `∂(𝒦 − ℒ)/∂ψ` with a single shared contraction; returns the gradient and
/// the number of floored mean-field values.
pub fn grad_k_minus_l_psi(
    reward: &RewardModel,
    q: &ContextInferenceModel,
    est: &ConditionalMeanFieldEstimate,
    expert: &[Trajectory],
    expert_contexts: &[usize],
    batch: &SampledBatch<'_>,
) -> Result<(Vec<f64>, usize)> {
    let mut grad = vec![0.0; q.net.num_params()];
    let mut acc = KappaAccumulator::new(est, reward.codec.num_actions);
    add_k_psi_terms(est, expert, expert_contexts, batch, 1.0, &mut acc);
    add_l_psi_terms(q, est, batch, -1.0, &mut acc, &mut grad)?;
    let clamped = acc.finish(reward, q, est, &mut grad)?;
    Ok((grad, clamped))
}

/// Meta-training on demonstrations with hidden contexts.
pub fn meta_train(
    env: &dyn TabularEnv,
    demos: &[Trajectory],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    training::train(env, demos, config, training::Algorithm::Pemmfirl)
}

/// Which reward the meta-test policy is optimised for.
#[derive(Debug, Clone, Copy)]
pub enum RewardSource<'a> {
    GroundTruth,
    Learned(&'a RewardModel),
}

/// One meta-test evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRecord {
    pub seed: u64,
    pub true_m: usize,
    pub inferred_m: usize,
    /// `R_E(m) − R(m̂)`: expert expected return minus that of the policy solved for `m̂`.
    pub return_gap: f64,
    pub policy_deviation: f64,
}

/// Samples `m̂` from `posterior`, solves the equilibrium of the chosen reward
/// at `m̂` on the true dynamics, and evaluates it under the true context.
#[allow(clippy::too_many_arguments)]
pub fn meta_test<R: Rng + ?Sized>(
    posterior: &[f64],
    source: RewardSource<'_>,
    env: &dyn TabularEnv,
    expert: &[Ermfne],
    true_m: usize,
    solver: &SolverConfig,
    seed: u64,
    rng: &mut R,
) -> Result<EvaluationRecord> {
    let inferred_m = sample_categorical(posterior, rng);
    let eq = match source {
        RewardSource::GroundTruth => solve_ermfne(env, inferred_m, solver)?,
        RewardSource::Learned(reward) => {
            let learned = LearnedRewardEnv::new(env, reward);
            solve_ermfne(&learned, inferred_m, solver)?
        }
    };
    let target = &expert[true_m];
    let expert_return = expected_return(env, &target.mean_field_flow, &target.policy_flow, true_m)?;
    let achieved = expected_return(env, &eq.mean_field_flow, &eq.policy_flow, true_m)?;
    Ok(EvaluationRecord {
        seed,
        true_m,
        inferred_m,
        return_gap: expert_return - achieved,
        policy_deviation: policy_deviation_single(&target.policy_flow, &eq.policy_flow)?,
    })
}

/// Writes `seed,true_m,inferred_m,return_gap,policy_deviation`.
pub fn write_evaluation_csv<W: std::io::Write>(
    writer: W,
    records: &[EvaluationRecord],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "seed",
        "true_m",
        "inferred_m",
        "return_gap",
        "policy_deviation",
    ])?;
    for r in records {
        w.write_record(&[
            r.seed.to_string(),
            r.true_m.to_string(),
            r.inferred_m.to_string(),
            crate::solver::format_f64(r.return_gap),
            crate::solver::format_f64(r.policy_deviation),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Equilibrium of the learned reward on the true dynamics for every learned
/// context. A non-converging plain iteration is retried with damping 0.5.
pub fn learned_equilibria(
    env: &dyn TabularEnv,
    reward: &RewardModel,
    solver: &SolverConfig,
) -> Result<Vec<Ermfne>> {
    let learned = LearnedRewardEnv::new(env, reward);
    (0..reward.num_contexts())
        .map(|m| match solve_ermfne(&learned, m, solver) {
            Err(Error::NonConvergence { residual, .. }) if solver.damping == 0.0 => {
                log::warn!("learned context {m}: undamped solve stalled at residual {residual:e}; retrying with damping 0.5");
                solve_ermfne(&learned, m, &SolverConfig { damping: 0.5, ..*solver })
            }
            other => other,
        })
        .collect()
}

/// How learned contexts line up with the true ones on labelled held-out data.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextAssignment {
    /// `learned[c]`: learned context matched to true context `c` (one-to-one when
    /// there are at least as many learned contexts, by summed average posterior).
    pub learned: Vec<usize>,
    /// Fraction of labelled trajectories whose argmax posterior is `learned[true context]`.
    pub accuracy: f64,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Matches learned to true contexts using held-out trajectories that carry
/// their true context label.
pub fn assign_contexts(
    q: &ContextInferenceModel,
    labelled: &[Trajectory],
    num_true_contexts: usize,
) -> Result<ContextAssignment> {
    let nm = q.num_contexts();
    let mut mean = vec![vec![0.0; nm]; num_true_contexts];
    let mut count = vec![0usize; num_true_contexts];
    let mut posteriors = Vec::with_capacity(labelled.len());
    for tau in labelled {
        let c = tau
            .hidden_context
            .ok_or(Error::Empty("context label on held-out trajectory"))?;
        if c >= num_true_contexts {
            return Err(Error::IndexOutOfRange {
                what: "true context",
                index: c,
                size: num_true_contexts,
            });
        }
        let p = q.infer(tau)?;
        for (acc, v) in mean[c].iter_mut().zip(&p) {
            *acc += v;
        }
        count[c] += 1;
        posteriors.push((c, argmax(&p)));
    }
    if labelled.is_empty() {
        return Err(Error::Empty("held-out trajectories"));
    }
    let learned = if nm >= num_true_contexts {
        best_injection(&mean, nm)
    } else {
        mean.iter().map(|row| argmax(row)).collect()
    };
    let hits = posteriors.iter().filter(|(c, k)| learned[*c] == *k).count();
    Ok(ContextAssignment {
        learned,
        accuracy: hits as f64 / labelled.len() as f64,
    })
}

/// One-to-one map from true to learned contexts maximising the summed average posterior.
fn best_injection(score: &[Vec<f64>], nm: usize) -> Vec<usize> {
    fn go(
        score: &[Vec<f64>],
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        let c = cur.len();
        if c == score.len() {
            let total: f64 = cur.iter().enumerate().map(|(c, &k)| score[c][k]).sum();
            if total > best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        for k in 0..used.len() {
            if !used[k] {
                used[k] = true;
                cur.push(k);
                go(score, used, cur, best);
                cur.pop();
                used[k] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(score, &mut vec![false; nm], &mut Vec::new(), &mut best);
    best.1
}

/// Full evaluation of a trained run: learned equilibria, context matching
/// (context-aware runs only), policy deviation and return gap.
pub fn evaluate_outcome(
    env: &dyn TabularEnv,
    expert: &[Ermfne],
    outcome: &TrainOutcome,
    heldout: &[Trajectory],
    prior: &[f64],
    solver: &SolverConfig,
) -> Result<crate::metrics::EvaluationReport> {
    let eqs = learned_equilibria(env, &outcome.reward, solver)?;
    let (mapping, accuracy) = match &outcome.inference {
        Some(q) => {
            let a = assign_contexts(q, heldout, expert.len())?;
            (a.learned, Some(a.accuracy))
        }
        None => (vec![0; expert.len()], None),
    };
    let assigned: Vec<Ermfne> = mapping.iter().map(|&k| eqs[k].clone()).collect();
    let mut report = crate::metrics::EvaluationReport::compute(
        env,
        expert,
        &assigned,
        &mapping,
        prior,
        outcome.config.seed,
    )?;
    report.inference_accuracy = accuracy;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::VirusEnv;
    use crate::mfairl::empirical_mean_field;
    use crate::solver::{generate_demonstrations, solve_all};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_q(ns: usize, na: usize, nm: usize) -> ContextInferenceModel {
        let mut q =
            ContextInferenceModel::new(ns, na, nm, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        q.net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        q
    }

    fn virus_demos(
        count: usize,
        horizon: usize,
        seed: u64,
    ) -> (VirusEnv, Vec<Ermfne>, crate::solver::DemonstrationSet) {
        let env = VirusEnv::new(horizon);
        let eqs = solve_all(&env, &SolverConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let demos =
            generate_demonstrations(&env, &eqs, &[0.5, 0.5], count, horizon, &mut rng).unwrap();
        (env, eqs, demos)
    }

    #[test]
    fn zero_encoder_is_uniform_and_deterministic() {
        let q = zero_q(2, 2, 2);
        let tau = Trajectory::new(vec![(0, 1), (1, 0), (1, 1)]);
        assert_eq!(q.infer(&tau).unwrap(), vec![0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = ContextInferenceModel::new(2, 2, 2, 8, &mut rng).unwrap();
        assert_eq!(q.infer(&tau).unwrap(), q.infer(&tau.clone()).unwrap());
    }

    #[test]
    fn uniform_responsibilities_reproduce_unconditional_estimate() {
        let (_env, _eqs, demos) = virus_demos(200, 10, 3);
        let q = zero_q(2, 2, 2);
        let est = conditional_empirical_mean_field(&q, demos.observed()).unwrap();
        let plain = empirical_mean_field(demos.observed(), 2).unwrap();
        for flow in &est.flows {
            for (a, b) in flow.fields().iter().zip(plain.fields()) {
                for (x, y) in a.probs().iter().zip(b.probs()) {
                    assert_abs_diff_eq!(x, y, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_context_is_reported() {
        let mut q = zero_q(2, 2, 2);
        // Push all mass onto context 0 through a large output bias.
        let n = q.net.num_params();
        q.net.params_mut()[n - 2] = 800.0;
        let demos = vec![Trajectory::new(vec![(0, 0), (1, 1)])];
        assert!(matches!(
            conditional_empirical_mean_field(&q, &demos),
            Err(Error::DegenerateContext { context: 1, .. })
        ));
    }

    #[test]
    fn identical_demos_give_zero_mean_field_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = ContextInferenceModel::new(2, 2, 2, 8, &mut rng).unwrap();
        let reward = RewardModel::new(2, 2, 2, 8, &mut rng).unwrap();
        let demos = vec![Trajectory::new(vec![(0, 1), (1, 0), (1, 1)]); 5];
        let est = conditional_empirical_mean_field(&q, &demos).unwrap();
        let k = kappa(&demos[0], 1, &reward, &q, &est).unwrap();
        assert!(k.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn self_centred_single_sample_gives_zero_omega_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = ContextInferenceModel::new(2, 2, 2, 8, &mut rng).unwrap();
        let reward = RewardModel::new(2, 2, 2, 8, &mut rng).unwrap();
        let demos = vec![
            Trajectory::new(vec![(0, 1), (1, 0), (1, 1)]),
            Trajectory::new(vec![(1, 1), (0, 0), (0, 1)]),
        ];
        let est = conditional_empirical_mean_field(&q, &demos).unwrap();
        let tau = vec![demos[0].clone()];
        let batch = SampledBatch {
            main: &tau,
            main_contexts: &[1],
            reference: &tau,
            reference_contexts: &[1],
        };
        let g = grad_l_omega(&reward, &q, &est, &batch).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn equal_log_q_cancels_omega_gradient_in_expectation() {
        // With a uniform q every log q equals −log 2, so the estimator is
        // −log 2·(mean F(main) − mean F(reference)); identical halves give 0.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = zero_q(2, 2, 2);
        let reward = RewardModel::new(2, 2, 2, 8, &mut rng).unwrap();
        let demos = vec![
            Trajectory::new(vec![(0, 1), (1, 0), (1, 1)]),
            Trajectory::new(vec![(1, 1), (0, 0), (0, 1)]),
        ];
        let est = conditional_empirical_mean_field(&q, &demos).unwrap();
        let batch = SampledBatch {
            main: &demos,
            main_contexts: &[0, 0],
            reference: &demos,
            reference_contexts: &[0, 0],
        };
        let g = grad_l_omega(&reward, &q, &est, &batch).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn constant_kappa_gives_zero_k_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = ContextInferenceModel::new(2, 2, 2, 8, &mut rng).unwrap();
        let reward = RewardModel::new(2, 2, 2, 8, &mut rng).unwrap();
        let demos = vec![
            Trajectory::new(vec![(0, 1), (1, 0), (1, 1)]),
            Trajectory::new(vec![(1, 1), (0, 0), (0, 1)]),
        ];
        let est = conditional_empirical_mean_field(&q, &demos).unwrap();
        let same = vec![demos[0].clone(); 3];
        let batch = SampledBatch {
            main: &same,
            main_contexts: &[0, 1, 0],
            reference: &same,
            reference_contexts: &[1, 0, 1],
        };
        let g = grad_k_psi(&reward, &q, &est, &same, &[0, 1, 1], &batch).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identical_kappa_leaves_only_score_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = ContextInferenceModel::new(2, 2, 2, 8, &mut rng).unwrap();
        let reward = RewardModel::new(2, 2, 2, 8, &mut rng).unwrap();
        let demos = vec![
            Trajectory::new(vec![(0, 1), (1, 0), (1, 1)]),
            Trajectory::new(vec![(1, 1), (0, 0), (0, 1)]),
        ];
        let est = conditional_empirical_mean_field(&q, &demos).unwrap();
        let same = vec![demos[1].clone(); 2];
        let batch = SampledBatch {
            main: &same,
            main_contexts: &[0, 1],
            reference: &same,
            reference_contexts: &[0, 1],
        };
        let g = grad_l_psi(&reward, &q, &est, &batch).unwrap();
        let mut score = vec![0.0; q.net.num_params()];
        q.add_score(&same[0], 0, 0.5, &mut score).unwrap();
        q.add_score(&same[1], 1, 0.5, &mut score).unwrap();
        for (a, b) in g.iter().zip(&score) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn synthetic_contexts_are_reproducible_and_uniform_under_uniform_q() {
        let q = zero_q(2, 2, 2);
        let batch = vec![Trajectory::new(vec![(0, 0), (1, 1)]); 10_000];
        let a = synthetic_contexts(&q, &batch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = synthetic_contexts(&q, &batch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let ones = a.iter().filter(|&&m| m == 1).count() as f64;
        assert!((ones - 5000.0).abs() <= 3.0 * 50.0);
    }

    #[test]
    fn meta_test_with_perfect_and_wrong_inference() {
        let (env, eqs, _) = virus_demos(1, 20, 0);
        let solver = SolverConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let right = meta_test(
            &[0.0, 1.0],
            RewardSource::GroundTruth,
            &env,
            &eqs,
            1,
            &solver,
            0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(right.inferred_m, 1);
        assert!(right.return_gap.abs() < 1e-9);
        assert!(right.policy_deviation < 1e-12);
        let wrong = meta_test(
            &[1.0, 0.0],
            RewardSource::GroundTruth,
            &env,
            &eqs,
            1,
            &solver,
            0,
            &mut rng,
        )
        .unwrap();
        assert!(wrong.return_gap > 0.0);
        let mut buf = Vec::new();
        write_evaluation_csv(&mut buf, &[right, wrong]).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("seed,true_m,inferred_m,return_gap,policy_deviation\n"));
    }
}
