//! Soft (entropy-regularised) best responses, the equilibrium fixed point, and
//! expert demonstration generation.
//!
//! For a fixed mean-field flow the soft-optimal policy comes from the backward
//! recursion
//!
//! ```text
//! V_T ≡ 0
//! Q_t(s,a) = r(s,a,μᵗ) + Σ_s' P(s'|s,a,μᵗ) V_{t+1}(s')
//! V_t(s)   = log Σ_a exp Q_t(s,a)
//! π_t(a|s) = exp(Q_t(s,a) − V_t(s))
//! ```
//!
//! The terminal slice `π_T` carries no reward and is uniform.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::mfg::{
    consistency_residual, rollout, sample_categorical, sample_with_flows, MeanField, MeanFieldFlow,
    PolicyFlow, PolicySlice, TabularEnv, Trajectory,
};

/// Per-timestep reward tables `rewards[t][s·|A| + a]` for `t = 0..T−1`.
pub type RewardTables = Vec<Vec<f64>>;

/// Soft best response together with its value functions.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub policy: PolicyFlow,
    /// `V_t(s)` for `t = 0..T` (the last row is zero).
    pub values: Vec<Vec<f64>>,
}

/// Evaluates the environment reward of `context` along `mf`.
pub fn env_reward_tables(env: &dyn TabularEnv, mf: &MeanFieldFlow, context: usize) -> RewardTables {
    let (ns, na) = (env.num_states(), env.num_actions());
    (0..mf.horizon())
        .map(|t| {
            let mut row = vec![0.0; ns * na];
            env.fill_rewards(mf.at(t), context, &mut row);
            row
        })
        .collect()
}

fn check_mf(env: &dyn TabularEnv, mf: &MeanFieldFlow) -> Result<()> {
    if mf.num_states() != env.num_states() {
        return Err(Error::DimensionMismatch {
            what: "mean-field flow states",
            expected: env.num_states(),
            got: mf.num_states(),
        });
    }
    Ok(())
}

/// Soft backward induction against arbitrary per-step reward tables.
pub fn soft_backward(
    env: &dyn TabularEnv,
    mf: &MeanFieldFlow,
    rewards: &[Vec<f64>],
) -> Result<SoftSolution> {
    check_mf(env, mf)?;
    let (ns, na) = (env.num_states(), env.num_actions());
    let horizon = mf.horizon();
    if rewards.len() != horizon {
        return Err(Error::DimensionMismatch {
            what: "reward tables",
            expected: horizon,
            got: rewards.len(),
        });
    }
    let mut values = vec![vec![0.0; ns]; horizon + 1];
    let mut slices = vec![PolicySlice::uniform(ns, na); horizon + 1];
    let mut kernel = vec![0.0; ns];
    let mut q = vec![0.0; na];
    for t in (0..horizon).rev() {
        let table = &rewards[t];
        if table.len() != ns * na {
            return Err(Error::DimensionMismatch {
                what: "reward table",
                expected: ns * na,
                got: table.len(),
            });
        }
        let mu = mf.at(t);
        let mut policy = Vec::with_capacity(ns * na);
        for s in 0..ns {
            for (a, qa) in q.iter_mut().enumerate() {
                env.transition(s, a, mu, &mut kernel);
                let cont: f64 = kernel.iter().zip(&values[t + 1]).map(|(p, v)| p * v).sum();
                *qa = table[s * na + a] + cont;
            }
            let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::NonFinite("soft Q-values"));
            }
            let lse = max + q.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            values[t][s] = lse;
            let row_start = policy.len();
            policy.extend(q.iter().map(|x| (x - lse).exp()));
            // Re-normalise away the last ulp so rows pass the simplex check.
            let sum: f64 = policy[row_start..].iter().sum();
            policy[row_start..].iter_mut().for_each(|p| *p /= sum);
        }
        slices[t] = PolicySlice::from_table(na, policy)?;
    }
    Ok(SoftSolution {
        policy: PolicyFlow::new(slices)?,
        values,
    })
}

/// Soft-optimal policy flow for the true reward of `context` along `mf`.
pub fn soft_best_response(
    env: &dyn TabularEnv,
    mf: &MeanFieldFlow,
    context: usize,
) -> Result<PolicyFlow> {
    check_context(env, context)?;
    check_mf(env, mf)?;
    let rewards = env_reward_tables(env, mf, context);
    Ok(soft_backward(env, mf, &rewards)?.policy)
}

/// Soft-optimal policy flow for a substitute reward `reward(s, a, μᵗ)`.
pub fn soft_best_response_with<F>(
    env: &dyn TabularEnv,
    mf: &MeanFieldFlow,
    reward: F,
) -> Result<PolicyFlow>
where
    F: Fn(usize, usize, &MeanField) -> f64,
{
    check_mf(env, mf)?;
    let (ns, na) = (env.num_states(), env.num_actions());
    let rewards: RewardTables = (0..mf.horizon())
        .map(|t| {
            let mu = mf.at(t);
            (0..ns * na).map(|i| reward(i / na, i % na, mu)).collect()
        })
        .collect();
    Ok(soft_backward(env, mf, &rewards)?.policy)
}

/// `E[Σ_{t<T} r(sᵗ,aᵗ) − log πᵗ(aᵗ|sᵗ)]` with agents moving under the fixed flow `mf`.
pub fn entropy_regularized_return(
    env: &dyn TabularEnv,
    mf: &MeanFieldFlow,
    pf: &PolicyFlow,
    rewards: &[Vec<f64>],
) -> Result<f64> {
    check_mf(env, mf)?;
    let (ns, na) = (env.num_states(), env.num_actions());
    let mut dist = env.initial_mean_field().probs().to_vec();
    let mut kernel = vec![0.0; ns];
    let mut total = 0.0;
    for t in 0..mf.horizon() {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if dist[s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let p = pf.at(t).prob(s, a);
                if p == 0.0 {
                    continue;
                }
                let w = dist[s] * p;
                total += w * (rewards[t][s * na + a] - p.ln());
                env.transition(s, a, mf.at(t), &mut kernel);
                next.iter_mut().zip(&kernel).for_each(|(n, k)| *n += w * k);
            }
        }
        dist = next;
    }
    Ok(total)
}

fn check_context(env: &dyn TabularEnv, context: usize) -> Result<()> {
    if context >= env.num_contexts() {
        return Err(Error::IndexOutOfRange {
            what: "context",
            index: context,
            size: env.num_contexts(),
        });
    }
    Ok(())
}

/// Fixed-point iteration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Weight `λ` on the previous flow: `μ ← (1−λ)·rollout(π) + λ·μ`.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            damping: 0.0,
        }
    }
}

/// An entropy-regularised mean-field Nash equilibrium for one context.
#[derive(Debug, Clone)]
pub struct Ermfne {
    pub mean_field_flow: MeanFieldFlow,
    pub policy_flow: PolicyFlow,
    /// Context index.
    pub context: usize,
    pub iterations_used: usize,
    pub final_residual: f64,
}

/// Alternates soft best response and forward rollout until the flow is
/// consistent with its own best response.
///
/// Starts from the rollout of the uniform policy. Each iteration computes
/// `π = BR(μ)`; if `consistency_residual(μ, π) ≤ tol` the pair is returned as is
/// (so `BR(μ*) = π*` holds exactly), otherwise `μ` moves toward `rollout(π)`.
pub fn solve_ermfne(env: &dyn TabularEnv, context: usize, config: &SolverConfig) -> Result<Ermfne> {
    check_context(env, context)?;
    if !(config.tol > 0.0) {
        return Err(Error::Config(format!(
            "tolerance must be positive, got {}",
            config.tol
        )));
    }
    if !(0.0..1.0).contains(&config.damping) {
        return Err(Error::Config(format!(
            "damping must lie in [0,1), got {}",
            config.damping
        )));
    }
    let horizon = env.horizon();
    let mut mf = rollout(
        env,
        &PolicyFlow::uniform(horizon, env.num_states(), env.num_actions()),
    )?;
    let mut residual = f64::INFINITY;
    for iteration in 1..=config.max_iter {
        let pf = soft_best_response(env, &mf, context)?;
        residual = consistency_residual(&mf, &pf, env)?;
        if !residual.is_finite() {
            return Err(Error::NonFinite("fixed-point residual"));
        }
        if residual <= config.tol {
            return Ok(Ermfne {
                mean_field_flow: mf,
                policy_flow: pf,
                context,
                iterations_used: iteration,
                final_residual: residual,
            });
        }
        let next = rollout(env, &pf)?;
        mf = if config.damping > 0.0 {
            let fields = next
                .fields()
                .iter()
                .zip(mf.fields())
                .map(|(n, o)| {
                    let mixed = n
                        .probs()
                        .iter()
                        .zip(o.probs())
                        .map(|(a, b)| (1.0 - config.damping) * a + config.damping * b)
                        .collect();
                    MeanField::normalized(mixed)
                })
                .collect::<Result<Vec<_>>>()?;
            MeanFieldFlow::new(fields)?
        } else {
            next
        };
    }
    Err(Error::NonConvergence {
        iterations: config.max_iter,
        residual,
    })
}

/// Solves every context of the environment.
pub fn solve_all(env: &dyn TabularEnv, config: &SolverConfig) -> Result<Vec<Ermfne>> {
    (0..env.num_contexts())
        .map(|m| solve_ermfne(env, m, config))
        .collect()
}

/// Expert trajectories with their generating contexts kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationSet {
    trajectories: Vec<Trajectory>,
    labels: Option<Vec<usize>>,
    prior: Vec<f64>,
    horizon: usize,
}

impl DemonstrationSet {
    /// Splits labelled trajectories into observed steps and evaluation-only labels.
    pub fn from_labelled(
        trajectories: Vec<Trajectory>,
        prior: Vec<f64>,
        horizon: usize,
    ) -> Result<Self> {
        let labels = trajectories
            .iter()
            .map(|t| {
                t.hidden_context
                    .ok_or(Error::Empty("trajectory context label"))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = Self::from_observed(trajectories, prior, horizon)?;
        set.labels = Some(labels);
        Ok(set)
    }

    /// Demonstrations whose contexts are unknown.
    pub fn from_observed(
        trajectories: Vec<Trajectory>,
        prior: Vec<f64>,
        horizon: usize,
    ) -> Result<Self> {
        if let Some(bad) = trajectories.iter().find(|t| t.horizon() != horizon) {
            return Err(Error::DimensionMismatch {
                what: "demonstration horizon",
                expected: horizon,
                got: bad.horizon(),
            });
        }
        Ok(Self {
            trajectories: trajectories.iter().map(Trajectory::observed).collect(),
            labels: None,
            prior,
            horizon,
        })
    }

    /// Training-facing view: trajectories without context labels.
    pub fn observed(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Evaluation-only ground-truth contexts, if known.
    pub fn evaluation_labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Trajectories with labels re-attached, for evaluation files.
    pub fn labelled(&self) -> Vec<Trajectory> {
        match &self.labels {
            Some(labels) => self
                .trajectories
                .iter()
                .zip(labels)
                .map(|(t, &m)| Trajectory::with_context(t.steps.clone(), m))
                .collect(),
            None => self.trajectories.clone(),
        }
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Keeps the listed trajectories (and their labels) in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            trajectories: indices
                .iter()
                .map(|&i| self.trajectories[i].clone())
                .collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            prior: self.prior.clone(),
            horizon: self.horizon,
        }
    }
}

/// Draws `m ~ prior` per trajectory and samples it under `(μ_E(·|m), π_E(·|m))`.
pub fn generate_demonstrations<R: Rng + ?Sized>(
    env: &dyn TabularEnv,
    equilibria: &[Ermfne],
    prior: &[f64],
    count: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<DemonstrationSet> {
    if equilibria.len() != prior.len() {
        return Err(Error::DimensionMismatch {
            what: "prior length vs equilibria",
            expected: equilibria.len(),
            got: prior.len(),
        });
    }
    MeanField::new(prior.to_vec())
        .map_err(|_| Error::Config("prior is not a probability vector".into()))?;
    for eq in equilibria {
        if eq.mean_field_flow.horizon() != horizon || eq.policy_flow.horizon() != horizon {
            return Err(Error::DimensionMismatch {
                what: "equilibrium horizon",
                expected: horizon,
                got: eq.mean_field_flow.horizon(),
            });
        }
        if eq.mean_field_flow.num_states() != env.num_states()
            || eq.policy_flow.num_actions() != env.num_actions()
        {
            return Err(Error::DimensionMismatch {
                what: "equilibrium shape",
                expected: env.num_states(),
                got: eq.mean_field_flow.num_states(),
            });
        }
    }
    let mut trajectories = Vec::with_capacity(count);
    for _ in 0..count {
        let m = sample_categorical(prior, rng);
        let eq = &equilibria[m];
        let mut tau = sample_with_flows(env, &eq.mean_field_flow, &eq.policy_flow, rng);
        tau.hidden_context = Some(m);
        trajectories.push(tau);
    }
    DemonstrationSet::from_labelled(trajectories, prior.to_vec(), horizon)
}

/// Writes `context,t,state,mu` rows for each equilibrium.
pub fn write_mean_field_csv<W: Write>(writer: W, equilibria: &[Ermfne]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["context", "t", "state", "mu"])?;
    for eq in equilibria {
        for (t, mu) in eq.mean_field_flow.fields().iter().enumerate() {
            for (s, p) in mu.probs().iter().enumerate() {
                w.write_record(&[
                    eq.context.to_string(),
                    t.to_string(),
                    s.to_string(),
                    format_f64(*p),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `context,t,state,action,pi` rows for each equilibrium.
pub fn write_policy_csv<W: Write>(writer: W, equilibria: &[Ermfne]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["context", "t", "state", "action", "pi"])?;
    for eq in equilibria {
        for (t, slice) in eq.policy_flow.slices().iter().enumerate() {
            for s in 0..slice.num_states() {
                for (a, p) in slice.row(s).iter().enumerate() {
                    w.write_record(&[
                        eq.context.to_string(),
                        t.to_string(),
                        s.to_string(),
                        a.to_string(),
                        format_f64(*p),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Round-trip-exact float formatting.
pub fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

fn parse_usize(field: Option<&str>, line: usize) -> Result<usize> {
    field
        .ok_or_else(|| Error::Parse(format!("row {line}: missing column")))?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("row {line}: {e}")))
}

fn parse_f64(field: Option<&str>, line: usize) -> Result<f64> {
    field
        .ok_or_else(|| Error::Parse(format!("row {line}: missing column")))?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("row {line}: {e}")))
}

/// Reads the two equilibrium files back into `(flow, policy)` pairs indexed by context.
pub fn read_equilibria_csv<R1: Read, R2: Read>(
    mean_field: R1,
    policy: R2,
) -> Result<Vec<(MeanFieldFlow, PolicyFlow)>> {
    // context → t → state → value
    let mut mus: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut rdr = csv::Reader::from_reader(mean_field);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let (m, t, s) = (
            parse_usize(rec.get(0), i + 2)?,
            parse_usize(rec.get(1), i + 2)?,
            parse_usize(rec.get(2), i + 2)?,
        );
        let p = parse_f64(rec.get(3), i + 2)?;
        let per_t = grow(&mut mus, m);
        if per_t.len() <= t {
            per_t.resize_with(t + 1, Vec::new);
        }
        let row = &mut per_t[t];
        if row.len() <= s {
            row.resize(s + 1, 0.0);
        }
        row[s] = p;
    }
    // context → t → state → action → value
    let mut pis: Vec<Vec<Vec<Vec<f64>>>> = Vec::new();
    let mut rdr = csv::Reader::from_reader(policy);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let (m, t, s, a) = (
            parse_usize(rec.get(0), line)?,
            parse_usize(rec.get(1), line)?,
            parse_usize(rec.get(2), line)?,
            parse_usize(rec.get(3), line)?,
        );
        let p = parse_f64(rec.get(4), line)?;
        let per_t = grow(&mut pis, m);
        if per_t.len() <= t {
            per_t.resize_with(t + 1, Vec::new);
        }
        let per_s = &mut per_t[t];
        if per_s.len() <= s {
            per_s.resize_with(s + 1, Vec::new);
        }
        let row = &mut per_s[s];
        if row.len() <= a {
            row.resize(a + 1, 0.0);
        }
        row[a] = p;
    }
    if mus.len() != pis.len() {
        return Err(Error::Parse(format!(
            "mean-field file has {} contexts but policy file has {}",
            mus.len(),
            pis.len()
        )));
    }
    mus.into_iter()
        .zip(pis)
        .map(|(mu_t, pi_t)| {
            let mf = MeanFieldFlow::new(
                mu_t.into_iter()
                    .map(MeanField::normalized)
                    .collect::<Result<_>>()?,
            )?;
            let pf = PolicyFlow::new(
                pi_t.into_iter()
                    .map(PolicySlice::new)
                    .collect::<Result<_>>()?,
            )?;
            Ok((mf, pf))
        })
        .collect()
}

fn grow<T: Default>(v: &mut Vec<T>, index: usize) -> &mut T {
    if v.len() <= index {
        v.resize_with(index + 1, T::default);
    }
    &mut v[index]
}
