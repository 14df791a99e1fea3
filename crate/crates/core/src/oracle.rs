//! Exact validation by enumeration on tiny instances.
//!
//! With every trajectory enumerable, the energy model
//!
//! ```text
//! p(τ|m) = Π_{t=0..T} μ̂ᵗ(sᵗ|m) · exp(Σ_{t<T} f(sᵗ,aᵗ,μ̂ᵗ,m)) / Z(m)
//! ```
//!
//! is computed exactly, and with it
//!
//! ```text
//! ℒ(ω,ψ) = Σ_m p(m) Σ_τ p(τ|m) log q_ψ(m|τ)
//! 𝒦(ψ)   = Σ_j (1/J) Σ_m q₀(m|τ_j) (−log p(τ_j|m)) + const
//! ```
//!
//! where the demonstrations `τ_j` define both `μ̂` and the expert marginal, and
//! the expert joint is `(1/J)·q₀(m|τ_j)` with `q₀` the inference model at the
//! point of evaluation, held fixed under perturbation. The production gradient
//! estimators are averaged over independent resamples drawn exactly from
//! `p(τ|m)` and compared with central finite differences along a random
//! direction.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;

use crate::envs::TableEnv;
use crate::error::{Error, Result};
use crate::mfairl::{exact_sampler, RewardModel};
use crate::mfg::{
    enumerate_trajectories, sample_categorical, sample_trajectory, PolicyFlow, TabularEnv,
    Trajectory,
};
use crate::pemmfirl::{
    conditional_empirical_mean_field, grad_k_psi, grad_l_omega, grad_l_psi,
    ConditionalMeanFieldEstimate, ContextInferenceModel, SampledBatch,
};

/// Cap on enumerated trajectories per instance.
pub const ORACLE_ENUMERATION_CAP: u64 = 5_000;

/// A tiny instance with enumerable trajectory space.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub env: TableEnv,
    pub reward: RewardModel,
    pub q: ContextInferenceModel,
    pub demos: Vec<Trajectory>,
    /// All `(|S||A|)^(T+1)` trajectories, in [`enumerate_trajectories`] order.
    pub space: Vec<Trajectory>,
}

/// `p(τ|m)` for every context over the enumerated space, plus the estimate it came from.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub estimate: ConditionalMeanFieldEstimate,
    pub probs: Vec<Vec<f64>>,
}

impl OracleInstance {
    /// Random sizes with `|S| ∈ {2,3}`, `|A| = 2`, `T ∈ {1,2,3}`, `|M| = 2`;
    /// demonstrations are drawn from the instance dynamics under a uniform policy.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, hidden: usize, num_demos: usize) -> Result<Self> {
        let ns = rng.gen_range(2..=3);
        let na = 2;
        let horizon = rng.gen_range(1..=3);
        Self::with_sizes(rng, ns, na, horizon, hidden, num_demos)
    }

    pub fn with_sizes<R: Rng + ?Sized>(
        rng: &mut R,
        ns: usize,
        na: usize,
        horizon: usize,
        hidden: usize,
        num_demos: usize,
    ) -> Result<Self> {
        if num_demos == 0 {
            return Err(Error::Empty("oracle demonstrations"));
        }
        let env = TableEnv::random(rng, ns, na, 2, horizon, false);
        let reward = RewardModel::new(ns, na, 2, hidden, rng)?;
        let q = ContextInferenceModel::new(ns, na, 2, hidden, rng)?;
        let uniform = PolicyFlow::uniform(horizon, ns, na);
        let demos = (0..num_demos)
            .map(|_| sample_trajectory(&env, None, &uniform, rng))
            .collect::<Result<Vec<_>>>()?;
        let space = enumerate_trajectories(ns, na, horizon, ORACLE_ENUMERATION_CAP)?;
        Ok(Self {
            env,
            reward,
            q,
            demos,
            space,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.q.num_contexts()
    }

    pub fn prior(&self) -> Vec<f64> {
        vec![1.0 / self.num_contexts() as f64; self.num_contexts()]
    }

    /// Position of `tau` in [`OracleInstance::space`].
    pub fn index_of(&self, tau: &Trajectory) -> usize {
        let na = self.env.num_actions();
        let pairs = self.env.num_states() * na;
        tau.steps
            .iter()
            .fold(0, |code, &(s, a)| code * pairs + s * na + a)
    }

    /// Exact energy model under the given reward and inference parameters.
    pub fn energy(&self, reward: &RewardModel, q: &ContextInferenceModel) -> Result<EnergyModel> {
        let estimate = conditional_empirical_mean_field(q, &self.demos)?;
        let na = self.env.num_actions();
        let probs = (0..self.num_contexts())
            .map(|m| {
                let flow = &estimate.flows[m];
                let tables = reward.tables(flow, m);
                let logw: Vec<f64> = self
                    .space
                    .iter()
                    .map(|tau| {
                        let mut lw = 0.0;
                        for (t, &(s, a)) in tau.steps.iter().enumerate() {
                            lw += flow.at(t).get(s).ln();
                            if t < tables.len() {
                                lw += tables[t][s * na + a];
                            }
                        }
                        lw
                    })
                    .collect();
                normalise_log_weights(&logw)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnergyModel { estimate, probs })
    }

    /// `ℒ` under a uniform prior.
    pub fn exact_l(&self, reward: &RewardModel, q: &ContextInferenceModel) -> Result<f64> {
        let model = self.energy(reward, q)?;
        let prior = self.prior();
        let mut total = 0.0;
        for (k, tau) in self.space.iter().enumerate() {
            let post = q.infer(tau)?;
            for m in 0..self.num_contexts() {
                let p = model.probs[m][k];
                if p > 0.0 {
                    total += prior[m] * p * post[m].ln();
                }
            }
        }
        Ok(total)
    }

    /// `𝒦` up to a constant, with the expert joint frozen at `q_expert`.
    pub fn exact_k(
        &self,
        reward: &RewardModel,
        q: &ContextInferenceModel,
        q_expert: &ContextInferenceModel,
    ) -> Result<f64> {
        let model = self.energy(reward, q)?;
        let mut total = 0.0;
        let inv = 1.0 / self.demos.len() as f64;
        for tau in &self.demos {
            let w = q_expert.infer(tau)?;
            let k = self.index_of(tau);
            for (m, wm) in w.iter().enumerate() {
                total -= inv * wm * model.probs[m][k].ln();
            }
        }
        Ok(total)
    }
}

fn normalise_log_weights(logw: &[f64]) -> Result<Vec<f64>> {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("energy-model log weights"));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Draws trajectories from an enumerated distribution.
#[derive(Debug, Clone)]
pub struct ExactSampler {
    dists: Vec<WeightedIndex<f64>>,
}

impl ExactSampler {
    pub fn new(model: &EnergyModel) -> Result<Self> {
        let dists = model
            .probs
            .iter()
            .map(|p| {
                WeightedIndex::new(p)
                    .map_err(|e| Error::Config(format!("energy model weights: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dists })
    }

    pub fn sample<'a, R: Rng + ?Sized>(
        &self,
        space: &'a [Trajectory],
        m: usize,
        rng: &mut R,
    ) -> &'a Trajectory {
        &space[self.dists[m].sample(rng)]
    }
}

/// Which gradient estimator a check concerns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    LOmega,
    LPsi,
    KPsi,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::LOmega => "dL/domega",
            Estimator::LPsi => "dL/dpsi",
            Estimator::KPsi => "dK/dpsi",
        }
    }
}

/// Monte Carlo mean of an estimator projected on a direction, against the
/// finite-difference directional derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorCheck {
    pub estimator: Estimator,
    pub finite_difference: f64,
    /// Gap between step sizes `h` and `2h`, bounding the truncation error.
    pub fd_error: f64,
    pub mean: f64,
    pub standard_error: f64,
}

impl EstimatorCheck {
    /// `|mean − fd| ≤ 3·SE + fd_error`.
    pub fn passed(&self) -> bool {
        (self.mean - self.finite_difference).abs() <= 3.0 * self.standard_error + self.fd_error
    }

    /// Deviation in units of the standard error.
    pub fn z_score(&self) -> f64 {
        (self.mean - self.finite_difference).abs() / self.standard_error.max(f64::MIN_POSITIVE)
    }
}

/// Settings for [`check_estimators`].
#[derive(Debug, Clone, Copy)]
pub struct CheckSettings {
    pub resamples: usize,
    /// Main (and reference) trajectories per resample.
    pub batch: usize,
    pub step: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            resamples: 10_000,
            batch: 8,
            step: 1e-4,
        }
    }
}

fn random_direction<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn shifted(params: &[f64], dir: &[f64], h: f64) -> Vec<f64> {
    params.iter().zip(dir).map(|(p, d)| p + h * d).collect()
}

/// Central differences at `h` and `2h`.
fn central<F: Fn(f64) -> Result<f64>>(g: F, h: f64) -> Result<(f64, f64)> {
    let d1 = (g(h)? - g(-h)?) / (2.0 * h);
    let d2 = (g(2.0 * h)? - g(-2.0 * h)?) / (4.0 * h);
    Ok((d1, (d1 - d2).abs()))
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs the three estimator checks on one instance.
pub fn check_estimators<R: Rng + ?Sized>(
    inst: &OracleInstance,
    settings: &CheckSettings,
    rng: &mut R,
) -> Result<Vec<EstimatorCheck>> {
    if settings.resamples < 2 || settings.batch == 0 {
        return Err(Error::Config(
            "need at least two resamples and a nonempty batch".into(),
        ));
    }
    let h = settings.step;
    let dir_omega = random_direction(inst.reward.net.num_params(), rng);
    let dir_psi_l = random_direction(inst.q.net.num_params(), rng);
    let dir_psi_k = random_direction(inst.q.net.num_params(), rng);

    let with_omega = |eps: f64| -> Result<RewardModel> {
        let mut r = inst.reward.clone();
        r.net
            .set_params(&shifted(inst.reward.net.params(), &dir_omega, eps))?;
        Ok(r)
    };
    let with_psi = |dir: &[f64], eps: f64| -> Result<ContextInferenceModel> {
        let mut q = inst.q.clone();
        q.net.set_params(&shifted(inst.q.net.params(), dir, eps))?;
        Ok(q)
    };
    let fd_lw = central(|e| inst.exact_l(&with_omega(e)?, &inst.q), h)?;
    let fd_lp = central(|e| inst.exact_l(&inst.reward, &with_psi(&dir_psi_l, e)?), h)?;
    let fd_kp = central(
        |e| inst.exact_k(&inst.reward, &with_psi(&dir_psi_k, e)?, &inst.q),
        h,
    )?;

    let model = inst.energy(&inst.reward, &inst.q)?;
    let sampler = ExactSampler::new(&model)?;
    let est = &model.estimate;
    let prior = inst.prior();
    let expert_post: Vec<Vec<f64>> = inst
        .demos
        .iter()
        .map(|t| inst.q.infer(t))
        .collect::<Result<_>>()?;
    let b = settings.batch;
    let mut samples = [Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..settings.resamples {
        // ℒ: contexts from the prior.
        let ctx: Vec<usize> = (0..b).map(|_| sample_categorical(&prior, rng)).collect();
        let main: Vec<Trajectory> = ctx
            .iter()
            .map(|&m| sampler.sample(&inst.space, m, rng).clone())
            .collect();
        let reference: Vec<Trajectory> = ctx
            .iter()
            .map(|&m| sampler.sample(&inst.space, m, rng).clone())
            .collect();
        let batch = SampledBatch {
            main: &main,
            main_contexts: &ctx,
            reference: &reference,
            reference_contexts: &ctx,
        };
        samples[0].push(dot(
            &grad_l_omega(&inst.reward, &inst.q, est, &batch)?,
            &dir_omega,
        ));
        samples[1].push(dot(
            &grad_l_psi(&inst.reward, &inst.q, est, &batch)?,
            &dir_psi_l,
        ));

        // 𝒦: expert draws with contexts from the frozen posterior, sampled
        // trajectories under those contexts.
        let picks: Vec<usize> = (0..b).map(|_| rng.gen_range(0..inst.demos.len())).collect();
        let expert: Vec<Trajectory> = picks.iter().map(|&j| inst.demos[j].clone()).collect();
        let kctx: Vec<usize> = picks
            .iter()
            .map(|&j| sample_categorical(&expert_post[j], rng))
            .collect();
        let kmain: Vec<Trajectory> = kctx
            .iter()
            .map(|&m| sampler.sample(&inst.space, m, rng).clone())
            .collect();
        let kref: Vec<Trajectory> = kctx
            .iter()
            .map(|&m| sampler.sample(&inst.space, m, rng).clone())
            .collect();
        let kbatch = SampledBatch {
            main: &kmain,
            main_contexts: &kctx,
            reference: &kref,
            reference_contexts: &kctx,
        };
        samples[2].push(dot(
            &grad_k_psi(&inst.reward, &inst.q, est, &expert, &kctx, &kbatch)?,
            &dir_psi_k,
        ));
    }
    let fds = [fd_lw, fd_lp, fd_kp];
    Ok([Estimator::LOmega, Estimator::LPsi, Estimator::KPsi]
        .into_iter()
        .zip(samples.iter())
        .zip(fds)
        .map(|((estimator, xs), (fd, fd_error))| {
            let (mean, standard_error) = mean_and_se(xs);
            EstimatorCheck {
                estimator,
                finite_difference: fd,
                fd_error,
                mean,
                standard_error,
            }
        })
        .collect())
}

/// Total variation between the sampler-induced trajectory distribution and
/// two closed forms of the energy model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerEquivalence {
    /// Against `μ⁰(s⁰)·1{feasible}·exp(Σf)/Z(s⁰)` (normalised per start state).
    pub tv_dynamics_form: f64,
    /// Against `Π_t μ̂ᵗ(sᵗ|m)·exp(Σf)/Z` (the product-of-marginals form).
    pub tv_factorized_form: f64,
}

/// Compares the distribution generated by the soft-optimal sampler under `μ̂`
/// on deterministic dynamics with the closed-form energy models, maximised over contexts.
pub fn sampler_equivalence<R: Rng + ?Sized>(
    rng: &mut R,
    num_states: usize,
    horizon: usize,
    hidden: usize,
    num_demos: usize,
) -> Result<SamplerEquivalence> {
    let na = 2;
    let env = TableEnv::random(rng, num_states, na, 2, horizon, true);
    let reward = RewardModel::new(num_states, na, 2, hidden, rng)?;
    let q = ContextInferenceModel::new(num_states, na, 2, hidden, rng)?;
    let uniform = PolicyFlow::uniform(horizon, num_states, na);
    let demos = (0..num_demos)
        .map(|_| sample_trajectory(&env, None, &uniform, rng))
        .collect::<Result<Vec<_>>>()?;
    let space = enumerate_trajectories(num_states, na, horizon, ORACLE_ENUMERATION_CAP)?;
    let est = conditional_empirical_mean_field(&q, &demos)?;
    let mut out = SamplerEquivalence {
        tv_dynamics_form: 0.0,
        tv_factorized_form: 0.0,
    };
    let mut kernel = vec![0.0; num_states];
    for m in 0..2 {
        let flow = &est.flows[m];
        let pf = exact_sampler(&env, &reward, flow, m)?;
        let tables = reward.tables(flow, m);
        let induced: Vec<f64> = space
            .iter()
            .map(|tau| crate::mfg::trajectory_log_prob(tau, flow, &pf, &env).map(f64::exp))
            .collect::<Result<_>>()?;
        let energy: Vec<f64> = space
            .iter()
            .map(|tau| {
                (0..horizon)
                    .map(|t| tables[t][tau.state(t) * na + tau.action(t)])
                    .sum::<f64>()
            })
            .collect();
        let feasible: Vec<bool> = space
            .iter()
            .map(|tau| {
                (0..horizon).all(|t| {
                    env.transition(tau.state(t), tau.action(t), flow.at(t), &mut kernel);
                    kernel[tau.state(t + 1)] == 1.0
                })
            })
            .collect();
        let mut z = vec![0.0; num_states];
        for (k, tau) in space.iter().enumerate() {
            if feasible[k] {
                z[tau.state(0)] += energy[k].exp() / na as f64;
            }
        }
        let mu0 = env.initial_mean_field();
        let dynamics_form: Vec<f64> = space
            .iter()
            .enumerate()
            .map(|(k, tau)| {
                let s0 = tau.state(0);
                if feasible[k] && mu0.get(s0) > 0.0 {
                    mu0.get(s0) * energy[k].exp() / na as f64 / z[s0]
                } else {
                    0.0
                }
            })
            .collect();
        let factor_log: Vec<f64> = space
            .iter()
            .zip(&energy)
            .map(|(tau, e)| {
                e + tau
                    .steps
                    .iter()
                    .enumerate()
                    .map(|(t, &(s, _))| flow.at(t).get(s).ln())
                    .sum::<f64>()
            })
            .collect();
        let factorized = normalise_log_weights(&factor_log)?;
        let tv =
            |a: &[f64], b: &[f64]| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        out.tv_dynamics_form = out.tv_dynamics_form.max(tv(&induced, &dynamics_form));
        out.tv_factorized_form = out.tv_factorized_form.max(tv(&induced, &factorized));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn energy_model_is_normalised_and_index_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inst = OracleInstance::random(&mut rng, 6, 5).unwrap();
        let model = inst.energy(&inst.reward, &inst.q).unwrap();
        for p in &model.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (k, tau) in inst.space.iter().enumerate() {
            assert_eq!(inst.index_of(tau), k);
        }
    }

    #[test]
    fn estimators_agree_with_finite_differences_on_one_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = OracleInstance::with_sizes(&mut rng, 2, 2, 2, 6, 5).unwrap();
        let settings = CheckSettings {
            resamples: 3000,
            ..CheckSettings::default()
        };
        for check in check_estimators(&inst, &settings, &mut rng).unwrap() {
            assert!(check.passed(), "{check:?}");
        }
    }

    #[test]
    fn sampler_matches_dynamics_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eq = sampler_equivalence(&mut rng, 2, 3, 6, 6).unwrap();
        assert!(eq.tv_dynamics_form < 1e-9, "{eq:?}");
    }
}
