//! Pricing experiment: learned driver behaviour against the empirical-model
//! baseline.
//!
//! Each policy is scored per driver over the horizon under the true
//! context-conditioned profit, averaged over the context prior:
//!
//! ```text
//! profit  = Σ_m p(m) E[Σ_t r(sᵗ, aᵗ, μᵗ, m)]
//! served  = Σ_m p(m) E[Σ_t ρ(target(sᵗ, aᵗ), μᵗ)]
//! decay_rate           = served_L / served_B − 1
//! profit_increase_rate = (profit_L − profit_B) / |profit_B|
//! fare_delta_per_ride  = profit_L / served_L − profit_B / served_B
//! ```
//!
//! The learned policy for true context `m` is the equilibrium of the learned
//! reward in the learned context matched to `m` on labelled held-out demos.
//! The baseline is the equilibrium of the context-blind kernel, re-solved at
//! every price cap.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::GridModel;
use super::pricing::{ActionSpace, DefaultKernel, KernelParams, PricingEnv, DEFAULT_HORIZON};
use crate::error::{Error, Result};
use crate::metrics::expected_return;
use crate::mfg::{MeanFieldFlow, PolicyFlow, TabularEnv};
use crate::pemmfirl::{assign_contexts, learned_equilibria};
use crate::solver::{
    format_f64, generate_demonstrations, solve_ermfne, DemonstrationSet, Ermfne, SolverConfig,
};
use crate::training::{train, Algorithm, TrainConfig};

/// Published pricing results on the original trip records: `(η, decay %, profit increase %, fare delta $)`.
pub const PUBLISHED_PRICING_RESULTS: [(f64, f64, f64, f64); 4] = [
    (5.0, -0.4, 2.8, 0.1308),
    (10.0, -0.5, 2.3, 0.1074),
    (15.0, -0.6, 3.4, 0.1589),
    (20.0, -0.7, 3.1, 0.1448),
];

/// Reference rows with the caveat that they need the original trip records.
pub fn published_results_text() -> String {
    let mut out = String::from("reference values not checkable without dataset\n");
    out.push_str("eta,decay_rate,profit_increase_rate,fare_delta_per_ride\n");
    for (eta, decay, inc, fare) in PUBLISHED_PRICING_RESULTS {
        out.push_str(&format!("{eta},{}%,+{inc}%,+${fare}\n", decay));
    }
    out
}

/// Damped iteration for the congested pricing game, whose plain best-response
/// iteration oscillates.
pub fn pricing_solver() -> SolverConfig {
    SolverConfig {
        tol: 1e-8,
        max_iter: 5000,
        damping: 0.9,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PricingExperimentConfig {
    /// Price caps at which the learned and baseline policies are compared.
    pub etas: Vec<f64>,
    pub horizon: usize,
    pub actions: ActionSpace,
    pub kernel: KernelParams,
    pub prior: Vec<f64>,
    pub num_demos: usize,
    pub num_heldout: usize,
    /// Seed of the demonstration stream, shared by every training seed.
    pub demo_seed: u64,
    pub train: TrainConfig,
    pub algorithm: Algorithm,
    pub solver: SolverConfig,
}

impl Default for PricingExperimentConfig {
    fn default() -> Self {
        Self {
            etas: vec![5.0, 10.0, 15.0, 20.0],
            horizon: DEFAULT_HORIZON,
            actions: ActionSpace::Radius(1),
            kernel: KernelParams::default(),
            prior: vec![0.5, 0.5],
            num_demos: 200,
            num_heldout: 100,
            demo_seed: 1,
            train: TrainConfig::default(),
            algorithm: Algorithm::Pemmfirl,
            solver: pricing_solver(),
        }
    }
}

/// Per-driver profit and served passengers of one policy profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyProfit {
    pub profit: f64,
    pub served: f64,
}

impl PolicyProfit {
    pub fn per_ride(&self) -> f64 {
        if self.served > 0.0 {
            self.profit / self.served
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PricingRow {
    pub eta: f64,
    pub decay_rate: f64,
    pub profit_increase_rate: f64,
    pub fare_delta_per_ride: f64,
    pub learned: PolicyProfit,
    pub baseline: PolicyProfit,
}

impl PricingRow {
    pub fn compare(eta: f64, baseline: PolicyProfit, learned: PolicyProfit) -> Self {
        let rel = |l: f64, b: f64| if b != 0.0 { (l - b) / b.abs() } else { 0.0 };
        Self {
            eta,
            decay_rate: rel(learned.served, baseline.served),
            profit_increase_rate: rel(learned.profit, baseline.profit),
            fare_delta_per_ride: learned.per_ride() - baseline.per_ride(),
            learned,
            baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PricingReport {
    pub algorithm: Algorithm,
    pub seed: u64,
    /// `learned[m]`: learned context used for true context `m`.
    pub mapping: Vec<usize>,
    /// Scores at the model's own price cap.
    pub expert: PolicyProfit,
    pub learned: PolicyProfit,
    pub baseline: PolicyProfit,
    pub inference_accuracy: Option<f64>,
    pub rows: Vec<PricingRow>,
}

/// Expected matched rides per driver, `E[Σ_{t<T} ρ(target(sᵗ,aᵗ), μᵗ)]`.
pub fn expected_served(env: &PricingEnv, mf: &MeanFieldFlow, pf: &PolicyFlow) -> Result<f64> {
    let (ns, na) = (env.num_states(), env.num_actions());
    if mf.num_states() != ns
        || pf.num_states() != ns
        || pf.num_actions() != na
        || mf.horizon() != pf.horizon()
    {
        return Err(Error::DimensionMismatch {
            what: "served-passenger shapes",
            expected: ns,
            got: mf.num_states(),
        });
    }
    let mut nu = env.initial_mean_field().probs().to_vec();
    let mut kernel = vec![0.0; ns];
    let mut served = 0.0;
    for t in 0..mf.horizon() {
        let mu = mf.at(t);
        let mut next = vec![0.0; ns];
        for s in (0..ns).filter(|&s| nu[s] > 0.0) {
            for a in 0..na {
                let w = nu[s] * pf.at(t).prob(s, a);
                if w == 0.0 {
                    continue;
                }
                served += w * env.match_probability(env.target(s, a), mu);
                env.transition(s, a, mu, &mut kernel);
                next.iter_mut().zip(&kernel).for_each(|(n, k)| *n += w * k);
            }
        }
        nu = next;
    }
    Ok(served)
}

/// Scores `profiles[m]` (the equilibrium followed by drivers of true context
/// `m`) under the context-conditioned game.
pub fn score_policies(
    env: &PricingEnv,
    profiles: &[&Ermfne],
    prior: &[f64],
) -> Result<PolicyProfit> {
    if env.is_blind() || profiles.len() != env.num_contexts() || prior.len() != profiles.len() {
        return Err(Error::DimensionMismatch {
            what: "scored contexts",
            expected: env.num_contexts(),
            got: profiles.len(),
        });
    }
    let mut out = PolicyProfit {
        profit: 0.0,
        served: 0.0,
    };
    for (m, (eq, &p)) in profiles.iter().zip(prior).enumerate() {
        out.profit += p * expected_return(env, &eq.mean_field_flow, &eq.policy_flow, m)?;
        out.served += p * expected_served(env, &eq.mean_field_flow, &eq.policy_flow)?;
    }
    Ok(out)
}

fn solve_with_fallback(
    env: &dyn TabularEnv,
    context: usize,
    solver: &SolverConfig,
) -> Result<Ermfne> {
    match solve_ermfne(env, context, solver) {
        Err(Error::NonConvergence { residual, .. }) if solver.damping == 0.0 => {
            log::warn!("{} context {context}: undamped solve stalled at {residual:e}; retrying with damping 0.5", env.name());
            solve_ermfne(
                env,
                context,
                &SolverConfig {
                    damping: 0.5,
                    ..*solver
                },
            )
        }
        other => other,
    }
}

/// Equilibrium of the empirical model with the context-blind kernel.
pub fn baseline_equilibrium(env: &PricingEnv, solver: &SolverConfig) -> Result<Ermfne> {
    solve_with_fallback(&env.blind(), 0, solver)
}

/// Builds the context-conditioned game of `config` on `model`.
pub fn pricing_env(model: &GridModel, config: &PricingExperimentConfig) -> Result<PricingEnv> {
    let kernel = DefaultKernel::new(config.kernel.clone(), model)?;
    PricingEnv::new(
        model.clone(),
        Arc::new(kernel),
        config.actions,
        config.horizon,
    )
}

/// Everything that does not depend on the training seed: the game, expert
/// equilibria, demonstrations and the baseline at every price cap.
#[derive(Debug, Clone)]
pub struct PricingBench {
    pub env: PricingEnv,
    pub experts: Vec<Ermfne>,
    pub demos: DemonstrationSet,
    pub heldout: DemonstrationSet,
    pub baseline: Ermfne,
    /// `(η, game at η, baseline equilibrium at η)` for each configured cap.
    pub sweep: Vec<(f64, PricingEnv, Ermfne)>,
}

/// Solves the experts and baselines and draws the demonstrations.
pub fn prepare_bench(model: &GridModel, config: &PricingExperimentConfig) -> Result<PricingBench> {
    let env = pricing_env(model, config)?;
    if config.prior.len() != env.num_contexts() {
        return Err(Error::DimensionMismatch {
            what: "context prior",
            expected: env.num_contexts(),
            got: config.prior.len(),
        });
    }
    let experts = (0..env.num_contexts())
        .map(|m| solve_with_fallback(&env, m, &config.solver))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.demo_seed);
    let demos = generate_demonstrations(
        &env,
        &experts,
        &config.prior,
        config.num_demos,
        config.horizon,
        &mut rng,
    )?;
    let heldout = generate_demonstrations(
        &env,
        &experts,
        &config.prior,
        config.num_heldout,
        config.horizon,
        &mut rng,
    )?;
    let baseline = baseline_equilibrium(&env, &config.solver)?;
    let sweep = config
        .etas
        .iter()
        .map(|&eta| {
            let env_eta = env.with_eta(eta)?;
            let b = baseline_equilibrium(&env_eta, &config.solver)?;
            Ok((eta, env_eta, b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PricingBench {
        env,
        experts,
        demos,
        heldout,
        baseline,
        sweep,
    })
}

/// Trains `config.algorithm` with `config.train.seed` on the bench and scores
/// the learned policies against the baseline.
pub fn run_on_bench(
    bench: &PricingBench,
    config: &PricingExperimentConfig,
) -> Result<PricingReport> {
    let env = &bench.env;
    let nm = env.num_contexts();
    let outcome = train(env, bench.demos.observed(), &config.train, config.algorithm)?;
    let learned_eqs = learned_equilibria(env, &outcome.reward, &config.solver)?;
    let (mapping, accuracy) = match &outcome.inference {
        Some(q) => {
            let a = assign_contexts(q, &bench.heldout.labelled(), nm)?;
            (a.learned, Some(a.accuracy))
        }
        None => (vec![0; nm], None),
    };
    let learned_profile: Vec<&Ermfne> = mapping.iter().map(|&k| &learned_eqs[k]).collect();
    let expert_profile: Vec<&Ermfne> = bench.experts.iter().collect();

    let expert = score_policies(env, &expert_profile, &config.prior)?;
    let learned = score_policies(env, &learned_profile, &config.prior)?;
    let baseline = score_policies(env, &vec![&bench.baseline; nm], &config.prior)?;
    let rows = bench
        .sweep
        .iter()
        .map(|(eta, env_eta, base_eta)| {
            let b = score_policies(env_eta, &vec![base_eta; nm], &config.prior)?;
            let l = score_policies(env_eta, &learned_profile, &config.prior)?;
            Ok(PricingRow::compare(*eta, b, l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PricingReport {
        algorithm: config.algorithm,
        seed: config.train.seed,
        mapping,
        expert,
        learned,
        baseline,
        inference_accuracy: accuracy,
        rows,
    })
}

/// Runs the full pipeline for `config.train.seed`.
pub fn run_pricing_experiment(
    model: &GridModel,
    config: &PricingExperimentConfig,
) -> Result<PricingReport> {
    run_on_bench(&prepare_bench(model, config)?, config)
}

/// `eta,decay_rate,profit_increase_rate,fare_delta_per_ride`.
pub fn write_pricing_csv<W: Write>(writer: W, rows: &[PricingRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "eta",
        "decay_rate",
        "profit_increase_rate",
        "fare_delta_per_ride",
    ])?;
    for r in rows {
        w.write_record(&[
            format_f64(r.eta),
            format_f64(r.decay_rate),
            format_f64(r.profit_increase_rate),
            format_f64(r.fare_delta_per_ride),
        ])?;
    }
    w.flush()?;
    Ok(())
}
