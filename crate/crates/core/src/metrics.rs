//! Comparison of learned and expert equilibria: policy deviation and the
//! expected-return gap under the ground-truth reward.
//!
//! ```text
//! deviation = Σ_m p(m) Σ_t Σ_s KL(π_Eᵗ(·|s,m) ‖ π_Lᵗ(·|s,m))
//! R(μ, π, m) = Σ_{t<T} Σ_{s,a} νᵗ(s) πᵗ(a|s) r(s, a, μᵗ, m)
//! gap = |Σ_m p(m) (R_E(m) − R_L(m))|
//! ```
//!
//! `νᵗ` is propagated exactly from `μ⁰` with transitions evaluated at the
//! pair's own mean field, so no sampling enters either metric.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfg::{MeanField, MeanFieldFlow, PolicyFlow, TabularEnv};
use crate::solver::{format_f64, Ermfne};

/// `KL(p ‖ q)`; `+∞` when `q` is zero where `p` has mass.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| {
            if *qi > 0.0 {
                pi * (pi / qi).ln()
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

fn check_shapes(expert: &PolicyFlow, learned: &PolicyFlow) -> Result<()> {
    if expert.horizon() != learned.horizon() {
        return Err(Error::DimensionMismatch {
            what: "policy horizon",
            expected: expert.horizon(),
            got: learned.horizon(),
        });
    }
    if expert.num_states() != learned.num_states() || expert.num_actions() != learned.num_actions()
    {
        return Err(Error::DimensionMismatch {
            what: "policy shape",
            expected: expert.num_states() * expert.num_actions(),
            got: learned.num_states() * learned.num_actions(),
        });
    }
    Ok(())
}

/// `KL(π_Eᵗ(·|s) ‖ π_Lᵗ(·|s))` per time slice, summed over states.
pub fn policy_deviation_per_step(expert: &PolicyFlow, learned: &PolicyFlow) -> Result<Vec<f64>> {
    check_shapes(expert, learned)?;
    Ok(expert
        .slices()
        .iter()
        .zip(learned.slices())
        .map(|(pe, pl)| {
            (0..pe.num_states())
                .map(|s| kl_divergence(pe.row(s), pl.row(s)))
                .sum()
        })
        .collect())
}

/// `Σ_t Σ_s KL(π_Eᵗ(·|s) ‖ π_Lᵗ(·|s))` for one context.
pub fn policy_deviation_single(expert: &PolicyFlow, learned: &PolicyFlow) -> Result<f64> {
    Ok(policy_deviation_per_step(expert, learned)?.iter().sum())
}

fn check_prior(prior: &[f64], n: usize) -> Result<()> {
    if prior.len() != n {
        return Err(Error::DimensionMismatch {
            what: "prior",
            expected: n,
            got: prior.len(),
        });
    }
    MeanField::new(prior.to_vec()).map(|_| ())
}

/// Prior-weighted policy deviation over contexts.
pub fn policy_deviation(
    expert: &[PolicyFlow],
    learned: &[PolicyFlow],
    prior: &[f64],
) -> Result<f64> {
    if learned.len() != expert.len() {
        return Err(Error::DimensionMismatch {
            what: "learned contexts",
            expected: expert.len(),
            got: learned.len(),
        });
    }
    check_prior(prior, expert.len())?;
    let mut total = 0.0;
    for ((pe, pl), w) in expert.iter().zip(learned).zip(prior) {
        if *w > 0.0 {
            total += w * policy_deviation_single(pe, pl)?;
        }
    }
    Ok(total)
}

/// Diagnostic variant weighting each `(t, s)` term by the expert mean field `μ_Eᵗ(s|m)`.
pub fn weighted_policy_deviation(
    expert: &[Ermfne],
    learned: &[PolicyFlow],
    prior: &[f64],
) -> Result<f64> {
    if learned.len() != expert.len() {
        return Err(Error::DimensionMismatch {
            what: "learned contexts",
            expected: expert.len(),
            got: learned.len(),
        });
    }
    check_prior(prior, expert.len())?;
    let mut total = 0.0;
    for ((eq, pl), w) in expert.iter().zip(learned).zip(prior) {
        check_shapes(&eq.policy_flow, pl)?;
        if *w == 0.0 {
            continue;
        }
        for (t, (pe, pls)) in eq.policy_flow.slices().iter().zip(pl.slices()).enumerate() {
            let mu = eq.mean_field_flow.at(t);
            for s in 0..pe.num_states() {
                if mu.get(s) > 0.0 {
                    total += w * mu.get(s) * kl_divergence(pe.row(s), pls.row(s));
                }
            }
        }
    }
    Ok(total)
}

/// Exact `E[Σ_{t<T} r(sᵗ, aᵗ, μᵗ, m)]` by forward propagation of state marginals.
pub fn expected_return(
    env: &dyn TabularEnv,
    mf: &MeanFieldFlow,
    pf: &PolicyFlow,
    context: usize,
) -> Result<f64> {
    let (ns, na) = (env.num_states(), env.num_actions());
    if mf.num_states() != ns || pf.num_states() != ns || pf.num_actions() != na {
        return Err(Error::DimensionMismatch {
            what: "evaluation shapes",
            expected: ns,
            got: mf.num_states(),
        });
    }
    if mf.horizon() != pf.horizon() {
        return Err(Error::DimensionMismatch {
            what: "evaluation horizon",
            expected: mf.horizon(),
            got: pf.horizon(),
        });
    }
    if context >= env.num_contexts() {
        return Err(Error::IndexOutOfRange {
            what: "context",
            index: context,
            size: env.num_contexts(),
        });
    }
    let mut nu = env.initial_mean_field().probs().to_vec();
    let mut rewards = vec![0.0; ns * na];
    let mut kernel = vec![0.0; ns];
    let mut total = 0.0;
    for t in 0..mf.horizon() {
        let mu = mf.at(t);
        let policy = pf.at(t);
        env.fill_rewards(mu, context, &mut rewards);
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if nu[s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let w = nu[s] * policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                total += w * rewards[s * na + a];
                env.transition(s, a, mu, &mut kernel);
                for (n, k) in next.iter_mut().zip(&kernel) {
                    *n += w * k;
                }
            }
        }
        nu = next;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("expected return"));
    }
    Ok(total)
}

/// `|Σ_m p(m)(R_E(m) − R_L(m))|`, where `learned[m]` is the learned
/// equilibrium assigned to true context `m`.
pub fn expected_return_gap(
    env: &dyn TabularEnv,
    expert: &[Ermfne],
    learned: &[Ermfne],
    prior: &[f64],
) -> Result<f64> {
    if learned.len() != expert.len() {
        return Err(Error::DimensionMismatch {
            what: "learned contexts",
            expected: expert.len(),
            got: learned.len(),
        });
    }
    check_prior(prior, expert.len())?;
    let mut diff = 0.0;
    for (m, ((e, l), w)) in expert.iter().zip(learned).zip(prior).enumerate() {
        let re = expected_return(env, &e.mean_field_flow, &e.policy_flow, m)?;
        let rl = expected_return(env, &l.mean_field_flow, &l.policy_flow, m)?;
        diff += w * (re - rl);
    }
    Ok(diff.abs())
}

/// Metrics for one true context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBreakdown {
    pub context: usize,
    /// Learned context whose equilibrium was compared against this one.
    pub learned_context: usize,
    pub policy_deviation: f64,
    pub expert_return: f64,
    pub learned_return: f64,
}

/// Evaluation of one trained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub policy_deviation: f64,
    pub weighted_policy_deviation: f64,
    pub expected_return_gap: f64,
    /// Fraction of held-out demonstrations whose inferred context matches, if measured.
    pub inference_accuracy: Option<f64>,
    pub per_context: Vec<ContextBreakdown>,
    pub wall_ms: u64,
}

/// Header of the run-level report CSV.
pub const REPORT_HEADER: [&str; 7] = [
    "seed",
    "policy_deviation",
    "weighted_policy_deviation",
    "expected_return_gap",
    "inference_accuracy",
    "wall_ms",
    "per_context",
];

impl EvaluationReport {
    /// Builds the report from expert equilibria and learned equilibria already
    /// assigned to true contexts.
    pub fn compute(
        env: &dyn TabularEnv,
        expert: &[Ermfne],
        learned: &[Ermfne],
        learned_contexts: &[usize],
        prior: &[f64],
        seed: u64,
    ) -> Result<Self> {
        let learned_policies: Vec<PolicyFlow> =
            learned.iter().map(|e| e.policy_flow.clone()).collect();
        let expert_policies: Vec<PolicyFlow> =
            expert.iter().map(|e| e.policy_flow.clone()).collect();
        let mut per_context = Vec::with_capacity(expert.len());
        for (m, (e, l)) in expert.iter().zip(learned).enumerate() {
            per_context.push(ContextBreakdown {
                context: m,
                learned_context: learned_contexts.get(m).copied().unwrap_or(m),
                policy_deviation: policy_deviation_single(&e.policy_flow, &l.policy_flow)?,
                expert_return: expected_return(env, &e.mean_field_flow, &e.policy_flow, m)?,
                learned_return: expected_return(env, &l.mean_field_flow, &l.policy_flow, m)?,
            });
        }
        Ok(Self {
            seed,
            policy_deviation: policy_deviation(&expert_policies, &learned_policies, prior)?,
            weighted_policy_deviation: weighted_policy_deviation(expert, &learned_policies, prior)?,
            expected_return_gap: expected_return_gap(env, expert, learned, prior)?,
            inference_accuracy: None,
            per_context,
            wall_ms: 0,
        })
    }

    /// One CSV row matching [`REPORT_HEADER`]; per-context values are packed as
    /// `m:learned:deviation:expert_return:learned_return` joined by `;`.
    pub fn csv_row(&self) -> Vec<String> {
        let per = self
            .per_context
            .iter()
            .map(|c| {
                format!(
                    "{}:{}:{}:{}:{}",
                    c.context,
                    c.learned_context,
                    format_f64(c.policy_deviation),
                    format_f64(c.expert_return),
                    format_f64(c.learned_return)
                )
            })
            .collect::<Vec<_>>()
            .join(";");
        vec![
            self.seed.to_string(),
            format_f64(self.policy_deviation),
            format_f64(self.weighted_policy_deviation),
            format_f64(self.expected_return_gap),
            self.inference_accuracy.map(format_f64).unwrap_or_default(),
            self.wall_ms.to_string(),
            per,
        ]
    }
}

/// Writes reports to a CSV, with the header only when `with_header`.
pub fn write_reports_csv<W: Write>(
    writer: W,
    reports: &[EvaluationReport],
    with_header: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if with_header {
        w.write_record(REPORT_HEADER)?;
    }
    for r in reports {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::VirusEnv;
    use crate::mfg::{rollout, PolicySlice};
    use crate::solver::{solve_all, SolverConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn kl_examples_and_asymmetry() {
        let e = [0.5, 0.5];
        let l = [0.9, 0.1];
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(kl_divergence(&e, &l), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.5108256, epsilon = 1e-6);
        assert!((kl_divergence(&l, &e) - expected).abs() > 1e-3);
        assert_eq!(kl_divergence(&e, &e), 0.0);
        assert_eq!(kl_divergence(&e, &[1.0, 0.0]), f64::INFINITY);
    }

    #[test]
    fn single_slice_deviation() {
        let expert = PolicyFlow::uniform(1, 1, 2);
        let learned = PolicyFlow::new(vec![
            PolicySlice::new(vec![vec![0.9, 0.1]]).unwrap(),
            PolicySlice::uniform(1, 2),
        ])
        .unwrap();
        let d = policy_deviation(std::slice::from_ref(&expert), std::slice::from_ref(&learned), &[1.0]).unwrap();
        assert_abs_diff_eq!(d, 0.5108256, epsilon = 1e-6);
        assert_eq!(
            policy_deviation(std::slice::from_ref(&expert), std::slice::from_ref(&expert), &[1.0]).unwrap(),
            0.0
        );
    }

    #[test]
    fn deviation_zero_on_match_and_gap_zero_on_match() {
        let env = VirusEnv::new(15);
        let eqs = solve_all(&env, &SolverConfig::default()).unwrap();
        let pol: Vec<_> = eqs.iter().map(|e| e.policy_flow.clone()).collect();
        assert_eq!(policy_deviation(&pol, &pol, &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(
            expected_return_gap(&env, &eqs, &eqs, &[0.5, 0.5]).unwrap(),
            0.0
        );
    }

    #[test]
    fn uniform_policy_equilibrium_has_positive_gap() {
        let env = VirusEnv::new(15);
        let eqs = solve_all(&env, &SolverConfig::default()).unwrap();
        let uniform = PolicyFlow::uniform(15, 2, 2);
        let mf = rollout(&env, &uniform).unwrap();
        let re = expected_return(&env, &eqs[1].mean_field_flow, &eqs[1].policy_flow, 1).unwrap();
        let ru = expected_return(&env, &mf, &uniform, 1).unwrap();
        assert!((re - ru).abs() > 1e-6);
    }

    #[test]
    fn marginal_propagation_matches_mean_field_on_equilibrium() {
        // On a consistent pair the propagated marginals are the mean field itself,
        // so the return equals Σ_t Σ_s μᵗ(s) Σ_a πᵗ(a|s) r.
        let env = VirusEnv::new(10);
        let tight = SolverConfig {
            tol: 1e-26,
            ..SolverConfig::default()
        };
        let eq = &solve_all(&env, &tight).unwrap()[0];
        let mut direct = 0.0;
        for t in 0..10 {
            let mu = eq.mean_field_flow.at(t);
            for s in 0..2 {
                for a in 0..2 {
                    direct += mu.get(s) * eq.policy_flow.at(t).prob(s, a) * env.reward(s, a, mu, 0);
                }
            }
        }
        let r = expected_return(&env, &eq.mean_field_flow, &eq.policy_flow, 0).unwrap();
        assert_abs_diff_eq!(r, direct, epsilon = 1e-9);
    }

    #[test]
    fn report_csv_has_header() {
        let env = VirusEnv::new(5);
        let eqs = solve_all(&env, &SolverConfig::default()).unwrap();
        let report = EvaluationReport::compute(&env, &eqs, &eqs, &[0, 1], &[0.5, 0.5], 3).unwrap();
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &[report], true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("seed,policy_deviation,"));
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("3,0.0,0.0,0.0,,0,0:0:0.0:"));
    }
}
