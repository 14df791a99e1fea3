//! The simulated context-conditioned environments (VIRUS, MALWARE, INVEST) and
//! a small table-driven environment used for tiny exact instances.
//!
//! MALWARE and INVEST move with a random jump `s + ⌊χ·(10 − s)⌋` (INVEST
//! optionally halves the jump) with `χ ~ Uniform[0,1)`. The jump is converted
//! to its exact discrete law by measuring the preimage of each floor value:
//!
//! ```text
//! full:    P(s + k) = 1/n                       k = 0..n-1,   n = 10 - s
//! halved:  P(s + k) = min(2(k+1)/n, 1) - 2k/n   k = 0..⌈n/2⌉-1
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::mfg::{MeanField, TabularEnv};

/// Number of health/quality levels in MALWARE and INVEST.
pub const LEVELS: usize = 10;

/// `⟨μ⟩ = Σ_s s·μ(s)` for integer-labelled states.
pub fn mean_state(mu: &MeanField) -> f64 {
    mu.probs()
        .iter()
        .enumerate()
        .map(|(s, p)| s as f64 * p)
        .sum()
}

/// Exact law of `s + ⌊χ·(10−s)⌋` (or `⌊χ·(10−s)/2⌋` when `halved`), over the ten levels.
pub fn discretize_jump(s: usize, halved: bool) -> Vec<f64> {
    let mut out = vec![0.0; LEVELS];
    discretize_jump_into(s, halved, &mut out);
    out
}

fn discretize_jump_into(s: usize, halved: bool, out: &mut [f64]) {
    out.iter_mut().for_each(|p| *p = 0.0);
    let n = LEVELS - s;
    let nf = n as f64;
    if halved {
        // ⌊χn/2⌋ = k  ⇔  χ ∈ [2k/n, 2(k+1)/n) ∩ [0,1)
        let mut k = 0;
        while 2 * k < n {
            let lo = 2.0 * k as f64 / nf;
            let hi = (2.0 * (k + 1) as f64 / nf).min(1.0);
            out[s + k] = hi - lo;
            k += 1;
        }
    } else {
        for k in 0..n {
            out[s + k] = 1.0 / nf;
        }
    }
}

/// Builds one of the named environments with the constants of the simulated tasks.
pub fn build_env(name: &str, horizon: usize) -> Result<Box<dyn TabularEnv>> {
    match name.to_ascii_lowercase().as_str() {
        "virus" => Ok(Box::new(VirusEnv::new(horizon))),
        "malware" => Ok(Box::new(MalwareEnv::new(horizon))),
        "invest" => Ok(Box::new(InvestEnv::new(horizon))),
        _ => Err(Error::UnknownEnv(name.to_string())),
    }
}

/// Two-state epidemic: agents choose to go out (`U`) or keep distance (`D`).
///
/// ```text
/// r(s,a,μ,m) = −1{s=I} − m·1{a=D}
/// P(S|I,·) = 0.3,  P(I|S,U,μ) = 0.81·μ(I),  P(I|S,D) = 0
/// ```
#[derive(Debug, Clone)]
pub struct VirusEnv {
    horizon: usize,
    contexts: Vec<f64>,
    mu0: MeanField,
}

impl VirusEnv {
    pub const SUSCEPTIBLE: usize = 0;
    pub const INFECTED: usize = 1;
    pub const GO_OUT: usize = 0;
    pub const DISTANCE: usize = 1;
    pub const RECOVERY: f64 = 0.3;
    pub const CONTACT: f64 = 0.81;

    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            contexts: vec![0.5, 1.0],
            mu0: MeanField::uniform(2),
        }
    }
}

impl TabularEnv for VirusEnv {
    fn name(&self) -> &str {
        "virus"
    }
    fn num_states(&self) -> usize {
        2
    }
    fn num_actions(&self) -> usize {
        2
    }
    fn contexts(&self) -> &[f64] {
        &self.contexts
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn initial_mean_field(&self) -> &MeanField {
        &self.mu0
    }

    fn reward(&self, state: usize, action: usize, _mu: &MeanField, context: usize) -> f64 {
        let m = self.contexts[context];
        let infected = if state == Self::INFECTED { 1.0 } else { 0.0 };
        let distancing = if action == Self::DISTANCE { 1.0 } else { 0.0 };
        -infected - m * distancing
    }

    fn transition(&self, state: usize, action: usize, mu: &MeanField, out: &mut [f64]) {
        let p_infected = if state == Self::INFECTED {
            1.0 - Self::RECOVERY
        } else if action == Self::GO_OUT {
            Self::CONTACT * mu.get(Self::INFECTED)
        } else {
            0.0
        };
        out[Self::SUSCEPTIBLE] = 1.0 - p_infected;
        out[Self::INFECTED] = p_infected;
    }

    fn describe(&self) -> String {
        format!(
            "env=virus horizon={} states=2 actions=2 contexts={:?} recovery={} contact={} mu0=uniform",
            self.horizon,
            self.contexts,
            Self::RECOVERY,
            Self::CONTACT
        )
    }
}

/// Ten health levels; intervening resets to level 0, doing nothing degrades randomly.
///
/// ```text
/// r(s,a,μ,m) = −(m + ⟨μ⟩)·s/10 − α·a,   α = 0.5
/// ```
#[derive(Debug, Clone)]
pub struct MalwareEnv {
    horizon: usize,
    contexts: Vec<f64>,
    mu0: MeanField,
    pub alpha: f64,
}

impl MalwareEnv {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            contexts: vec![0.2, 0.4],
            mu0: MeanField::uniform(LEVELS),
            alpha: 0.5,
        }
    }
}

impl TabularEnv for MalwareEnv {
    fn name(&self) -> &str {
        "malware"
    }
    fn num_states(&self) -> usize {
        LEVELS
    }
    fn num_actions(&self) -> usize {
        2
    }
    fn contexts(&self) -> &[f64] {
        &self.contexts
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn initial_mean_field(&self) -> &MeanField {
        &self.mu0
    }

    fn reward(&self, state: usize, action: usize, mu: &MeanField, context: usize) -> f64 {
        let m = self.contexts[context];
        -(m + mean_state(mu)) * state as f64 / 10.0 - self.alpha * action as f64
    }

    fn transition(&self, state: usize, action: usize, _mu: &MeanField, out: &mut [f64]) {
        if action == 1 {
            out.iter_mut().for_each(|p| *p = 0.0);
            out[0] = 1.0;
        } else {
            discretize_jump_into(state, false, out);
        }
    }

    fn describe(&self) -> String {
        format!(
            "env=malware horizon={} states={} actions=2 contexts={:?} alpha={} mu0=uniform",
            self.horizon, LEVELS, self.contexts, self.alpha
        )
    }
}

/// Ten product-quality levels; investing jumps quality up, with smaller jumps
/// once the population average reaches the threshold `q`.
///
/// ```text
/// r(s,a,μ,m) = d·s/10 − c·⟨μ⟩ − m·a,   d = 0.3, c = 0.2, q = 4
/// ```
#[derive(Debug, Clone)]
pub struct InvestEnv {
    horizon: usize,
    contexts: Vec<f64>,
    mu0: MeanField,
    pub d: f64,
    pub c: f64,
    pub q: f64,
}

impl InvestEnv {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            contexts: vec![0.2, 0.5],
            mu0: MeanField::uniform(LEVELS),
            d: 0.3,
            c: 0.2,
            q: 4.0,
        }
    }
}

impl TabularEnv for InvestEnv {
    fn name(&self) -> &str {
        "invest"
    }
    fn num_states(&self) -> usize {
        LEVELS
    }
    fn num_actions(&self) -> usize {
        2
    }
    fn contexts(&self) -> &[f64] {
        &self.contexts
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn initial_mean_field(&self) -> &MeanField {
        &self.mu0
    }

    fn reward(&self, state: usize, action: usize, mu: &MeanField, context: usize) -> f64 {
        let m = self.contexts[context];
        self.d * state as f64 / 10.0 - self.c * mean_state(mu) - m * action as f64
    }

    fn transition(&self, state: usize, action: usize, mu: &MeanField, out: &mut [f64]) {
        if action == 1 {
            discretize_jump_into(state, mean_state(mu) >= self.q, out);
        } else {
            out.iter_mut().for_each(|p| *p = 0.0);
            out[state] = 1.0;
        }
    }

    fn describe(&self) -> String {
        format!(
            "env=invest horizon={} states={} actions=2 contexts={:?} d={} c={} q={} mu0=uniform",
            self.horizon, LEVELS, self.contexts, self.d, self.c, self.q
        )
    }
}

/// How a [`TableEnv`] moves agents.
#[derive(Debug, Clone)]
pub enum TableDynamics {
    /// `P(s'|s,a,μ) = (1−β)·K[s][a][s'] + β·μ(s')`.
    Mixed { kernel: Vec<f64>, beta: f64 },
    /// Deterministic `s' = (s + a + 1{μ(0) ≥ ½}) mod |S|`.
    CrowdShift,
}

/// Table-driven environment for tiny exact instances.
///
/// `r(s,a,μ,m) = base[m][s][a] + coupling[m][s][a]·μ(s)`.
#[derive(Debug, Clone)]
pub struct TableEnv {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    contexts: Vec<f64>,
    mu0: MeanField,
    base: Vec<f64>,
    coupling: Vec<f64>,
    dynamics: TableDynamics,
}

impl TableEnv {
    /// Zero reward, agents never move, single context.
    pub fn identity(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        let mut kernel = vec![0.0; num_states * num_actions * num_states];
        for s in 0..num_states {
            for a in 0..num_actions {
                kernel[(s * num_actions + a) * num_states + s] = 1.0;
            }
        }
        Self {
            num_states,
            num_actions,
            horizon,
            contexts: vec![0.0],
            mu0: MeanField::uniform(num_states),
            base: vec![0.0; num_states * num_actions],
            coupling: vec![0.0; num_states * num_actions],
            dynamics: TableDynamics::Mixed { kernel, beta: 0.0 },
        }
    }

    /// Random rewards in `[-1, 1]`, random couplings in `[-1, 1]` and either
    /// random stochastic kernels mixed with the population (`β = 0.3`) or the
    /// deterministic crowd-dependent shift. Contexts are labelled `0, 1, …`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        num_states: usize,
        num_actions: usize,
        num_contexts: usize,
        horizon: usize,
        deterministic: bool,
    ) -> Self {
        let sa = num_states * num_actions;
        let base = (0..num_contexts * sa)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let coupling = (0..num_contexts * sa)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let dynamics = if deterministic {
            TableDynamics::CrowdShift
        } else {
            let mut kernel = Vec::with_capacity(sa * num_states);
            for _ in 0..sa {
                let row: Vec<f64> = (0..num_states).map(|_| rng.gen_range(0.05..1.0)).collect();
                let sum: f64 = row.iter().sum();
                kernel.extend(row.into_iter().map(|p| p / sum));
            }
            TableDynamics::Mixed { kernel, beta: 0.3 }
        };
        let mut mu0: Vec<f64> = (0..num_states).map(|_| rng.gen_range(0.2..1.0)).collect();
        let sum: f64 = mu0.iter().sum();
        mu0.iter_mut().for_each(|p| *p /= sum);
        Self {
            num_states,
            num_actions,
            horizon,
            contexts: (0..num_contexts).map(|m| m as f64).collect(),
            mu0: MeanField::normalized(mu0).expect("positive entries"),
            base,
            coupling,
            dynamics,
        }
    }

    /// Replaces the reward tables; each is `contexts × states × actions`, row-major.
    pub fn with_rewards(mut self, base: Vec<f64>, coupling: Vec<f64>) -> Result<Self> {
        let expected = self.contexts.len() * self.num_states * self.num_actions;
        for (what, table) in [("reward base", &base), ("reward coupling", &coupling)] {
            if table.len() != expected {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    got: table.len(),
                });
            }
        }
        self.base = base;
        self.coupling = coupling;
        Ok(self)
    }

    /// Sets the number of contexts, resizing reward tables (new contexts copy context 0).
    pub fn with_contexts(mut self, num_contexts: usize) -> Self {
        let sa = self.num_states * self.num_actions;
        let base0 = self.base[..sa].to_vec();
        let coupling0 = self.coupling[..sa].to_vec();
        self.base.resize(num_contexts * sa, 0.0);
        self.coupling.resize(num_contexts * sa, 0.0);
        for m in self.contexts.len()..num_contexts {
            self.base[m * sa..(m + 1) * sa].copy_from_slice(&base0);
            self.coupling[m * sa..(m + 1) * sa].copy_from_slice(&coupling0);
        }
        self.contexts = (0..num_contexts).map(|m| m as f64).collect();
        self
    }

    pub fn with_initial(mut self, mu0: MeanField) -> Self {
        self.mu0 = mu0;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }
}

impl TabularEnv for TableEnv {
    fn name(&self) -> &str {
        "table"
    }
    fn num_states(&self) -> usize {
        self.num_states
    }
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn contexts(&self) -> &[f64] {
        &self.contexts
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn initial_mean_field(&self) -> &MeanField {
        &self.mu0
    }

    fn reward(&self, state: usize, action: usize, mu: &MeanField, context: usize) -> f64 {
        let i = (context * self.num_states + state) * self.num_actions + action;
        self.base[i] + self.coupling[i] * mu.get(state)
    }

    fn transition(&self, state: usize, action: usize, mu: &MeanField, out: &mut [f64]) {
        let n = self.num_states;
        match &self.dynamics {
            TableDynamics::Mixed { kernel, beta } => {
                let row = &kernel[(state * self.num_actions + action) * n..][..n];
                for ((o, k), m) in out.iter_mut().zip(row).zip(mu.probs()) {
                    *o = (1.0 - beta) * k + beta * m;
                }
            }
            TableDynamics::CrowdShift => {
                out.iter_mut().for_each(|p| *p = 0.0);
                let crowd = usize::from(mu.get(0) >= 0.5);
                out[(state + action + crowd) % n] = 1.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::{mkv_step, PolicySlice};
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_state_examples() {
        assert_eq!(mean_state(&MeanField::point_mass(10, 0)), 0.0);
        assert_eq!(mean_state(&MeanField::point_mass(10, 9)), 9.0);
        assert_abs_diff_eq!(mean_state(&MeanField::uniform(10)), 4.5, epsilon = 1e-12);
    }

    #[test]
    fn jump_examples() {
        assert_eq!(
            discretize_jump(9, false),
            MeanField::point_mass(10, 9).probs()
        );
        let five = discretize_jump(5, false);
        for (s, p) in five.iter().enumerate() {
            assert_abs_diff_eq!(*p, if s >= 5 { 0.2 } else { 0.0 }, epsilon = 1e-15);
        }
        assert_eq!(
            discretize_jump(8, true),
            MeanField::point_mass(10, 8).probs()
        );
        // n = 5, halved: floor(5χ/2) ∈ {0,1,2} with measures 0.4, 0.4, 0.2
        let halved = discretize_jump(5, true);
        assert_abs_diff_eq!(halved[5], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(halved[6], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(halved[7], 0.2, epsilon = 1e-15);
        for s in 0..10 {
            for halved in [false, true] {
                let sum: f64 = discretize_jump(s, halved).iter().sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn jump_matches_monte_carlo_floor() {
        // The interval measure agrees with a fine deterministic grid over χ.
        let grid = 1_000_000;
        for s in [0, 3, 7] {
            for halved in [false, true] {
                let mut counts = [0usize; 10];
                for i in 0..grid {
                    let chi = (i as f64 + 0.5) / grid as f64;
                    let n = (10 - s) as f64;
                    let k = if halved {
                        (chi * n / 2.0).floor()
                    } else {
                        (chi * n).floor()
                    };
                    counts[s + k as usize] += 1;
                }
                let exact = discretize_jump(s, halved);
                for (c, p) in counts.iter().zip(&exact) {
                    assert_abs_diff_eq!(*c as f64 / grid as f64, *p, epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn build_env_examples() {
        let virus = build_env("virus", 50).unwrap();
        assert_eq!((virus.num_states(), virus.num_actions()), (2, 2));
        assert_eq!(virus.contexts(), &[0.5, 1.0]);
        assert_eq!(virus.initial_mean_field().probs(), &[0.5, 0.5]);

        let malware = build_env("malware", 50).unwrap();
        let r = malware.reward(9, 0, &MeanField::point_mass(10, 9), 0);
        assert_abs_diff_eq!(r, -8.28, epsilon = 1e-12);

        let invest = build_env("invest", 50).unwrap();
        let r = invest.reward(0, 1, &MeanField::uniform(10), 1);
        assert_abs_diff_eq!(r, -1.4, epsilon = 1e-12);

        assert!(matches!(build_env("unknown", 5), Err(Error::UnknownEnv(_))));
    }

    #[test]
    fn virus_mkv_examples() {
        let env = VirusEnv::new(5);
        let distance = PolicySlice::deterministic(2, 2, VirusEnv::DISTANCE);
        let next = mkv_step(&MeanField::new(vec![0.5, 0.5]).unwrap(), &distance, &env).unwrap();
        assert_abs_diff_eq!(next.get(0), 0.65, epsilon = 1e-12);
        assert_abs_diff_eq!(next.get(1), 0.35, epsilon = 1e-12);

        let go_out = PolicySlice::deterministic(2, 2, VirusEnv::GO_OUT);
        let healthy = MeanField::point_mass(2, 0);
        assert_eq!(mkv_step(&healthy, &go_out, &env).unwrap(), healthy);
    }

    #[test]
    fn virus_reward_table() {
        let env = VirusEnv::new(5);
        let mu = MeanField::uniform(2);
        assert_eq!(env.reward(0, 0, &mu, 1), 0.0);
        assert_eq!(env.reward(1, 0, &mu, 1), -1.0);
        assert_eq!(env.reward(0, 1, &mu, 0), -0.5);
        assert_eq!(env.reward(1, 1, &mu, 1), -2.0);
    }

    #[test]
    fn malware_intervene_resets() {
        let env = MalwareEnv::new(5);
        let mut out = vec![0.0; 10];
        env.transition(7, 1, &MeanField::uniform(10), &mut out);
        assert_eq!(out, MeanField::point_mass(10, 0).probs());
        env.transition(7, 0, &MeanField::uniform(10), &mut out);
        assert_eq!(out, discretize_jump(7, false));
    }

    #[test]
    fn invest_threshold_boundary_takes_halved_jump() {
        let env = InvestEnv::new(5);
        let mut out = vec![0.0; 10];
        let at_q = MeanField::point_mass(10, 4);
        env.transition(2, 1, &at_q, &mut out);
        assert_eq!(out, discretize_jump(2, true));
        let below = MeanField::point_mass(10, 3);
        env.transition(2, 1, &below, &mut out);
        assert_eq!(out, discretize_jump(2, false));
        env.transition(2, 0, &below, &mut out);
        assert_eq!(out, MeanField::point_mass(10, 2).probs());
    }

    #[test]
    fn describe_echoes_constants() {
        let text = build_env("invest", 50).unwrap().describe();
        assert!(text.contains("horizon=50") && text.contains("q=4") && text.contains("d=0.3"));
    }
}
