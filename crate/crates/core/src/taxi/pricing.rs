//! The spatial pricing game on the grid model.
//!
//! An empty taxi at cell `i` picks a candidate pick-up cell `j`. The reward is
//! the surcharge factor of the origin times a profit kernel:
//!
//! ```text
//! r(i, j, μ, m) = (η^0.5265 − η_s(i)^0.5265) · f(i, j, μ, m)
//! f(i, j, μ, m) = (base + rate_m·d̄(j)) · ρ(j, μ) − cost_m·‖i − j‖₁
//! ρ(j, μ)       = min(1, demand(j) / (μ(j)·fleet))
//! ```
//!
//! `ρ` doubles as the match probability: a matched taxi is carried to a
//! drop-off drawn from `dest(j, ·)`, an unmatched one waits at `j`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{check_price_multipliers, GridModel};
use crate::error::{Error, Result};
use crate::mfg::{sample_categorical, MeanField, MeanFieldFlow, PolicyFlow, TabularEnv};

/// Exponent of the surcharge factor.
pub const PRICE_EXPONENT: f64 = 0.5265;

/// Steps per trajectory (five minutes each).
pub const DEFAULT_HORIZON: usize = 120;

/// `η^0.5265 − η_s^0.5265`.
pub fn surcharge_factor(eta: f64, eta_s: f64) -> f64 {
    eta.powf(PRICE_EXPONENT) - eta_s.powf(PRICE_EXPONENT)
}

/// Pluggable `f(i, j, μ[, m])`.
pub trait ProfitKernel: Send + Sync {
    fn profit(
        &self,
        model: &GridModel,
        i: usize,
        j: usize,
        mu: &MeanField,
        m: Option<usize>,
    ) -> f64;

    /// Number of contexts the kernel distinguishes.
    fn num_contexts(&self) -> usize;

    /// Chance that a taxi targeting `j` finds a passenger; by default with a
    /// fleet equal to the total demand per epoch.
    fn match_probability(&self, model: &GridModel, j: usize, mu: &MeanField) -> f64 {
        match_probability(model, j, mu, model.demand_rate.iter().sum())
    }

    /// Realised profit of one step given the match outcome, when the kernel
    /// decomposes that way. Its expectation over the match must equal `profit`.
    fn realized(
        &self,
        _model: &GridModel,
        _i: usize,
        _j: usize,
        _matched: bool,
        _m: Option<usize>,
    ) -> Option<f64> {
        None
    }
}

/// Fare and movement constants for one driver type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverType {
    /// Fare per expected mile of the trip started at `j`.
    pub distance_rate: f64,
    /// Cost per grid step of repositioning.
    pub movement_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub base_fare: f64,
    /// One entry per context.
    pub contexts: Vec<DriverType>,
    /// Used when the context is unknown (the empirical-model baseline).
    pub blind: DriverType,
    /// Taxis per unit of mean-field mass; `None` takes the total demand per epoch.
    pub fleet_size: Option<f64>,
}

impl Default for KernelParams {
    /// Two sharply different driver types: long-haul roamers and stay-put locals.
    fn default() -> Self {
        let contexts = vec![
            DriverType {
                distance_rate: 3.0,
                movement_cost: 0.1,
            },
            DriverType {
                distance_rate: 0.25,
                movement_cost: 1.5,
            },
        ];
        let blind = DriverType {
            distance_rate: contexts.iter().map(|c| c.distance_rate).sum::<f64>() / 2.0,
            movement_cost: contexts.iter().map(|c| c.movement_cost).sum::<f64>() / 2.0,
        };
        Self {
            base_fare: 2.5,
            contexts,
            blind,
            fleet_size: None,
        }
    }
}

/// The default demand-availability kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultKernel {
    pub params: KernelParams,
    fleet: f64,
}

impl DefaultKernel {
    pub fn new(params: KernelParams, model: &GridModel) -> Result<Self> {
        let fleet = params
            .fleet_size
            .unwrap_or_else(|| model.demand_rate.iter().sum());
        let finite = params.base_fare.is_finite()
            && params
                .contexts
                .iter()
                .chain(std::iter::once(&params.blind))
                .all(|d| d.distance_rate.is_finite() && d.movement_cost.is_finite());
        if !finite || !(fleet > 0.0 && fleet.is_finite()) || params.contexts.is_empty() {
            return Err(Error::Config(format!(
                "invalid profit kernel {params:?} (fleet {fleet})"
            )));
        }
        Ok(Self { params, fleet })
    }

    pub fn fleet(&self) -> f64 {
        self.fleet
    }

    fn driver(&self, m: Option<usize>) -> DriverType {
        match m {
            Some(m) => self.params.contexts[m],
            None => self.params.blind,
        }
    }

    fn fare(&self, model: &GridModel, j: usize, m: Option<usize>) -> f64 {
        self.params.base_fare + self.driver(m).distance_rate * model.mean_trip_distance[j]
    }

    fn move_cost(&self, model: &GridModel, i: usize, j: usize, m: Option<usize>) -> f64 {
        self.driver(m).movement_cost * model.grid.grid_distance(i, j)
    }
}

/// `ρ(j, μ) = min(1, demand(j)/(μ(j)·fleet))`, 1 where no taxi is present.
pub fn match_probability(model: &GridModel, j: usize, mu: &MeanField, fleet: f64) -> f64 {
    let supply = mu.get(j) * fleet;
    if supply <= model.demand_rate[j] {
        1.0
    } else {
        model.demand_rate[j] / supply
    }
}

impl ProfitKernel for DefaultKernel {
    fn profit(
        &self,
        model: &GridModel,
        i: usize,
        j: usize,
        mu: &MeanField,
        m: Option<usize>,
    ) -> f64 {
        self.fare(model, j, m) * match_probability(model, j, mu, self.fleet)
            - self.move_cost(model, i, j, m)
    }

    fn num_contexts(&self) -> usize {
        self.params.contexts.len()
    }

    fn match_probability(&self, model: &GridModel, j: usize, mu: &MeanField) -> f64 {
        match_probability(model, j, mu, self.fleet)
    }

    fn realized(
        &self,
        model: &GridModel,
        i: usize,
        j: usize,
        matched: bool,
        m: Option<usize>,
    ) -> Option<f64> {
        let fare = if matched { self.fare(model, j, m) } else { 0.0 };
        Some(fare - self.move_cost(model, i, j, m))
    }
}

/// The price-multiplier reward for origin `i` and pick-up cell `j`.
pub fn pricing_reward(
    i: usize,
    j: usize,
    mu: &MeanField,
    m: Option<usize>,
    model: &GridModel,
    kernel: &dyn ProfitKernel,
) -> f64 {
    surcharge_factor(model.eta, model.price_multiplier[i]) * kernel.profit(model, i, j, mu, m)
}

/// Which cells a driver may target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    /// Action `a` is cell `a`.
    AllCells,
    /// Action `a` is the offset `(a / w − r, a % w − r)` with `w = 2r + 1`,
    /// clamped to the grid.
    Radius(usize),
}

#[derive(Clone)]
pub struct PricingEnv {
    model: GridModel,
    kernel: Arc<dyn ProfitKernel>,
    actions: ActionSpace,
    horizon: usize,
    contexts: Vec<f64>,
    blind: bool,
    mu0: MeanField,
    targets: Vec<usize>,
    factors: Vec<f64>,
}

impl std::fmt::Debug for PricingEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PricingEnv")
            .field("actions", &self.actions)
            .field("horizon", &self.horizon)
            .field("blind", &self.blind)
            .field("eta", &self.model.eta)
            .finish()
    }
}

impl PricingEnv {
    /// Context-conditioned game (contexts labelled 1, 2, ...).
    pub fn new(
        model: GridModel,
        kernel: Arc<dyn ProfitKernel>,
        actions: ActionSpace,
        horizon: usize,
    ) -> Result<Self> {
        model.validate()?;
        if horizon == 0 {
            return Err(Error::Config("pricing horizon must be positive".into()));
        }
        let n = model.num_cells();
        let (rows, cols) = (model.grid.rows(), model.grid.cols());
        let targets = match actions {
            ActionSpace::AllCells => (0..n).flat_map(|_| 0..n).collect(),
            ActionSpace::Radius(r) => {
                let w = 2 * r + 1;
                let mut t = Vec::with_capacity(n * w * w);
                for i in 0..n {
                    let (ri, ci) = model.grid.row_col(i);
                    for a in 0..w * w {
                        let dr = (a / w) as isize - r as isize;
                        let dc = (a % w) as isize - r as isize;
                        let row = (ri as isize + dr).clamp(0, rows as isize - 1) as usize;
                        let col = (ci as isize + dc).clamp(0, cols as isize - 1) as usize;
                        t.push(row * cols + col);
                    }
                }
                t
            }
        };
        let contexts = (1..=kernel.num_contexts()).map(|m| m as f64).collect();
        let mu0 = MeanField::normalized(model.initial_distribution.clone())?;
        let factors = model
            .price_multiplier
            .iter()
            .map(|&s| surcharge_factor(model.eta, s))
            .collect();
        Ok(Self {
            model,
            kernel,
            actions,
            horizon,
            contexts,
            blind: false,
            mu0,
            targets,
            factors,
        })
    }

    /// The same game with the context dropped from the kernel (a single context).
    pub fn blind(&self) -> Self {
        Self {
            blind: true,
            contexts: vec![0.0],
            ..self.clone()
        }
    }

    pub fn is_blind(&self) -> bool {
        self.blind
    }

    /// The same game under another price cap.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        check_price_multipliers(eta, &self.model.price_multiplier)?;
        let model = self.model.with_eta(eta)?;
        let factors = model
            .price_multiplier
            .iter()
            .map(|&s| surcharge_factor(eta, s))
            .collect();
        Ok(Self {
            model,
            factors,
            ..self.clone()
        })
    }

    pub fn model(&self) -> &GridModel {
        &self.model
    }

    pub fn kernel(&self) -> &dyn ProfitKernel {
        self.kernel.as_ref()
    }

    pub fn action_space(&self) -> ActionSpace {
        self.actions
    }

    /// Pick-up cell targeted by action `a` from cell `i`.
    pub fn target(&self, i: usize, a: usize) -> usize {
        self.targets[i * self.num_actions() + a]
    }

    fn kernel_context(&self, context: usize) -> Option<usize> {
        (!self.blind).then_some(context)
    }

    /// Chance that a taxi targeting cell `j` is matched.
    pub fn match_probability(&self, j: usize, mu: &MeanField) -> f64 {
        self.kernel.match_probability(&self.model, j, mu)
    }
}

impl TabularEnv for PricingEnv {
    fn name(&self) -> &str {
        if self.blind {
            "pricing-blind"
        } else {
            "pricing"
        }
    }

    fn num_states(&self) -> usize {
        self.model.num_cells()
    }

    fn num_actions(&self) -> usize {
        match self.actions {
            ActionSpace::AllCells => self.model.num_cells(),
            ActionSpace::Radius(r) => (2 * r + 1) * (2 * r + 1),
        }
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
        let j = self.target(state, action);
        self.factors[state]
            * self
                .kernel
                .profit(&self.model, state, j, mu, self.kernel_context(context))
    }

    fn transition(&self, state: usize, action: usize, mu: &MeanField, out: &mut [f64]) {
        let j = self.target(state, action);
        let p = self.match_probability(j, mu);
        for (o, d) in out.iter_mut().zip(&self.model.destination[j]) {
            *o = p * d;
        }
        out[j] += 1.0 - p;
    }
}

/// One simulated decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub driver: usize,
    pub t: usize,
    pub origin: usize,
    pub pickup: usize,
    /// Drop-off cell when a passenger was matched.
    pub dropoff: Option<usize>,
    pub profit: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FleetLedger {
    pub entries: Vec<LedgerEntry>,
}

impl FleetLedger {
    pub fn total_profit(&self) -> f64 {
        self.entries.iter().map(|e| e.profit).sum()
    }

    pub fn matched_rides(&self) -> usize {
        self.entries.iter().filter(|e| e.dropoff.is_some()).count()
    }

    /// Profit booked on steps that carried a passenger.
    pub fn ride_profit(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.dropoff.is_some())
            .map(|e| e.profit)
            .sum()
    }

    /// Repositioning cost of steps without a passenger (non-positive).
    pub fn idle_profit(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.dropoff.is_none())
            .map(|e| e.profit)
            .sum()
    }
}

/// Simulates `drivers` independent taxis against a fixed mean-field flow and
/// books each step's realised profit.
pub fn simulate_fleet<R: Rng + ?Sized>(
    env: &PricingEnv,
    mf: &MeanFieldFlow,
    pf: &PolicyFlow,
    context: usize,
    drivers: usize,
    rng: &mut R,
) -> Result<FleetLedger> {
    let ns = env.num_states();
    if mf.num_states() != ns || pf.num_states() != ns || pf.num_actions() != env.num_actions() {
        return Err(Error::DimensionMismatch {
            what: "simulation shapes",
            expected: ns,
            got: mf.num_states(),
        });
    }
    let kctx = env.kernel_context(context);
    let model = env.model();
    let mut ledger = FleetLedger::default();
    for driver in 0..drivers {
        let mut s = sample_categorical(env.initial_mean_field().probs(), rng);
        for t in 0..pf.horizon() {
            let mu = mf.at(t);
            let a = sample_categorical(pf.at(t).row(s), rng);
            let j = env.target(s, a);
            let matched = rng.gen::<f64>() < env.match_probability(j, mu);
            let base = env
                .kernel()
                .realized(model, s, j, matched, kctx)
                .ok_or_else(|| {
                    Error::Config("profit kernel has no realised-profit decomposition".into())
                })?;
            let dropoff = matched.then(|| sample_categorical(&model.destination[j], rng));
            ledger.entries.push(LedgerEntry {
                driver,
                t,
                origin: s,
                pickup: j,
                dropoff,
                profit: env.factors[s] * base,
            });
            s = dropoff.unwrap_or(j);
        }
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxi::fixture::{synthetic_grid_model, SyntheticFixtureConfig};

    struct Const(f64);

    impl ProfitKernel for Const {
        fn profit(
            &self,
            _: &GridModel,
            _: usize,
            _: usize,
            _: &MeanField,
            _: Option<usize>,
        ) -> f64 {
            self.0
        }
        fn num_contexts(&self) -> usize {
            2
        }
    }

    fn model() -> GridModel {
        synthetic_grid_model(&SyntheticFixtureConfig {
            trips: 3000,
            ..SyntheticFixtureConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn hand_evaluated_reward() {
        let mut m = model();
        m.eta = 2.33;
        m.price_multiplier = vec![1.0; 100];
        let mu = MeanField::uniform(100);
        let r = pricing_reward(3, 4, &mu, Some(0), &m, &Const(1.0));
        assert!((r - (2.33f64.powf(0.5265) - 1.0)).abs() < 1e-15);
        assert!((r - 0.5610359055145355).abs() < 1e-10);
        let r2 = pricing_reward(3, 4, &mu, Some(0), &m, &Const(2.0));
        assert_eq!(r2, 2.0 * r);
        m.price_multiplier[3] = 2.33;
        assert_eq!(pricing_reward(3, 4, &mu, None, &m, &Const(7.0)), 0.0);
    }

    #[test]
    fn reward_decreases_in_multiplier() {
        let mut m = model();
        let mu = MeanField::uniform(100);
        let mut last = f64::INFINITY;
        for k in 0..10 {
            m.price_multiplier[5] = 0.2 * k as f64;
            let r = pricing_reward(5, 6, &mu, None, &m, &Const(1.5));
            assert!(r < last);
            last = r;
        }
    }

    #[test]
    fn construction_rejects_cap_below_multiplier() {
        let mut m = model();
        m.price_multiplier[10] = 3.0;
        let k = Arc::new(Const(1.0));
        assert!(PricingEnv::new(m.clone(), k.clone(), ActionSpace::Radius(1), 120).is_err());
        m.price_multiplier[10] = 1.0;
        let env = PricingEnv::new(m, k, ActionSpace::Radius(1), 120).unwrap();
        assert!(env.with_eta(1.2).is_err());
    }

    #[test]
    fn radius_targets_and_transitions() {
        let m = model();
        let kernel = Arc::new(DefaultKernel::new(KernelParams::default(), &m).unwrap());
        let env = PricingEnv::new(m, kernel, ActionSpace::Radius(1), 120).unwrap();
        assert_eq!(env.num_actions(), 9);
        assert_eq!(env.target(55, 4), 55);
        assert_eq!(env.target(55, 0), 44);
        assert_eq!(env.target(55, 8), 66);
        assert_eq!(env.target(0, 0), 0);
        let mut out = vec![0.0; 100];
        let mu = MeanField::uniform(100);
        for s in [0, 27, 99] {
            for a in 0..9 {
                env.transition(s, a, &mu, &mut out);
                assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let all = PricingEnv::new(
            env.model().clone(),
            Arc::new(Const(1.0)),
            ActionSpace::AllCells,
            120,
        )
        .unwrap();
        assert_eq!(all.num_actions(), 100);
        assert_eq!(all.target(3, 77), 77);
    }

    #[test]
    fn blind_env_drops_the_context() {
        let m = model();
        let kernel = Arc::new(DefaultKernel::new(KernelParams::default(), &m).unwrap());
        let env = PricingEnv::new(m, kernel, ActionSpace::Radius(1), 120).unwrap();
        let blind = env.blind();
        assert_eq!(env.num_contexts(), 2);
        assert_eq!(blind.num_contexts(), 1);
        let mu = MeanField::uniform(100);
        assert_ne!(env.reward(27, 3, &mu, 0), env.reward(27, 3, &mu, 1));
        let k = DefaultKernel::new(KernelParams::default(), env.model()).unwrap();
        let expect = surcharge_factor(env.model().eta, env.model().price_multiplier[27])
            * k.profit(env.model(), 27, env.target(27, 3), &mu, None);
        assert!((blind.reward(27, 3, &mu, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn ledger_conserves_profit_and_matches_expectation() {
        use crate::metrics::expected_return;
        use crate::solver::solve_ermfne;
        use crate::taxi::experiment::pricing_solver;
        use rand::SeedableRng;
        let m = model();
        let kernel = Arc::new(DefaultKernel::new(KernelParams::default(), &m).unwrap());
        let env = PricingEnv::new(m, kernel, ActionSpace::Radius(1), 8).unwrap();
        let eq = solve_ermfne(&env, 1, &pricing_solver()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let drivers = 4000;
        let ledger = simulate_fleet(
            &env,
            &eq.mean_field_flow,
            &eq.policy_flow,
            1,
            drivers,
            &mut rng,
        )
        .unwrap();
        assert_eq!(ledger.entries.len(), drivers * 8);
        let total = ledger.total_profit();
        assert!(
            (total - ledger.ride_profit() - ledger.idle_profit()).abs()
                < 1e-9 * total.abs().max(1.0)
        );
        assert!(ledger.idle_profit() <= 0.0);
        let per_driver: Vec<f64> = (0..drivers)
            .map(|d| {
                ledger.entries[d * 8..(d + 1) * 8]
                    .iter()
                    .map(|e| e.profit)
                    .sum()
            })
            .collect();
        let mean = per_driver.iter().sum::<f64>() / drivers as f64;
        let var = per_driver.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (drivers - 1) as f64;
        let exact = expected_return(&env, &eq.mean_field_flow, &eq.policy_flow, 1).unwrap();
        assert!(
            (mean - exact).abs() < 4.0 * (var / drivers as f64).sqrt(),
            "{mean} vs {exact}"
        );
    }
}
