//! Core mean-field game types and the forward (McKean–Vlasov) machinery.
//!
//! A population of anonymous agents on a finite state space is summarised by
//! a *mean field* `μ ∈ Δ(S)`. Given a policy slice `π` the population moves
//! one step forward according to
//!
//! ```text
//! μ'(s') = Σ_s μ(s) Σ_a π(a|s) P(s' | s, a, μ)
//! ```
//!
//! Trajectories have `T + 1` state-action pairs `(s⁰,a⁰), …, (sᵀ,aᵀ)`. Only the
//! steps `t < T` carry reward; the terminal action is drawn from the terminal
//! policy slice (uniform for every soft-optimal flow) and the transition out of
//! `sᵀ` is not part of the trajectory.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

/// Absolute tolerance used when validating probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Default cap on the number of trajectories [`enumerate_trajectories`] will produce.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

fn check_simplex(what: &'static str, probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    let min = probs.iter().cloned().fold(f64::INFINITY, f64::min);
    if probs.is_empty() || !(min >= 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL || !sum.is_finite() {
        return Err(Error::NotOnSimplex { what, sum, min });
    }
    Ok(())
}

/// Population state density: `μ(s)` is the fraction of agents in state `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanField {
    probs: Vec<f64>,
}

impl MeanField {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex("mean field", &probs)?;
        Ok(Self { probs })
    }

    /// Builds a mean field, renormalising away round-off. Entries must be non-negative.
    pub fn normalized(mut probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || !(sum > 0.0) || probs.iter().any(|&p| !(p >= 0.0)) {
            let min = probs.iter().cloned().fold(f64::INFINITY, f64::min);
            return Err(Error::NotOnSimplex {
                what: "mean field",
                sum,
                min,
            });
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        Ok(Self { probs })
    }

    pub fn uniform(num_states: usize) -> Self {
        Self {
            probs: vec![1.0 / num_states as f64; num_states],
        }
    }

    pub fn point_mass(num_states: usize, state: usize) -> Self {
        let mut probs = vec![0.0; num_states];
        probs[state] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, state: usize) -> f64 {
        self.probs[state]
    }
}

/// `μ⁰, …, μᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldFlow {
    fields: Vec<MeanField>,
}

impl MeanFieldFlow {
    pub fn new(fields: Vec<MeanField>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Empty("mean-field flow"));
        }
        let n = fields[0].len();
        if let Some(bad) = fields.iter().find(|f| f.len() != n) {
            return Err(Error::DimensionMismatch {
                what: "mean-field flow states",
                expected: n,
                got: bad.len(),
            });
        }
        Ok(Self { fields })
    }

    /// `T`, one less than the number of fields.
    pub fn horizon(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn num_states(&self) -> usize {
        self.fields[0].len()
    }

    pub fn at(&self, t: usize) -> &MeanField {
        &self.fields[t]
    }

    pub fn fields(&self) -> &[MeanField] {
        &self.fields
    }

    pub fn into_fields(self) -> Vec<MeanField> {
        self.fields
    }
}

/// `πᵗ(·|s)` for every state, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySlice {
    num_actions: usize,
    table: Vec<f64>,
}

impl PolicySlice {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("policy slice"));
        }
        let num_actions = rows[0].len();
        let mut table = Vec::with_capacity(rows.len() * num_actions);
        for row in &rows {
            if row.len() != num_actions {
                return Err(Error::DimensionMismatch {
                    what: "policy slice actions",
                    expected: num_actions,
                    got: row.len(),
                });
            }
            check_simplex("policy row", row)?;
            table.extend_from_slice(row);
        }
        Ok(Self { num_actions, table })
    }

    /// Row-major `num_states × num_actions` table. Rows must be probability vectors.
    pub fn from_table(num_actions: usize, table: Vec<f64>) -> Result<Self> {
        if num_actions == 0 || table.is_empty() || !table.len().is_multiple_of(num_actions) {
            return Err(Error::DimensionMismatch {
                what: "policy table",
                expected: num_actions,
                got: table.len(),
            });
        }
        for row in table.chunks(num_actions) {
            check_simplex("policy row", row)?;
        }
        Ok(Self { num_actions, table })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_actions,
            table: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    /// Always picks `action`.
    pub fn deterministic(num_states: usize, num_actions: usize, action: usize) -> Self {
        let mut table = vec![0.0; num_states * num_actions];
        for s in 0..num_states {
            table[s * num_actions + action] = 1.0;
        }
        Self { num_actions, table }
    }

    pub fn num_states(&self) -> usize {
        self.table.len() / self.num_actions
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.table[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.table[state * self.num_actions + action]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }
}

/// `π⁰, …, πᵀ`. The terminal slice is sampled but never rewarded.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFlow {
    slices: Vec<PolicySlice>,
}

impl PolicyFlow {
    pub fn new(slices: Vec<PolicySlice>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Empty("policy flow"));
        }
        let (s, a) = (slices[0].num_states(), slices[0].num_actions());
        for slice in &slices {
            if slice.num_states() != s || slice.num_actions() != a {
                return Err(Error::DimensionMismatch {
                    what: "policy flow slice shape",
                    expected: s * a,
                    got: slice.num_states() * slice.num_actions(),
                });
            }
        }
        Ok(Self { slices })
    }

    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            slices: vec![PolicySlice::uniform(num_states, num_actions); horizon + 1],
        }
    }

    pub fn horizon(&self) -> usize {
        self.slices.len() - 1
    }

    pub fn at(&self, t: usize) -> &PolicySlice {
        &self.slices[t]
    }

    pub fn slices(&self) -> &[PolicySlice] {
        &self.slices
    }

    pub fn num_states(&self) -> usize {
        self.slices[0].num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.slices[0].num_actions()
    }
}

/// A state-action sequence of length `T + 1`.
///
/// `hidden_context` carries the generating context for evaluation only; no
/// training code path reads it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
    pub hidden_context: Option<usize>,
}

impl Trajectory {
    pub fn new(steps: Vec<(usize, usize)>) -> Self {
        Self {
            steps,
            hidden_context: None,
        }
    }

    pub fn with_context(steps: Vec<(usize, usize)>, context: usize) -> Self {
        Self {
            steps,
            hidden_context: Some(context),
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn state(&self, t: usize) -> usize {
        self.steps[t].0
    }

    pub fn action(&self, t: usize) -> usize {
        self.steps[t].1
    }

    /// Copy with the context label removed.
    pub fn observed(&self) -> Trajectory {
        Trajectory::new(self.steps.clone())
    }
}

/// A finite-state, finite-action, finite-horizon mean-field game family indexed
/// by a discrete context. Contexts are passed as indices into [`TabularEnv::contexts`].
///
/// Transitions and the initial mean field do not depend on the context.
pub trait TabularEnv: Send + Sync {
    fn name(&self) -> &str;
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Context values `m ∈ M`.
    fn contexts(&self) -> &[f64];
    fn horizon(&self) -> usize;
    fn initial_mean_field(&self) -> &MeanField;
    fn reward(&self, state: usize, action: usize, mu: &MeanField, context: usize) -> f64;
    /// Writes `P(· | state, action, mu)` into `out` (length `num_states`).
    fn transition(&self, state: usize, action: usize, mu: &MeanField, out: &mut [f64]);

    fn num_contexts(&self) -> usize {
        self.contexts().len()
    }

    /// `r(s, a, μ, context)` for every state-action pair, row-major.
    fn fill_rewards(&self, mu: &MeanField, context: usize, out: &mut [f64]) {
        let na = self.num_actions();
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.reward(i / na, i % na, mu, context);
        }
    }

    /// Human-readable provenance line: name, horizon, sizes, contexts and constants.
    fn describe(&self) -> String {
        format!(
            "env={} horizon={} states={} actions={} contexts={:?}",
            self.name(),
            self.horizon(),
            self.num_states(),
            self.num_actions(),
            self.contexts()
        )
    }
}

fn check_dims(mu: &MeanField, policy: &PolicySlice, env: &dyn TabularEnv) -> Result<()> {
    if mu.len() != env.num_states() {
        return Err(Error::DimensionMismatch {
            what: "mean field states",
            expected: env.num_states(),
            got: mu.len(),
        });
    }
    if policy.num_states() != env.num_states() || policy.num_actions() != env.num_actions() {
        return Err(Error::DimensionMismatch {
            what: "policy slice shape",
            expected: env.num_states() * env.num_actions(),
            got: policy.num_states() * policy.num_actions(),
        });
    }
    Ok(())
}

/// One step of the discrete-time McKean–Vlasov equation.
pub fn mkv_step(mu: &MeanField, policy: &PolicySlice, env: &dyn TabularEnv) -> Result<MeanField> {
    check_dims(mu, policy, env)?;
    let n = env.num_states();
    let mut next = vec![0.0; n];
    let mut kernel = vec![0.0; n];
    for s in 0..n {
        let mass = mu.get(s);
        if mass == 0.0 {
            continue;
        }
        for (a, &pa) in policy.row(s).iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            env.transition(s, a, mu, &mut kernel);
            let w = mass * pa;
            for (acc, p) in next.iter_mut().zip(&kernel) {
                *acc += w * p;
            }
        }
    }
    MeanField::normalized(next)
}

/// Propagates `μ⁰` forward under `pf`, producing the flow consistent with it.
pub fn rollout(env: &dyn TabularEnv, pf: &PolicyFlow) -> Result<MeanFieldFlow> {
    let mut fields = Vec::with_capacity(pf.horizon() + 1);
    fields.push(env.initial_mean_field().clone());
    for t in 0..pf.horizon() {
        let next = mkv_step(&fields[t], pf.at(t), env)?;
        fields.push(next);
    }
    MeanFieldFlow::new(fields)
}

fn check_flows(mf: &MeanFieldFlow, pf: &PolicyFlow, env: &dyn TabularEnv) -> Result<()> {
    if mf.horizon() != pf.horizon() {
        return Err(Error::DimensionMismatch {
            what: "flow horizons",
            expected: mf.horizon(),
            got: pf.horizon(),
        });
    }
    if mf.num_states() != env.num_states() {
        return Err(Error::DimensionMismatch {
            what: "mean-field flow states",
            expected: env.num_states(),
            got: mf.num_states(),
        });
    }
    if pf.num_states() != env.num_states() || pf.num_actions() != env.num_actions() {
        return Err(Error::DimensionMismatch {
            what: "policy flow shape",
            expected: env.num_states() * env.num_actions(),
            got: pf.num_states() * pf.num_actions(),
        });
    }
    Ok(())
}

/// `log[ μ⁰(s⁰) Πₜ πᵗ(aᵗ|sᵗ) Πₜ<T P(sᵗ⁺¹|sᵗ,aᵗ,μᵗ) ]`, or `-∞` when any factor is zero.
///
/// The flows passed in are those of the trajectory's context.
pub fn trajectory_log_prob(
    tau: &Trajectory,
    mf: &MeanFieldFlow,
    pf: &PolicyFlow,
    env: &dyn TabularEnv,
) -> Result<f64> {
    check_flows(mf, pf, env)?;
    if tau.horizon() != pf.horizon() || tau.steps.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "trajectory horizon",
            expected: pf.horizon(),
            got: tau.horizon(),
        });
    }
    let (ns, na) = (env.num_states(), env.num_actions());
    for &(s, a) in &tau.steps {
        if s >= ns {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                size: ns,
            });
        }
        if a >= na {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                size: na,
            });
        }
    }
    let mut kernel = vec![0.0; ns];
    let mut logp = env.initial_mean_field().get(tau.state(0)).ln();
    for t in 0..=tau.horizon() {
        let (s, a) = tau.steps[t];
        logp += pf.at(t).prob(s, a).ln();
        if t < tau.horizon() {
            env.transition(s, a, mf.at(t), &mut kernel);
            logp += kernel[tau.state(t + 1)].ln();
        }
        if logp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
    }
    Ok(logp)
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Samples `s⁰ ~ μ⁰`, `aᵗ ~ πᵗ(·|sᵗ)`, `sᵗ⁺¹ ~ P(·|sᵗ,aᵗ,μᵗ)`.
///
/// Transitions use `mf_override` when given; otherwise the flow consistent with
/// `pf` (its forward rollout from `μ⁰`).
pub fn sample_trajectory<R: Rng + ?Sized>(
    env: &dyn TabularEnv,
    mf_override: Option<&MeanFieldFlow>,
    pf: &PolicyFlow,
    rng: &mut R,
) -> Result<Trajectory> {
    let owned;
    let mf = match mf_override {
        Some(mf) => mf,
        None => {
            owned = rollout(env, pf)?;
            &owned
        }
    };
    check_flows(mf, pf, env)?;
    Ok(sample_with_flows(env, mf, pf, rng))
}

/// Sampling inner loop without validation; callers guarantee shapes.
pub(crate) fn sample_with_flows<R: Rng + ?Sized>(
    env: &dyn TabularEnv,
    mf: &MeanFieldFlow,
    pf: &PolicyFlow,
    rng: &mut R,
) -> Trajectory {
    let horizon = pf.horizon();
    let mut kernel = vec![0.0; env.num_states()];
    let mut steps = Vec::with_capacity(horizon + 1);
    let mut s = sample_categorical(env.initial_mean_field().probs(), rng);
    for t in 0..=horizon {
        let a = sample_categorical(pf.at(t).row(s), rng);
        steps.push((s, a));
        if t < horizon {
            env.transition(s, a, mf.at(t), &mut kernel);
            s = sample_categorical(&kernel, rng);
        }
    }
    Trajectory::new(steps)
}

/// Every trajectory of the given horizon in lexicographic order.
///
/// Refuses when `(|S|·|A|)^(T+1)` exceeds `cap`.
pub fn enumerate_trajectories(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    cap: u64,
) -> Result<Vec<Trajectory>> {
    let pairs = (num_states * num_actions) as u128;
    let mut count: u128 = 1;
    for _ in 0..=horizon {
        count = count.saturating_mul(pairs);
    }
    if count > cap as u128 {
        return Err(Error::EnumerationCap {
            requested: count,
            cap,
        });
    }
    let count = count as usize;
    let pairs = pairs as usize;
    let mut out = Vec::with_capacity(count);
    for mut code in 0..count {
        let mut steps = vec![(0, 0); horizon + 1];
        for t in (0..=horizon).rev() {
            let pair = code % pairs;
            code /= pairs;
            steps[t] = (pair / num_actions, pair % num_actions);
        }
        out.push(Trajectory::new(steps));
    }
    Ok(out)
}

/// Mean squared difference over `t = 1..T-1` and all states; the fixed-point
/// termination statistic. Horizons below 2 fall back to `t = 1..T`.
pub fn flow_mse(a: &MeanFieldFlow, b: &MeanFieldFlow) -> Result<f64> {
    if a.horizon() != b.horizon() || a.num_states() != b.num_states() {
        return Err(Error::DimensionMismatch {
            what: "flow shapes",
            expected: a.horizon(),
            got: b.horizon(),
        });
    }
    let horizon = a.horizon();
    let range = if horizon >= 2 {
        1..horizon
    } else {
        1..horizon + 1
    };
    Ok(mse_over(a, b, range))
}

fn mse_over(a: &MeanFieldFlow, b: &MeanFieldFlow, range: std::ops::Range<usize>) -> f64 {
    let count = range.len() * a.num_states();
    if count == 0 {
        return 0.0;
    }
    let total: f64 = range
        .flat_map(|t| {
            a.at(t)
                .probs()
                .iter()
                .zip(b.at(t).probs())
                .map(|(x, y)| (x - y) * (x - y))
        })
        .sum();
    total / count as f64
}

fn one_step_images(
    mf: &MeanFieldFlow,
    pf: &PolicyFlow,
    env: &dyn TabularEnv,
) -> Result<MeanFieldFlow> {
    check_flows(mf, pf, env)?;
    let mut fields = Vec::with_capacity(mf.horizon() + 1);
    fields.push(mf.at(0).clone());
    for t in 1..=mf.horizon() {
        fields.push(mkv_step(mf.at(t - 1), pf.at(t - 1), env)?);
    }
    MeanFieldFlow::new(fields)
}

/// `(1/((T−1)|S|)) Σ_{t=1}^{T−1} Σ_s (μᵗ(s) − MKV(μᵗ⁻¹, πᵗ⁻¹)(s))²`.
pub fn consistency_residual(
    mf: &MeanFieldFlow,
    pf: &PolicyFlow,
    env: &dyn TabularEnv,
) -> Result<f64> {
    let images = one_step_images(mf, pf, env)?;
    flow_mse(mf, &images)
}

/// Diagnostic variant of [`consistency_residual`] over `t = 1..T`.
pub fn consistency_residual_full(
    mf: &MeanFieldFlow,
    pf: &PolicyFlow,
    env: &dyn TabularEnv,
) -> Result<f64> {
    let images = one_step_images(mf, pf, env)?;
    Ok(mse_over(mf, &images, 1..mf.horizon() + 1))
}

/// Writes `traj_id,t,state,action,context`; the context column is `-1` when
/// hidden or when `include_context` is false.
pub fn write_trajectories_csv<W: Write>(
    writer: W,
    trajectories: &[Trajectory],
    include_context: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["traj_id", "t", "state", "action", "context"])?;
    for (id, tau) in trajectories.iter().enumerate() {
        let ctx = match (include_context, tau.hidden_context) {
            (true, Some(m)) => m as i64,
            _ => -1,
        };
        for (t, &(s, a)) in tau.steps.iter().enumerate() {
            w.write_record(&[
                id.to_string(),
                t.to_string(),
                s.to_string(),
                a.to_string(),
                ctx.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_trajectories_csv`]. Rows must be grouped by `traj_id`
/// with consecutive `t` starting at 0.
pub fn read_trajectories_csv<R: Read>(reader: R) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: Vec<Trajectory> = Vec::new();
    let mut current_id: Option<i64> = None;
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |i: usize| -> Result<i64> {
            record
                .get(i)
                .ok_or_else(|| Error::Parse(format!("row {}: missing column {}", line + 2, i)))?
                .trim()
                .parse::<i64>()
                .map_err(|e| Error::Parse(format!("row {}: {}", line + 2, e)))
        };
        let (id, t, s, a) = (field(0)?, field(1)?, field(2)?, field(3)?);
        let ctx = if record.len() > 4 { field(4)? } else { -1 };
        if s < 0 || a < 0 || t < 0 {
            return Err(Error::Parse(format!("row {}: negative index", line + 2)));
        }
        if current_id != Some(id) {
            if t != 0 {
                return Err(Error::Parse(format!(
                    "row {}: trajectory {} does not start at t=0",
                    line + 2,
                    id
                )));
            }
            current_id = Some(id);
            out.push(Trajectory::new(Vec::new()));
        }
        let tau = out.last_mut().expect("pushed above");
        if t as usize != tau.steps.len() {
            return Err(Error::Parse(format!("row {}: non-consecutive t", line + 2)));
        }
        tau.steps.push((s as usize, a as usize));
        tau.hidden_context = if ctx >= 0 { Some(ctx as usize) } else { None };
    }
    Ok(out)
}
