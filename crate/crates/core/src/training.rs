//! The adversarial training loop shared by context-blind MF-AIRL and the
//! context-aware meta learner.
//!
//! Each iteration:
//!
//! ```text
//! 1. draw expert batches τ_E, τ_E' (B each, with replacement)
//! 2. m̃ ~ q_ψ(·|τ_E), m̃' ~ q_ψ(·|τ_E')          (context-blind: m̃ = 0)
//! 3. rebuild μ̂(·|m) from all demonstrations
//! 4. roll out 2B trajectories from π_θ under μ̂(·|m̃): main half, reference half
//! 5. ψ ← Adam descent on ∂(𝒦 − ℒ)/∂ψ
//! 6. ω ← Adam ascent on ∂ℒ/∂ω, then ascent on the discriminator objective
//! 7. θ ← policy-gradient step on f_ω − log π_θ (sampler_steps times)
//! ```
//!
//! Batches, contexts and rollouts draw from separate ChaCha8 streams so a run is
//! reproducible from its seed and resumable from a checkpoint.

use std::io::{Read, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfairl::{
    discriminator_update, empirical_mean_field, sample_rollouts, sampler_update,
    DiscriminatorBatch, PolicyCache, RewardModel, SamplerFlow,
};
use crate::mfg::{MeanFieldFlow, TabularEnv, Trajectory};
use crate::nn::{AdamState, Mlp};
use crate::pemmfirl::{
    conditional_empirical_mean_field, grad_k_minus_l_psi, grad_l_omega, synthetic_contexts,
    ContextInferenceModel, SampledBatch,
};

/// Checkpoint bundle magic.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFIRLCK1";

const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
const STREAM_CONTEXT: u64 = 2;
const STREAM_ROLLOUT: u64 = 3;
const STREAM_INFERENCE_INIT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    /// Context-blind: one context, the unconditional empirical mean field.
    MfAirl,
    /// Context-aware with a learned inference model.
    Pemmfirl,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::MfAirl => "mfairl",
            Algorithm::Pemmfirl => "pemmfirl",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfairl" => Ok(Algorithm::MfAirl),
            "pemmfirl" => Ok(Algorithm::Pemmfirl),
            other => Err(Error::Config(format!(
                "unknown algorithm '{other}' (expected mfairl or pemmfirl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_reward: f64,
    pub lr_sampler: f64,
    pub lr_inference: f64,
    /// Sampler updates per discriminator update.
    pub sampler_steps: usize,
    pub hidden: usize,
    /// Context cardinality given to the context-aware learner.
    pub num_contexts: usize,
    pub seed: u64,
    /// Record wall-clock milliseconds in the log (breaks byte-identical logs).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 64,
            lr_reward: 1e-4,
            lr_sampler: 1e-4,
            lr_inference: 1e-4,
            sampler_steps: 1,
            hidden: crate::nn::HIDDEN,
            num_contexts: 2,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.sampler_steps == 0 {
            return Err(Error::Config("sampler_steps must be positive".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be positive".into()));
        }
        if self.num_contexts == 0 {
            return Err(Error::Config("num_contexts must be positive".into()));
        }
        for (name, lr) in [
            ("lr_reward", self.lr_reward),
            ("lr_sampler", self.lr_sampler),
            ("lr_inference", self.lr_inference),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {lr}"
                )));
            }
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON form; stored in checkpoints and log headers.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serialises");
        json.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub disc_objective: f64,
    pub sampler_return: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedStep {
    pub iter: usize,
    pub reason: String,
}

/// Parameters, optimisers, RNG streams and log of a run in progress.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub algorithm: Algorithm,
    pub config: TrainConfig,
    pub iteration: usize,
    pub reward: RewardModel,
    pub inference: Option<ContextInferenceModel>,
    pub samplers: SamplerFlow,
    opt_reward: AdamState,
    opt_inference: Option<AdamState>,
    opt_samplers: Vec<AdamState>,
    rng_batch: ChaCha8Rng,
    rng_context: ChaCha8Rng,
    rng_rollout: ChaCha8Rng,
    pub log: Vec<LogRow>,
    pub skipped: Vec<SkippedStep>,
    /// Total mean-field values floored inside `1/μ̂`.
    pub clamped: usize,
    /// Unconditional estimate, fixed for the context-blind learner.
    fixed_flow: Option<MeanFieldFlow>,
}

/// Final state of a run.
pub type TrainOutcome = TrainState;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn check_demos(env: &dyn TabularEnv, demos: &[Trajectory]) -> Result<usize> {
    let first = demos.first().ok_or(Error::Empty("demonstration set"))?;
    let horizon = first.horizon();
    if horizon == 0 {
        return Err(Error::Config(
            "demonstrations need at least one decision step".into(),
        ));
    }
    for tau in demos {
        if tau.horizon() != horizon {
            return Err(Error::DimensionMismatch {
                what: "demonstration horizon",
                expected: horizon,
                got: tau.horizon(),
            });
        }
        for &(s, a) in &tau.steps {
            if s >= env.num_states() {
                return Err(Error::IndexOutOfRange {
                    what: "state",
                    index: s,
                    size: env.num_states(),
                });
            }
            if a >= env.num_actions() {
                return Err(Error::IndexOutOfRange {
                    what: "action",
                    index: a,
                    size: env.num_actions(),
                });
            }
        }
    }
    Ok(horizon)
}

impl TrainState {
    /// Fresh parameters from stream 0 (reward, then samplers) and the inference
    /// model from its own stream, so the two algorithms share ω and θ initialisations.
    pub fn new(
        env: &dyn TabularEnv,
        demos: &[Trajectory],
        config: &TrainConfig,
        algorithm: Algorithm,
    ) -> Result<Self> {
        config.validate()?;
        let horizon = check_demos(env, demos)?;
        let (ns, na) = (env.num_states(), env.num_actions());
        let nm = match algorithm {
            Algorithm::MfAirl => 1,
            Algorithm::Pemmfirl => config.num_contexts,
        };
        let mut init = stream(config.seed, STREAM_INIT);
        let reward = RewardModel::new(ns, na, nm, config.hidden, &mut init)?;
        let samplers = SamplerFlow::new(ns, na, nm, horizon, config.hidden, &mut init)?;
        let inference = match algorithm {
            Algorithm::MfAirl => None,
            Algorithm::Pemmfirl => {
                let mut rng = stream(config.seed, STREAM_INFERENCE_INIT);
                Some(ContextInferenceModel::new(
                    ns,
                    na,
                    nm,
                    config.hidden,
                    &mut rng,
                )?)
            }
        };
        let fixed_flow = match algorithm {
            Algorithm::MfAirl => Some(empirical_mean_field(demos, ns)?),
            Algorithm::Pemmfirl => None,
        };
        Ok(Self {
            algorithm,
            config: config.clone(),
            iteration: 0,
            opt_reward: AdamState::new(reward.net.num_params(), config.lr_reward),
            opt_inference: inference
                .as_ref()
                .map(|q| AdamState::new(q.net.num_params(), config.lr_inference)),
            opt_samplers: samplers
                .nets
                .iter()
                .map(|n| AdamState::new(n.num_params(), config.lr_sampler))
                .collect(),
            reward,
            inference,
            samplers,
            rng_batch: stream(config.seed, STREAM_BATCH),
            rng_context: stream(config.seed, STREAM_CONTEXT),
            rng_rollout: stream(config.seed, STREAM_ROLLOUT),
            log: Vec::new(),
            skipped: Vec::new(),
            clamped: 0,
            fixed_flow,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.reward.num_contexts()
    }

    /// Mean-field estimate under the current parameters.
    pub fn mean_field_estimate(&self, demos: &[Trajectory]) -> Result<Vec<MeanFieldFlow>> {
        match (&self.inference, &self.fixed_flow) {
            (Some(q), _) => Ok(conditional_empirical_mean_field(q, demos)?.flows),
            (None, Some(flow)) => Ok(vec![flow.clone()]),
            (None, None) => Ok(vec![empirical_mean_field(
                demos,
                self.reward.codec.num_states,
            )?]),
        }
    }

    fn skip(&mut self, reason: String) {
        log::warn!("iteration {}: skipped step: {reason}", self.iteration);
        self.skipped.push(SkippedStep {
            iter: self.iteration,
            reason,
        });
    }

    /// Runs one iteration. Numerical failures skip the affected update and are
    /// logged; other errors propagate.
    pub fn step(&mut self, env: &dyn TabularEnv, demos: &[Trajectory]) -> Result<()> {
        let started = Instant::now();
        let b = self.config.batch_size;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Trajectory> {
            (0..b)
                .map(|_| demos[rng.gen_range(0..demos.len())].clone())
                .collect()
        };
        let expert = draw(&mut self.rng_batch);
        let expert2 = draw(&mut self.rng_batch);

        let (est, contexts, contexts2) = match &self.inference {
            Some(q) => match conditional_empirical_mean_field(q, demos) {
                Ok(est) => {
                    let c = synthetic_contexts(q, &expert, &mut self.rng_context)?;
                    let c2 = synthetic_contexts(q, &expert2, &mut self.rng_context)?;
                    (Some(est), c, c2)
                }
                Err(e @ Error::DegenerateContext { .. }) => {
                    self.skip(e.to_string());
                    self.finish_iteration(f64::NAN, f64::NAN, started);
                    return Ok(());
                }
                Err(e) => return Err(e),
            },
            None => (None, vec![0; b], vec![0; b]),
        };
        let flows: Vec<MeanFieldFlow> = match (&est, &self.fixed_flow) {
            (Some(est), _) => est.flows.clone(),
            (None, Some(flow)) => vec![flow.clone()],
            (None, None) => unreachable!("context-blind state always holds its flow"),
        };

        let rollout_contexts: Vec<usize> = contexts.iter().chain(&contexts).copied().collect();
        let mut cache = PolicyCache::new(&self.samplers);
        let rollouts = sample_rollouts(
            env,
            &self.samplers,
            &mut cache,
            &flows,
            &rollout_contexts,
            &mut self.rng_rollout,
        )?;

        if let (Some(est), Some(q)) = (&est, &self.inference) {
            let batch = SampledBatch {
                main: &rollouts[..b],
                main_contexts: &contexts,
                reference: &rollouts[b..],
                reference_contexts: &contexts,
            };
            let (g_psi, clamped) =
                grad_k_minus_l_psi(&self.reward, q, est, &expert, &contexts, &batch)?;
            self.clamped += clamped;
            let g_omega = grad_l_omega(&self.reward, q, est, &batch)?;

            if g_psi.iter().any(|g| !g.is_finite()) {
                self.skip("non-finite inference gradient".into());
            } else if g_psi.iter().any(|g| *g != 0.0) {
                let q = self.inference.as_mut().expect("matched above");
                q.net.adam_step(
                    self.opt_inference.as_mut().expect("paired with inference"),
                    &g_psi,
                )?;
            }
            if g_omega.iter().any(|g| !g.is_finite()) {
                self.skip("non-finite mutual-information reward gradient".into());
            } else if g_omega.iter().any(|g| *g != 0.0) {
                let ascent: Vec<f64> = g_omega.iter().map(|g| -g).collect();
                self.reward.net.adam_step(&mut self.opt_reward, &ascent)?;
            }
        }

        let disc = DiscriminatorBatch {
            expert: &expert2,
            expert_contexts: &contexts2,
            sampled: &rollouts,
            sampled_contexts: &rollout_contexts,
        };
        let objective = match discriminator_update(
            &mut self.reward,
            &mut self.opt_reward,
            &self.samplers,
            &mut cache,
            &flows,
            disc,
        ) {
            Ok(j) => j,
            Err(Error::NonFinite(what)) => {
                self.skip(format!("non-finite {what} in discriminator update"));
                f64::NAN
            }
            Err(e) => return Err(e),
        };

        let mut ret = f64::NAN;
        let mut rollouts = rollouts;
        for k in 0..self.config.sampler_steps {
            if k > 0 {
                cache = PolicyCache::new(&self.samplers);
                rollouts = sample_rollouts(
                    env,
                    &self.samplers,
                    &mut cache,
                    &flows,
                    &rollout_contexts,
                    &mut self.rng_rollout,
                )?;
            }
            match sampler_update(
                &mut self.samplers,
                &mut self.opt_samplers,
                &self.reward,
                &mut cache,
                &flows,
                &rollouts,
                &rollout_contexts,
            ) {
                Ok(r) => ret = r,
                Err(Error::NonFinite(what)) => {
                    self.skip(format!("non-finite {what} in sampler update"))
                }
                Err(e) => return Err(e),
            }
        }
        self.finish_iteration(objective, ret, started);
        Ok(())
    }

    fn finish_iteration(&mut self, disc_objective: f64, sampler_return: f64, started: Instant) {
        let wall_ms = if self.config.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        self.log.push(LogRow {
            iter: self.iteration,
            disc_objective,
            sampler_return,
            wall_ms,
        });
        if self.iteration.is_multiple_of(100) {
            log::info!(
                "{} iter {} disc_objective {:.6} sampler_return {:.6}",
                self.algorithm.name(),
                self.iteration,
                disc_objective,
                sampler_return
            );
        }
        self.iteration += 1;
    }

    /// Runs until `config.iterations` iterations have completed.
    pub fn run(&mut self, env: &dyn TabularEnv, demos: &[Trajectory]) -> Result<()> {
        self.run_until(env, demos, self.config.iterations)
    }

    /// Runs until `iteration == stop` (or the configured budget, whichever is smaller).
    pub fn run_until(
        &mut self,
        env: &dyn TabularEnv,
        demos: &[Trajectory],
        stop: usize,
    ) -> Result<()> {
        check_demos(env, demos)?;
        while self.iteration < stop.min(self.config.iterations) {
            self.step(env, demos)?;
        }
        Ok(())
    }

    /// Writes `iter,disc_objective,sampler_return,wall_ms`.
    pub fn write_log_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "disc_objective", "sampler_return", "wall_ms"])?;
        for row in &self.log {
            w.write_record(&[
                row.iter.to_string(),
                crate::solver::format_f64(row.disc_objective),
                crate::solver::format_f64(row.sampler_return),
                row.wall_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the full resumable state.
    pub fn save_checkpoint<W: Write>(&self, mut writer: W) -> Result<()> {
        let header = CheckpointHeader {
            algorithm: self.algorithm,
            config: self.config.clone(),
            config_hash: format!("{:016x}", self.config.hash()),
            iteration: self.iteration,
            rngs: [&self.rng_batch, &self.rng_context, &self.rng_rollout]
                .into_iter()
                .map(RngState::capture)
                .collect(),
            log: self.log.clone(),
            skipped: self.skipped.clone(),
            clamped: self.clamped,
            fixed_flow: self
                .fixed_flow
                .as_ref()
                .map(|f| f.fields().iter().map(|m| m.probs().to_vec()).collect()),
            num_samplers: self.samplers.nets.len(),
        };
        let json = serde_json::to_vec(&header)?;
        writer.write_all(CHECKPOINT_MAGIC)?;
        writer.write_all(&(json.len() as u64).to_le_bytes())?;
        writer.write_all(&json)?;
        self.reward
            .net
            .save(&mut writer, Some(&self.reward.codec))?;
        if let Some(q) = &self.inference {
            q.net.save(&mut writer, None)?;
        }
        for net in &self.samplers.nets {
            net.save(&mut writer, Some(&self.samplers.codec))?;
        }
        let opts = std::iter::once(&self.opt_reward)
            .chain(&self.opt_inference)
            .chain(&self.opt_samplers);
        for opt in opts {
            let bytes = opt.to_bytes();
            writer.write_all(&(bytes.len() as u64).to_le_bytes())?;
            writer.write_all(&bytes)?;
        }
        Ok(())
    }

    /// Restores a state written by [`TrainState::save_checkpoint`].
    pub fn load_checkpoint<R: Read>(mut reader: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a training checkpoint (bad magic)".into()));
        }
        let len = read_u64(&mut reader)? as usize;
        if len > 1 << 28 {
            return Err(Error::Parse(format!(
                "checkpoint header too large ({len} bytes)"
            )));
        }
        let mut json = vec![0u8; len];
        reader.read_exact(&mut json)?;
        let h: CheckpointHeader = serde_json::from_slice(&json)?;
        if format!("{:016x}", h.config.hash()) != h.config_hash {
            return Err(Error::Parse("checkpoint config hash mismatch".into()));
        }
        let (net, codec) = Mlp::load(&mut reader)?;
        let reward = RewardModel {
            net,
            codec: codec.ok_or_else(|| Error::Parse("reward codec missing".into()))?,
        };
        let inference = match h.algorithm {
            Algorithm::MfAirl => None,
            Algorithm::Pemmfirl => {
                let (net, _) = Mlp::load(&mut reader)?;
                Some(ContextInferenceModel {
                    net,
                    num_states: reward.codec.num_states,
                    num_actions: reward.codec.num_actions,
                })
            }
        };
        let mut nets = Vec::with_capacity(h.num_samplers);
        let mut sampler_codec = None;
        for _ in 0..h.num_samplers {
            let (net, codec) = Mlp::load(&mut reader)?;
            sampler_codec = codec;
            nets.push(net);
        }
        let samplers = SamplerFlow {
            nets,
            codec: sampler_codec.ok_or_else(|| Error::Parse("sampler codec missing".into()))?,
        };
        let mut read_opt = |lr: f64| -> Result<AdamState> {
            let n = read_u64(&mut reader)? as usize;
            let mut bytes = vec![0u8; n];
            reader.read_exact(&mut bytes)?;
            AdamState::from_bytes(&bytes, lr)
        };
        let opt_reward = read_opt(h.config.lr_reward)?;
        let opt_inference = match inference {
            Some(_) => Some(read_opt(h.config.lr_inference)?),
            None => None,
        };
        let opt_samplers = (0..h.num_samplers)
            .map(|_| read_opt(h.config.lr_sampler))
            .collect::<Result<Vec<_>>>()?;
        if h.rngs.len() != 3 {
            return Err(Error::Parse("checkpoint must hold three RNG states".into()));
        }
        let fixed_flow = match h.fixed_flow {
            Some(rows) => Some(MeanFieldFlow::new(
                rows.into_iter()
                    .map(crate::mfg::MeanField::new)
                    .collect::<Result<Vec<_>>>()?,
            )?),
            None => None,
        };
        Ok(Self {
            algorithm: h.algorithm,
            config: h.config,
            iteration: h.iteration,
            reward,
            inference,
            samplers,
            opt_reward,
            opt_inference,
            opt_samplers,
            rng_batch: h.rngs[0].restore()?,
            rng_context: h.rngs[1].restore()?,
            rng_rollout: h.rngs[2].restore()?,
            log: h.log,
            skipped: h.skipped,
            clamped: h.clamped,
            fixed_flow,
        })
    }
}

fn read_u64<R: Read>(reader: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    reader.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Parse("malformed RNG state in checkpoint".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    algorithm: Algorithm,
    config: TrainConfig,
    config_hash: String,
    iteration: usize,
    rngs: Vec<RngState>,
    log: Vec<LogRow>,
    skipped: Vec<SkippedStep>,
    clamped: usize,
    fixed_flow: Option<Vec<Vec<f64>>>,
    num_samplers: usize,
}

/// Builds a fresh state and runs the configured number of iterations.
pub fn train(
    env: &dyn TabularEnv,
    demos: &[Trajectory],
    config: &TrainConfig,
    algorithm: Algorithm,
) -> Result<TrainOutcome> {
    let mut state = TrainState::new(env, demos, config, algorithm)?;
    log::info!(
        "training {} on {} ({} demos, iterations={}, batch={}, config_hash={:016x})",
        algorithm.name(),
        env.describe(),
        demos.len(),
        config.iterations,
        config.batch_size,
        config.hash()
    );
    state.run(env, demos)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::VirusEnv;
    use crate::solver::{generate_demonstrations, solve_all, SolverConfig};

    fn setup() -> (VirusEnv, Vec<Trajectory>) {
        let env = VirusEnv::new(8);
        let eqs = solve_all(&env, &SolverConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let demos = generate_demonstrations(&env, &eqs, &[0.5, 0.5], 40, 8, &mut rng).unwrap();
        (env, demos.observed().to_vec())
    }

    fn small(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 8,
            hidden: 8,
            lr_reward: 1e-3,
            lr_sampler: 1e-3,
            lr_inference: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_keep_initialisation() {
        let (env, demos) = setup();
        let cfg = small(0);
        let a = train(&env, &demos, &cfg, Algorithm::Pemmfirl).unwrap();
        let b = TrainState::new(&env, &demos, &cfg, Algorithm::Pemmfirl).unwrap();
        assert_eq!(a.reward, b.reward);
        assert_eq!(a.samplers, b.samplers);
        assert_eq!(a.inference, b.inference);
        assert!(a.log.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let (env, demos) = setup();
        for alg in [Algorithm::MfAirl, Algorithm::Pemmfirl] {
            let a = train(&env, &demos, &small(5), alg).unwrap();
            let b = train(&env, &demos, &small(5), alg).unwrap();
            let (mut la, mut lb) = (Vec::new(), Vec::new());
            a.write_log_csv(&mut la).unwrap();
            b.write_log_csv(&mut lb).unwrap();
            assert_eq!(la, lb);
            assert_eq!(a.reward, b.reward);
            assert_eq!(a.log.len(), 5);
            assert!(a.log.iter().all(|r| r.disc_objective.is_finite()));
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (env, demos) = setup();
        let cfg = small(6);
        let full = train(&env, &demos, &cfg, Algorithm::Pemmfirl).unwrap();
        let mut part = TrainState::new(&env, &demos, &cfg, Algorithm::Pemmfirl).unwrap();
        part.run_until(&env, &demos, 3).unwrap();
        let mut bytes = Vec::new();
        part.save_checkpoint(&mut bytes).unwrap();
        let mut resumed = TrainState::load_checkpoint(bytes.as_slice()).unwrap();
        resumed.run(&env, &demos).unwrap();
        assert_eq!(resumed.reward, full.reward);
        assert_eq!(resumed.samplers, full.samplers);
        assert_eq!(resumed.inference, full.inference);
        assert_eq!(resumed.log, full.log);
    }

    #[test]
    fn single_context_meta_learner_matches_context_blind_learner() {
        let (env, demos) = setup();
        let cfg = TrainConfig {
            num_contexts: 1,
            ..small(4)
        };
        let a = train(&env, &demos, &cfg, Algorithm::MfAirl).unwrap();
        let b = train(&env, &demos, &cfg, Algorithm::Pemmfirl).unwrap();
        assert_eq!(a.reward, b.reward);
        assert_eq!(a.samplers, b.samplers);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let (env, demos) = setup();
        let state = TrainState::new(&env, &demos, &small(1), Algorithm::MfAirl).unwrap();
        let mut bytes = Vec::new();
        state.save_checkpoint(&mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(TrainState::load_checkpoint(bytes.as_slice()).is_err());
        assert!(TrainState::load_checkpoint(&bytes[..4]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_reward: f64::NAN,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_ne!(
            TrainConfig::default().hash(),
            TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            }
            .hash()
        );
        assert_eq!(
            "pemmfirl".parse::<Algorithm>().unwrap(),
            Algorithm::Pemmfirl
        );
    }
}
