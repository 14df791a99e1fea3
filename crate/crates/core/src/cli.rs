//! Command-line experiment runner.
//!
//! Settings are resolved in increasing precedence: built-in defaults, a flat
//! `key = value` file (`--config`), `MFIRL_<KEY>` environment variables, then
//! command-line flags and `--set key=value`. Every command echoes the resolved
//! settings into `<out>/<command>.config` so each result can be regenerated.
//!
//! Output layout under `out`:
//!
//! ```text
//! equilibria/{mean_field,policy,summary}.csv            solve
//! demos/{demos,heldout}.csv                              demos (contexts hidden)
//! demos/{demos,heldout}_contexts.csv                     demos (evaluation only)
//! train/<algo>/seed_<s>/{checkpoint.bin,log.csv}         train
//! eval/<algo>/{reports,records,summary}.csv, *.svg       eval
//! taxi/{grid_model.json,rejections.csv,heatmap_*.csv}    taxi-ingest
//! taxi/run/<algo>/{summary.csv,seed_<s>/pricing.csv}     taxi-run
//! oracle/{estimators,sampler}.csv                        oracle-check
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::build_env;
use crate::error::{Error, Result};
use crate::metrics::{write_reports_csv, EvaluationReport};
use crate::mfg::{read_trajectories_csv, write_trajectories_csv, TabularEnv, Trajectory};
use crate::oracle::{check_estimators, sampler_equivalence, CheckSettings, OracleInstance};
use crate::pemmfirl::{
    evaluate_outcome, meta_test, write_evaluation_csv, EvaluationRecord, RewardSource,
};
use crate::solver::{
    format_f64, generate_demonstrations, read_equilibria_csv, solve_ermfne, write_mean_field_csv,
    write_policy_csv, Ermfne, SolverConfig,
};
use crate::taxi::experiment::{
    prepare_bench, pricing_env, published_results_text, run_on_bench, PricingExperimentConfig,
};
use crate::taxi::fixture::{synthetic_grid_model, synthetic_trips, SyntheticFixtureConfig};
use crate::taxi::ingest::{ingest_trips_path, write_trips_csv, IngestConfig};
use crate::taxi::model::{build_grid_model, write_heatmap_csv, GridModel, GridModelConfig};
use crate::taxi::pricing::ActionSpace;
use crate::taxi::write_pricing_csv;
use crate::training::{Algorithm, TrainConfig, TrainState};

/// Every setting, in echo order.
pub const KEYS: &[&str] = &[
    "env",
    "taxi_model",
    "trips",
    "horizon",
    "demos",
    "heldout",
    "contexts",
    "algo",
    "seeds",
    "iterations",
    "batch_size",
    "sampler_steps",
    "hidden",
    "lr_reward",
    "lr_sampler",
    "lr_inference",
    "tol",
    "max_iter",
    "damping",
    "demo_seed",
    "out",
    "workers",
    "checkpoint_every",
    "resume",
    "record_wall_time",
    "eval_records",
    "taxi_horizon",
    "etas",
    "radius",
    "eta",
    "initial_epochs",
    "price_multipliers",
    "delimiter",
    "fixture_seed",
    "fixture_trips",
    "taxi_tol",
    "taxi_damping",
    "oracle_instances",
    "oracle_resamples",
];

/// Resolved experiment settings as raw strings plus typed accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let solver = SolverConfig::default();
        let taxi = crate::taxi::experiment::pricing_solver();
        let workers = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        let defaults: [(&str, String); 39] = [
            ("env", "virus".into()),
            ("taxi_model", String::new()),
            ("trips", String::new()),
            ("horizon", "50".into()),
            ("demos", "1000".into()),
            ("heldout", "500".into()),
            ("contexts", train.num_contexts.to_string()),
            ("algo", "pemmfirl".into()),
            ("seeds", "1".into()),
            ("iterations", train.iterations.to_string()),
            ("batch_size", train.batch_size.to_string()),
            ("sampler_steps", train.sampler_steps.to_string()),
            ("hidden", train.hidden.to_string()),
            ("lr_reward", format_f64(train.lr_reward)),
            ("lr_sampler", format_f64(train.lr_sampler)),
            ("lr_inference", format_f64(train.lr_inference)),
            ("tol", format_f64(solver.tol)),
            ("max_iter", solver.max_iter.to_string()),
            ("damping", format_f64(solver.damping)),
            ("demo_seed", "1".into()),
            ("out", "runs".into()),
            ("workers", workers.to_string()),
            ("checkpoint_every", "100".into()),
            ("resume", "false".into()),
            ("record_wall_time", "false".into()),
            ("eval_records", "20".into()),
            (
                "taxi_horizon",
                crate::taxi::pricing::DEFAULT_HORIZON.to_string(),
            ),
            ("etas", "5,10,15,20".into()),
            ("radius", "1".into()),
            ("eta", "2.33".into()),
            ("initial_epochs", "3".into()),
            ("price_multipliers", String::new()),
            ("delimiter", ",".into()),
            (
                "fixture_seed",
                crate::taxi::fixture::SYNTHETIC_FIXTURE_SEED.to_string(),
            ),
            ("fixture_trips", "20000".into()),
            ("taxi_tol", format_f64(taxi.tol)),
            ("taxi_damping", format_f64(taxi.damping)),
            ("oracle_instances", "20".into()),
            ("oracle_resamples", "10000".into()),
        ];
        Self {
            values: defaults
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Usage(format!("setting {key} = '{value}': {e}")))
}

impl ExperimentConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(Error::Usage(format!("unknown setting '{key}'")));
        }
        self.values
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        parse_value(key, self.get(key))
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("config line {}: expected key = value", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `MFIRL_<KEY>` variables (key upper-cased).
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix("MFIRL_") {
                let key = rest.to_ascii_lowercase();
                if KEYS.contains(&key.as_str()) {
                    self.set(&key, &value)?;
                }
            }
        }
        Ok(())
    }

    /// All settings as `key = value` lines in [`KEYS`] order.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k)))
            .collect()
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        self.get("algo").parse()
    }

    /// `N` means seeds `0..N`, `a..b` a range and `a,b,c` a list.
    pub fn seeds(&self) -> Result<Vec<u64>> {
        let raw = self.get("seeds").trim();
        if raw.contains(',') {
            return raw
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| parse_value("seeds", s))
                .collect();
        }
        if let Some((a, b)) = raw.split_once("..") {
            let (a, b): (u64, u64) = (parse_value("seeds", a)?, parse_value("seeds", b)?);
            return Ok((a..b).collect());
        }
        let n: u64 = parse_value("seeds", raw)?;
        Ok((0..n).collect())
    }

    pub fn solver(&self) -> Result<SolverConfig> {
        Ok(SolverConfig {
            tol: self.typed("tol")?,
            max_iter: self.typed("max_iter")?,
            damping: self.typed("damping")?,
        })
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            iterations: self.typed("iterations")?,
            batch_size: self.typed("batch_size")?,
            lr_reward: self.typed("lr_reward")?,
            lr_sampler: self.typed("lr_sampler")?,
            lr_inference: self.typed("lr_inference")?,
            sampler_steps: self.typed("sampler_steps")?,
            hidden: self.typed("hidden")?,
            num_contexts: self.typed("contexts")?,
            seed,
            record_wall_time: self.typed("record_wall_time")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn list_f64(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_value(key, s))
            .collect()
    }

    fn fixture(&self) -> Result<SyntheticFixtureConfig> {
        Ok(SyntheticFixtureConfig {
            seed: self.typed("fixture_seed")?,
            trips: self.typed("fixture_trips")?,
            eta: self.typed("eta")?,
            ..SyntheticFixtureConfig::default()
        })
    }

    fn actions(&self) -> Result<ActionSpace> {
        match self.get("radius") {
            "all" => Ok(ActionSpace::AllCells),
            r => Ok(ActionSpace::Radius(parse_value("radius", r)?)),
        }
    }

    pub fn pricing_config(&self, seed: u64) -> Result<PricingExperimentConfig> {
        let base = PricingExperimentConfig::default();
        let model_solver = SolverConfig {
            tol: self.typed("taxi_tol")?,
            damping: self.typed("taxi_damping")?,
            ..base.solver
        };
        let contexts = base.kernel.contexts.len();
        Ok(PricingExperimentConfig {
            etas: self.list_f64("etas")?,
            horizon: self.typed("taxi_horizon")?,
            actions: self.actions()?,
            prior: vec![1.0 / contexts as f64; contexts],
            num_demos: self.typed("demos")?,
            num_heldout: self.typed("heldout")?,
            demo_seed: self.typed("demo_seed")?,
            train: self.train_config(seed)?,
            algorithm: self.algorithm()?,
            solver: model_solver,
            ..base
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mfirl",
    about = "Inverse reinforcement learning for mean-field games with latent contexts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat key = value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any setting (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    env: Option<String>,
    #[arg(long, global = true)]
    horizon: Option<String>,
    #[arg(long, global = true)]
    demos: Option<String>,
    #[arg(long, global = true)]
    contexts: Option<String>,
    #[arg(long, global = true)]
    algo: Option<String>,
    #[arg(long, global = true)]
    seeds: Option<String>,
    #[arg(long, global = true)]
    iterations: Option<String>,
    #[arg(long = "batch-size", global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long = "taxi-model", global = true)]
    taxi_model: Option<String>,
    #[arg(long, global = true)]
    trips: Option<String>,
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the expert equilibrium of every context.
    Solve,
    /// Sample demonstrations from solved equilibria.
    Demos,
    /// Train one run per seed.
    Train,
    /// Evaluate trained runs against the experts.
    Eval,
    /// Clean trip records and build the grid model.
    TaxiIngest,
    /// Run the pricing experiment.
    TaxiRun,
    /// Run the enumeration / finite-difference validation suite.
    OracleCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Demos => "demos",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::TaxiIngest => "taxi-ingest",
            Command::TaxiRun => "taxi-run",
            Command::OracleCheck => "oracle-check",
        }
    }
}

fn resolve(common: &CommonArgs, env_vars: Vec<(String, String)>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    cfg.apply_env(env_vars)?;
    let flags = [
        ("env", &common.env),
        ("horizon", &common.horizon),
        ("demos", &common.demos),
        ("contexts", &common.contexts),
        ("algo", &common.algo),
        ("seeds", &common.seeds),
        ("iterations", &common.iterations),
        ("batch_size", &common.batch_size),
        ("out", &common.out),
        ("taxi_model", &common.taxi_model),
        ("trips", &common.trips),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if common.resume {
        cfg.set("resume", "true")?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

/// Stable variant name for the machine-readable error line.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::NotOnSimplex { .. } => "not_on_simplex",
        Error::IndexOutOfRange { .. } => "index_out_of_range",
        Error::EnumerationCap { .. } => "enumeration_cap",
        Error::UnknownEnv(_) => "unknown_env",
        Error::NonConvergence { .. } => "non_convergence",
        Error::DegenerateContext { .. } => "degenerate_context",
        Error::NonFinite(_) => "non_finite",
        Error::StaleCache => "stale_cache",
        Error::Empty(_) => "empty",
        Error::OutOfBox { .. } => "out_of_box",
        Error::Usage(_) => "usage",
        Error::Config(_) => "config",
        Error::Parse(_) => "parse",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

/// `mfirl: error command=<cmd> kind=<kind> message="<text>"`.
pub fn error_line(command: &str, e: &Error) -> String {
    format!(
        "mfirl: error command={command} kind={} message={:?}",
        error_kind(e),
        e.to_string()
    )
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, env_vars: Vec<(String, String)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let name = cli.command.name();
    let result = resolve(&cli.common, env_vars).and_then(|cfg| dispatch(&cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(name, &e));
            match e {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(command: &Command, cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.out();
    fs::create_dir_all(&out)?;
    fs::write(out.join(format!("{}.config", command.name())), cfg.echo())?;
    log::info!("{} with settings:\n{}", command.name(), cfg.echo());
    match command {
        Command::Solve => cmd_solve(cfg),
        Command::Demos => cmd_demos(cfg),
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::TaxiIngest => cmd_taxi_ingest(cfg),
        Command::TaxiRun => cmd_taxi_run(cfg),
        Command::OracleCheck => cmd_oracle_check(cfg),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path, what: &str, hint: &str) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("missing {what} at {} ({e}); {hint}", path.display()),
        ))
    })
}

fn load_taxi_model(cfg: &ExperimentConfig) -> Result<GridModel> {
    match cfg.get("taxi_model") {
        "" => synthetic_grid_model(&cfg.fixture()?),
        path => GridModel::read_json(open(
            Path::new(path),
            "taxi model",
            "run taxi-ingest first",
        )?),
    }
}

/// The configured environment; `taxi` builds the pricing game from the taxi model.
pub fn build_cli_env(cfg: &ExperimentConfig) -> Result<Box<dyn TabularEnv>> {
    match cfg.get("env") {
        "taxi" => {
            let model = load_taxi_model(cfg)?;
            let pc = PricingExperimentConfig {
                horizon: cfg.typed("horizon")?,
                ..cfg.pricing_config(0)?
            };
            Ok(Box::new(pricing_env(&model, &pc)?))
        }
        name => match build_env(name, cfg.typed("horizon")?) {
            Err(Error::UnknownEnv(n)) => Err(Error::Usage(format!(
                "unknown environment '{n}' (valid: virus, malware, invest, taxi)"
            ))),
            other => other,
        },
    }
}

fn uniform_prior(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn cmd_solve(cfg: &ExperimentConfig) -> Result<()> {
    let env = build_cli_env(cfg)?;
    let solver = cfg.solver()?;
    let eqs = (0..env.num_contexts())
        .map(|m| solve_ermfne(env.as_ref(), m, &solver))
        .collect::<Result<Vec<_>>>()?;
    let dir = cfg.out().join("equilibria");
    write_mean_field_csv(create(&dir.join("mean_field.csv"))?, &eqs)?;
    write_policy_csv(create(&dir.join("policy.csv"))?, &eqs)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
    w.write_record(["context", "iterations", "residual"])?;
    for eq in &eqs {
        w.write_record(&[
            eq.context.to_string(),
            eq.iterations_used.to_string(),
            format_f64(eq.final_residual),
        ])?;
        println!(
            "context {} converged in {} iterations, residual {:e}",
            eq.context, eq.iterations_used, eq.final_residual
        );
    }
    w.flush()?;
    Ok(())
}

fn load_equilibria(cfg: &ExperimentConfig, env: &dyn TabularEnv) -> Result<Vec<Ermfne>> {
    let dir = cfg.out().join("equilibria");
    let hint = "run solve first";
    let pairs = read_equilibria_csv(
        open(&dir.join("mean_field.csv"), "equilibria", hint)?,
        open(&dir.join("policy.csv"), "equilibria", hint)?,
    )?;
    if pairs.len() != env.num_contexts() {
        return Err(Error::DimensionMismatch {
            what: "equilibrium contexts",
            expected: env.num_contexts(),
            got: pairs.len(),
        });
    }
    let horizon: usize = cfg.typed("horizon")?;
    pairs
        .into_iter()
        .enumerate()
        .map(|(m, (mf, pf))| {
            if pf.horizon() != horizon {
                return Err(Error::DimensionMismatch {
                    what: "equilibrium horizon",
                    expected: horizon,
                    got: pf.horizon(),
                });
            }
            if mf.num_states() != env.num_states() || pf.num_actions() != env.num_actions() {
                return Err(Error::DimensionMismatch {
                    what: "equilibrium states",
                    expected: env.num_states(),
                    got: mf.num_states(),
                });
            }
            Ok(Ermfne {
                mean_field_flow: mf,
                policy_flow: pf,
                context: m,
                iterations_used: 0,
                final_residual: f64::NAN,
            })
        })
        .collect()
}

fn write_contexts_csv(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["traj_id", "context"])?;
    for (id, tau) in trajectories.iter().enumerate() {
        let m = tau.hidden_context.ok_or(Error::Empty("context label"))?;
        w.write_record(&[id.to_string(), m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn read_contexts_csv(path: &Path) -> Result<Vec<usize>> {
    let mut rdr = csv::Reader::from_reader(open(
        path,
        "evaluation-only context file",
        "run demos first",
    )?);
    rdr.records()
        .map(|r| {
            let r = r?;
            parse_value("context", r.get(1).unwrap_or(""))
        })
        .collect()
}

fn cmd_demos(cfg: &ExperimentConfig) -> Result<()> {
    let env = build_cli_env(cfg)?;
    let eqs = load_equilibria(cfg, env.as_ref())?;
    let horizon = cfg.typed("horizon")?;
    let prior = uniform_prior(env.num_contexts());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.typed("demo_seed")?);
    let dir = cfg.out().join("demos");
    for (name, count) in [
        ("demos", cfg.typed::<usize>("demos")?),
        ("heldout", cfg.typed("heldout")?),
    ] {
        let set = generate_demonstrations(env.as_ref(), &eqs, &prior, count, horizon, &mut rng)?;
        let labelled = set.labelled();
        write_trajectories_csv(
            create(&dir.join(format!("{name}.csv")))?,
            set.observed(),
            false,
        )?;
        write_contexts_csv(&dir.join(format!("{name}_contexts.csv")), &labelled)?;
        println!("{name}: {} trajectories of horizon {horizon}", set.len());
    }
    Ok(())
}

fn read_demos(cfg: &ExperimentConfig, name: &str) -> Result<Vec<Trajectory>> {
    let path = cfg.out().join("demos").join(format!("{name}.csv"));
    read_trajectories_csv(open(&path, "demonstrations", "run demos first")?)
}

fn seed_dir(cfg: &ExperimentConfig, algo: Algorithm, seed: u64) -> PathBuf {
    cfg.out()
        .join("train")
        .join(algo.name())
        .join(format!("seed_{seed}"))
}

fn write_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = create(&tmp)?;
        state.save_checkpoint(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn train_seed(
    cfg: &ExperimentConfig,
    env: &dyn TabularEnv,
    demos: &[Trajectory],
    seed: u64,
) -> Result<()> {
    let algo = cfg.algorithm()?;
    let tc = cfg.train_config(seed)?;
    let dir = seed_dir(cfg, algo, seed);
    fs::create_dir_all(&dir)?;
    let ckpt = dir.join("checkpoint.bin");
    let resume: bool = cfg.typed("resume")?;
    let mut state = if resume && ckpt.exists() {
        let mut state = TrainState::load_checkpoint(BufReader::new(File::open(&ckpt)?))?;
        let extended = TrainConfig {
            iterations: state.config.iterations,
            ..tc.clone()
        };
        if state.config != extended || state.algorithm != algo || state.iteration > tc.iterations {
            return Err(Error::Config(format!(
                "checkpoint {} was written with different settings (hash {:016x} vs {:016x})",
                ckpt.display(),
                state.config.hash(),
                tc.hash()
            )));
        }
        log::info!("seed {seed}: resuming at iteration {}", state.iteration);
        state.config.iterations = tc.iterations;
        state
    } else {
        TrainState::new(env, demos, &tc, algo)?
    };
    let every: usize = cfg.typed::<usize>("checkpoint_every")?.max(1);
    while state.iteration < tc.iterations {
        let stop = ((state.iteration / every) + 1) * every;
        state.run_until(env, demos, stop)?;
        write_checkpoint(&state, &ckpt)?;
    }
    write_checkpoint(&state, &ckpt)?;
    state.write_log_csv(create(&dir.join("log.csv"))?)?;
    Ok(())
}

/// Runs `job` for every seed on `workers` threads; failures are collected per seed.
fn fan_out<F>(seeds: &[u64], workers: usize, job: F) -> Vec<(u64, Result<()>)>
where
    F: Fn(u64) -> Result<()> + Sync,
{
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, seeds.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = seeds.get(i) else { break };
                let r = job(seed);
                results
                    .lock()
                    .expect("no worker panics while holding the lock")
                    .push((seed, r));
            });
        }
    });
    let mut results = results.into_inner().expect("workers joined");
    results.sort_by_key(|(s, _)| *s);
    results
}

fn summarize_failures(results: Vec<(u64, Result<()>)>, what: &str) -> Result<()> {
    let total = results.len();
    let failed: Vec<String> = results
        .into_iter()
        .filter_map(|(seed, r)| r.err().map(|e| format!("seed {seed}: {e}")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        for f in &failed {
            eprintln!("{what} failed for {f}");
        }
        Err(Error::Config(format!(
            "{} of {total} {what} runs failed: {}",
            failed.len(),
            failed.join("; ")
        )))
    }
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let env = build_cli_env(cfg)?;
    let demos = read_demos(cfg, "demos")?;
    if demos.is_empty() {
        return Err(Error::Empty("demonstrations"));
    }
    let seeds = cfg.seeds()?;
    let algo = cfg.algorithm()?;
    let results = fan_out(&seeds, cfg.typed("workers")?, |seed| {
        let r = train_seed(cfg, env.as_ref(), &demos, seed);
        if let Err(e) = &r {
            let dir = seed_dir(cfg, algo, seed);
            let _ = fs::create_dir_all(&dir)
                .and_then(|_| fs::write(dir.join("error.txt"), error_line("train", e)));
        }
        r
    });
    summarize_failures(results, "training")
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Unbiased sample variance (0 for a single value).
fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Writes `metric,median,variance,n` over the per-seed reports.
pub fn write_summary_csv<W: Write>(writer: W, reports: &[EvaluationReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["metric", "median", "variance", "n"])?;
    let metrics: [(&str, Vec<f64>); 4] = [
        (
            "policy_deviation",
            reports.iter().map(|r| r.policy_deviation).collect(),
        ),
        (
            "weighted_policy_deviation",
            reports
                .iter()
                .map(|r| r.weighted_policy_deviation)
                .collect(),
        ),
        (
            "expected_return_gap",
            reports.iter().map(|r| r.expected_return_gap).collect(),
        ),
        (
            "inference_accuracy",
            reports
                .iter()
                .filter_map(|r| r.inference_accuracy)
                .collect(),
        ),
    ];
    for (name, mut values) in metrics {
        if values.is_empty() {
            continue;
        }
        let var = variance(&values);
        let med = median(&mut values);
        w.write_record(&[
            name.to_string(),
            format_f64(med),
            format_f64(var),
            values.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Minimal SVG line chart: axes plus one polyline per series.
pub fn svg_line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let points = series
        .iter()
        .flat_map(|(_, s)| s.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let colours = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        "#bcbd22", "#17becf",
    ];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <title>{}</title>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{PAD}\" y=\"{}\" font-size=\"12\">{}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n\
         <text x=\"5\" y=\"{}\" font-size=\"12\">{}</text>\n\
         <text x=\"5\" y=\"{}\" font-size=\"12\">{}</text>\n",
        xml_escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        H - PAD + 20.0,
        format_axis(x0),
        W - PAD,
        H - PAD + 20.0,
        format_axis(x1),
        H - PAD,
        format_axis(y0),
        PAD,
        format_axis(y1),
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline data-series=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"/>\n",
            xml_escape(name),
            colours[k % colours.len()],
            coords.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn format_axis(v: f64) -> String {
    format!("{v:.4}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn load_labelled(cfg: &ExperimentConfig, name: &str) -> Result<Vec<Trajectory>> {
    let trajectories = read_demos(cfg, name)?;
    let labels = read_contexts_csv(&cfg.out().join("demos").join(format!("{name}_contexts.csv")))?;
    if labels.len() != trajectories.len() {
        return Err(Error::DimensionMismatch {
            what: "context labels",
            expected: trajectories.len(),
            got: labels.len(),
        });
    }
    Ok(trajectories
        .into_iter()
        .zip(labels)
        .map(|(t, m)| Trajectory::with_context(t.steps, m))
        .collect())
}

struct SeedEvaluation {
    report: EvaluationReport,
    records: Vec<EvaluationRecord>,
    log: Vec<(f64, f64, f64)>,
}

fn eval_seed(
    cfg: &ExperimentConfig,
    env: &dyn TabularEnv,
    experts: &[Ermfne],
    heldout: &[Trajectory],
    seed: u64,
) -> Result<SeedEvaluation> {
    let algo = cfg.algorithm()?;
    let ckpt = seed_dir(cfg, algo, seed).join("checkpoint.bin");
    let state = TrainState::load_checkpoint(open(&ckpt, "checkpoint", "run train first")?)?;
    let solver = cfg.solver()?;
    let prior = uniform_prior(env.num_contexts());
    let report = evaluate_outcome(env, experts, &state, heldout, &prior, &solver)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = cfg.typed("eval_records")?;
    let mut records = Vec::new();
    for tau in heldout.iter().take(n) {
        let true_m = tau
            .hidden_context
            .ok_or(Error::Empty("held-out context label"))?;
        let posterior = match &state.inference {
            Some(q) => q.infer(tau)?,
            None => vec![1.0],
        };
        records.push(meta_test(
            &posterior,
            RewardSource::Learned(&state.reward),
            env,
            experts,
            true_m,
            &solver,
            seed,
            &mut rng,
        )?);
    }
    let log = state
        .log
        .iter()
        .map(|r| (r.iter as f64, r.disc_objective, r.sampler_return))
        .collect();
    Ok(SeedEvaluation {
        report,
        records,
        log,
    })
}

fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let env = build_cli_env(cfg)?;
    let experts = load_equilibria(cfg, env.as_ref())?;
    let heldout = load_labelled(cfg, "heldout")?;
    let seeds = cfg.seeds()?;
    let algo = cfg.algorithm()?;
    let slots: Mutex<BTreeMap<u64, SeedEvaluation>> = Mutex::new(BTreeMap::new());
    let results = fan_out(&seeds, cfg.typed("workers")?, |seed| {
        let ev = eval_seed(cfg, env.as_ref(), &experts, &heldout, seed)?;
        slots
            .lock()
            .expect("no worker panics while holding the lock")
            .insert(seed, ev);
        Ok(())
    });
    let evals = slots.into_inner().expect("workers joined");
    let dir = cfg.out().join("eval").join(algo.name());
    let reports: Vec<EvaluationReport> = evals.values().map(|e| e.report.clone()).collect();
    write_reports_csv(create(&dir.join("reports.csv"))?, &reports, true)?;
    let records: Vec<EvaluationRecord> = evals.values().flat_map(|e| e.records.clone()).collect();
    write_evaluation_csv(create(&dir.join("records.csv"))?, &records)?;
    write_summary_csv(create(&dir.join("summary.csv"))?, &reports)?;
    for (file, pick) in [("disc_objective.svg", 1usize), ("sampler_return.svg", 2)] {
        let series: Vec<(String, Vec<(f64, f64)>)> = evals
            .iter()
            .map(|(seed, e)| {
                let pts = e
                    .log
                    .iter()
                    .map(|&(it, d, s)| (it, if pick == 1 { d } else { s }))
                    .collect();
                (format!("seed {seed}"), pts)
            })
            .collect();
        let title = format!(
            "{} {} vs iteration",
            algo.name(),
            file.trim_end_matches(".svg")
        );
        fs::write(dir.join(file), svg_line_chart(&title, &series))?;
    }
    for r in &reports {
        println!(
            "seed {} policy_deviation {} expected_return_gap {} inference_accuracy {}",
            r.seed,
            format_f64(r.policy_deviation),
            format_f64(r.expected_return_gap),
            r.inference_accuracy
                .map(format_f64)
                .unwrap_or_else(|| "n/a".into())
        );
    }
    summarize_failures(results, "evaluation")
}

fn read_multipliers(path: &str) -> Result<Option<Vec<f64>>> {
    if path.is_empty() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse_value("price_multipliers", s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Some(values))
}

fn cmd_taxi_ingest(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.out().join("taxi");
    fs::create_dir_all(&dir)?;
    let delimiter = cfg
        .get("delimiter")
        .as_bytes()
        .first()
        .copied()
        .unwrap_or(b',');
    let ingest_cfg = IngestConfig {
        delimiter,
        ..IngestConfig::default()
    };
    let trips_path = match cfg.get("trips") {
        "" => {
            let path = dir.join("synthetic_trips.csv");
            let mut w = create(&path)?;
            write_trips_csv(&mut w, &synthetic_trips(&cfg.fixture()?), &ingest_cfg)?;
            w.flush()?;
            path
        }
        p => PathBuf::from(p),
    };
    let report = ingest_trips_path(&trips_path, &ingest_cfg)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("rejections.csv"))?);
    w.write_record(["rule", "count"])?;
    let t = report.tally;
    for (rule, n) in [
        ("rows_read", report.rows_read),
        ("unreadable", t.unreadable),
        ("timestamp_order", t.timestamp_order),
        ("minimum_duration", t.minimum_duration),
        ("bounding_box", t.bounding_box),
        ("accepted", report.trips.len()),
    ] {
        w.write_record(&[rule.to_string(), n.to_string()])?;
        println!("{rule}: {n}");
    }
    w.flush()?;
    let model_cfg = GridModelConfig {
        grid: ingest_cfg.grid,
        initial_epochs: cfg.typed("initial_epochs")?,
        eta: cfg.typed("eta")?,
        price_multiplier: read_multipliers(cfg.get("price_multipliers"))?,
        ..GridModelConfig::default()
    };
    let model = build_grid_model(&report.trips, &model_cfg)?;
    let mut w = create(&dir.join("grid_model.json"))?;
    model.write_json(&mut w)?;
    w.flush()?;
    for (name, values) in [
        ("demand", &model.demand_rate),
        ("initial_distribution", &model.initial_distribution),
        ("price_multiplier", &model.price_multiplier),
        ("mean_trip_distance", &model.mean_trip_distance),
    ] {
        write_heatmap_csv(
            create(&dir.join(format!("heatmap_{name}.csv")))?,
            &model.grid,
            values,
        )?;
    }
    Ok(())
}

fn cmd_taxi_run(cfg: &ExperimentConfig) -> Result<()> {
    let model = load_taxi_model(cfg)?;
    let seeds = cfg.seeds()?;
    let algo = cfg.algorithm()?;
    let base = cfg.pricing_config(seeds.first().copied().unwrap_or(0))?;
    let bench = prepare_bench(&model, &base)?;
    let dir = cfg.out().join("taxi").join("run").join(algo.name());
    let reports = Mutex::new(BTreeMap::new());
    let results = fan_out(&seeds, cfg.typed("workers")?, |seed| {
        let pc = cfg.pricing_config(seed)?;
        let report = run_on_bench(&bench, &pc)?;
        write_pricing_csv(
            create(&dir.join(format!("seed_{seed}")).join("pricing.csv"))?,
            &report.rows,
        )?;
        reports
            .lock()
            .expect("no worker panics while holding the lock")
            .insert(seed, report);
        Ok(())
    });
    let reports = reports.into_inner().expect("workers joined");
    let mut w = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
    w.write_record([
        "seed",
        "learned_profit",
        "baseline_profit",
        "expert_profit",
        "inference_accuracy",
    ])?;
    for (seed, r) in &reports {
        w.write_record(&[
            seed.to_string(),
            format_f64(r.learned.profit),
            format_f64(r.baseline.profit),
            format_f64(r.expert.profit),
            r.inference_accuracy.map(format_f64).unwrap_or_default(),
        ])?;
        println!(
            "seed {seed}: learned profit {:.4}, baseline {:.4}, expert {:.4}",
            r.learned.profit, r.baseline.profit, r.expert.profit
        );
    }
    w.flush()?;
    write_heatmap_csv(
        create(&dir.join("heatmap_baseline_final_mean_field.csv"))?,
        &model.grid,
        bench
            .baseline
            .mean_field_flow
            .at(bench.baseline.mean_field_flow.horizon())
            .probs(),
    )?;
    let reference = published_results_text();
    fs::write(dir.join("reference.txt"), &reference)?;
    print!("{reference}");
    summarize_failures(results, "pricing")
}

fn cmd_oracle_check(cfg: &ExperimentConfig) -> Result<()> {
    let n: usize = cfg.typed("oracle_instances")?;
    let settings = CheckSettings {
        resamples: cfg.typed("oracle_resamples")?,
        ..CheckSettings::default()
    };
    let seed = cfg.seeds()?.first().copied().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = cfg.out().join("oracle");
    let mut w = csv::Writer::from_writer(create(&dir.join("estimators.csv"))?);
    w.write_record([
        "instance",
        "estimator",
        "finite_difference",
        "fd_error",
        "mean",
        "standard_error",
        "z",
        "passed",
    ])?;
    let (mut total, mut failed) = (0usize, 0usize);
    for i in 0..n {
        let inst = OracleInstance::random(&mut rng, 4, 6)?;
        for c in check_estimators(&inst, &settings, &mut rng)? {
            total += 1;
            failed += usize::from(!c.passed());
            w.write_record(&[
                i.to_string(),
                c.estimator.name().to_string(),
                format_f64(c.finite_difference),
                format_f64(c.fd_error),
                format_f64(c.mean),
                format_f64(c.standard_error),
                format_f64(c.z_score()),
                c.passed().to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&dir.join("sampler.csv"))?);
    w.write_record(["network", "tv_dynamics_form", "tv_factorized_form"])?;
    let mut worst = 0.0f64;
    for k in 0..n {
        let eq = sampler_equivalence(&mut rng, 2, 3, 4, 6)?;
        worst = worst.max(eq.tv_dynamics_form);
        w.write_record(&[
            k.to_string(),
            format_f64(eq.tv_dynamics_form),
            format_f64(eq.tv_factorized_form),
        ])?;
    }
    w.flush()?;
    println!(
        "estimators: {} of {total} checks within tolerance",
        total - failed
    );
    println!("sampler equivalence: worst total variation {worst:e}");
    if failed > 0 || worst > 1e-6 {
        return Err(Error::Config(format!(
            "oracle check failed: {failed} estimator checks, worst TV {worst:e}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_echo() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("# comment\nhorizon = 7\nseeds = 3 # trailing\n")
            .unwrap();
        cfg.apply_env(vec![
            ("MFIRL_HORIZON".into(), "9".into()),
            ("OTHER".into(), "x".into()),
        ])
        .unwrap();
        assert_eq!(cfg.get("horizon"), "9");
        assert_eq!(cfg.seeds().unwrap(), vec![0, 1, 2]);
        let echo = cfg.echo();
        assert_eq!(echo.lines().count(), KEYS.len());
        assert!(echo.contains("horizon = 9\n"));
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.apply_text("no equals sign").is_err());
    }

    #[test]
    fn seed_forms() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("seeds", "2..5").unwrap();
        assert_eq!(cfg.seeds().unwrap(), vec![2, 3, 4]);
        cfg.set("seeds", "7,1").unwrap();
        assert_eq!(cfg.seeds().unwrap(), vec![7, 1]);
        cfg.set("seeds", "x").unwrap();
        assert!(cfg.seeds().is_err());
    }

    #[test]
    fn summary_statistics() {
        let mut v = vec![3.0, 1.0, 2.0, 10.0];
        assert_eq!(median(&mut v), 2.5);
        assert_eq!(variance(&[1.0, 3.0]), 2.0);
        assert_eq!(variance(&[4.0]), 0.0);
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let series = vec![
            ("a".to_string(), vec![(0.0, 1.0), (1.0, 2.0)]),
            ("b".to_string(), vec![(0.0, f64::NAN)]),
        ];
        let svg = svg_line_chart("t<1>", &series);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("t&lt;1&gt;"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn error_line_is_parseable() {
        let line = error_line("solve", &Error::Config("bad \"x\"".into()));
        assert!(line.starts_with("mfirl: error command=solve kind=config message="));
        assert!(line.contains("\\\"x\\\""));
    }
}
