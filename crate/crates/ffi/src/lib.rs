//! C ABI over the `mfirl` library.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_load`/`mfirl_solve` call and released by the matching `*_free`.
//! Every fallible function returns an [`MfirlStatus`]; on failure the message
//! is available from [`mfirl_last_error`] on the same thread until the next
//! failing call. Panics never unwind into C; they surface as
//! [`MfirlStatus::Panic`].
//!
//! Output arrays are caller-allocated. Functions filling them take the buffer
//! length and fail with [`MfirlStatus::BufferTooSmall`] (writing nothing) when
//! it is short.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mfirl::envs::build_env;
use mfirl::mfg::{read_trajectories_csv, MeanField, TabularEnv, Trajectory};
use mfirl::solver::{solve_ermfne, Ermfne, SolverConfig};
use mfirl::taxi::pricing::surcharge_factor;
use mfirl::training::{Algorithm, TrainConfig, TrainState};
use mfirl::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfirlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    DimensionMismatch = 4,
    NonConvergence = 5,
    Io = 6,
    Parse = 7,
    Numerical = 8,
    Panic = 9,
}

/// Environment handle (VIRUS, MALWARE or INVEST).
pub struct MfirlEnv {
    inner: Box<dyn TabularEnv>,
}

/// Solved equilibrium of one context.
pub struct MfirlEquilibrium {
    inner: Ermfne,
}

/// Training state: learned reward, samplers and (for the context-aware
/// learner) the context-inference network.
pub struct MfirlTrainer {
    inner: TrainState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs were replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MfirlStatus {
    match e {
        Error::DimensionMismatch { .. } | Error::IndexOutOfRange { .. } => {
            MfirlStatus::DimensionMismatch
        }
        Error::NonConvergence { .. } => MfirlStatus::NonConvergence,
        Error::Io(_) => MfirlStatus::Io,
        Error::Parse(_) | Error::Csv(_) | Error::Json(_) => MfirlStatus::Parse,
        Error::NonFinite(_) | Error::NotOnSimplex { .. } | Error::DegenerateContext { .. } => {
            MfirlStatus::Numerical
        }
        _ => MfirlStatus::InvalidArgument,
    }
}

/// Runs `body`, converting errors and panics into a status plus message.
fn guard<F>(body: F) -> MfirlStatus
where
    F: FnOnce() -> Result<(), (MfirlStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MfirlStatus::Ok,
        Ok(Err((status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {what}"));
            MfirlStatus::Panic
        }
    }
}

fn lib(e: Error) -> (MfirlStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MfirlStatus, String) {
    (MfirlStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> (MfirlStatus, String) {
    (MfirlStatus::InvalidArgument, message.into())
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, (MfirlStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, (MfirlStatus, String)> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slot<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, (MfirlStatus, String)> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn fill(out: *mut f64, len: usize, values: &[f64]) -> Result<(), (MfirlStatus, String)> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if len < values.len() {
        return Err((
            MfirlStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mfirl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mfirl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates one of the simulated environments (`virus`, `malware`, `invest`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfirl_env_new(
    name: *const c_char,
    horizon: usize,
    out: *mut *mut MfirlEnv,
) -> MfirlStatus {
    guard(|| {
        let out = out_slot(out, "out")?;
        let env = build_env(text(name, "name")?, horizon).map_err(lib)?;
        *out = Box::into_raw(Box::new(MfirlEnv { inner: env }));
        Ok(())
    })
}

/// Releases an environment; NULL is ignored.
///
/// # Safety
/// `env` must come from [`mfirl_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfirl_env_free(env: *mut MfirlEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Writes `(states, actions, contexts, horizon)` of the environment.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mfirl_env_shape(
    env: *const MfirlEnv,
    states: *mut usize,
    actions: *mut usize,
    contexts: *mut usize,
    horizon: *mut usize,
) -> MfirlStatus {
    guard(|| {
        let e = &handle(env, "env")?.inner;
        *out_slot(states, "states")? = e.num_states();
        *out_slot(actions, "actions")? = e.num_actions();
        *out_slot(contexts, "contexts")? = e.num_contexts();
        *out_slot(horizon, "horizon")? = e.horizon();
        Ok(())
    })
}

/// Solves the entropy-regularised equilibrium of `context`.
///
/// # Safety
/// `env` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mfirl_solve(
    env: *const MfirlEnv,
    context: usize,
    tol: f64,
    max_iter: usize,
    damping: f64,
    out: *mut *mut MfirlEquilibrium,
) -> MfirlStatus {
    guard(|| {
        let e = &handle(env, "env")?.inner;
        let out = out_slot(out, "out")?;
        if context >= e.num_contexts() {
            return Err((
                MfirlStatus::DimensionMismatch,
                format!(
                    "context {context} out of range for {} contexts",
                    e.num_contexts()
                ),
            ));
        }
        let eq = solve_ermfne(
            e.as_ref(),
            context,
            &SolverConfig {
                tol,
                max_iter,
                damping,
            },
        )
        .map_err(lib)?;
        *out = Box::into_raw(Box::new(MfirlEquilibrium { inner: eq }));
        Ok(())
    })
}

/// Releases an equilibrium; NULL is ignored.
///
/// # Safety
/// `eq` must come from [`mfirl_solve`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfirl_equilibrium_free(eq: *mut MfirlEquilibrium) {
    if !eq.is_null() {
        drop(Box::from_raw(eq));
    }
}

/// Iterations used and final residual of the solve.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mfirl_equilibrium_stats(
    eq: *const MfirlEquilibrium,
    iterations: *mut usize,
    residual: *mut f64,
) -> MfirlStatus {
    guard(|| {
        let e = &handle(eq, "equilibrium")?.inner;
        *out_slot(iterations, "iterations")? = e.iterations_used;
        *out_slot(residual, "residual")? = e.final_residual;
        Ok(())
    })
}

/// Copies `μᵗ` (length `states`) into `out`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mfirl_equilibrium_mean_field(
    eq: *const MfirlEquilibrium,
    t: usize,
    out: *mut f64,
    len: usize,
) -> MfirlStatus {
    guard(|| {
        let flow = &handle(eq, "equilibrium")?.inner.mean_field_flow;
        if t > flow.horizon() {
            return Err((
                MfirlStatus::DimensionMismatch,
                format!("t = {t} beyond horizon {}", flow.horizon()),
            ));
        }
        fill(out, len, flow.at(t).probs())
    })
}

/// Copies `πᵗ(a|s)` row-major (length `states × actions`) into `out`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mfirl_equilibrium_policy(
    eq: *const MfirlEquilibrium,
    t: usize,
    out: *mut f64,
    len: usize,
) -> MfirlStatus {
    guard(|| {
        let flow = &handle(eq, "equilibrium")?.inner.policy_flow;
        if t > flow.horizon() {
            return Err((
                MfirlStatus::DimensionMismatch,
                format!("t = {t} beyond horizon {}", flow.horizon()),
            ));
        }
        fill(out, len, flow.at(t).table())
    })
}

/// Trains on the demonstrations in a trajectory CSV (`traj_id,t,state,action,context`).
/// `algorithm` is `mfairl` or `pemmfirl`; all other settings are the defaults
/// except `iterations`, `batch_size` and `seed`.
///
/// # Safety
/// String arguments must be NUL-terminated; `env` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mfirl_train(
    env: *const MfirlEnv,
    demos_csv: *const c_char,
    algorithm: *const c_char,
    iterations: usize,
    batch_size: usize,
    seed: u64,
    out: *mut *mut MfirlTrainer,
) -> MfirlStatus {
    guard(|| {
        let e = &handle(env, "env")?.inner;
        let out = out_slot(out, "out")?;
        let path = PathBuf::from(text(demos_csv, "demos_csv")?);
        let algorithm: Algorithm = text(algorithm, "algorithm")?.parse().map_err(lib)?;
        let file = File::open(&path)
            .map_err(|err| (MfirlStatus::Io, format!("{}: {err}", path.display())))?;
        let demos = read_trajectories_csv(BufReader::new(file)).map_err(lib)?;
        let config = TrainConfig {
            iterations,
            batch_size,
            seed,
            num_contexts: e.num_contexts(),
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(e.as_ref(), &demos, &config, algorithm).map_err(lib)?;
        state.run(e.as_ref(), &demos).map_err(lib)?;
        *out = Box::into_raw(Box::new(MfirlTrainer { inner: state }));
        Ok(())
    })
}

/// Releases a trainer; NULL is ignored.
///
/// # Safety
/// `trainer` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfirl_trainer_free(trainer: *mut MfirlTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Writes a resumable checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mfirl_trainer_save(
    trainer: *const MfirlTrainer,
    path: *const c_char,
) -> MfirlStatus {
    guard(|| {
        let t = &handle(trainer, "trainer")?.inner;
        let path = text(path, "path")?;
        let file = File::create(path).map_err(|err| (MfirlStatus::Io, format!("{path}: {err}")))?;
        let mut w = BufWriter::new(file);
        t.save_checkpoint(&mut w).map_err(lib)?;
        w.flush().map_err(|err| (MfirlStatus::Io, err.to_string()))
    })
}

/// Loads a checkpoint written by [`mfirl_trainer_save`] or the `train` command.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mfirl_trainer_load(
    path: *const c_char,
    out: *mut *mut MfirlTrainer,
) -> MfirlStatus {
    guard(|| {
        let out = out_slot(out, "out")?;
        let path = text(path, "path")?;
        let file = File::open(path).map_err(|err| (MfirlStatus::Io, format!("{path}: {err}")))?;
        let state = TrainState::load_checkpoint(BufReader::new(file)).map_err(lib)?;
        *out = Box::into_raw(Box::new(MfirlTrainer { inner: state }));
        Ok(())
    })
}

/// Completed training iterations.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mfirl_trainer_iterations(
    trainer: *const MfirlTrainer,
    out: *mut usize,
) -> MfirlStatus {
    guard(|| {
        *out_slot(out, "out")? = handle(trainer, "trainer")?.inner.iteration;
        Ok(())
    })
}

/// Learned reward `f(s, a, μ, m)`; `mu` holds `mu_len` probabilities.
///
/// # Safety
/// `mu` must hold `mu_len` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mfirl_trainer_reward(
    trainer: *const MfirlTrainer,
    state: usize,
    action: usize,
    mu: *const f64,
    mu_len: usize,
    context: usize,
    out: *mut f64,
) -> MfirlStatus {
    guard(|| {
        let t = &handle(trainer, "trainer")?.inner;
        let out = out_slot(out, "out")?;
        if mu.is_null() {
            return Err(null("mu"));
        }
        let mu = MeanField::new(std::slice::from_raw_parts(mu, mu_len).to_vec()).map_err(lib)?;
        *out = t.reward.value(state, action, &mu, context).map_err(lib)?;
        Ok(())
    })
}

/// Context posterior `q(m|τ)` for a trajectory given as `len` interleaved
/// `(state, action)` pairs; writes one probability per learned context. The
/// context-blind learner reports the single context with probability 1.
///
/// # Safety
/// `pairs` must hold `2 × len` values and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mfirl_trainer_infer(
    trainer: *const MfirlTrainer,
    pairs: *const usize,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> MfirlStatus {
    guard(|| {
        let t = &handle(trainer, "trainer")?.inner;
        if pairs.is_null() {
            return Err(null("pairs"));
        }
        if len == 0 {
            return Err(invalid("trajectory needs at least one step"));
        }
        let raw = std::slice::from_raw_parts(pairs, 2 * len);
        let tau = Trajectory::new(raw.chunks_exact(2).map(|p| (p[0], p[1])).collect());
        let posterior = match &t.inference {
            Some(q) => q.infer(&tau).map_err(lib)?,
            None => vec![1.0],
        };
        fill(out, out_len, &posterior)
    })
}

/// Pricing surcharge factor `η^0.5265 − η_s^0.5265`.
#[no_mangle]
pub extern "C" fn mfirl_surcharge_factor(eta: f64, eta_s: f64) -> f64 {
    surcharge_factor(eta, eta_s)
}

/// Runs the command-line interface with `argc` arguments (including the
/// program name) and returns its exit code.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mfirl_cli_run(argc: c_int, argv: *const *const c_char) -> c_int {
    let mut code = 1;
    let status = guard(|| {
        if argv.is_null() || argc < 1 {
            return Err(invalid("argv must hold at least the program name"));
        }
        let args = (0..argc as usize)
            .map(|i| text(*argv.add(i), "argument").map(str::to_owned))
            .collect::<Result<Vec<_>, _>>()?;
        code = mfirl::cli::run(args, std::env::vars().collect());
        Ok(())
    });
    if status == MfirlStatus::Ok {
        code
    } else {
        2
    }
}
