use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use rand::SeedableRng;

use mfirl_ffi::*;

fn last_error() -> String {
    let p = mfirl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn virus(horizon: usize) -> *mut MfirlEnv {
    let name = CString::new("virus").unwrap();
    let mut env = ptr::null_mut();
    assert_eq!(
        unsafe { mfirl_env_new(name.as_ptr(), horizon, &mut env) },
        MfirlStatus::Ok
    );
    env
}

#[test]
fn environment_and_equilibrium_round_trip() {
    let env = virus(10);
    let (mut ns, mut na, mut nm, mut h) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { mfirl_env_shape(env, &mut ns, &mut na, &mut nm, &mut h) },
        MfirlStatus::Ok
    );
    assert_eq!((ns, na, nm, h), (2, 2, 2, 10));

    let mut eq = ptr::null_mut();
    assert_eq!(
        unsafe { mfirl_solve(env, 1, 1e-10, 10_000, 0.0, &mut eq) },
        MfirlStatus::Ok
    );
    let (mut iters, mut residual) = (0, f64::NAN);
    assert_eq!(
        unsafe { mfirl_equilibrium_stats(eq, &mut iters, &mut residual) },
        MfirlStatus::Ok
    );
    assert!(iters > 0 && residual <= 1e-10);

    let mut mu = [0.0; 2];
    assert_eq!(
        unsafe { mfirl_equilibrium_mean_field(eq, 10, mu.as_mut_ptr(), 2) },
        MfirlStatus::Ok
    );
    assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mut pi = [0.0; 4];
    assert_eq!(
        unsafe { mfirl_equilibrium_policy(eq, 0, pi.as_mut_ptr(), 4) },
        MfirlStatus::Ok
    );
    assert!((pi[0] + pi[1] - 1.0).abs() < 1e-12);

    assert_eq!(
        unsafe { mfirl_equilibrium_policy(eq, 0, pi.as_mut_ptr(), 3) },
        MfirlStatus::BufferTooSmall
    );
    assert!(last_error().contains("4 needed"));
    assert_eq!(
        unsafe { mfirl_equilibrium_mean_field(eq, 11, mu.as_mut_ptr(), 2) },
        MfirlStatus::DimensionMismatch
    );
    let mut other = ptr::null_mut();
    assert_eq!(
        unsafe { mfirl_solve(env, 2, 1e-10, 10, 0.0, &mut other) },
        MfirlStatus::DimensionMismatch
    );
    assert!(other.is_null());

    unsafe {
        mfirl_equilibrium_free(eq);
        mfirl_env_free(env);
        mfirl_env_free(ptr::null_mut());
    }
}

#[test]
fn failures_report_status_and_message() {
    let bad = CString::new("nope").unwrap();
    let mut env = ptr::null_mut();
    assert_eq!(
        unsafe { mfirl_env_new(bad.as_ptr(), 5, &mut env) },
        MfirlStatus::InvalidArgument
    );
    assert!(env.is_null());
    assert!(last_error().contains("nope"));
    assert_eq!(
        unsafe { mfirl_env_new(ptr::null(), 5, &mut env) },
        MfirlStatus::NullPointer
    );
    assert_eq!(last_error(), "name is null");

    let virus_name = CString::new("virus").unwrap();
    assert_eq!(
        unsafe { mfirl_env_new(virus_name.as_ptr(), 5, ptr::null_mut()) },
        MfirlStatus::NullPointer
    );

    let env = virus(50);
    let mut eq = ptr::null_mut();
    assert_eq!(
        unsafe { mfirl_solve(env, 0, 1e-30, 2, 0.0, &mut eq) },
        MfirlStatus::NonConvergence
    );
    assert!(last_error().contains("residual"));
    unsafe { mfirl_env_free(env) };

    let missing = CString::new("/definitely/not/here.bin").unwrap();
    let mut trainer = ptr::null_mut();
    assert_eq!(
        unsafe { mfirl_trainer_load(missing.as_ptr(), &mut trainer) },
        MfirlStatus::Io
    );
}

fn write_demos(dir: &Path, horizon: usize) -> PathBuf {
    use mfirl::envs::build_env;
    use mfirl::mfg::write_trajectories_csv;
    use mfirl::solver::{generate_demonstrations, solve_all, SolverConfig};
    let env = build_env("virus", horizon).unwrap();
    let eqs = solve_all(env.as_ref(), &SolverConfig::default()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let demos =
        generate_demonstrations(env.as_ref(), &eqs, &[0.5, 0.5], 40, horizon, &mut rng).unwrap();
    let path = dir.join("demos.csv");
    write_trajectories_csv(
        std::fs::File::create(&path).unwrap(),
        demos.observed(),
        false,
    )
    .unwrap();
    path
}

#[test]
fn training_checkpoint_and_queries() {
    let dir = tempfile::tempdir().unwrap();
    let demos = CString::new(write_demos(dir.path(), 6).display().to_string()).unwrap();
    let env = virus(6);
    let algo = CString::new("pemmfirl").unwrap();
    let mut trainer = ptr::null_mut();
    assert_eq!(
        unsafe { mfirl_train(env, demos.as_ptr(), algo.as_ptr(), 5, 8, 3, &mut trainer) },
        MfirlStatus::Ok
    );

    let mut iters = 0;
    assert_eq!(
        unsafe { mfirl_trainer_iterations(trainer, &mut iters) },
        MfirlStatus::Ok
    );
    assert_eq!(iters, 5);

    let mu = [0.3, 0.7];
    let mut f = f64::NAN;
    assert_eq!(
        unsafe { mfirl_trainer_reward(trainer, 1, 0, mu.as_ptr(), 2, 1, &mut f) },
        MfirlStatus::Ok
    );
    assert!(f.is_finite());
    let off_simplex = [0.3, 0.3];
    assert_ne!(
        unsafe { mfirl_trainer_reward(trainer, 1, 0, off_simplex.as_ptr(), 2, 1, &mut f) },
        MfirlStatus::Ok
    );

    let pairs = [0usize, 1, 1, 0, 1, 1, 0, 0, 0, 1, 1, 1, 0, 0];
    let mut post = [0.0; 2];
    assert_eq!(
        unsafe { mfirl_trainer_infer(trainer, pairs.as_ptr(), 7, post.as_mut_ptr(), 2) },
        MfirlStatus::Ok
    );
    assert!((post[0] + post[1] - 1.0).abs() < 1e-12);

    let path = CString::new(dir.path().join("ckpt.bin").display().to_string()).unwrap();
    assert_eq!(
        unsafe { mfirl_trainer_save(trainer, path.as_ptr()) },
        MfirlStatus::Ok
    );
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { mfirl_trainer_load(path.as_ptr(), &mut loaded) },
        MfirlStatus::Ok
    );
    let mut g = f64::NAN;
    assert_eq!(
        unsafe { mfirl_trainer_reward(loaded, 1, 0, mu.as_ptr(), 2, 1, &mut g) },
        MfirlStatus::Ok
    );
    assert_eq!(f.to_bits(), g.to_bits());

    let wrong = CString::new("gail").unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(
        unsafe { mfirl_train(env, demos.as_ptr(), wrong.as_ptr(), 5, 8, 3, &mut none) },
        MfirlStatus::InvalidArgument
    );
    assert!(none.is_null());

    unsafe {
        mfirl_trainer_free(trainer);
        mfirl_trainer_free(loaded);
        mfirl_env_free(env);
    }
}

#[test]
fn scalar_helpers_and_cli_entry() {
    assert!((mfirl_surcharge_factor(2.33, 1.0) - 0.5610359055145355).abs() < 1e-12);
    let version = unsafe { CStr::from_ptr(mfirl_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
    let args: Vec<CString> = ["mfirl", "solve", "--env", "unknown"]
        .iter()
        .map(|s| CString::new(*s).unwrap())
        .collect();
    let argv: Vec<_> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(
        unsafe { mfirl_cli_run(argv.len() as i32, argv.as_ptr()) },
        2
    );
    assert_eq!(unsafe { mfirl_cli_run(0, ptr::null()) }, 2);
}

fn header() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mfirl.h")).unwrap()
}

#[test]
fn header_declares_every_export() {
    let h = header();
    let src =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(
            h.contains(&format!("{name}(")),
            "{name} missing from header"
        );
    }
    assert!(h.contains("MFIRL_STATUS_BUFFER_TOO_SMALL = 3"));
    assert!(h.contains("typedef struct MfirlEnv MfirlEnv;"));
}

/// Compiles and runs a C client against the generated header and static library.
#[test]
fn c_client_links_and_runs() {
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libmfirl_ffi.a");
    assert!(
        lib.exists(),
        "static library not built at {}",
        lib.display()
    );
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("client.c");
    std::fs::write(
        &c,
        r#"
#include <stdio.h>
#include "mfirl.h"
int main(void) {
    MfirlEnv *env = NULL;
    if (mfirl_env_new("malware", 12, &env) != MFIRL_STATUS_OK) return 10;
    MfirlEquilibrium *eq = NULL;
    if (mfirl_solve(env, 0, 1e-10, 10000, 0.0, &eq) != MFIRL_STATUS_OK) return 11;
    double mu[64];
    size_t s, a, m, h;
    mfirl_env_shape(env, &s, &a, &m, &h);
    if (mfirl_equilibrium_mean_field(eq, h, mu, s) != MFIRL_STATUS_OK) return 12;
    double total = 0.0;
    for (size_t i = 0; i < s; ++i) total += mu[i];
    if (mfirl_env_new("bogus", 12, &env) != MFIRL_STATUS_INVALID_ARGUMENT) return 13;
    printf("states=%zu total=%.12f error=%s\n", s, total, mfirl_last_error());
    mfirl_equilibrium_free(eq);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("client");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&c)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "client exited with {:?}",
        out.status.code()
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("states="), "{stdout}");
    assert!(stdout.contains("total=1.000000000000"), "{stdout}");
    assert!(stdout.contains("bogus"), "{stdout}");
}
