#ifndef MFIRL_H
#define MFIRL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum MfirlStatus {
  MFIRL_STATUS_OK = 0,
  MFIRL_STATUS_NULL_POINTER = 1,
  MFIRL_STATUS_INVALID_ARGUMENT = 2,
  MFIRL_STATUS_BUFFER_TOO_SMALL = 3,
  MFIRL_STATUS_DIMENSION_MISMATCH = 4,
  MFIRL_STATUS_NON_CONVERGENCE = 5,
  MFIRL_STATUS_IO = 6,
  MFIRL_STATUS_PARSE = 7,
  MFIRL_STATUS_NUMERICAL = 8,
  MFIRL_STATUS_PANIC = 9,
} MfirlStatus;

/**
 * Environment handle (VIRUS, MALWARE or INVEST).
 */
typedef struct MfirlEnv MfirlEnv;

/**
 * Solved equilibrium of one context.
 */
typedef struct MfirlEquilibrium MfirlEquilibrium;

/**
 * Training state: learned reward, samplers and (for the context-aware
 * learner) the context-inference network.
 */
typedef struct MfirlTrainer MfirlTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mfirl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mfirl_version(void);

/**
 * Creates one of the simulated environments (`virus`, `malware`, `invest`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MfirlStatus mfirl_env_new(const char *name, uintptr_t horizon, struct MfirlEnv **out);

/**
 * Releases an environment; NULL is ignored.
 *
 * # Safety
 * `env` must come from [`mfirl_env_new`] and not be used afterwards.
 */
void mfirl_env_free(struct MfirlEnv *env);

/**
 * Writes `(states, actions, contexts, horizon)` of the environment.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MfirlStatus mfirl_env_shape(const struct MfirlEnv *env,
                                 uintptr_t *states,
                                 uintptr_t *actions,
                                 uintptr_t *contexts,
                                 uintptr_t *horizon);

/**
 * Solves the entropy-regularised equilibrium of `context`.
 *
 * # Safety
 * `env` and `out` must be valid pointers.
 */
enum MfirlStatus mfirl_solve(const struct MfirlEnv *env,
                             uintptr_t context,
                             double tol,
                             uintptr_t max_iter,
                             double damping,
                             struct MfirlEquilibrium **out);

/**
 * Releases an equilibrium; NULL is ignored.
 *
 * # Safety
 * `eq` must come from [`mfirl_solve`] and not be used afterwards.
 */
void mfirl_equilibrium_free(struct MfirlEquilibrium *eq);

/**
 * Iterations used and final residual of the solve.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MfirlStatus mfirl_equilibrium_stats(const struct MfirlEquilibrium *eq,
                                         uintptr_t *iterations,
                                         double *residual);

/**
 * Copies `μᵗ` (length `states`) into `out`.
 *
 * # Safety
 * `out` must hold `len` doubles.
 */
enum MfirlStatus mfirl_equilibrium_mean_field(const struct MfirlEquilibrium *eq,
                                              uintptr_t t,
                                              double *out,
                                              uintptr_t len);

/**
 * Copies `πᵗ(a|s)` row-major (length `states × actions`) into `out`.
 *
 * # Safety
 * `out` must hold `len` doubles.
 */
enum MfirlStatus mfirl_equilibrium_policy(const struct MfirlEquilibrium *eq,
                                          uintptr_t t,
                                          double *out,
                                          uintptr_t len);

/**
 * Trains on the demonstrations in a trajectory CSV (`traj_id,t,state,action,context`).
 * `algorithm` is `mfairl` or `pemmfirl`; all other settings are the defaults
 * except `iterations`, `batch_size` and `seed`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `env` and `out` must be valid.
 */
enum MfirlStatus mfirl_train(const struct MfirlEnv *env,
                             const char *demos_csv,
                             const char *algorithm,
                             uintptr_t iterations,
                             uintptr_t batch_size,
                             uint64_t seed,
                             struct MfirlTrainer **out);

/**
 * Releases a trainer; NULL is ignored.
 *
 * # Safety
 * `trainer` must come from this library and not be used afterwards.
 */
void mfirl_trainer_free(struct MfirlTrainer *trainer);

/**
 * Writes a resumable checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated.
 */
enum MfirlStatus mfirl_trainer_save(const struct MfirlTrainer *trainer, const char *path);

/**
 * Loads a checkpoint written by [`mfirl_trainer_save`] or the `train` command.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum MfirlStatus mfirl_trainer_load(const char *path, struct MfirlTrainer **out);

/**
 * Completed training iterations.
 *
 * # Safety
 * Pointers must be valid.
 */
enum MfirlStatus mfirl_trainer_iterations(const struct MfirlTrainer *trainer, uintptr_t *out);

/**
 * Learned reward `f(s, a, μ, m)`; `mu` holds `mu_len` probabilities.
 *
 * # Safety
 * `mu` must hold `mu_len` doubles and `out` be valid.
 */
enum MfirlStatus mfirl_trainer_reward(const struct MfirlTrainer *trainer,
                                      uintptr_t state,
                                      uintptr_t action,
                                      const double *mu,
                                      uintptr_t mu_len,
                                      uintptr_t context,
                                      double *out);

/**
 * Context posterior `q(m|τ)` for a trajectory given as `len` interleaved
 * `(state, action)` pairs; writes one probability per learned context. The
 * context-blind learner reports the single context with probability 1.
 *
 * # Safety
 * `pairs` must hold `2 × len` values and `out` `out_len` doubles.
 */
enum MfirlStatus mfirl_trainer_infer(const struct MfirlTrainer *trainer,
                                     const uintptr_t *pairs,
                                     uintptr_t len,
                                     double *out,
                                     uintptr_t out_len);

/**
 * Pricing surcharge factor `η^0.5265 − η_s^0.5265`.
 */
double mfirl_surcharge_factor(double eta, double eta_s);

/**
 * Runs the command-line interface with `argc` arguments (including the
 * program name) and returns its exit code.
 *
 * # Safety
 * `argv` must hold `argc` NUL-terminated strings.
 */
int mfirl_cli_run(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFIRL_H */
