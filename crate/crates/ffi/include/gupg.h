#ifndef GUPG_H
#define GUPG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum GupgStatus {
  GUPG_STATUS_OK = 0,
  GUPG_STATUS_NULL_POINTER = 1,
  GUPG_STATUS_INVALID_ARGUMENT = 2,
  GUPG_STATUS_INVALID_MODEL = 3,
  GUPG_STATUS_INVALID_POLICY = 4,
  GUPG_STATUS_NUMERICAL = 5,
  GUPG_STATUS_BARRIER_VIOLATED = 6,
  GUPG_STATUS_CONFIG = 7,
  GUPG_STATUS_IO = 8,
  GUPG_STATUS_PANIC = 9,
} GupgStatus;

/*
 Policy parameterization selector.
 */
typedef enum GupgParameterization {
  GUPG_PARAMETERIZATION_TABULAR = 0,
  GUPG_PARAMETERIZATION_SOFTMAX = 1,
} GupgParameterization;

/*
 Experiment command selector for [`gupg_run_experiment`].
 */
typedef enum GupgCommand {
  GUPG_COMMAND_ESTIMATE_GRADIENT = 0,
  GUPG_COMMAND_TRAIN = 1,
  GUPG_COMMAND_MSE_STUDY = 2,
  GUPG_COMMAND_RATE_STUDY = 3,
  GUPG_COMMAND_SWEEP = 4,
} GupgCommand;

/*
 Opaque MDP handle.
 */
typedef struct GupgMdp GupgMdp;

/*
 Opaque policy handle.
 */
typedef struct GupgPolicy GupgPolicy;

/*
 Opaque utility handle.
 */
typedef struct GupgUtility GupgUtility;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer stays
 valid until the next call into this library on the same thread.
 */
const char *gupg_last_error(void);

/*
 Gridworld from a '/'-joined layout over {S, F, H, G, C}. `start_weight`
 is the initial mass on S, the rest spread uniformly (1 = start only).

 # Safety
 `layout` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GupgStatus gupg_mdp_gridworld(const char *layout,
                                   double gamma,
                                   bool slippery,
                                   double start_weight,
                                   struct GupgMdp **out);

/*
 Random MDP with Dirichlet(`alpha`) rows and uniform reward/cost channels.

 # Safety
 `out` must be a valid pointer.
 */
enum GupgStatus gupg_mdp_random(size_t states,
                                size_t actions,
                                double gamma,
                                uint64_t seed,
                                double alpha,
                                struct GupgMdp **out);

/*
 # Safety
 `mdp` must come from a `gupg_mdp_*` constructor and not be used afterwards.
 */
void gupg_mdp_free(struct GupgMdp *mdp);

/*
 # Safety
 `mdp` must be a live handle or NULL (returns 0).
 */
size_t gupg_mdp_num_states(const struct GupgMdp *mdp);

/*
 # Safety
 `mdp` must be a live handle or NULL (returns 0).
 */
size_t gupg_mdp_num_actions(const struct GupgMdp *mdp);

/*
 The uniform policy: θ = 0 for softmax, π = 1/A for tabular.

 # Safety
 `out` must be a valid pointer.
 */
enum GupgStatus gupg_policy_uniform(enum GupgParameterization kind,
                                    size_t states,
                                    size_t actions,
                                    struct GupgPolicy **out);

/*
 Policy from a row-major S×A parameter table (probabilities for tabular,
 logits for softmax).

 # Safety
 `params` must point to `states * actions` doubles; `out` must be valid.
 */
enum GupgStatus gupg_policy_from_params(enum GupgParameterization kind,
                                        size_t states,
                                        size_t actions,
                                        const double *params,
                                        struct GupgPolicy **out);

/*
 # Safety
 `policy` must come from a `gupg_policy_*` constructor and not be used afterwards.
 */
void gupg_policy_free(struct GupgPolicy *policy);

/*
 Writes π(a|s) row-major into `out` (length S·A).

 # Safety
 `policy` must be live; `out` must hold `len` doubles.
 */
enum GupgStatus gupg_policy_probs(const struct GupgPolicy *policy, double *out, size_t len);

/*
 F(λ) = ⟨λ, r⟩.

 # Safety
 `reward` must point to `states * actions` doubles; `out` must be valid.
 */
enum GupgStatus gupg_utility_linear(size_t states,
                                    size_t actions,
                                    const double *reward,
                                    struct GupgUtility **out);

/*
 Entropy of the normalized state visitation.

 # Safety
 `out` must be a valid pointer.
 */
enum GupgStatus gupg_utility_entropy(double gamma, struct GupgUtility **out);

/*
 Negative KL divergence of the state visitation from `prior` (length S).

 # Safety
 `prior` must point to `states` doubles; `out` must be valid.
 */
enum GupgStatus gupg_utility_kl(size_t states,
                                const double *prior,
                                double gamma,
                                struct GupgUtility **out);

/*
 ⟨λ, r⟩ + β log(C − ⟨λ, c⟩).

 # Safety
 `reward` and `cost` must point to `states * actions` doubles; `out` must be valid.
 */
enum GupgStatus gupg_utility_log_barrier(size_t states,
                                         size_t actions,
                                         const double *reward,
                                         const double *cost,
                                         double budget,
                                         double beta,
                                         struct GupgUtility **out);

/*
 # Safety
 `utility` must come from a `gupg_utility_*` constructor and not be used afterwards.
 */
void gupg_utility_free(struct GupgUtility *utility);

/*
 Exact discounted occupancy λ(π), row-major into `out` (length S·A).

 # Safety
 Handles must be live; `out` must hold `len` doubles.
 */
enum GupgStatus gupg_occupancy(const struct GupgMdp *mdp,
                               const struct GupgPolicy *policy,
                               double *out,
                               size_t len);

/*
 R(π) = F(λ(π)).

 # Safety
 Handles must be live; `out` must be valid.
 */
enum GupgStatus gupg_objective(const struct GupgMdp *mdp,
                               const struct GupgPolicy *policy,
                               const struct GupgUtility *utility,
                               double *out);

/*
 Exact gradient ∇_θ F(λ(π_θ)) with respect to the policy parameters.

 # Safety
 Handles must be live; `out` must hold `len` doubles.
 */
enum GupgStatus gupg_gradient_exact(const struct GupgMdp *mdp,
                                    const struct GupgPolicy *policy,
                                    const struct GupgUtility *utility,
                                    double *out,
                                    size_t len);

/*
 Saddle-point gradient estimate from `episodes` sampled episodes and
 `iterations` primal-dual steps (running-average schedule, exact Q).

 # Safety
 Handles must be live; `out` must hold `len` doubles.
 */
enum GupgStatus gupg_gradient_variational(const struct GupgMdp *mdp,
                                          const struct GupgPolicy *policy,
                                          const struct GupgUtility *utility,
                                          size_t episodes,
                                          size_t iterations,
                                          uint64_t seed,
                                          double *out,
                                          size_t len);

/*
 Maximum of F over the occupancy polytope by Frank-Wolfe. Either output
 pointer may be NULL.

 # Safety
 Handles must be live; non-NULL outputs must be valid.
 */
enum GupgStatus gupg_optimum(const struct GupgMdp *mdp,
                             const struct GupgUtility *utility,
                             double *value,
                             double *certificate);

/*
 Runs an experiment from a JSON config file, writing artifacts under
 `out_dir` (NULL uses the config's output directory).

 # Safety
 `config_path` must be a NUL-terminated string; `out_dir` one or NULL.
 */
enum GupgStatus gupg_run_experiment(enum GupgCommand command,
                                    const char *config_path,
                                    const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GUPG_H */
