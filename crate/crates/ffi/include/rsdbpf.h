#ifndef RSDBPF_H
#define RSDBPF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  RSDBPF_DYNAMICS_MARKOV = 0,
  RSDBPF_DYNAMICS_POLYA = 1,
} RsdbpfDynamics;

typedef enum {
  RSDBPF_PROPOSAL_UNIFORM = 0,
  RSDBPF_PROPOSAL_BOOTSTRAP = 1,
  RSDBPF_PROPOSAL_DETERMINISTIC = 2,
} RsdbpfProposal;

typedef enum {
  RSDBPF_SPLIT_TRAIN = 0,
  RSDBPF_SPLIT_VAL = 1,
  RSDBPF_SPLIT_TEST = 2,
} RsdbpfSplit;

// Result of every fallible call.
typedef enum {
  RSDBPF_STATUS_OK = 0,
  RSDBPF_STATUS_NULL_POINTER = 1,
  RSDBPF_STATUS_INVALID_ARGUMENT = 2,
  RSDBPF_STATUS_VALIDATION = 3,
  RSDBPF_STATUS_DEGENERATE_WEIGHTS = 4,
  RSDBPF_STATUS_OBSERVATION_LENGTH = 5,
  RSDBPF_STATUS_PARSE = 6,
  RSDBPF_STATUS_VERSION = 7,
  RSDBPF_STATUS_NON_FINITE_LOSS = 8,
  RSDBPF_STATUS_IO = 9,
  RSDBPF_STATUS_AUTODIFF = 10,
  RSDBPF_STATUS_BUFFER_TOO_SMALL = 11,
  RSDBPF_STATUS_PANIC = 12,
} RsdbpfStatus;

// A generated or loaded trajectory dataset.
typedef struct RsdbpfDataset RsdbpfDataset;

// Neural regime models (one per regime; one for DBPF).
typedef struct RsdbpfNets RsdbpfNets;

// A model suite: candidate models, regime dynamics, horizon.
typedef struct RsdbpfSuite RsdbpfSuite;

// Filter settings. `ess_threshold <= 0` selects `n_particles / 2`.
typedef struct {
  size_t n_particles;
  double ess_threshold;
  RsdbpfProposal proposal;
  uint64_t seed;
} RsdbpfFilterOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *rsdbpf_last_error(void);

// Library version, a static NUL-terminated string.
const char *rsdbpf_version(void);

// The eight-regime suite with Markov or Pólya switching.
RsdbpfStatus rsdbpf_suite_new(RsdbpfDynamics dynamics, RsdbpfSuite **out);

void rsdbpf_suite_free(RsdbpfSuite *suite);

// Number of observations `T` per trajectory; 0 for NULL.
size_t rsdbpf_suite_horizon(const RsdbpfSuite *suite);

size_t rsdbpf_suite_n_regimes(const RsdbpfSuite *suite);

// Simulates trajectory `traj_id` of `seed`. `states` and `regimes` need
// `T + 1` entries, `observations` needs `T`. Regimes are 1-based.
RsdbpfStatus rsdbpf_suite_simulate(const RsdbpfSuite *suite,
                                   uint64_t seed,
                                   uint64_t traj_id,
                                   double *states,
                                   size_t states_len,
                                   uint32_t *regimes,
                                   size_t regimes_len,
                                   double *observations,
                                   size_t observations_len);

RsdbpfStatus rsdbpf_dataset_generate(const RsdbpfSuite *suite,
                                     size_t n_train,
                                     size_t n_val,
                                     size_t n_test,
                                     uint64_t seed,
                                     RsdbpfDataset **out);

RsdbpfStatus rsdbpf_dataset_load(const char *path, RsdbpfDataset **out);

RsdbpfStatus rsdbpf_dataset_save(const RsdbpfDataset *dataset, const char *path);

void rsdbpf_dataset_free(RsdbpfDataset *dataset);

// Number of trajectories; 0 for NULL.
size_t rsdbpf_dataset_len(const RsdbpfDataset *dataset);

// Copies a new handle to the dataset's model suite.
RsdbpfStatus rsdbpf_dataset_suite(const RsdbpfDataset *dataset, RsdbpfSuite **out);

// Id, split, observations (`T`) and true states `s_1..s_T` (`T`) of trajectory `index`.
RsdbpfStatus rsdbpf_dataset_trajectory(const RsdbpfDataset *dataset,
                                       size_t index,
                                       uint64_t *traj_id,
                                       RsdbpfSplit *split,
                                       double *observations,
                                       size_t observations_len,
                                       double *truth,
                                       size_t truth_len);

// Seeded initialisation of `n_regimes` networks (1 for DBPF).
RsdbpfStatus rsdbpf_nets_new(uint64_t seed, size_t n_regimes, RsdbpfNets **out);

RsdbpfStatus rsdbpf_nets_load(const char *path, RsdbpfNets **out);

RsdbpfStatus rsdbpf_nets_save(const RsdbpfNets *nets, const char *path);

void rsdbpf_nets_free(RsdbpfNets *nets);

size_t rsdbpf_nets_n_regimes(const RsdbpfNets *nets);

size_t rsdbpf_nets_n_params(const RsdbpfNets *nets);

// Copies the parameters, in checkpoint order, into `params`.
RsdbpfStatus rsdbpf_nets_get_params(const RsdbpfNets *nets, double *params, size_t len);

// Overwrites every parameter; `len` must equal the parameter count.
RsdbpfStatus rsdbpf_nets_set_params(RsdbpfNets *nets, const double *params, size_t len);

// Oracle regime-switching particle filter. `ess` may be NULL.
RsdbpfStatus rsdbpf_run_rs_pf(const RsdbpfSuite *suite,
                              const RsdbpfFilterOptions *opts,
                              const double *observations,
                              size_t n_obs,
                              double *estimates,
                              size_t estimates_len,
                              double *ess,
                              size_t ess_len);

// Multi-model baseline (no switching). `ess` may be NULL.
RsdbpfStatus rsdbpf_run_mm_pf(const RsdbpfSuite *suite,
                              const RsdbpfFilterOptions *opts,
                              const double *observations,
                              size_t n_obs,
                              double *estimates,
                              size_t estimates_len,
                              double *ess,
                              size_t ess_len);

// Learned regime-switching filter; `nets` needs one network per regime of
// `suite`, whose switching law is used. `ess` may be NULL.
RsdbpfStatus rsdbpf_run_rs_dbpf(const RsdbpfNets *nets,
                                const RsdbpfSuite *suite,
                                const RsdbpfFilterOptions *opts,
                                const double *observations,
                                size_t n_obs,
                                double *estimates,
                                size_t estimates_len,
                                double *ess,
                                size_t ess_len);

// Learned single-model filter; `nets` must hold exactly one network. `ess` may be NULL.
RsdbpfStatus rsdbpf_run_dbpf(const RsdbpfNets *nets,
                             const RsdbpfFilterOptions *opts,
                             const double *observations,
                             size_t n_obs,
                             double *estimates,
                             size_t estimates_len,
                             double *ess,
                             size_t ess_len);

// Root mean squared error of `n` estimates against `truth`.
RsdbpfStatus rsdbpf_rmse(const double *estimates, const double *truth, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RSDBPF_H */
