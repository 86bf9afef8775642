#ifndef DSOBA_H
#define DSOBA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  DSOBA_STATUS_OK = 0,
  DSOBA_STATUS_NULL_POINTER = 1,
  DSOBA_STATUS_INVALID_ARGUMENT = 2,
  DSOBA_STATUS_INCOMPATIBLE_SIZE = 3,
  DSOBA_STATUS_NON_STOCHASTIC_WEIGHTS = 4,
  DSOBA_STATUS_DIMENSION_MISMATCH = 5,
  DSOBA_STATUS_CONFIG_MISMATCH = 6,
  DSOBA_STATUS_NUMERICAL_DIVERGENCE = 7,
  DSOBA_STATUS_TIME_LIMIT = 8,
  DSOBA_STATUS_SOLVE_FAILED = 9,
  DSOBA_STATUS_GRID_MISMATCH = 10,
  DSOBA_STATUS_EMPTY_INPUT = 11,
  DSOBA_STATUS_IO = 12,
  DSOBA_STATUS_PANIC = 13,
} DsobaStatus;

typedef enum {
  DSOBA_TOPOLOGY_KIND_FULLY_CONNECTED = 0,
  /**
   * Uses `self_weight` and `neighbor_weight`.
   */
  DSOBA_TOPOLOGY_KIND_RING = 1,
  DSOBA_TOPOLOGY_KIND_ADJUSTED_RING = 2,
  /**
   * Uses `rows` and `cols`.
   */
  DSOBA_TOPOLOGY_KIND_TORUS = 3,
  DSOBA_TOPOLOGY_KIND_EXPONENTIAL_GRAPH = 4,
} DsobaTopologyKind;

typedef enum {
  DSOBA_VARIANT_SO = 0,
  DSOBA_VARIANT_FO = 1,
  DSOBA_VARIANT_CENTRALIZED = 2,
} DsobaVariant;

typedef enum {
  DSOBA_METRIC_GRAD_SQ_NORM = 0,
  DSOBA_METRIC_PHI_GAP = 1,
  DSOBA_METRIC_CONSENSUS_ERROR = 2,
  DSOBA_METRIC_UPPER_LOSS = 3,
  DSOBA_METRIC_EXCESS_LOSS = 4,
} DsobaMetric;

/**
 * Opaque synthetic problem instance.
 */
typedef struct DsobaProblem DsobaProblem;

/**
 * Opaque metrics trajectory.
 */
typedef struct DsobaRecord DsobaRecord;

/**
 * Opaque mixing matrix.
 */
typedef struct DsobaTopology DsobaTopology;

typedef struct {
  DsobaTopologyKind kind;
  size_t n;
  double self_weight;
  double neighbor_weight;
  size_t rows;
  size_t cols;
} DsobaTopologySpec;

typedef struct {
  size_t n_nodes;
  size_t dim_x;
  size_t dim_y;
  double conditioning;
  double heterogeneity;
  double noise;
} DsobaQuadraticSpec;

/**
 * Step-size settings. `theta < 0` means `theta_t = c3 * alpha_t`;
 * `decay_period == 0` means constant steps.
 */
typedef struct {
  DsobaVariant variant;
  double alpha0;
  double c1;
  double c2;
  double c3;
  double theta;
  double tau;
  double decay_factor;
  size_t decay_period;
  double delta;
} DsobaHyperParams;

/**
 * One probe. `phi_gap` is NaN when the optimal value is unknown.
 */
typedef struct {
  uint64_t t;
  double grad_sq_norm;
  double phi_gap;
  double consensus_error;
  double upper_loss;
  double alpha;
} DsobaProbe;

typedef struct {
  uint64_t cutoff_iteration;
  bool matched;
} DsobaTransient;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread (empty after a success).
 * The pointer stays valid until the next call on the same thread.
 */
const char *dsoba_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dsoba_version(void);

/**
 * Builds a named graph family.
 *
 * # Safety
 * `spec` must point to a valid spec and `out` to writable storage.
 */
DsobaStatus dsoba_topology_new(const DsobaTopologySpec *spec, DsobaTopology **out);

/**
 * Validates an explicit `n x n` row-major weight matrix.
 *
 * # Safety
 * `weights` must hold `n * n` readable doubles; `out` must be writable.
 */
DsobaStatus dsoba_topology_from_weights(size_t n, const double *weights, DsobaTopology **out);

/**
 * # Safety
 * `topology` must come from a constructor and not be used afterwards.
 */
void dsoba_topology_free(DsobaTopology *topology);

/**
 * Node count; 0 for a null handle.
 *
 * # Safety
 * `topology` must be null or a live handle.
 */
size_t dsoba_topology_n(const DsobaTopology *topology);

/**
 * `||W - 11'/n||_2`.
 *
 * # Safety
 * `topology` must be a live handle and `rho` writable.
 */
DsobaStatus dsoba_topology_rho(const DsobaTopology *topology, double *rho);

/**
 * Copies the weights row-major into `buffer` of length `len >= n * n`.
 *
 * # Safety
 * `buffer` must hold `len` writable doubles.
 */
DsobaStatus dsoba_topology_weights(const DsobaTopology *topology, double *buffer, size_t len);

/**
 * Random quadratic bilevel instance.
 *
 * # Safety
 * `spec` must be valid and `out` writable.
 */
DsobaStatus dsoba_problem_quadratic_new(uint64_t seed,
                                        const DsobaQuadraticSpec *spec,
                                        DsobaProblem **out);

/**
 * Quadratic instance with an extra `weight * log cosh` lower-level term.
 *
 * # Safety
 * `spec` must be valid and `out` writable.
 */
DsobaStatus dsoba_problem_logcosh_new(uint64_t seed,
                                      const DsobaQuadraticSpec *spec,
                                      double weight,
                                      DsobaProblem **out);

/**
 * Streaming ridge-parameter tuning instance.
 *
 * # Safety
 * `out` must be writable.
 */
DsobaStatus dsoba_problem_ridge_new(uint64_t seed,
                                    size_t n_nodes,
                                    size_t dim,
                                    double heterogeneity,
                                    DsobaProblem **out);

/**
 * # Safety
 * `problem` must come from a constructor and not be used afterwards.
 */
void dsoba_problem_free(DsobaProblem *problem);

/**
 * Node count and dimensions of `x` and `y`.
 *
 * # Safety
 * All pointers must be valid.
 */
DsobaStatus dsoba_problem_dims(const DsobaProblem *problem,
                               size_t *n_nodes,
                               size_t *dim_x,
                               size_t *dim_y);

/**
 * Exact `grad Phi(x)` written into `grad` (length `dim_x`).
 *
 * # Safety
 * `x` and `grad` must each hold `dim_x` doubles.
 */
DsobaStatus dsoba_problem_hypergradient(const DsobaProblem *problem,
                                        const double *x,
                                        size_t dim_x,
                                        double *grad);

/**
 * Defaults for `variant`.
 */
DsobaHyperParams dsoba_hyper_default(DsobaVariant variant);

/**
 * Runs `iterations` steps from the zero state, probing every `probe_every`
 * iterations and at the end. `shared_streams` makes every node replay the
 * same random stream.
 *
 * On divergence or solver failure the status is non-zero and `out` still
 * receives the probes recorded so far.
 *
 * # Safety
 * Handles must be live; `hyper` valid; `out` writable.
 */
DsobaStatus dsoba_run(const DsobaProblem *problem,
                      const DsobaTopology *topology,
                      const DsobaHyperParams *hyper,
                      size_t iterations,
                      size_t probe_every,
                      uint64_t seed,
                      bool shared_streams,
                      DsobaRecord **out);

/**
 * # Safety
 * `record` must come from [`dsoba_run`] and not be used afterwards.
 */
void dsoba_record_free(DsobaRecord *record);

/**
 * Number of probes; 0 for a null handle.
 *
 * # Safety
 * `record` must be null or a live handle.
 */
size_t dsoba_record_len(const DsobaRecord *record);

/**
 * # Safety
 * `record` must be live and `probe` writable.
 */
DsobaStatus dsoba_record_probe(const DsobaRecord *record, size_t index, DsobaProbe *probe);

/**
 * Writes the record as CSV (`t,grad_sq_norm,phi_gap,consensus_error,upper_loss,alpha`).
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string.
 */
DsobaStatus dsoba_record_write_csv(const DsobaRecord *record, const char *path);

/**
 * First probe from which `decentralized` stays within `(1 + rel_tol)` of
 * `centralized` after trailing-median smoothing over `window` probes.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
DsobaStatus dsoba_transient_cutoff(const DsobaRecord *decentralized,
                                   const DsobaRecord *centralized,
                                   double rel_tol,
                                   size_t window,
                                   DsobaMetric metric,
                                   DsobaTransient *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSOBA_H */
