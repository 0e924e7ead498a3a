#ifndef BIDLAB_H
#define BIDLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BidlabStatus {
  BIDLAB_STATUS_OK = 0,
  BIDLAB_STATUS_NULL_POINTER = 1,
  BIDLAB_STATUS_INVALID_ARGUMENT = 2,
  BIDLAB_STATUS_PARSE = 3,
  BIDLAB_STATUS_MISSING_FILE = 4,
  BIDLAB_STATUS_IO = 5,
  BIDLAB_STATUS_RUNTIME = 6,
  BIDLAB_STATUS_PANIC = 7,
  BIDLAB_STATUS_UTF8 = 8,
  BIDLAB_STATUS_OUT_OF_RANGE = 9,
} BidlabStatus;

typedef struct BidlabController BidlabController;

typedef struct BidlabResponse BidlabResponse;

typedef struct BidlabState BidlabState;

typedef struct BidlabTrace BidlabTrace;

// Feedback available to a controller at the start of a period.
typedef struct BidlabObservation {
  size_t period;
  size_t horizon;
  double remaining_goal;
  double last_volume;
  double last_spend;
} BidlabObservation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `cap`). Returns the full message length without the NUL.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t bidlab_last_error(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *bidlab_version(void);

// Loads a PI or GRU model file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum BidlabStatus bidlab_controller_load(const char *path, struct BidlabController **out);

// Parses a model from the text of a model file.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum BidlabStatus bidlab_controller_from_text(const char *text, struct BidlabController **out);

// # Safety
// `c` must be null or a handle from this library that has not been freed.
void bidlab_controller_free(struct BidlabController *c);

// Highest bid the controller can emit (the penalty level).
//
// # Safety
// Pointers must be valid.
enum BidlabStatus bidlab_controller_max_bid(const struct BidlabController *c, double *out);

// Fresh per-episode state for `c`.
//
// # Safety
// Pointers must be valid.
enum BidlabStatus bidlab_state_new(const struct BidlabController *c, struct BidlabState **out);

// # Safety
// `s` must be null or a handle from this library that has not been freed.
void bidlab_state_free(struct BidlabState *s);

// Bid for the observed period; advances `state`.
//
// # Safety
// Pointers must be valid and `state` must come from the same controller.
enum BidlabStatus bidlab_controller_act(const struct BidlabController *c,
                                        struct BidlabState *state,
                                        const struct BidlabObservation *obs,
                                        double *bid);

// Log-normal landscape on the standard price grid, smoothed by Gamma bid
// noise of the given shape. `gamma_shape <= 0` keeps exact (Dirac) bids.
//
// # Safety
// `out` must be writable.
enum BidlabStatus bidlab_response_lognormal(double median,
                                            double log_sd,
                                            double gamma_shape,
                                            struct BidlabResponse **out);

// Normal winning-price response with the given mean and standard deviation.
//
// # Safety
// `out` must be writable.
enum BidlabStatus bidlab_response_gaussian(double mean, double sd, struct BidlabResponse **out);

// # Safety
// `r` must be null or a handle from this library that has not been freed.
void bidlab_response_free(struct BidlabResponse *r);

// Win probability and expected spend per available impression at `bid`.
//
// # Safety
// Pointers must be valid.
enum BidlabStatus bidlab_response_eval(const struct BidlabResponse *r,
                                       double bid,
                                       double *win,
                                       double *spend);

// Plays `c` over `n` periods of the given intensities with expected feedback.
//
// # Safety
// `intensities` must point to `n` readable values; other pointers must be valid.
enum BidlabStatus bidlab_run_episode(const struct BidlabController *c,
                                     const struct BidlabResponse *r,
                                     const double *intensities,
                                     size_t n,
                                     double goal,
                                     double penalty,
                                     struct BidlabTrace **out);

// # Safety
// `t` must be null or a handle from this library that has not been freed.
void bidlab_trace_free(struct BidlabTrace *t);

// Number of periods in the trace; 0 for a null handle.
//
// # Safety
// `t` must be null or a valid handle.
size_t bidlab_trace_len(const struct BidlabTrace *t);

// Bid, won volume and spend of period `period`.
//
// # Safety
// Pointers must be valid.
enum BidlabStatus bidlab_trace_period(const struct BidlabTrace *t,
                                      size_t period,
                                      double *bid,
                                      double *volume,
                                      double *spend);

// Final cost and the penalty part of it.
//
// # Safety
// Pointers must be valid.
enum BidlabStatus bidlab_trace_cost(const struct BidlabTrace *t,
                                    double *cost,
                                    double *penalty_paid);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BIDLAB_H */
