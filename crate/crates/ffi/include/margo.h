#ifndef MARGO_H
#define MARGO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MARGO_STATUS_OK = 0,
  MARGO_STATUS_NULL_POINTER = 1,
  MARGO_STATUS_INVALID_ARGUMENT = 2,
  MARGO_STATUS_IO = 3,
  MARGO_STATUS_PARSE = 4,
  MARGO_STATUS_DATA = 5,
  MARGO_STATUS_NUMERICAL = 6,
  MARGO_STATUS_BUFFER_TOO_SMALL = 7,
  MARGO_STATUS_PANIC = 8,
} MargoStatus;

// Dataset with its modality features and split.
typedef struct MargoData MargoData;

// Model parameters and the fusion rule used for scoring.
typedef struct MargoModel MargoModel;

typedef struct {
  size_t users;
  size_t items;
  size_t latent_dim;
  // Number of modalities; every modality has `modality_dim` features.
  size_t modalities;
  size_t modality_dim;
  size_t interactions_per_user;
  size_t corrupted_modality;
  double corruption_fraction;
  double noise_scale;
  uint64_t seed;
} MargoSynthSpec;

typedef struct {
  size_t embed_dim;
  double lr;
  size_t batch_size;
  size_t max_epochs;
  size_t patience;
  double alpha;
  double beta;
  double tau;
  uint64_t seed;
} MargoTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static string.
const char *margo_version(void);

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *margo_last_error(void);

// Frees a string returned by this library.
//
// # Safety
// `s` must be null or a string from `margo_model_fingerprint`, freed once.
void margo_string_free(char *s);

// Fills `spec` with the default synthetic configuration.
//
// # Safety
// `spec` must be null or point to writable memory for one spec.
MargoStatus margo_synth_spec_default(MargoSynthSpec *spec);

// Generates a synthetic dataset and splits it with `spec.seed`.
//
// # Safety
// `spec` must point to a valid spec; `out` to writable handle storage.
MargoStatus margo_data_generate(const MargoSynthSpec *spec, MargoData **out);

// Loads an interaction TSV and one feature TSV per modality, then splits
// the interactions with `seed`.
//
// # Safety
// Paths must be NUL-terminated; `feature_paths` must hold `modalities`
// pointers; `out` must be writable.
MargoStatus margo_data_load(const char *interactions,
                            const char *const *feature_paths,
                            size_t modalities,
                            uint64_t seed,
                            MargoData **out);

// Writes user, item and modality counts. Any output pointer may be null.
//
// # Safety
// `data` must be a live handle.
MargoStatus margo_data_counts(const MargoData *data,
                              size_t *users,
                              size_t *items,
                              size_t *modalities);

// # Safety
// `data` must be null or a handle from this library, freed once.
void margo_data_free(MargoData *data);

// Fills `opts` with the library's default training options.
//
// # Safety
// `opts` must be null or writable.
MargoStatus margo_train_options_default(MargoTrainOptions *opts);

// Trains `variant` ("full", "no_weight", "no_cal", "no_two_stage",
// "no_nograd"; null means "full").
//
// # Safety
// `data` and `opts` must be valid; `variant` null or NUL-terminated; `out`
// writable.
MargoStatus margo_train(const MargoData *data,
                        const MargoTrainOptions *opts,
                        const char *variant,
                        MargoModel **out);

// Loads a checkpoint. `weighted` selects weighted fusion for scoring
// (0 scores with summed fusion, as a stage-I model).
//
// # Safety
// `path` must be NUL-terminated; `out` writable.
MargoStatus margo_model_load(const char *path, bool weighted, MargoModel **out);

// # Safety
// `model` must be live; `path` NUL-terminated.
MargoStatus margo_model_save(const MargoModel *model, const char *path);

// SHA-256 of the checkpoint bytes as hex. Free with `margo_string_free`.
// Null on error.
//
// # Safety
// `model` must be null or live.
char *margo_model_fingerprint(const MargoModel *model);

// # Safety
// `model` must be null or a handle from this library, freed once.
void margo_model_free(MargoModel *model);

// Scores every item for `user` into `out` (`len` must be at least the
// item count).
//
// # Safety
// Handles must be live; `out` must hold `len` doubles.
MargoStatus margo_model_score_all(const MargoModel *model,
                                  const MargoData *data,
                                  size_t user,
                                  double *out,
                                  size_t len);

// Softmax modality weights of `item` into `out`.
//
// # Safety
// `model` must be live; `out` must hold `len` doubles.
MargoStatus margo_model_weights(const MargoModel *model, size_t item, double *out, size_t len);

// Recall@k and NDCG@k on the validation (`split` = 1) or test (`split` = 2)
// interactions.
//
// # Safety
// Handles must be live; `recall` and `ndcg` writable.
MargoStatus margo_evaluate(const MargoModel *model,
                           const MargoData *data,
                           uint32_t split,
                           size_t k,
                           double *recall,
                           double *ndcg);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MARGO_H */
