#ifndef PCAM_H
#define PCAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum PcamStatus {
  PCAM_STATUS_OK = 0,
  PCAM_STATUS_NULL_POINTER = 1,
  PCAM_STATUS_INVALID_ARGUMENT = 2,
  PCAM_STATUS_CONFIG = 3,
  PCAM_STATUS_FORMAT = 4,
  PCAM_STATUS_INTEGRITY = 5,
  PCAM_STATUS_NON_FINITE = 6,
  PCAM_STATUS_MISSING = 7,
  PCAM_STATUS_IO = 8,
  PCAM_STATUS_SHAPE = 9,
  PCAM_STATUS_CONTRACT = 10,
  PCAM_STATUS_PANIC = 11,
} PcamStatus;

// Training hyperparameters.
typedef struct PcamConfig PcamConfig;

// Frozen encoder producing one feature row per cloud.
typedef struct PcamExtractor PcamExtractor;

// Training run over the train split of a dataset directory.
typedef struct PcamTrainer PcamTrainer;

// Losses of one training step.
typedef struct PcamLossReport {
  uint64_t step;
  double l_mpm;
  double l_cls;
  double l_spar;
  double l_div;
  double l_encoder_total;
  double l_mask_total;
  double teacher_entropy;
} PcamLossReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pcam_version(void);

// Length in bytes of the calling thread's last error message, without
// the terminating NUL.
size_t pcam_last_error_length(void);

// Copy the last error message into `buf` (NUL-terminated, truncated to
// `len - 1` bytes). Returns the full message length.
size_t pcam_last_error_message(char *buf, size_t len);

// Parse a config file.
enum PcamStatus pcam_config_load(const char *path, struct PcamConfig **out);

// The bundled desk-scale config.
enum PcamStatus pcam_config_desk(struct PcamConfig **out);

// Override the seed of a config.
enum PcamStatus pcam_config_set_seed(struct PcamConfig *cfg, uint64_t seed);

// Override the number of training steps of a config.
enum PcamStatus pcam_config_set_steps(struct PcamConfig *cfg, size_t steps);

void pcam_config_free(struct PcamConfig *cfg);

// Extractor with freshly initialized weights.
enum PcamStatus pcam_extractor_random(const struct PcamConfig *cfg, struct PcamExtractor **out);

// Extractor with the encoder weights of a checkpoint.
enum PcamStatus pcam_extractor_load(const struct PcamConfig *cfg,
                                    const char *checkpoint,
                                    struct PcamExtractor **out);

// Width of a feature row, or 0 for a null handle.
size_t pcam_extractor_width(const struct PcamExtractor *ex);

// Features of one cloud given as `n_points` xyz triples. `out` must hold
// `out_len >= pcam_extractor_width(ex)` floats.
enum PcamStatus pcam_extractor_extract(const struct PcamExtractor *ex,
                                       const float *points,
                                       size_t n_points,
                                       float *out,
                                       size_t out_len);

void pcam_extractor_free(struct PcamExtractor *ex);

// Trainer over the train split of the dataset in `data_dir`.
enum PcamStatus pcam_trainer_new(const struct PcamConfig *cfg,
                                 const char *data_dir,
                                 struct PcamTrainer **out);

// Run the next training step; `report` may be null.
enum PcamStatus pcam_trainer_step(struct PcamTrainer *tr, struct PcamLossReport *report);

// Completed steps, or 0 for a null handle.
size_t pcam_trainer_steps_done(const struct PcamTrainer *tr);

// Write the full training state as a checkpoint.
enum PcamStatus pcam_trainer_save(const struct PcamTrainer *tr, const char *path);

void pcam_trainer_free(struct PcamTrainer *tr);

// Furthest point sampling of `p` indices from `n_points` xyz triples,
// starting at index `start`. `out` must hold `p` entries.
enum PcamStatus pcam_fps(const float *points, size_t n_points, size_t p, size_t start, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCAM_H */
