#ifndef SCNFUSION_H
#define SCNFUSION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum ScnfStatus {
  SCNF_STATUS_OK = 0,
  SCNF_STATUS_NULL_ARGUMENT = 1,
  SCNF_STATUS_INVALID_ARGUMENT = 2,
  SCNF_STATUS_IO = 3,
  SCNF_STATUS_NIFTI = 4,
  SCNF_STATUS_CONFIG = 5,
  SCNF_STATUS_SHAPE = 6,
  SCNF_STATUS_NUMERIC = 7,
  SCNF_STATUS_ARTIFACT_MISMATCH = 8,
  SCNF_STATUS_PANIC = 9,
} ScnfStatus;

/**
 * An atlas parcellation with its ROI table.
 */
typedef struct ScnfAtlas ScnfAtlas;

/**
 * A trained classifier loaded from a checkpoint.
 */
typedef struct ScnfModel ScnfModel;

/**
 * A decoded NIfTI volume.
 */
typedef struct ScnfVolume ScnfVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *scnf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *scnf_version(void);

/**
 * Reads a `.nii` or `.nii.gz` file.
 */
enum ScnfStatus scnf_volume_read(const char *path, struct ScnfVolume **out);

/**
 * Writes the grid shape (x, y, z) into `shape[0..3]`.
 */
enum ScnfStatus scnf_volume_shape(const struct ScnfVolume *volume, size_t *shape);

/**
 * Borrows the voxel values (x fastest). The pointer lives as long as the
 * volume handle.
 */
enum ScnfStatus scnf_volume_data(const struct ScnfVolume *volume, const double **data, size_t *len);

void scnf_volume_free(struct ScnfVolume *volume);

/**
 * Reads an atlas label volume and its `label_id<TAB>name` table.
 */
enum ScnfStatus scnf_atlas_read(const char *nifti_path,
                                const char *roi_table_path,
                                struct ScnfAtlas **out);

/**
 * Number of ROIs, or 0 for a NULL handle.
 */
size_t scnf_atlas_n_rois(const struct ScnfAtlas *atlas);

void scnf_atlas_free(struct ScnfAtlas *atlas);

/**
 * Normalises `volume` with the default robust parameters and writes the
 * per-ROI means and IQRs (`n_rois` each) and the global mean, SD and
 * median (`global_stats[0..3]`). The atlas is resampled when the grids
 * differ.
 */
enum ScnfStatus scnf_extract_features(const struct ScnfVolume *volume,
                                      const struct ScnfAtlas *atlas,
                                      size_t n_rois,
                                      double *roi_means,
                                      double *roi_iqrs,
                                      double *global_stats);

/**
 * Builds the `2 × n × n` SCN input of one subject from its descriptors and
 * the two `n × n` group correlation matrices, blended with weight `alpha`
 * on the group term.
 */
enum ScnfStatus scnf_build_scn(size_t n,
                               const double *roi_means,
                               const double *roi_iqrs,
                               const double *group_mean,
                               const double *group_iqr,
                               double alpha,
                               double *out);

/**
 * Loads `<stem>.json` + `<stem>.bin` written by `scnfusion train`.
 */
enum ScnfStatus scnf_model_load(const char *checkpoint_stem, struct ScnfModel **out);

/**
 * Input sizes of a model: ROI count and auxiliary vector length.
 */
enum ScnfStatus scnf_model_dims(const struct ScnfModel *model, size_t *n_rois, size_t *n_aux);

void scnf_model_free(struct ScnfModel *model);

/**
 * Eval-mode ADHD probability of one subject. `scn` holds `2·n·n` values,
 * `aux` holds `n_aux` values and may be NULL when `use_aux` is 0.
 */
enum ScnfStatus scnf_model_predict(struct ScnfModel *model,
                                   const double *scn,
                                   const double *aux,
                                   int use_aux,
                                   double *prob_adhd);

/**
 * Grad-CAM ROI importance (max-normalised, `n_rois` values) of one
 * subject for the ADHD logit.
 */
enum ScnfStatus scnf_model_gradcam(struct ScnfModel *model,
                                   const double *scn,
                                   const double *aux,
                                   int use_aux,
                                   double *scores);

/**
 * Midrank ROC AUC with label 1 as the positive class.
 */
enum ScnfStatus scnf_auc(const uint8_t *labels, const double *scores, size_t n, double *auc);

/**
 * Runs one pipeline stage (`synth`, `extract`, `train`, `explain` or
 * `report`) as the CLI would. `config_path` and `output_dir` may be NULL;
 * `jobs` of 0 uses all cores.
 */
enum ScnfStatus scnf_run_stage(const char *config_path,
                               const char *stage,
                               const char *output_dir,
                               size_t jobs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCNFUSION_H */
