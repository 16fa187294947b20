#ifndef VC_INTERVENE_H
#define VC_INTERVENE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VciFeatureMode {
  VCI_FEATURE_MODE_DIRECT = 0,
  VCI_FEATURE_MODE_PASSTHROUGH = 1,
  VCI_FEATURE_MODE_LOGITS = 2,
} VciFeatureMode;

typedef enum VciFormat {
  VCI_FORMAT_COCO = 0,
  VCI_FORMAT_TSV = 1,
} VciFormat;

typedef enum VciStatus {
  VCI_STATUS_OK = 0,
  VCI_STATUS_NULL_POINTER = 1,
  VCI_STATUS_INVALID_ARGUMENT = 2,
  VCI_STATUS_IO = 3,
  VCI_STATUS_PARSE = 4,
  VCI_STATUS_SHAPE_MISMATCH = 5,
  VCI_STATUS_OUT_OF_RANGE = 6,
  VCI_STATUS_PANIC = 7,
} VciStatus;

typedef struct VciCounts VciCounts;

typedef struct VciDataset VciDataset;

typedef struct VciFeatures VciFeatures;

typedef struct VciHead VciHead;

typedef struct VciTable VciTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next `vci_*` call on the same thread.
 */
const char *vci_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vci_version(void);

/**
 * `format` is a `VciFormat` value.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VciStatus vci_dataset_load(const char *path, uint32_t format, struct VciDataset **out);

/**
 * # Safety
 * `ds` must come from `vci_dataset_load` or be null.
 */
void vci_dataset_free(struct VciDataset *ds);

/**
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_dataset_shape(const struct VciDataset *ds, size_t *images, size_t *categories);

/**
 * Triple counts over images with at least `min_distinct` (≥ 3) categories.
 *
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_counts_from_dataset(const struct VciDataset *ds,
                                       size_t min_distinct,
                                       struct VciCounts **out);

/**
 * # Safety
 * `c` must come from `vci_counts_from_dataset` or be null.
 */
void vci_counts_free(struct VciCounts *c);

/**
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_counts_total(const struct VciCounts *c, uint64_t *out);

/**
 * `P(y|x)` table.
 *
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_table_conditional(const struct VciCounts *c, struct VciTable **out);

/**
 * `P(y|do(x))` table with Laplace smoothing `alpha` (0 for none).
 *
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_table_intervention(const struct VciCounts *c,
                                      double alpha,
                                      struct VciTable **out);

/**
 * # Safety
 * `t` must come from a `vci_table_*` constructor or be null.
 */
void vci_table_free(struct VciTable *t);

/**
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_table_size(const struct VciTable *t, size_t *out);

/**
 * Entry `(x, y)`. Rows with no support fail with `OutOfRange`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_table_get(const struct VciTable *t, size_t x, size_t y, double *out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_features_read(const char *path, struct VciFeatures **out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_features_write(const struct VciFeatures *f, const char *path);

/**
 * # Safety
 * `f` must come from a `vci_features_*` constructor or be null.
 */
void vci_features_free(struct VciFeatures *f);

/**
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_features_shape(const struct VciFeatures *f, size_t *rows, size_t *dim);

/**
 * Copies row `row` into `buf`, which must hold `len >= dim` floats.
 *
 * # Safety
 * `buf` must point to `len` writable floats.
 */
enum VciStatus vci_features_row(const struct VciFeatures *f, size_t row, float *buf, size_t len);

/**
 * Row-wise concatenation; the two index tables must match.
 *
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_features_concat(const struct VciFeatures *base,
                                   const struct VciFeatures *vc,
                                   struct VciFeatures **out);

/**
 * Loads a head checkpoint directory.
 *
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_head_load(const char *dir, struct VciHead **out);

/**
 * # Safety
 * `h` must come from `vci_head_load` or be null.
 */
void vci_head_free(struct VciHead *h);

/**
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_head_shape(const struct VciHead *h, size_t *n, size_t *d, size_t *sigma);

/**
 * Per-region VC features; `mode` is a `VciFeatureMode` value.
 *
 * # Safety
 * Pointers must be valid.
 */
enum VciStatus vci_head_extract(const struct VciHead *h,
                                const struct VciFeatures *f,
                                uint32_t mode,
                                struct VciFeatures **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VC_INTERVENE_H */
