#ifndef FLOWDET_H
#define FLOWDET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define FLOWDET_OK 0

#define FLOWDET_ERR_NULL 1

#define FLOWDET_ERR_INVALID 2

#define FLOWDET_ERR_SHAPE 3

#define FLOWDET_ERR_NON_FINITE 4

#define FLOWDET_ERR_IO 5

#define FLOWDET_ERR_FORMAT 6

#define FLOWDET_ERR_CHECKPOINT 7

#define FLOWDET_ERR_CONFIG 8

#define FLOWDET_ERR_DIVERGENCE 9

#define FLOWDET_ERR_BUFFER_TOO_SMALL 10

#define FLOWDET_ERR_PANIC 99

// Point cloud: `n × 3` coordinates plus optional reflectance.
typedef struct flowdet_cloud flowdet_cloud;

// Model parameters with their architecture.
typedef struct flowdet_model flowdet_model;

// Oriented 3D box; `size` is `(w, l, h)`.
typedef struct flowdet_box {
  double center[3];
  double size[3];
  double yaw;
  uint32_t class_id;
  double score;
} flowdet_box;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t flowdet_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *flowdet_version(void);

// Builds a cloud from `n` xyz triples.
//
// # Safety
// `xyz` must point to `3 n` floats; `out` must be writable.
int32_t flowdet_cloud_new(const float *xyz, size_t n, struct flowdet_cloud **out);

// Reads a KITTI velodyne `.bin` file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
int32_t flowdet_cloud_load_kitti(const char *path, struct flowdet_cloud **out);

// Writes a cloud as a KITTI velodyne `.bin` file.
//
// # Safety
// `cloud` must be a live handle; `path` a NUL-terminated string.
int32_t flowdet_cloud_save_kitti(const struct flowdet_cloud *cloud, const char *path);

// Number of points, 0 for a null handle.
//
// # Safety
// `cloud` must be null or a live handle.
size_t flowdet_cloud_len(const struct flowdet_cloud *cloud);

// Copies the coordinates into `buf` (`3 len` floats).
//
// # Safety
// `cloud` must be a live handle; `buf` must hold `cap` floats.
int32_t flowdet_cloud_xyz(const struct flowdet_cloud *cloud, float *buf, size_t cap);

// # Safety
// `cloud` must be null or a handle not yet freed.
void flowdet_cloud_free(struct flowdet_cloud *cloud);

// Fresh model. With a null `config_path` the default architecture is used;
// otherwise the `[model]` table of the run config file.
//
// # Safety
// `config_path` must be null or NUL-terminated; `out` must be writable.
int32_t flowdet_model_new(const char *config_path, uint64_t seed, struct flowdet_model **out);

// Loads a model from a checkpoint file.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
int32_t flowdet_model_load(const char *path, struct flowdet_model **out);

// Saves a model as a checkpoint (step 0, no optimizer state).
//
// # Safety
// `model` must be a live handle; `path` NUL-terminated.
int32_t flowdet_model_save(const struct flowdet_model *model, const char *path);

// Number of points the backbone samples from each frame; the length of
// the flow output in rows.
//
// # Safety
// `model` must be null or a live handle.
size_t flowdet_model_num_samples(const struct flowdet_model *model);

// Estimates scene flow from `frame_t` to `frame_t1`. Writes the sampled
// frame-t points to `sampled` and their flow vectors to `flow`, both
// `3 num_samples` floats; `*rows` receives the row count.
//
// # Safety
// Handles must be live; `sampled` and `flow` must hold `cap` floats.
int32_t flowdet_model_flow(const struct flowdet_model *model,
                           const struct flowdet_cloud *frame_t,
                           const struct flowdet_cloud *frame_t1,
                           uint64_t seed,
                           float *sampled,
                           float *flow,
                           size_t cap,
                           size_t *rows);

// Detects boxes in one frame with the default decoding settings. At most
// `cap` boxes are written; `*count` receives the number written.
//
// # Safety
// Handles must be live; `boxes` must hold `cap` entries.
int32_t flowdet_model_detect(const struct flowdet_model *model,
                             const struct flowdet_cloud *frame,
                             uint64_t seed,
                             struct flowdet_box *boxes,
                             size_t cap,
                             size_t *count);

// # Safety
// `model` must be null or a handle not yet freed.
void flowdet_model_free(struct flowdet_model *model);

// Bird's-eye-view IoU of two oriented boxes.
//
// # Safety
// `a`, `b` must point to valid boxes; `out` must be writable.
int32_t flowdet_bev_iou(const struct flowdet_box *a, const struct flowdet_box *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWDET_H */
