#ifndef SUBNERF_H
#define SUBNERF_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SnStatus {
  SN_STATUS_OK = 0,
  SN_STATUS_NULL_POINTER = 1,
  SN_STATUS_INVALID_ARGUMENT = 2,
  SN_STATUS_IO = 3,
  SN_STATUS_FORMAT = 4,
  SN_STATUS_RUNTIME = 5,
} SnStatus;

typedef enum SnKernel {
  SN_KERNEL_AVERAGE = 0,
  SN_KERNEL_TENT = 1,
} SnKernel;

typedef struct SnDataset SnDataset;

/*
 A trained radiance field with the sample counts it was trained with.
 */
typedef struct SnField SnField;

/*
 Pinhole intrinsics in pixels; the principal point is usually the image centre.
 */
typedef struct SnIntrinsics {
  double focal;
  double cx;
  double cy;
  size_t width;
  size_t height;
} SnIntrinsics;

/*
 One dataset view. `split` is 0 for training views and 1 for test views.
 */
typedef struct SnViewInfo {
  size_t id;
  uint32_t split;
  /*
   Row-major 4x4 camera-to-world matrix.
   */
  double cam_to_world[16];
  struct SnIntrinsics lr;
  struct SnIntrinsics hr;
} SnViewInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer is
 valid until the next call into this library on the same thread.
 */
const char *sn_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *sn_version(void);

/*
 Loads a field checkpoint written by `subnerf train`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SnStatus sn_field_load(const char *path, struct SnField **out);

/*
 # Safety
 `field` must come from [`sn_field_load`] and not be used afterwards. NULL is ignored.
 */
void sn_field_free(struct SnField *field);

/*
 Overrides the coarse and fine sample counts used by the render calls.

 # Safety
 `field` must be a live handle.
 */
enum SnStatus sn_field_set_samples(struct SnField *field, size_t n_coarse, size_t n_fine);

/*
 Renders an arbitrary camera. `cam_to_world` points to 16 row-major
 values. `rgb` must hold `width * height * 3` values; `depth` may be NULL,
 otherwise it must hold `width * height` values.

 # Safety
 All non-NULL pointers must be valid for the stated lengths.
 */
enum SnStatus sn_render(const struct SnField *field,
                        const double *cam_to_world,
                        const struct SnIntrinsics *intrinsics,
                        double near,
                        double far,
                        bool white_background,
                        double *rgb,
                        size_t rgb_len,
                        double *depth,
                        size_t depth_len);

/*
 Loads a dataset directory written by `subnerf make-dataset`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SnStatus sn_dataset_load(const char *path, struct SnDataset **out);

/*
 # Safety
 `dataset` must come from [`sn_dataset_load`] and not be used afterwards. NULL is ignored.
 */
void sn_dataset_free(struct SnDataset *dataset);

/*
 Number of views in the dataset.

 # Safety
 `dataset` must be a live handle and `out` a valid pointer.
 */
enum SnStatus sn_dataset_len(const struct SnDataset *dataset, size_t *out);

/*
 Describes view `index` (0-based position, not the view id).

 # Safety
 `dataset` must be a live handle and `out` a valid pointer.
 */
enum SnStatus sn_dataset_view(const struct SnDataset *dataset,
                              size_t index,
                              struct SnViewInfo *out);

/*
 Copies the ground-truth image of view `index`, HR when `high_res` is
 true and LR otherwise.

 # Safety
 `dataset` must be a live handle and `rgb` valid for `rgb_len` values.
 */
enum SnStatus sn_dataset_image(const struct SnDataset *dataset,
                               size_t index,
                               bool high_res,
                               double *rgb,
                               size_t rgb_len);

/*
 Renders dataset view `index` at HR resolution with the dataset's bounds
 and background. `depth` may be NULL.

 # Safety
 Handles must be live and non-NULL buffers valid for the stated lengths.
 */
enum SnStatus sn_render_view(const struct SnField *field,
                             const struct SnDataset *dataset,
                             size_t index,
                             double *rgb,
                             size_t rgb_len,
                             double *depth,
                             size_t depth_len);

/*
 PSNR in dB of two `width × height` RGB images with values in [0, 1];
 identical images report 99.

 # Safety
 `a` and `b` must hold `width * height * 3` values; `out` must be valid.
 */
enum SnStatus sn_psnr(const double *a, const double *b, size_t width, size_t height, double *out);

/*
 Mean SSIM over the RGB channels (11×11 Gaussian window, σ = 1.5).

 # Safety
 `a` and `b` must hold `width * height * 3` values; `out` must be valid.
 */
enum SnStatus sn_ssim(const double *a, const double *b, size_t width, size_t height, double *out);

/*
 Downsamples by an integer factor `scale` that divides both sides, with
 `kernel` one of the [`SnKernel`] values. `out`
 must hold `(width / scale) * (height / scale) * 3` values.

 # Safety
 `img` must hold `width * height * 3` values and `out` `out_len` values.
 */
enum SnStatus sn_downsample(const double *img,
                            size_t width,
                            size_t height,
                            size_t scale,
                            uint32_t kernel,
                            double *out,
                            size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUBNERF_H */
