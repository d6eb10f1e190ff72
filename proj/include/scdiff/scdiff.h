/* C interface of the scdiff shape-completion library.
 *
 * Objects are opaque handles released with the matching *_free call. Every
 * fallible call returns an scd_status; on failure scd_last_error() holds a
 * message for the calling thread until its next failing call. Strings
 * returned through char** out-parameters are released with scd_string_free. */
#ifndef SCDIFF_SCDIFF_H
#define SCDIFF_SCDIFF_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SCD_API __declspec(dllexport)
#else
#define SCD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum scd_status {
  SCD_OK = 0,
  SCD_ERR_VALIDATION = 1,    /* bad argument, config value or data contents */
  SCD_ERR_FORMAT = 2,        /* malformed file */
  SCD_ERR_IO = 3,            /* missing file, permission, lock held */
  SCD_ERR_VERSION = 4,       /* unsupported version or incompatible checkpoint */
  SCD_ERR_NUMERIC = 5,       /* training diverged */
  SCD_ERR_CONTRACT = 6,      /* internal precondition violated */
  SCD_ERR_EMPTY_SURFACE = 7, /* metric needs a surface that is not there */
  SCD_ERR_INTERNAL = 8
} scd_status;

typedef struct scd_grid scd_grid;
typedef struct scd_config scd_config;
typedef struct scd_model scd_model;

/* Receives one JSON object per line during training. */
typedef void (*scd_log_fn)(const char* line, void* user);

SCD_API const char* scd_version(void);
SCD_API const char* scd_last_error(void);
SCD_API const char* scd_status_name(scd_status status);
SCD_API void scd_string_free(char* s);

/* ---- grids ---- */

/* values: S^3 floats, x fastest. mask: S^3 bytes (nonzero = observed) or NULL. */
SCD_API scd_status scd_grid_create(int resolution, double thresh, const float* values, const uint8_t* mask,
                                   scd_grid** out);
SCD_API scd_status scd_grid_load(const char* path, scd_grid** out);
SCD_API scd_status scd_grid_save(const scd_grid* grid, const char* path);
SCD_API void scd_grid_free(scd_grid* grid);
SCD_API int scd_grid_resolution(const scd_grid* grid);
SCD_API double scd_grid_thresh(const scd_grid* grid);
SCD_API int scd_grid_has_mask(const scd_grid* grid);
/* Borrowed views valid while the grid lives; mask is NULL without a mask. */
SCD_API const float* scd_grid_values(const scd_grid* grid);
SCD_API const uint8_t* scd_grid_mask(const scd_grid* grid);
/* Zero level set as a Wavefront OBJ triangle mesh. */
SCD_API scd_status scd_grid_export_obj(const scd_grid* grid, const char* path);

/* ---- configuration ---- */

SCD_API scd_status scd_config_default(scd_config** out);
SCD_API scd_status scd_config_parse(const char* text, scd_config** out);
SCD_API scd_status scd_config_load(const char* path, scd_config** out);
/* Overrides one key with a value in config-file syntax; the result is validated. */
SCD_API scd_status scd_config_set(scd_config* cfg, const char* key, const char* value);
SCD_API scd_status scd_config_text(const scd_config* cfg, char** out);
SCD_API void scd_config_free(scd_config* cfg);

/* ---- corpus ---- */

SCD_API scd_status scd_default_generator_spec(char** out);
/* spec_json NULL uses the default generator. Returns the shape count in *written. */
SCD_API scd_status scd_gen_data(const char* spec_json, int count, int resolution, uint64_t seed, double thresh,
                                const char* out_dir, int* written);
/* Writes train.txt / val.txt / test.txt; sizes go to counts[3] when non-NULL. */
SCD_API scd_status scd_split(const char* data_dir, double train, double val, double test, uint64_t seed,
                             int* counts);

/* ---- rendering ---- */

/* JSON of fixed supervision view `index` (0..3) for grids of the given resolution. */
SCD_API scd_status scd_view_pose(int resolution, int image_size, int index, char** out);
/* pose_json: explicit camera or orbit form. Either output path may be NULL. */
SCD_API scd_status scd_render(const scd_grid* grid, const char* pose_json, const char* depth_pgm,
                              const char* normals_ppm);

/* ---- training ---- */

SCD_API scd_status scd_train_vqvae(const scd_config* cfg, const char* data_dir, const char* out_ckpt, scd_log_fn log,
                                   void* user);
SCD_API scd_status scd_train_diffusion(const scd_config* cfg, const char* vqvae_ckpt, const char* data_dir,
                                       const char* out_ckpt, scd_log_fn log, void* user);

/* ---- inference ---- */

/* cfg may be NULL (the diffusion checkpoint's echo is used). */
SCD_API scd_status scd_model_load(const char* vqvae_ckpt, const char* diffusion_ckpt, const scd_config* cfg,
                                  scd_model** out);
SCD_API void scd_model_free(scd_model* model);

/* Conditioning sources; every field may be NULL. tokens_path names an FTOK
 * file; scan_pose_json derives image tokens by rendering the partial scan. */
typedef struct scd_condition {
  const scd_grid* partial;
  const char* tokens_path;
  const char* scan_pose_json;
} scd_condition;

/* Fills out[0..n_samples) with new grids (seeds seed, seed + 1, ...). */
SCD_API scd_status scd_complete(const scd_model* model, const scd_condition* cond, int n_samples, uint64_t seed,
                                scd_grid** out);
/* Writes sample 0 to out_path and sample k > 0 to <stem>.s<k>.tsdf, each with a
 * <file>.json sidecar (config echo, input hash, seed); with_mesh adds .obj files. */
SCD_API scd_status scd_complete_files(const scd_model* model, const char* partial_path, const char* tokens_path,
                                      const char* scan_pose_json, int n_samples, uint64_t seed, const char* out_path,
                                      int with_mesh);

/* ---- evaluation ---- */

/* cfg may be NULL (defaults). Writes a JSON report; mean l1 to *mean_l1 when non-NULL. */
SCD_API scd_status scd_eval(const char* pred_dir, const char* gt_dir, const scd_config* cfg, const char* report_path,
                            double* mean_l1);
/* mode: "image_only", "partial_only" or "both". Held-out shapes come from
 * <data_dir>/<split>.txt (all shapes when the manifest is absent). */
SCD_API scd_status scd_ablate(const scd_model* model, const char* data_dir, const char* split, const char* mode,
                              int best_of, uint64_t seed, const char* report_path, double* first_l1, double* best_l1);

#ifdef __cplusplus
}
#endif

#endif
