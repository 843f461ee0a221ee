#ifndef BBG_H
#define BBG_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define BBG_API __declspec(dllexport)
#else
#define BBG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bbg_status {
  BBG_OK = 0,
  BBG_ERR_INVALID_ARGUMENT = 1,
  BBG_ERR_SHAPE_MISMATCH = 2,
  BBG_ERR_NON_FINITE = 3,
  BBG_ERR_IO = 4,
  BBG_ERR_FORMAT = 5,
  BBG_ERR_STATE = 6,
  BBG_ERR_INTERNAL = 7
} bbg_status;

typedef enum bbg_knn_metric { BBG_KNN_L1 = 1, BBG_KNN_L2 = 2 } bbg_knn_metric;

typedef struct bbg_config bbg_config;
typedef struct bbg_model bbg_model;

/* Message of the last failed call on this thread ("" after success). */
BBG_API const char* bbg_last_error(void);
BBG_API const char* bbg_version(void);

/* Strings returned through char** out-parameters are owned by the caller. */
BBG_API void bbg_string_free(char* s);

/* preset may be NULL; otherwise it replaces the file's preset line. */
BBG_API bbg_status bbg_config_load(const char* path, const char* preset,
                                   bbg_config** out);
BBG_API bbg_status bbg_config_parse(const char* text, bbg_config** out);
BBG_API bbg_status bbg_config_set(bbg_config* config, const char* key,
                                  const char* value);
BBG_API bbg_status bbg_config_serialize(const bbg_config* config, char** out);
BBG_API void bbg_config_free(bbg_config* config);

/* Newline-separated preset names. */
BBG_API bbg_status bbg_preset_names(char** out);

/* Trains the configured run; *checkpoint_path receives final.bbgn's path. */
BBG_API bbg_status bbg_train(const bbg_config* config, int resume,
                             char** checkpoint_path);

BBG_API bbg_status bbg_model_load(const char* checkpoint_path, bbg_model** out);
BBG_API void bbg_model_free(bbg_model* model);
BBG_API uint64_t bbg_model_step(const bbg_model* model);
BBG_API bbg_status bbg_model_config(const bbg_model* model, char** out);
/* Nonzero (the default) evaluates the EMA weights, zero the raw ones. */
BBG_API bbg_status bbg_model_use_ema(bbg_model* model, int use_ema);

/* Evaluations write "key=value" lines or CSV text into *out. */
BBG_API bbg_status bbg_eval_probe(bbg_model* model, char** out);
BBG_API bbg_status bbg_eval_knn(bbg_model* model, const size_t* ks,
                                size_t num_ks, bbg_knn_metric metric,
                                char** out);
BBG_API bbg_status bbg_reconstruct(bbg_model* model, size_t iters,
                                   const char* grid_path, char** out);
BBG_API bbg_status bbg_sample(bbg_model* model, size_t n, const char* path);
BBG_API bbg_status bbg_export_filters(bbg_model* model, const char* path);
BBG_API bbg_status bbg_generation_metrics(bbg_model* model, char** out);

/* Runs a grid file; *out receives the results CSV. */
BBG_API bbg_status bbg_ablate(const char* grid_path, char** out);

#ifdef __cplusplus
}
#endif

#endif
