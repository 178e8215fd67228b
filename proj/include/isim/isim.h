/* C interface to the intersection simulator.
 *
 * Every function returns an isim_status. On failure the thread-local
 * message from isim_last_error() describes it. Strings returned through
 * char** out-parameters are owned by the caller and released with
 * isim_string_free(). Handles are released with their *_free function;
 * passing NULL to a free function is a no-op. */

#ifndef ISIM_H
#define ISIM_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define ISIM_API __declspec(dllexport)
#else
#define ISIM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum isim_status {
  ISIM_OK = 0,
  ISIM_E_INVALID_INPUT = 1,
  ISIM_E_EMPTY_SCENE = 2,
  ISIM_E_INSUFFICIENT_DATA = 3,
  ISIM_E_COMPONENT_COLLAPSE = 4,
  ISIM_E_INVALID_CONDITION = 5,
  ISIM_E_DEGENERATE_LIKELIHOODS = 6,
  ISIM_E_INVALID_KNOTS = 7,
  ISIM_E_NUMERICAL_FAULT = 8,
  ISIM_E_MISSING_HISTORY = 9,
  ISIM_E_EMPTY_BATCH = 10,
  ISIM_E_EMPTY_EVAL = 11,
  ISIM_E_NO_PAIRS = 12,
  ISIM_E_PRIOR_REJECTION = 13,
  ISIM_E_CONFIG_MISMATCH = 14,
  ISIM_E_INVALID_SPEED = 15,
  ISIM_E_IO = 16,
  ISIM_E_PARSE = 17,
  ISIM_E_INVALID_REGION = 18,
  ISIM_E_UNSUPPORTED = 19,
  ISIM_E_BIND = 20,
  ISIM_E_NULL_ARGUMENT = 98,
  ISIM_E_INTERNAL = 99
} isim_status;

typedef enum isim_kind { ISIM_PED = 0, ISIM_VEH = 1 } isim_kind;

typedef struct isim_corpus isim_corpus;
typedef struct isim_scenes isim_scenes;
typedef struct isim_gmm isim_gmm;
typedef struct isim_density isim_density;
typedef struct isim_forecaster isim_forecaster;
typedef struct isim_sim isim_sim;

ISIM_API const char* isim_version(void);
ISIM_API const char* isim_last_error(void);
ISIM_API const char* isim_status_name(isim_status status);
ISIM_API void isim_string_free(char* s);

/* Corpus ---------------------------------------------------------------- */

/* Lenient loads skip bad lines; *skipped_json (may be NULL) receives
 * [{"line":n,"reason":...}]. */
ISIM_API isim_status isim_corpus_load(const char* path, int strict, isim_corpus** out, char** skipped_json);
ISIM_API isim_status isim_corpus_save(const isim_corpus* c, const char* path);
ISIM_API isim_status isim_corpus_size(const isim_corpus* c, size_t* out);
ISIM_API void isim_corpus_free(isim_corpus* c);

/* config_json follows the SynthConfig fields; "{}" gives the defaults. */
ISIM_API isim_status isim_synth_generate(const char* config_json, isim_corpus** out);
/* Hourly counts of a synthetic corpus as CSV `hour,ped,veh`. */
ISIM_API isim_status isim_synth_save_counts(const isim_corpus* c, const char* path);
/* Route label per trajectory, one per line, as CSV `agent_id,label`. */
ISIM_API isim_status isim_synth_save_labels(const isim_corpus* c, const char* path);

/* Square region of the given half-width, or a polygon given as JSON
 * [[x,y],...] when polygon_json is not NULL. */
ISIM_API isim_status isim_filter_truncated(const isim_corpus* c, double half_width, const char* polygon_json,
                                           double margin, isim_corpus** out, size_t* dropped);

/* Scenes ---------------------------------------------------------------- */

ISIM_API isim_status isim_scenes_extract(const isim_corpus* c, int frames, size_t count, double dt, uint64_t seed,
                                         isim_scenes** out);
ISIM_API isim_status isim_scenes_load(const char* path, isim_scenes** out);
ISIM_API isim_status isim_scenes_save(const isim_scenes* s, const char* path);
ISIM_API isim_status isim_scenes_size(const isim_scenes* s, size_t* out);
ISIM_API void isim_scenes_free(isim_scenes* s);

/* Mixture models -------------------------------------------------------- */

/* Fits the trajectories of `kind` in the corpus. *report_json (may be NULL)
 * receives {"iterations","converged","collapse_restarts","log_likelihood"}. */
ISIM_API isim_status isim_gmm_fit(const isim_corpus* c, isim_kind kind, int components, int waypoints, uint64_t seed,
                                  isim_gmm** out, char** report_json);
ISIM_API isim_status isim_gmm_load(const char* path, isim_gmm** out);
ISIM_API isim_status isim_gmm_save(const isim_gmm* g, const char* path);
ISIM_API isim_status isim_gmm_info(const isim_gmm* g, int* components, int* dimension, isim_kind* kind);
ISIM_API isim_status isim_gmm_log_pdf(const isim_gmm* g, const double* z, size_t dimension, double* out);
/* Draws n features (n x dimension, row-major) and their components. With
 * ncomponents == 0 all components are eligible. */
ISIM_API isim_status isim_gmm_sample(const isim_gmm* g, const int* components, size_t ncomponents, size_t n,
                                     uint64_t seed, double* z_out, int* component_out);
/* Outliers among the corpus trajectories of the model's kind, sorted by
 * |z| descending: [{"agent_id","zscore","log_likelihood"}]. waypoints <= 0
 * takes the count from the model dimension. */
ISIM_API isim_status isim_gmm_outliers(const isim_gmm* g, const isim_corpus* c, double threshold, int waypoints,
                                       char** json_out);
ISIM_API void isim_gmm_free(isim_gmm* g);

/* Time-of-day density --------------------------------------------------- */

ISIM_API isim_status isim_density_fit(const double counts[24], isim_kind kind, int components, double shift_hours,
                                      isim_density** out);
ISIM_API isim_status isim_density_load_counts(const char* csv_path, isim_kind kind, double counts_out[24]);
ISIM_API isim_status isim_density_load(const char* path, isim_density** out);
ISIM_API isim_status isim_density_save(const isim_density* d, const char* path);
ISIM_API isim_status isim_density_expected(const isim_density* d, double hour, unsigned* out);
ISIM_API void isim_density_free(isim_density* d);

/* Forecaster ------------------------------------------------------------ */

/* hyper_json: {"embed","hidden","grid_cells","cell_size","obs_len",
 * "pred_len","dt","mode"}; missing fields take defaults. */
ISIM_API isim_status isim_forecaster_new(const char* hyper_json, uint64_t seed, isim_forecaster** out);
ISIM_API isim_status isim_forecaster_load(const char* path, isim_forecaster** out);
ISIM_API isim_status isim_forecaster_save(const isim_forecaster* f, const char* path);
/* {"embed","hidden","grid_cells","cell_size","obs_len","pred_len","dt",
 * "mode","parameters"} */
ISIM_API isim_status isim_forecaster_info(const isim_forecaster* f, char** hyper_json);
ISIM_API void isim_forecaster_free(isim_forecaster* f);

typedef void (*isim_epoch_callback)(int epoch, double loss, void* user);

/* Fits input normalisation on the scenes, then trains. options_json:
 * {"lr","momentum","batch","clip","seed"}. */
ISIM_API isim_status isim_forecaster_train(isim_forecaster* f, const isim_scenes* s, const char* options_json,
                                           int epochs, isim_epoch_callback cb, void* user, double* final_loss);

/* predictor: "model" (f required), "cv" or "prior". options_json:
 * {"obs_len","horizon","dt","mean_l2"}. *report_json receives
 * {"ade","fde","fps","scenes","agents","horizon","overshoot"}. */
ISIM_API isim_status isim_evaluate(const isim_forecaster* f, const char* predictor, const isim_scenes* s,
                                   const char* options_json, char** report_json);

/* rows_json: [{"model","pred_len","goal","ade","fde","fps"}]. Aligned
 * text, or CSV `Model,L_pd,Goal,ADE,FDE,FPS` when csv is non-zero. */
ISIM_API isim_status isim_format_table(const char* rows_json, int csv, char** out);

/* Simulation ------------------------------------------------------------ */

/* Any model handle may be NULL. The simulator keeps its own references. */
ISIM_API isim_status isim_sim_new(const char* config_json, const isim_gmm* ped, const isim_gmm* veh,
                                  const isim_density* ped_tod, const isim_density* veh_tod,
                                  const isim_forecaster* model, isim_sim** out);
ISIM_API isim_status isim_sim_step(isim_sim* sim, char** tick_json);
ISIM_API isim_status isim_sim_apply(isim_sim* sim, const char* command_json, char** result_json);
ISIM_API isim_status isim_sim_snapshot(const isim_sim* sim, char** snapshot_json);
ISIM_API isim_status isim_sim_save_trace(const isim_sim* sim, const char* path);
/* Headless run of a fresh simulator with the same config and models.
 * script_path and trace_path may be NULL. *summary_json receives
 * {"ticks","spawned","exited","force_removed","refinement_calls",
 * "refinement_seconds","wall_seconds","min_separation"}. */
ISIM_API isim_status isim_sim_run(const isim_sim* sim, int ticks, const char* script_path, const char* trace_path,
                                  char** summary_json);
/* Serves the simulator's config and models until *interrupted becomes
 * non-zero or the tick budget is spent with exit_when_done. options_json:
 * {"host","port","assets","headless","ticks","script","trace_out",
 * "exit_when_done","extent"}. */
typedef void (*isim_ready_callback)(const char* host, int port, void* user);
ISIM_API isim_status isim_sim_serve(const isim_sim* sim, const char* options_json, const volatile int* interrupted,
                                    isim_ready_callback ready, void* user);
ISIM_API void isim_sim_free(isim_sim* sim);

#ifdef __cplusplus
}
#endif

#endif /* ISIM_H */
