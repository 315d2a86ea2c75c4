/* C surface of the trace library. A run handle owns an output directory plus
 * a key=value configuration; every command reads its inputs from and writes
 * its artifacts into that directory. All functions are synchronous. Handles
 * are not thread-safe; distinct handles are independent. */
#ifndef TRACE_H
#define TRACE_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum trace_status {
    TRACE_OK = 0,
    TRACE_E_INVALID_ARGUMENT = 1,
    TRACE_E_IO = 2,
    TRACE_E_FORMAT = 3,
    TRACE_E_NUMERIC = 4,
    TRACE_E_GATE = 5,    /* a quality gate failed (separability, audit, determinism) */
    TRACE_E_STATE = 6,   /* missing artifact or wrong call sequence */
    TRACE_E_INTERNAL = 7
} trace_status;

typedef struct trace_run trace_run;

const char* trace_version(void);
const char* trace_status_name(trace_status s);

/* out_dir NULL or "" resolves TRACE_OUT_DIR, then ./trace_out. The directory
 * is created. On failure *out is NULL. */
trace_status trace_run_open(const char* out_dir, trace_run** out);
void trace_run_close(trace_run* r);

/* message of the last failed call on this handle; "" when the last call
 * succeeded. Owned by the handle, valid until the next call on it. */
const char* trace_last_error(const trace_run* r);

/* resolved output directory of this run */
const char* trace_out_dir(const trace_run* r);

/* key = value lines, # comments; unknown keys are rejected */
trace_status trace_load_config(trace_run* r, const char* path);
trace_status trace_set(trace_run* r, const char* key, const char* value);
/* copies the value into buf (nul-terminated, truncated if needed) */
trace_status trace_get(const trace_run* r, const char* key, char* buf, size_t buf_len);
/* complete effective configuration, sorted, defaults included. With buf NULL
 * only *out_len is set (required size incl. terminator). */
trace_status trace_emit_config(const trace_run* r, char* buf, size_t buf_len, size_t* out_len);

trace_status trace_cmd_gen_world(trace_run* r);
trace_status trace_cmd_train_classifier(trace_run* r);
trace_status trace_cmd_train_base(trace_run* r);
trace_status trace_cmd_erase_closed_form(trace_run* r);
/* trajectory-constrained adapter training; finetune leaves the integration
 * term off, erase_multi applies it per multi.every */
trace_status trace_cmd_finetune(trace_run* r);
trace_status trace_cmd_erase_multi(trace_run* r);
/* folding gated adapters into the weights changes behavior for t >= t_late
 * and is refused unless allow_gated is nonzero */
trace_status trace_cmd_merge(trace_run* r, int allow_gated);
trace_status trace_cmd_sample(trace_run* r);
trace_status trace_cmd_eval(trace_run* r);
trace_status trace_cmd_sweep_stability(trace_run* r);
/* TRACE_E_GATE when gated adapters leak into the pre-gate prefix */
trace_status trace_cmd_check_locality(trace_run* r);
/* TRACE_E_GATE when any block fails the finite-difference audit */
trace_status trace_cmd_grad_check(trace_run* r);
/* preset: full | no-closed-form | no-gate | single-shared-adapter |
 * no-integration-loss */
trace_status trace_cmd_ablate(trace_run* r, const char* preset);
/* TRACE_E_GATE when the two runs are not byte-identical */
trace_status trace_cmd_repro_all(trace_run* r);

#ifdef __cplusplus
}
#endif

#endif /* TRACE_H */
