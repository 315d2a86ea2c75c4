#include "trace.h"

#include <cstring>
#include <string>

#include "trace/pipeline.hpp"

using namespace trace;

struct trace_run {
    Workspace ws;
    std::string err;
};

static trace_status to_c(Status s) { return static_cast<trace_status>(static_cast<int>(s)); }

template <typename Fn>
static trace_status wrap(trace_run* r, Fn&& fn) {
    if (!r) return TRACE_E_INVALID_ARGUMENT;
    r->err.clear();
    try {
        fn();
        return TRACE_OK;
    } catch (const TraceError& e) {
        r->err = e.what();
        return to_c(e.status);
    } catch (const std::exception& e) {
        r->err = e.what();
        return TRACE_E_INTERNAL;
    }
}

extern "C" {

const char* trace_version(void) { return kVersion; }

const char* trace_status_name(trace_status s) { return status_name(static_cast<Status>(s)); }

trace_status trace_run_open(const char* out_dir, trace_run** out) {
    if (!out) return TRACE_E_INVALID_ARGUMENT;
    *out = nullptr;
    try {
        Workspace ws = open_workspace(out_dir ? out_dir : "", RunConfig{});
        *out = new trace_run{std::move(ws), {}};
        return TRACE_OK;
    } catch (const TraceError& e) {
        return to_c(e.status);
    } catch (const std::exception&) {
        return TRACE_E_IO;
    }
}

void trace_run_close(trace_run* r) { delete r; }

const char* trace_last_error(const trace_run* r) { return r ? r->err.c_str() : ""; }

const char* trace_out_dir(const trace_run* r) { return r ? r->ws.dir.c_str() : ""; }

trace_status trace_load_config(trace_run* r, const char* path) {
    return wrap(r, [&] {
        require(path, Status::invalid_argument, "path is null");
        RunConfig fresh = RunConfig::from_file(path);
        r->ws.cfg = std::move(fresh);
    });
}

trace_status trace_set(trace_run* r, const char* key, const char* value) {
    return wrap(r, [&] {
        require(key && value, Status::invalid_argument, "key/value is null");
        r->ws.cfg.set(key, value);
    });
}

trace_status trace_get(const trace_run* r, const char* key, char* buf, size_t buf_len) {
    return wrap(const_cast<trace_run*>(r), [&] {
        require(key && buf && buf_len > 0, Status::invalid_argument, "key/buf is null");
        const std::string& v = r->ws.cfg.get_str(key);
        size_t n = std::min(buf_len - 1, v.size());
        std::memcpy(buf, v.data(), n);
        buf[n] = '\0';
    });
}

trace_status trace_emit_config(const trace_run* r, char* buf, size_t buf_len, size_t* out_len) {
    return wrap(const_cast<trace_run*>(r), [&] {
        std::string text = r->ws.cfg.emit();
        if (out_len) *out_len = text.size() + 1;
        if (!buf) return;
        require(buf_len > 0, Status::invalid_argument, "buf_len is zero");
        size_t n = std::min(buf_len - 1, text.size());
        std::memcpy(buf, text.data(), n);
        buf[n] = '\0';
    });
}

trace_status trace_cmd_gen_world(trace_run* r) {
    return wrap(r, [&] { stage_gen_world(r->ws); });
}

trace_status trace_cmd_train_classifier(trace_run* r) {
    return wrap(r, [&] { stage_train_classifier(r->ws); });
}

trace_status trace_cmd_train_base(trace_run* r) {
    return wrap(r, [&] { stage_train_base(r->ws); });
}

trace_status trace_cmd_erase_closed_form(trace_run* r) {
    return wrap(r, [&] { stage_erase_closed_form(r->ws); });
}

trace_status trace_cmd_finetune(trace_run* r) {
    return wrap(r, [&] { stage_finetune(r->ws, false); });
}

trace_status trace_cmd_erase_multi(trace_run* r) {
    return wrap(r, [&] { stage_finetune(r->ws, true); });
}

trace_status trace_cmd_merge(trace_run* r, int allow_gated) {
    return wrap(r, [&] { stage_merge(r->ws, allow_gated != 0); });
}

trace_status trace_cmd_sample(trace_run* r) {
    return wrap(r, [&] { stage_sample(r->ws); });
}

trace_status trace_cmd_eval(trace_run* r) {
    return wrap(r, [&] { stage_eval(r->ws); });
}

trace_status trace_cmd_sweep_stability(trace_run* r) {
    return wrap(r, [&] { stage_sweep_stability(r->ws); });
}

trace_status trace_cmd_check_locality(trace_run* r) {
    return wrap(r, [&] {
        LocalityReport rep = stage_check_locality(r->ws);
        require(rep.prefixes_identical, Status::gate,
                "gated adapters changed a pre-gate latent (max |diff| = " +
                    std::to_string(rep.max_prefix_abs_diff) + ")");
    });
}

trace_status trace_cmd_grad_check(trace_run* r) {
    return wrap(r, [&] {
        GradCheckReport rep = stage_grad_check(r->ws);
        std::string worst;
        double worst_err = 0;
        for (const auto& row : rep.rows)
            if (!row.pass && row.max_rel_err >= worst_err) {
                worst = row.block;
                worst_err = row.max_rel_err;
            }
        require(rep.pass, Status::gate,
                "gradient audit failed at block " + worst + " (rel err " +
                    std::to_string(worst_err) + ")");
    });
}

trace_status trace_cmd_ablate(trace_run* r, const char* preset) {
    return wrap(r, [&] {
        require(preset, Status::invalid_argument, "preset is null");
        stage_ablate(r->ws, preset);
    });
}

trace_status trace_cmd_repro_all(trace_run* r) {
    return wrap(r, [&] {
        ReproReport rep = stage_repro_all(r->ws);
        std::string bad;
        for (const auto& f : rep.files)
            if (!f.identical) bad += (bad.empty() ? "" : ", ") + f.name;
        require(rep.all_identical, Status::gate, "runs differ in: " + bad);
    });
}

}  // extern "C"
