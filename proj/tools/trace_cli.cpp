#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "trace.h"

namespace {

struct Closer {
    trace_run* r = nullptr;
    ~Closer() { trace_run_close(r); }
};

int fail_out(trace_run* r, const std::string& cmd, trace_status st) {
    const char* msg = trace_last_error(r);
    std::fprintf(stderr, "trace %s: %s: %s\n", cmd.c_str(), trace_status_name(st), msg);
    nlohmann::json j;
    j["cmd"] = cmd;
    j["status"] = int(st);
    j["status_name"] = trace_status_name(st);
    j["message"] = msg;
    std::ofstream f(std::string(trace_out_dir(r)) + "/error.json", std::ios::binary);
    if (f) f << j.dump(2) << "\n";
    return int(st);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"concept erasure on a toy text-conditioned diffusion model"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string out_dir, config_path;
    std::vector<std::string> sets;
    long long seed = -1;
    app.add_option("-o,--out-dir", out_dir,
                   "artifact directory (default $TRACE_OUT_DIR, then ./trace_out)");
    app.add_option("-c,--config", config_path, "config file (key = value lines)");
    app.add_option("-s,--set", sets, "override one config key (key=value, repeatable)")
        ->type_size(1);
    app.add_option("--seed", seed, "root seed, shorthand for -s run.seed=N");

    bool allow_gated = false;
    std::string preset;

    CLI::App* c_gen = app.add_subcommand("gen-world", "build the vocabulary and render the corpus");
    CLI::App* c_clf = app.add_subcommand("train-classifier", "train the frozen concept classifier");
    CLI::App* c_base = app.add_subcommand("train-base", "train the base denoiser");
    CLI::App* c_erase =
        app.add_subcommand("erase-closed-form", "rank-one attention edits for erase.concepts");
    CLI::App* c_ft =
        app.add_subcommand("finetune", "trajectory-constrained adapter training, no integration term");
    CLI::App* c_multi =
        app.add_subcommand("erase-multi", "joint multi-concept training with the integration loss");
    CLI::App* c_merge = app.add_subcommand("merge", "fold adapters into the edited weights");
    c_merge->add_flag("--allow-gated", allow_gated,
                      "merge even though the adapters are timestep-gated");
    CLI::App* c_sample = app.add_subcommand("sample", "sample images from the current model");
    CLI::App* c_eval =
        app.add_subcommand("eval", "efficacy/specificity/generality metrics plus feature mmd");
    CLI::App* c_sweep =
        app.add_subcommand("sweep-stability", "edit-scale sweep of drift vs erasure strength");
    CLI::App* c_loc =
        app.add_subcommand("check-locality", "bitwise pre-gate trajectory comparison");
    CLI::App* c_grad =
        app.add_subcommand("grad-check", "finite-difference audit of the erasure loss gradients");
    CLI::App* c_ablate = app.add_subcommand("ablate", "rerun erase+finetune+eval under a preset");
    c_ablate
        ->add_option("preset", preset,
                     "full | no-closed-form | no-gate | single-shared-adapter | no-integration-loss")
        ->required();
    CLI::App* c_repro =
        app.add_subcommand("repro-all", "full pipeline twice, artifacts byte-compared");
    CLI::App* c_cfg = app.add_subcommand("config", "print the effective configuration");

    CLI11_PARSE(app, argc, argv);

    Closer run;
    trace_status st = trace_run_open(out_dir.c_str(), &run.r);
    if (st != TRACE_OK) {
        std::fprintf(stderr, "trace: cannot open output directory '%s'\n", out_dir.c_str());
        return int(st);
    }
    std::string cmd = app.get_subcommands().front()->get_name();

    if (!config_path.empty() && (st = trace_load_config(run.r, config_path.c_str())) != TRACE_OK)
        return fail_out(run.r, cmd, st);
    for (const std::string& kv : sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "trace: --set needs key=value, got '%s'\n", kv.c_str());
            return int(TRACE_E_INVALID_ARGUMENT);
        }
        st = trace_set(run.r, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
        if (st != TRACE_OK) return fail_out(run.r, cmd, st);
    }
    if (seed >= 0 &&
        (st = trace_set(run.r, "run.seed", std::to_string(seed).c_str())) != TRACE_OK)
        return fail_out(run.r, cmd, st);

    if (c_cfg->parsed()) {
        size_t n = 0;
        trace_emit_config(run.r, nullptr, 0, &n);
        std::string buf(n, '\0');
        if ((st = trace_emit_config(run.r, buf.data(), buf.size(), nullptr)) != TRACE_OK)
            return fail_out(run.r, cmd, st);
        std::fputs(buf.c_str(), stdout);
        return 0;
    }

    if (c_gen->parsed()) st = trace_cmd_gen_world(run.r);
    else if (c_clf->parsed()) st = trace_cmd_train_classifier(run.r);
    else if (c_base->parsed()) st = trace_cmd_train_base(run.r);
    else if (c_erase->parsed()) st = trace_cmd_erase_closed_form(run.r);
    else if (c_ft->parsed()) st = trace_cmd_finetune(run.r);
    else if (c_multi->parsed()) st = trace_cmd_erase_multi(run.r);
    else if (c_merge->parsed()) st = trace_cmd_merge(run.r, allow_gated ? 1 : 0);
    else if (c_sample->parsed()) st = trace_cmd_sample(run.r);
    else if (c_eval->parsed()) st = trace_cmd_eval(run.r);
    else if (c_sweep->parsed()) st = trace_cmd_sweep_stability(run.r);
    else if (c_loc->parsed()) st = trace_cmd_check_locality(run.r);
    else if (c_grad->parsed()) st = trace_cmd_grad_check(run.r);
    else if (c_ablate->parsed()) st = trace_cmd_ablate(run.r, preset.c_str());
    else if (c_repro->parsed()) st = trace_cmd_repro_all(run.r);

    if (st != TRACE_OK) return fail_out(run.r, cmd, st);
    std::printf("trace %s: ok (%s)\n", cmd.c_str(), trace_out_dir(run.r));
    return 0;
}
