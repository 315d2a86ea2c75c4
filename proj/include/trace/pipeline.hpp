#pragma once

#include <string>
#include <vector>

#include "trace/config.hpp"
#include "trace/denoiser.hpp"
#include "trace/erasure.hpp"
#include "trace/evaluator.hpp"
#include "trace/trainer.hpp"
#include "trace/world.hpp"

namespace trace {

// Fixed artifact names inside a workspace directory. Every stage reads its
// inputs and writes its outputs by these names, so commands compose without
// any path plumbing beyond the output directory itself.
namespace artifact {
inline constexpr const char* corpus = "corpus.trcw";
inline constexpr const char* classifier = "classifier.trcc";
inline constexpr const char* base_model = "base_model.trcm";
inline constexpr const char* edited_model = "edited_model.trcm";
inline constexpr const char* merged_model = "merged_model.trcm";
inline constexpr const char* edits = "edits.trce";
inline constexpr const char* metrics_csv = "metrics.csv";
inline constexpr const char* stability_csv = "stability.csv";
inline constexpr const char* locality_csv = "locality.csv";
inline constexpr const char* gradcheck_csv = "gradcheck.csv";
inline constexpr const char* ablation_csv = "ablation.csv";
inline constexpr const char* loss_base_csv = "loss_base.csv";
inline constexpr const char* loss_ft_csv = "loss_ft.csv";
std::string adapter(const std::string& concept_name);  // adapter_<name>.trcl
}  // namespace artifact

struct Workspace {
    std::string dir;
    RunConfig cfg;

    std::string path(const std::string& name) const { return dir + "/" + name; }
    bool has(const std::string& name) const;
};

// Resolution order for the directory: explicit argument, then TRACE_OUT_DIR,
// then ./trace_out. Creates the directory if needed.
Workspace open_workspace(const std::string& out_dir, const RunConfig& cfg);

// ---- config -> module structs ----

WorldConfig world_config(const RunConfig& c);
ModelDims model_dims(const RunConfig& c);
NoiseSchedule schedule_config(const RunConfig& c);
ClassifierTrainConfig classifier_config(const RunConfig& c);
BaseTrainConfig base_config(const RunConfig& c);
ErasureLossConfig loss_config(const RunConfig& c);
FinetuneConfig finetune_config(const RunConfig& c);
EvalConfig eval_config(const RunConfig& c);
EditVariant edit_variant(const RunConfig& c);

// canonical concept tokens named by erase.concepts, resolved in the vocabulary
std::vector<uint16_t> erase_tokens(const Vocabulary& v, const RunConfig& c);

// ---- stages ----
// Each stage validates its inputs, writes its artifacts plus a
// manifest_<cmd>.json (inputs, outputs, hashes, config, wall clock) into the
// workspace, and throws TraceError on any gate failure.

void stage_gen_world(Workspace& ws);
void stage_train_classifier(Workspace& ws);
void stage_train_base(Workspace& ws);
void stage_erase_closed_form(Workspace& ws);
// with_integration = false forces the integration loss off (cmd `finetune`);
// true leaves it to multi.every (cmd `erase-multi`)
void stage_finetune(Workspace& ws, bool with_integration);
void stage_merge(Workspace& ws, bool allow_gated);
void stage_sample(Workspace& ws);
MetricsReport stage_eval(Workspace& ws);
std::vector<StabilityRow> stage_sweep_stability(Workspace& ws);
LocalityReport stage_check_locality(Workspace& ws);
GradCheckReport stage_grad_check(Workspace& ws);

inline constexpr const char* kAblationPresets[] = {
    "full", "no-closed-form", "no-gate", "single-shared-adapter", "no-integration-loss"};

// Runs erase + finetune + eval under the preset's config mutations in
// ablate_<preset>/ (reusing the parent's corpus/classifier/base model), then
// rewrites ablation.csv from every preset directory present.
MetricsReport stage_ablate(Workspace& ws, const std::string& preset);

struct ReproFile {
    std::string name;
    bool identical = false;
};
struct ReproReport {
    bool all_identical = false;
    std::vector<ReproFile> files;
};

// Full chain from seeds to metrics, run twice into repro_a/ and repro_b/;
// compares every deterministic artifact byte for byte.
ReproReport stage_repro_all(Workspace& ws);

}  // namespace trace
