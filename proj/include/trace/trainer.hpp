#pragma once

#include "trace/erasure.hpp"
#include "trace/evaluator.hpp"
#include "trace/sampler.hpp"

namespace trace {

enum class OptKind { sgd, adam };
OptKind opt_kind_from(const std::string& name);

// First-order update over a set of parameter spans. sgd applies exactly
// p -= lr * g (so the step is auditable); adam keeps per-entry moments.
struct Optimizer {
    OptKind kind = OptKind::sgd;
    double lr = 0.01;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int t = 0;
    std::vector<Vec> m1, m2;

    void init(const std::vector<ParamBlockRef>& params);
    void step(std::vector<ParamBlockRef>& params, const std::vector<ParamBlockRef>& grads);
};

// ---- base model training ----

struct BaseTrainConfig {
    int epochs = 60;
    int batch = 32;
    double lr = 0.002;
    OptKind opt = OptKind::adam;
    double uncond_dropout = 0.1;
    double gate_acc = 0.90;  // per-concept sample accuracy required of the base model
    int gate_n = 32;
    GuidanceMode gate_guidance = GuidanceMode::cfg;  // sampling mode for gate checks
    double gate_scale = 3.0;
    int max_retrain = 2;
    uint64_t seed = 7;
};

struct BaseLossRow {
    int epoch = 0, step = 0;
    double loss = 0, wall_ms = 0;
};

struct BaseTrainStats {
    double first_batch_loss = 0;
    double final_loss = 0;
    int attempts = 1;
    std::vector<double> gate_accs;  // per concept, last attempt
};

// Epsilon-matching training. When gate_clf is given, conditional samples of
// every concept must hit gate_acc on the frozen classifier; on failure the
// model is retrained from a shifted seed, up to max_retrain extra attempts.
DenoiserModel train_base(const std::vector<WorldSample>& corpus, const ModelDims& dims,
                         const NoiseSchedule& sched, const Vocabulary& vocab,
                         const BaseTrainConfig& cfg, const ConceptClassifier* gate_clf,
                         std::vector<BaseLossRow>* rows, BaseTrainStats* stats);

// ---- erasure objective ----

struct ErasureLossConfig {
    double alpha = 1.0;         // concept latent term weight
    double lambda = 0.5;        // preservation multiplier
    double anchor_weight = 0.1; // predicted-noise match above t_anchor
    int t_anchor = 60;
    double score_weight = 1.0;  // classifier logit on the rolled-out sample
    int t0 = 40;                // switch step of the target trajectories
    bool mse_sum = false;       // per-pixel mean squared error unless set
};

// One suppressed-target trajectory plus everything about it that does not
// depend on adapter parameters: the edited-base prefix latent at the gate and
// the checkpoint terms that sit at or above the gate.
struct TargetEntry {
    std::vector<uint16_t> prompt;
    uint64_t seed = 0;
    Trajectory target;
    Vec prefix;
    double const_concept = 0;
};

struct TargetPool {
    uint16_t concept_tok = 0;
    int t0 = 0;
    int t_late = 0;  // adapter gate the prefixes were cut for
    int t_gate = 0;  // min(t_late, T): the actual cut step
    std::vector<int> live_checkpoints;  // checkpoints below the gate
    std::vector<TargetEntry> entries;
};

struct CleanEntry {
    std::vector<uint16_t> prompt;
    uint64_t seed = 0;
    Trajectory ref;  // full original trajectory, eps included
    Vec prefix;
    double const_preserve = 0;  // latent terms at and above the gate
    double const_anchor = 0;    // anchor terms at gate-closed steps
};

struct CleanPool {
    int t_late = 0;
    int t_gate = 0;
    int t_anchor = 0;  // anchor cutoff the constants were measured for
    std::vector<CleanEntry> entries;
};

// Targets come from the original (pre-edit) model; prefixes from the edited
// base, which is what the adapters ride on. Both stay in f64.
TargetPool build_target_pool(const DenoiserModel& original, const DenoiserModel& edited,
                             uint16_t w_tok, int n, const ErasureLossConfig& loss, int t_late,
                             TargetMode mode, double neg_scale, bool include_synonyms,
                             uint64_t seed);

// Clean prompts cover every retained concept plus unconditional samples
// (one in five). Anchor constants are measured against the recorded eps.
CleanPool build_clean_pool(const DenoiserModel& original, const DenoiserModel& edited,
                           const std::vector<uint16_t>& erased, int n,
                           const ErasureLossConfig& loss, int t_late, int t_anchor,
                           uint64_t seed);

struct LossBreakdown {
    double total = 0;
    double concept_term = 0, score_term = 0, preserve_term = 0, anchor_term = 0;
};

struct ErasureBatch {
    std::vector<int> target_idx;
    std::vector<int> clean_idx;
};

// Loss over the selected pool entries; gradients (when requested) flow into
// adapter parameters only. Requires t0 >= t_late of every adapter whenever
// the concept term is on, so the constrained steps are exactly the
// gate-active ones.
LossBreakdown erasure_loss(const DenoiserModel& edited, const AdapterSet& adapters,
                           const TargetPool& targets, const CleanPool& cleans,
                           const ErasureBatch& batch, const ConceptClassifier& clf,
                           const ErasureLossConfig& cfg, AdapterSet* grads);

// ---- multi-concept training ----

struct FinetuneConfig {
    int steps = 1500;
    int batch_concept = 4;
    int batch_clean = 4;
    double lr = 0.01;
    OptKind opt = OptKind::adam;
    int rank = 1;
    int t_late = 40;
    double adapter_scale = 1.0;
    double init_sigma = 0.01;
    int pool = 48;
    int clean_pool = 48;
    bool syn_targets = false;
    int multi_every = 10;  // 0 disables the integration term
    double multi_weight = 1.0;
    int pair_seeds = 8;
    int pair_batch = 2;
    bool shared_adapter = false;  // one adapter for all concepts (ablation)
    TargetMode target_mode = TargetMode::negative;
    double neg_scale = 1.0;
    uint64_t seed = 7;
    ErasureLossConfig loss;
};

struct FtLossRow {
    int step = 0;
    std::string concept_name;
    double total = 0;
    double concept_term = 0, score_term = 0, preserve_term = 0, anchor_term = 0;
    double integ = 0;
    double wall_ms = 0;
};

// Classifier-logit pressure on prompts naming two erased concepts at once,
// rolled out under the full adapter set.
double integration_pair_loss(const DenoiserModel& edited, const AdapterSet& adapters,
                             const std::vector<uint16_t>& prompt, uint16_t wi, uint16_t wj,
                             const std::vector<uint64_t>& seeds, const std::vector<Vec>& prefixes,
                             int t_gate, const ConceptClassifier& clf, AdapterSet* grads);

// Round-robin over concepts, one adapter each (or one shared adapter),
// gradient masked to the adapter whose concept the batch belongs to; the
// integration loss joins every multi_every-th step, cycling through the
// pairs, and updates every adapter since all of them shape the joint
// trajectory. Concepts are handled in ascending token order.
AdapterSet train_multi(const DenoiserModel& original, const DenoiserModel& edited,
                       std::vector<uint16_t> concepts, const ConceptClassifier& clf,
                       const FinetuneConfig& cfg, std::vector<FtLossRow>* rows);

// Single-concept convenience wrapper over train_multi.
ConceptAdapter finetune_concept(const DenoiserModel& original, const DenoiserModel& edited,
                                uint16_t w, const ConceptClassifier& clf,
                                const FinetuneConfig& cfg, std::vector<FtLossRow>* rows);

// ---- gradient audit ----

struct GradCheckRow {
    std::string block;
    double max_rel_err = 0;
    int n_checked = 0;
    bool pass = true;
};

struct GradCheckReport {
    double tol = 1e-4;
    bool pass = true;
    std::vector<GradCheckRow> rows;
};

// Central finite differences against the analytic adapter gradients, a few
// coordinates per parameter block, every block covered.
GradCheckReport grad_check(const DenoiserModel& edited, AdapterSet& adapters,
                           const TargetPool& targets, const CleanPool& cleans,
                           const ErasureBatch& batch, const ConceptClassifier& clf,
                           const ErasureLossConfig& cfg, int coords_per_block, uint64_t seed,
                           double tol = 1e-4);

}  // namespace trace
