#pragma once

#include "trace/erasure.hpp"
#include "trace/sampler.hpp"

namespace trace {

// Frozen concept scorer: shared trunk, one head over objects, one over
// styles (class 0 = no style). The 32-wide penultimate layer doubles as the
// feature space for drift metrics.
struct ConceptClassifier {
    int n_objects = 0, n_styles = 0;
    Mat W1;  // 64 x n_pixels
    Vec b1;
    Mat W2;  // 32 x 64
    Vec b2;
    Mat Wo;  // n_objects x 32
    Vec bo;
    Mat Ws;  // (n_styles+1) x 32
    Vec bs;
};

struct ClfCache {
    Vec x, z1, h1, z2, h2;
};

struct ClfOut {
    Vec obj_logits, sty_logits;
    Vec feat;  // penultimate activations
};

ClfOut classifier_forward(const ConceptClassifier& c, const Vec& x, ClfCache* cache = nullptr);

// Reverse pass; either adjoint may be empty. grads may be null when only dx
// is wanted (frozen classifier inside the erasure loss).
void classifier_backward(const ConceptClassifier& c, const ClfCache& cache,
                         const Vec& d_obj_logits, const Vec& d_sty_logits,
                         ConceptClassifier* grads, Vec* dx);

std::vector<ParamBlockRef> param_blocks(ConceptClassifier& c);
ConceptClassifier make_like_zero(const ConceptClassifier& c);

int classify_object(const ConceptClassifier& c, const Vec& x);
int classify_style(const ConceptClassifier& c, const Vec& x);  // 0 = none, else style idx+1

struct ClassifierTrainConfig {
    int epochs = 40;
    int batch = 64;
    double lr = 0.002;
    double holdout = 0.2;
    double noise_aug = 0.05;
    double gate_acc = 0.95;
    uint64_t seed = 7;
};

struct ClassifierStats {
    double obj_holdout_acc = 0, sty_holdout_acc = 0;
    double final_loss = 0;
};

// Trains on the corpus and enforces the separability gate: min per-head
// holdout accuracy >= gate_acc, else a gate error.
ConceptClassifier train_classifier(const std::vector<WorldSample>& corpus,
                                   const ClassifierTrainConfig& cfg, ClassifierStats* stats);

// ---- metrics ----

struct EvalConfig {
    int n_per_class = 64;
    GuidanceMode guidance = GuidanceMode::none;
    double scale = 1.0;
    int mmd_n = 128;
    uint64_t seed = 7;
};

struct PromptAccuracy {
    std::string prompt;
    std::string kind;  // erased | synonym | retained
    double acc = 0;    // fraction classified as the prompt's own concept
    int n = 0;
};

struct MetricsReport {
    double acc_e = 0;   // erased prompts still classified as the erased concept
    double acc_s = 0;   // retained prompts classified correctly
    double acc_g = 0;   // synonym prompts still classified as the erased concept
    double h_o = 0;     // harmonic mean of (1-acc_e, acc_s, 1-acc_g)
    double feature_mmd = 0;
    double mmd_floor = 0;
    std::vector<PromptAccuracy> rows;
};

double harmonic_h_o(double acc_e, double acc_s, double acc_g);

// Unbiased squared MMD with an RBF kernel; bandwidth = median pairwise
// squared distance over the pooled set. Clamped at zero.
double mmd2(const std::vector<Vec>& xs, const std::vector<Vec>& ys);

// estimator magnitude under the null: a and b must come from the same
// distribution; mean |unclamped mmd2| over n_perm random half-splits of the
// pooled samples
double mmd_floor_h0(const std::vector<Vec>& a, const std::vector<Vec>& b, int n_perm,
                    uint64_t seed);

// The model under test (with optional adapters) against the reference model
// whose behavior should be preserved. reference also provides the MMD floor
// (reference vs itself on fresh seeds).
MetricsReport evaluate(const DenoiserModel& model, const AdapterSet* adapters,
                       const DenoiserModel& reference, const ConceptClassifier& clf,
                       const std::vector<uint16_t>& erased, const EvalConfig& cfg);

struct StabilityRow {
    double scale = 0;
    double delta_frob = 0;   // Frobenius norm of the scaled update
    double strength = 0;     // mmd2 between edited and base on erased prompts
    double acc_w = 0;        // erased prompts still classified as w
    double floor = 0;
};

std::vector<StabilityRow> stability_sweep(const DenoiserModel& base,
                                          const std::vector<RankOneEdit>& edits,
                                          const std::vector<double>& scales,
                                          const ConceptClassifier& clf, uint16_t w_tok,
                                          const EvalConfig& cfg);

struct LocalityReport {
    int prompts = 0, seeds = 0;
    int gate_t = 0;
    bool prefixes_identical = false;
    double max_prefix_abs_diff = 0;  // over latents t in [gate_t, T]
    bool full_identical = false;     // whole trajectories (true when gate never opens)
};

LocalityReport locality_check(const DenoiserModel& base, const AdapterSet& adapters,
                              int n_prompts, int n_seeds, uint64_t seed);

}  // namespace trace
