#pragma once

#include <span>
#include <string>
#include <vector>

#include "trace/attention.hpp"

namespace trace {

// Rank-r factor pair, delta = B * C. B starts at zero so a fresh adapter is
// an exact identity; C is small gaussian.
struct LoraTarget {
    Mat B;  // out_dim x r
    Mat C;  // r x in_dim
};

struct LoraBlock {
    LoraTarget K, V;
};

// One adapter per erased concept. The timestep gate is hard: the adapter
// contributes exactly when t < t_late. t_late = T+1 means always active,
// t_late = 0 never.
struct ConceptAdapter {
    uint16_t concept_token = 0;
    int rank = 1;
    int t_late = 0;
    double scale = 1.0;
    std::vector<LoraBlock> blocks;

    bool active_at(int t) const { return t < t_late; }
};

struct AdapterSet {
    std::vector<ConceptAdapter> adapters;

    bool any_active_at(int t) const {
        for (const auto& a : adapters)
            if (a.active_at(t)) return true;
        return false;
    }
    bool empty() const { return adapters.empty(); }
    // application order is canonical (sorted by concept token) so composition
    // is order-independent bit-for-bit
    void canonicalize();
};

struct ModelDims;  // from denoiser.hpp

ConceptAdapter make_adapter(int n_blocks, int d_k, int d_v, int d_text, uint16_t concept_token,
                            int rank, int t_late, double scale, double init_sigma, uint64_t seed);

// W_eff = W + sum over adapters active at t of scale * B * C, in canonical
// order. Returns base unchanged when nothing is active.
void add_active_deltas(Mat& W_K, Mat& W_V, const AdapterSet& set, int block, int t);

struct ParamBlockRef {
    std::string name;
    int rows = 0, cols = 0;
    std::span<double> v;
};

std::vector<ParamBlockRef> param_blocks(ConceptAdapter& a);
std::vector<ParamBlockRef> param_blocks(AdapterSet& s);

// zero-filled clone used as a gradient buffer
AdapterSet make_like_zero(const AdapterSet& s);

void save_adapter(const std::string& path, const ConceptAdapter& a);
ConceptAdapter load_adapter(const std::string& path);

struct DenoiserModel;

// Fold the deltas into the base weights. A timestep-gated adapter (t_late <=
// T) changes semantics when merged, so that needs allow_gated = true.
void merge_adapters(DenoiserModel& m, const AdapterSet& set, bool allow_gated = false);

}  // namespace trace
