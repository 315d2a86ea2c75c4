#pragma once

#include <optional>
#include <unordered_map>
#include <vector>

#include "trace/world.hpp"

namespace trace {

// Single cross-attention layer. Weights act on column vectors:
//   q_i = W_Q h_i, k_j = W_K e_j, v_j = W_V e_j, out_i = W_O o_i
// Per-head scores use `scale` (default 1/sqrt(d_k/n_heads)); the value is
// recorded in checkpoints rather than re-derived.
struct AttnLayer {
    Mat W_Q;  // d_k x d_h
    Mat W_K;  // d_k x d_text
    Mat W_V;  // d_v x d_text
    Mat W_O;  // d_h x d_v
    int n_heads = 1;
    double scale = 0.0;

    int d_k() const { return W_Q.rows; }
    int d_v() const { return W_V.rows; }
    int d_h() const { return W_Q.cols; }
    int d_text() const { return W_K.cols; }
};

AttnLayer make_attn_layer(int d_h, int d_k, int d_v, int d_text, int n_heads, Rng& rng);

// Per-token-id replacement of key/value rows, applied after projection.
struct LayerOverride {
    struct Rows { Vec k, v; };
    std::unordered_map<uint16_t, Rows> rows;
    bool empty() const { return rows.empty(); }
};
// one entry per denoiser block (index aligned); empty map = no override
using LayerOverrides = std::vector<LayerOverride>;

struct AttnCache {
    Mat H;                 // m x d_h input
    Mat E;                 // L x d_text
    std::vector<uint16_t> token_ids;
    std::vector<uint8_t> k_overridden, v_overridden;  // per position
    Mat Q;                 // m x d_k
    Mat K;                 // L x d_k
    Mat V;                 // L x d_v
    Mat P;                 // m x (n_heads * L) softmax weights, head-major
    Mat O;                 // m x d_v attended values before W_O
};

// Returns softmax(Q K^T * scale) V W_O^T row-wise (m x d_h). Multi-head via
// contiguous column partition of Q/K and V.
Mat attend(const AttnLayer& layer, const Mat& H, const PromptEmbedding& pe,
           const LayerOverride* ovr = nullptr, AttnCache* cache = nullptr);

struct AttnGrads {
    Mat dW_Q, dW_K, dW_V, dW_O;
};

inline AttnGrads make_attn_grads(const AttnLayer& l) {
    return {Mat(l.W_Q.rows, l.W_Q.cols), Mat(l.W_K.rows, l.W_K.cols),
            Mat(l.W_V.rows, l.W_V.cols), Mat(l.W_O.rows, l.W_O.cols)};
}

// Reverse-mode pass for attend. dY is m x d_h. Gradients are w.r.t. the
// weights actually used (the effective matrices when LoRA is applied); the
// caller splits them into base and adapter-factor parts. Overridden key/value
// rows are constants, so their contributions to dW_K/dW_V are dropped.
void attend_backward(const AttnLayer& layer, const AttnCache& cache, const Mat& dY, Mat* dH,
                     AttnGrads* grads);

inline Vec key_of(const AttnLayer& layer, const Vec& e) { return matvec(layer.W_K, e); }
inline Vec value_of(const AttnLayer& layer, const Vec& e) { return matvec(layer.W_V, e); }

}  // namespace trace
