#pragma once

#include "trace/lora.hpp"

namespace trace {

struct NoiseSchedule {
    int T = 0;
    Vec beta;       // index 1..T (index 0 unused)
    Vec alpha;      // 1 - beta
    Vec alpha_bar;  // cumulative product, alpha_bar[0] = 1 exactly

    static NoiseSchedule linear(int T, double beta_min, double beta_max);
};

struct ModelDims {
    int n_pixels = kNPix;
    int d_h = 64;
    int d_k = 32;
    int d_v = 32;
    int d_text = 32;
    int n_blocks = 3;
    int n_heads = 1;
    int time_dim = 32;
};

struct DenoiserBlock {
    Mat W1;  // d_h x d_h
    Vec b1;
    AttnLayer attn;
    Mat W2;  // d_h x d_h
    Vec b2;
};

// Epsilon-prediction network: input projection + sinusoidal time features,
// then n_blocks of (affine -> silu -> cross-attention residual -> affine
// residual), then output projection plus a linear skip path
//   eps = W_out h + b_out + (g_skip . tau_t) x + W_skip x.
// The hidden width caps the rank of the W_out head, so the skip path carries
// the isotropic part of the noise estimate (full rank, time modulated) while
// the conditioned channel shapes the low-rank image content. The output head
// and both skip terms are zero-initialized so an untrained model predicts
// exactly zero.
struct DenoiserModel {
    ModelDims dims;
    Mat W_in;  // d_h x n_pixels
    Vec b_in;
    Mat W_t;   // d_h x time_dim
    Vec b_t;
    std::vector<DenoiserBlock> blocks;
    Mat W_out;  // n_pixels x d_h
    Vec b_out;
    Mat W_skip;  // n_pixels x n_pixels
    Vec g_skip;  // time_dim; scalar gain on x via dot with tau_t
    NoiseSchedule schedule;
    Vocabulary vocab;
    uint64_t config_hash = 0;
};

DenoiserModel make_denoiser(const ModelDims& dims, const NoiseSchedule& sched,
                            const Vocabulary& vocab, uint64_t seed);

// zero-parameter clone with the same shapes, used as a gradient buffer
DenoiserModel make_like_zero(const DenoiserModel& m);

std::vector<ParamBlockRef> param_blocks(DenoiserModel& m);

Vec time_features(int t, int dim);

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1-alpha_bar_t) eps; t=0 returns x0 as-is
Vec forward_noise(const Vec& x0, int t, const Vec& eps, const NoiseSchedule& s);

struct BlockCache {
    Vec h_in;   // block input
    Vec z1;     // pre-silu
    Vec u;      // post-silu
    AttnCache attn;
    Vec v;      // u + attention output
};

struct EvalCache {
    Vec x;
    int t = 0;
    Vec tau;
    Vec h0;
    std::vector<BlockCache> blocks;
    Vec h_final;
    // effective attention layers used in this eval (LoRA applied); kept so the
    // backward pass sees the same weights
    std::vector<AttnLayer> attn_eff;
};

// Predict the noise component of x at step t under the given prompt.
// overrides, when present, must have one entry per block. adapters apply only
// where their gate admits t. Non-finite outputs raise a numeric error.
Vec predict_eps(const DenoiserModel& m, const Vec& x, const PromptEmbedding& pe, int t,
                const LayerOverrides* overrides = nullptr, const AdapterSet* adapters = nullptr,
                EvalCache* cache = nullptr);

// Reverse-mode pass. d_eps is the adjoint of the output. Any of dx /
// base_grads / adapter_grads may be null. adapter_grads must mirror the
// adapter set used in the forward call.
void predict_eps_backward(const DenoiserModel& m, const EvalCache& cache, const Vec& d_eps,
                          Vec* dx, DenoiserModel* base_grads, const AdapterSet* adapters,
                          AdapterSet* adapter_grads);

}  // namespace trace
