#pragma once

#include "trace/denoiser.hpp"

namespace trace {

enum class SamplerKind { ddim, ancestral };
enum class GuidanceMode { none, cfg, negative };
enum class TargetMode { negative, substitute };

struct GuidanceSpec {
    GuidanceMode mode = GuidanceMode::none;
    double scale = 0.0;
};

// Reverse-process record. latents[t] is x_t (so latents[T] is the initial
// noise and latents[0] the sample); eps_hats[t] is the prediction used for
// the step t -> t-1. Unretained slots hold empty vectors.
struct Trajectory {
    int T = 0;
    int switch_index = -1;  // target trajectories: first step of the suppressed segment
    uint64_t seed = 0;
    std::vector<Vec> latents;
    std::vector<Vec> eps_hats;
    std::vector<uint8_t> kept;

    const Vec& latent(int t) const {
        require(t >= 0 && t <= T && kept[t], Status::state,
                "latent not retained at t=" + std::to_string(t));
        return latents[t];
    }
};

struct SampleOpts {
    SamplerKind kind = SamplerKind::ddim;
    uint64_t seed = 0;
    // inference snaps every stored latent to the half-precision grid so that
    // sub-grid arithmetic differences cannot split trajectories; training
    // rollouts turn this off and stay pure f64
    bool snap = true;
    const LayerOverrides* overrides = nullptr;
    const AdapterSet* adapters = nullptr;
    int from_t = -1;               // resume step; -1 means T
    const Vec* x_start = nullptr;  // latent at from_t when resuming
    bool record_eps = true;
    double max_abs = 1e3;
};

// Run the reverse process for `primary` under the given guidance. `secondary`
// is the unconditional prompt for cfg and the negative prompt for negative
// guidance; it may be null for plain conditioning.
Trajectory sample(const DenoiserModel& m, const PromptEmbedding& primary,
                  const PromptEmbedding* secondary, const GuidanceSpec& g,
                  const SampleOpts& opts);

// Convenience: encode and sample a token prompt with no guidance.
Trajectory sample_prompt(const DenoiserModel& m, const std::vector<uint16_t>& prompt,
                         const SampleOpts& opts);

// Checkpoint steps retained by default in target trajectories: t0, halfway to
// zero, and zero (deduplicated, descending).
std::vector<int> target_checkpoints(int t0);

// Plain sampling for t in (t0, T], then concept-suppressed steps for t <=
// t0: negative guidance against substitute(p) or direct substitution. The
// prefix consumes the same noise draws as sample_prompt with the same seed,
// so it is bit-identical to the plain trajectory above t0. snap = false keeps
// the whole trajectory in f64 for use as a training target.
Trajectory build_target_trajectory(const DenoiserModel& m, const std::vector<uint16_t>& prompt,
                                   uint16_t w_tok, int t0, TargetMode mode, double guide_scale,
                                   uint64_t seed, bool retain_full = false, bool snap = true);

void write_pgm(const std::string& path, const Vec& x0);

}  // namespace trace
