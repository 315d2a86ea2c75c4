#pragma once

#include "trace/denoiser.hpp"

namespace trace {

enum class EditVariant : uint8_t { paper_rank1 = 0, lstsq = 1 };

// Rank-one weight update, stored factored: delta W = col * row^T.
struct RankOneEdit {
    uint16_t block = 0;
    uint8_t target = 0;  // 0 = W_K, 1 = W_V
    EditVariant variant = EditVariant::lstsq;
    float eta = 1.0f;
    Vec col;  // length d_k or d_v
    Vec row;  // length d_text
};

// paper variant: delta W = eta (W e_u - W e_w) e_w^T / |e_w|^2
// at eta = 1: (W + delta W) e_w = W e_u exactly
Mat paper_rank1_update(const Mat& W, const Vec& e_w, const Vec& e_u, double eta);

// least-squares projector: delta W = -W d d^T / |d|^2 with d = e_w - e_u;
// (W + delta W) e_w = (W + delta W) e_u, and no rank-one update with smaller
// Frobenius norm satisfies that constraint
Mat lstsq_projector(const Mat& W, const Vec& e_w, const Vec& e_u);

// Plan edits for one concept token against e_u: K and V of every block. The
// factors are taken at the model's current weights, so edits for several
// concepts must be planned and applied sequentially.
std::vector<RankOneEdit> plan_edits(const DenoiserModel& m, uint16_t w_tok, EditVariant variant,
                                    double eta);

void apply_edits(DenoiserModel& m, const std::vector<RankOneEdit>& edits, double scale = 1.0);

// Sequentially erase the given canonical concept tokens (each synonym gets
// its own edit against the same e_u). Returns the edited copy; out_edits
// collects the applied updates in order.
DenoiserModel apply_closed_form(const DenoiserModel& m, const std::vector<uint16_t>& concepts,
                                EditVariant variant, double eta,
                                std::vector<RankOneEdit>* out_edits = nullptr);

// Theorem oracle: per-block overrides replacing w's (and its synonyms') key
// and value rows with u's. Sampling under these overrides is bit-identical to
// sampling the substituted prompt.
LayerOverrides token_override_oracle(const DenoiserModel& m, uint16_t w_tok);

double edits_fro_norm(const std::vector<RankOneEdit>& edits);

void save_edits(const std::string& path, const std::vector<RankOneEdit>& edits);
std::vector<RankOneEdit> load_edits(const std::string& path);

}  // namespace trace
