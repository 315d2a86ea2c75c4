#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trace/linalg.hpp"

namespace trace {

constexpr int kImgH = 16, kImgW = 16, kNPix = kImgH * kImgW;

struct WorldConfig {
    int n_objects = 4;
    int n_styles = 2;
    int synonyms_per_concept = 1;
    int d_text = 32;
    int corpus_n = 2400;
    double image_noise = 0.05;  // pixel gaussian sigma, applied before clamping
    int jitter = 2;            // max |offset| in pixels for shape placement
    double max_concept_cos = 0.5;
    double syn_cos_lo = 0.93, syn_cos_hi = 0.98;
};

// Token ids are dense and stable: [photo, u, objects..., styles..., synonyms...].
// Concept ids: objects 0..n_objects-1, then styles. u is the generic
// substitution target and doubles as the unconditional prompt.
struct Vocabulary {
    int d_text = 0;
    std::vector<std::string> names;
    Mat embed;                        // n_tokens x d_text, entries f32-exact
    std::vector<int16_t> concept_id;  // -1 for non-concept tokens
    std::vector<uint16_t> synonym_of; // canonical token id; self for canonicals
    uint16_t photo_id = 0, u_id = 1;
    std::vector<uint16_t> object_tokens;  // canonical token per object concept
    std::vector<uint16_t> style_tokens;
    std::vector<std::vector<uint16_t>> synonyms;  // per canonical token id

    int n_tokens() const { return int(names.size()); }
    Vec embedding(uint16_t tok) const {
        return Vec(embed.row(tok), embed.row(tok) + d_text);
    }
    uint16_t canonical_of(uint16_t tok) const { return synonym_of[tok]; }
    // canonical token for a concept id
    uint16_t token_of_concept(int cid) const;
    bool mentions(const std::vector<uint16_t>& prompt, uint16_t canonical_tok) const;
};

struct WorldSample {
    std::vector<float> pixels;  // kNPix values in [-1,1]
    int8_t object_label = -1;   // concept id
    int8_t style_label = -1;    // concept id or -1 for none
    std::vector<uint16_t> prompt;
};

struct PromptEmbedding {
    std::vector<uint16_t> token_ids;
    Mat E;  // L x d_text, rows aligned with token_ids
};

Vocabulary build_vocabulary(const WorldConfig& cfg, uint64_t seed);

std::vector<WorldSample> generate_corpus(const Vocabulary& vocab, const WorldConfig& cfg,
                                         uint64_t seed);

// deterministic rendering of one sample (no noise); exposed for tests.
// style_idx: -1 none, 0 stripes, 1 checker.
std::vector<float> render_clean(int object_cid, int style_idx, int dx, int dy);

PromptEmbedding encode(const std::vector<uint16_t>& prompt, const Vocabulary& vocab);

// Replace every token whose canonical is w_tok (w itself and its synonyms)
// with u_tok. Idempotent as long as u_tok is not itself a synonym of w.
std::vector<uint16_t> substitute(const std::vector<uint16_t>& prompt, uint16_t w_tok,
                                 uint16_t u_tok, const Vocabulary& vocab);

void save_corpus(const std::string& path, const std::vector<WorldSample>& corpus);
std::vector<WorldSample> load_corpus(const std::string& path);

std::string prompt_to_string(const std::vector<uint16_t>& prompt, const Vocabulary& vocab);
std::vector<uint16_t> prompt_from_names(const std::string& names, const Vocabulary& vocab);

}  // namespace trace
