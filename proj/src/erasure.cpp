#include "trace/erasure.hpp"

#include <cstring>
#include <fstream>

namespace trace {

Mat paper_rank1_update(const Mat& W, const Vec& e_w, const Vec& e_u, double eta) {
    require(int(e_w.size()) == W.cols && int(e_u.size()) == W.cols, Status::invalid_argument,
            "rank1 update: embedding size does not match W");
    Vec col = matvec(W, e_u);
    Vec ww = matvec(W, e_w);
    for (size_t i = 0; i < col.size(); i++) col[i] = eta * (col[i] - ww[i]);
    double n2 = norm2sq(e_w);
    require(n2 > 0, Status::invalid_argument, "rank1 update: zero e_w");
    Mat d(W.rows, W.cols);
    add_outer(d, 1.0 / n2, col, e_w);
    return d;
}

Mat lstsq_projector(const Mat& W, const Vec& e_w, const Vec& e_u) {
    require(int(e_w.size()) == W.cols && int(e_u.size()) == W.cols, Status::invalid_argument,
            "lstsq projector: embedding size does not match W");
    Vec dvec(e_w.size());
    for (size_t i = 0; i < dvec.size(); i++) dvec[i] = e_w[i] - e_u[i];
    double n2 = norm2sq(dvec);
    require(n2 > 0, Status::invalid_argument, "lstsq projector: e_w equals e_u");
    Vec col = matvec(W, dvec);
    Mat d(W.rows, W.cols);
    add_outer(d, -1.0 / n2, col, dvec);
    return d;
}

static RankOneEdit make_edit(const Mat& W, const Vec& e_w, const Vec& e_u, EditVariant variant,
                             double eta, uint16_t block, uint8_t target) {
    RankOneEdit e;
    e.block = block;
    e.target = target;
    e.variant = variant;
    e.eta = float(eta);
    if (variant == EditVariant::paper_rank1) {
        Vec wu = matvec(W, e_u), ww = matvec(W, e_w);
        e.col.resize(wu.size());
        for (size_t i = 0; i < wu.size(); i++) e.col[i] = eta * (wu[i] - ww[i]);
        e.row = e_w;
        double n2 = norm2sq(e_w);
        for (auto& v : e.row) v /= n2;
    } else {
        // eta interpolates toward the full projection; eta = 1 collapses w to u
        Vec d(e_w.size());
        for (size_t i = 0; i < d.size(); i++) d[i] = e_w[i] - e_u[i];
        double n2 = norm2sq(d);
        require(n2 > 0, Status::invalid_argument, "edit: e_w equals e_u");
        Vec wd = matvec(W, d);
        e.col.resize(wd.size());
        for (size_t i = 0; i < wd.size(); i++) e.col[i] = -eta * wd[i];
        e.row = d;
        for (auto& v : e.row) v /= n2;
    }
    return e;
}

std::vector<RankOneEdit> plan_edits(const DenoiserModel& m, uint16_t w_tok, EditVariant variant,
                                    double eta) {
    require(w_tok < m.vocab.n_tokens(), Status::invalid_argument, "plan_edits: bad token");
    Vec e_w = m.vocab.embedding(w_tok);
    Vec e_u = m.vocab.embedding(m.vocab.u_id);
    std::vector<RankOneEdit> out;
    for (uint16_t b = 0; b < m.blocks.size(); b++) {
        out.push_back(make_edit(m.blocks[b].attn.W_K, e_w, e_u, variant, eta, b, 0));
        out.push_back(make_edit(m.blocks[b].attn.W_V, e_w, e_u, variant, eta, b, 1));
    }
    return out;
}

void apply_edits(DenoiserModel& m, const std::vector<RankOneEdit>& edits, double scale) {
    for (const auto& e : edits) {
        require(e.block < m.blocks.size(), Status::invalid_argument, "edit block out of range");
        Mat& W = e.target == 0 ? m.blocks[e.block].attn.W_K : m.blocks[e.block].attn.W_V;
        require(int(e.col.size()) == W.rows && int(e.row.size()) == W.cols,
                Status::invalid_argument, "edit factors do not match weight shape");
        // a zero edit (eta = 0) must leave the weights bit-identical, so skip
        // the += which would flush negative zeros
        bool all_zero = true;
        for (double v : e.col)
            if (v != 0.0) all_zero = false;
        if (all_zero || scale == 0.0) continue;
        add_outer(W, scale, e.col, e.row);
    }
}

DenoiserModel apply_closed_form(const DenoiserModel& m, const std::vector<uint16_t>& concepts,
                                EditVariant variant, double eta,
                                std::vector<RankOneEdit>* out_edits) {
    require(!concepts.empty(), Status::invalid_argument, "apply_closed_form: no concepts");
    DenoiserModel out = m;
    for (uint16_t w : concepts) {
        require(w < m.vocab.n_tokens() && m.vocab.concept_id[w] >= 0, Status::invalid_argument,
                "apply_closed_form: not a concept token");
        std::vector<uint16_t> toks{m.vocab.canonical_of(w)};
        for (uint16_t s : m.vocab.synonyms[toks[0]]) toks.push_back(s);
        for (uint16_t tok : toks) {
            // planned against the current (already partially edited) weights
            auto edits = plan_edits(out, tok, variant, eta);
            apply_edits(out, edits);
            if (out_edits) out_edits->insert(out_edits->end(), edits.begin(), edits.end());
        }
    }
    return out;
}

LayerOverrides token_override_oracle(const DenoiserModel& m, uint16_t w_tok) {
    require(w_tok < m.vocab.n_tokens() && m.vocab.concept_id[w_tok] >= 0,
            Status::invalid_argument, "oracle: not a concept token");
    Vec e_u = m.vocab.embedding(m.vocab.u_id);
    uint16_t canon = m.vocab.canonical_of(w_tok);
    std::vector<uint16_t> toks{canon};
    for (uint16_t s : m.vocab.synonyms[canon]) toks.push_back(s);
    LayerOverrides out(m.blocks.size());
    for (size_t b = 0; b < m.blocks.size(); b++) {
        const auto& attn = m.blocks[b].attn;
        LayerOverride::Rows rows{key_of(attn, e_u), value_of(attn, e_u)};
        for (uint16_t tok : toks) out[b].rows[tok] = rows;
    }
    return out;
}

double edits_fro_norm(const std::vector<RankOneEdit>& edits) {
    double s = 0.0;
    for (const auto& e : edits) s += norm2sq(e.col) * norm2sq(e.row);
    return std::sqrt(s);
}

// ---- edit file io (TRCE) ----

template <typename T>
static void put(std::string& b, T v) {
    b.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void save_edits(const std::string& path, const std::vector<RankOneEdit>& edits) {
    std::string buf;
    buf.append("TRCE", 4);
    put<uint16_t>(buf, 1);
    put<uint16_t>(buf, uint16_t(edits.size()));
    for (const auto& e : edits) {
        put<uint16_t>(buf, e.block);
        put<uint8_t>(buf, e.target);
        put<uint8_t>(buf, uint8_t(e.variant));
        put<float>(buf, e.eta);
        put<uint16_t>(buf, uint16_t(e.col.size()));
        for (double v : e.col) put<float>(buf, float(v));
        put<uint16_t>(buf, uint16_t(e.row.size()));
        for (double v : e.row) put<float>(buf, float(v));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), Status::io, "cannot open for write: " + path);
    f.write(buf.data(), std::streamsize(buf.size()));
    require(f.good(), Status::io, "write failed: " + path);
}

std::vector<RankOneEdit> load_edits(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), Status::io, "cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    size_t off = 0;
    auto need = [&](size_t n) {
        require(off + n <= buf.size(), Status::format, "edits file truncated: " + path);
    };
    auto take = [&](auto& v) {
        need(sizeof v);
        std::memcpy(&v, buf.data() + off, sizeof v);
        off += sizeof v;
    };
    need(4);
    require(std::memcmp(buf.data(), "TRCE", 4) == 0, Status::format, "bad edits magic");
    off = 4;
    uint16_t version, count;
    take(version);
    require(version == 1, Status::format, "unsupported edits version");
    take(count);
    std::vector<RankOneEdit> out;
    for (int i = 0; i < count; i++) {
        RankOneEdit e;
        uint8_t variant;
        take(e.block);
        take(e.target);
        take(variant);
        e.variant = EditVariant(variant);
        take(e.eta);
        uint16_t n;
        take(n);
        e.col.resize(n);
        for (auto& v : e.col) {
            float x;
            take(x);
            v = double(x);
        }
        take(n);
        e.row.resize(n);
        for (auto& v : e.row) {
            float x;
            take(x);
            v = double(x);
        }
        out.push_back(std::move(e));
    }
    require(off == buf.size(), Status::format, "trailing bytes in edits file");
    return out;
}

}  // namespace trace
