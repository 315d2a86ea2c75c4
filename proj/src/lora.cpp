#include "trace/lora.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "trace/denoiser.hpp"

namespace trace {

void AdapterSet::canonicalize() {
    std::stable_sort(adapters.begin(), adapters.end(),
                     [](const ConceptAdapter& a, const ConceptAdapter& b) {
                         return a.concept_token < b.concept_token;
                     });
}

ConceptAdapter make_adapter(int n_blocks, int d_k, int d_v, int d_text, uint16_t concept_token,
                            int rank, int t_late, double scale, double init_sigma, uint64_t seed) {
    require(rank >= 1, Status::invalid_argument, "adapter rank must be >= 1");
    require(t_late >= 0, Status::invalid_argument, "adapter t_late must be >= 0");
    Rng rng(seed, "lora.init");
    ConceptAdapter a;
    a.concept_token = concept_token;
    a.rank = rank;
    a.t_late = t_late;
    a.scale = scale;
    for (int b = 0; b < n_blocks; b++) {
        LoraBlock blk;
        blk.K.B = Mat(d_k, rank);
        blk.K.C = Mat::randn(rank, d_text, init_sigma, rng);
        blk.V.B = Mat(d_v, rank);
        blk.V.C = Mat::randn(rank, d_text, init_sigma, rng);
        a.blocks.push_back(std::move(blk));
    }
    return a;
}

static void add_delta(Mat& W, const LoraTarget& t, double scale) {
    // W += scale * B C
    for (int i = 0; i < W.rows; i++)
        for (int r = 0; r < t.B.cols; r++) {
            double s = scale * t.B.at(i, r);
            if (s == 0.0) continue;
            const double* cr = t.C.row(r);
            double* wr = W.row(i);
            for (int j = 0; j < W.cols; j++) wr[j] += s * cr[j];
        }
}

void add_active_deltas(Mat& W_K, Mat& W_V, const AdapterSet& set, int block, int t) {
    for (const auto& a : set.adapters) {
        if (!a.active_at(t)) continue;
        require(block < int(a.blocks.size()), Status::invalid_argument,
                "adapter has too few blocks for this model");
        add_delta(W_K, a.blocks[block].K, a.scale);
        add_delta(W_V, a.blocks[block].V, a.scale);
    }
}

static std::span<double> span_of(Mat& m) { return {m.a.data(), m.a.size()}; }

std::vector<ParamBlockRef> param_blocks(ConceptAdapter& a) {
    std::vector<ParamBlockRef> out;
    for (size_t b = 0; b < a.blocks.size(); b++) {
        std::string p = "blk" + std::to_string(b) + ".";
        auto& blk = a.blocks[b];
        out.push_back({p + "K.B", blk.K.B.rows, blk.K.B.cols, span_of(blk.K.B)});
        out.push_back({p + "K.C", blk.K.C.rows, blk.K.C.cols, span_of(blk.K.C)});
        out.push_back({p + "V.B", blk.V.B.rows, blk.V.B.cols, span_of(blk.V.B)});
        out.push_back({p + "V.C", blk.V.C.rows, blk.V.C.cols, span_of(blk.V.C)});
    }
    return out;
}

std::vector<ParamBlockRef> param_blocks(AdapterSet& s) {
    std::vector<ParamBlockRef> out;
    for (size_t i = 0; i < s.adapters.size(); i++) {
        for (auto& blk : param_blocks(s.adapters[i])) {
            blk.name = "adapter" + std::to_string(i) + "." + blk.name;
            out.push_back(blk);
        }
    }
    return out;
}

AdapterSet make_like_zero(const AdapterSet& s) {
    AdapterSet z = s;
    for (auto& blk : param_blocks(z))
        for (auto& v : blk.v) v = 0.0;
    return z;
}

void merge_adapters(DenoiserModel& m, const AdapterSet& set, bool allow_gated) {
    for (const auto& a : set.adapters) {
        bool gated = a.t_late <= m.schedule.T;
        require(!gated || allow_gated, Status::invalid_argument,
                "merging a timestep-gated adapter changes semantics; pass the explicit flag");
        require(int(a.blocks.size()) == m.dims.n_blocks, Status::invalid_argument,
                "adapter/model block count mismatch");
    }
    AdapterSet canon = set;
    canon.canonicalize();
    for (const auto& a : canon.adapters)
        for (int b = 0; b < m.dims.n_blocks; b++) {
            add_delta(m.blocks[b].attn.W_K, a.blocks[b].K, a.scale);
            add_delta(m.blocks[b].attn.W_V, a.blocks[b].V, a.scale);
        }
}

// ---- adapter file io (TRCL) ----

template <typename T>
static void put(std::string& b, T v) {
    b.append(reinterpret_cast<const char*>(&v), sizeof v);
}
static void put_mat_f32(std::string& b, const Mat& m) {
    for (double v : m.a) put<float>(b, float(v));
}

void save_adapter(const std::string& path, const ConceptAdapter& a) {
    require(!a.blocks.empty(), Status::invalid_argument, "adapter has no blocks");
    std::string buf;
    buf.append("TRCL", 4);
    put<uint16_t>(buf, 1);
    put<uint16_t>(buf, a.concept_token);
    put<uint16_t>(buf, uint16_t(a.rank));
    put<int32_t>(buf, int32_t(a.t_late));
    put<float>(buf, float(a.scale));
    put<uint16_t>(buf, uint16_t(a.blocks.size()));
    put<uint16_t>(buf, uint16_t(a.blocks[0].K.B.rows));
    put<uint16_t>(buf, uint16_t(a.blocks[0].V.B.rows));
    put<uint16_t>(buf, uint16_t(a.blocks[0].K.C.cols));
    for (const auto& blk : a.blocks) {
        put_mat_f32(buf, blk.K.B);
        put_mat_f32(buf, blk.K.C);
        put_mat_f32(buf, blk.V.B);
        put_mat_f32(buf, blk.V.C);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), Status::io, "cannot open for write: " + path);
    f.write(buf.data(), std::streamsize(buf.size()));
    require(f.good(), Status::io, "write failed: " + path);
}

ConceptAdapter load_adapter(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), Status::io, "cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    size_t off = 0;
    auto need = [&](size_t n) {
        require(off + n <= buf.size(), Status::format, "adapter file truncated: " + path);
    };
    auto take = [&](auto& v) {
        need(sizeof v);
        std::memcpy(&v, buf.data() + off, sizeof v);
        off += sizeof v;
    };
    need(4);
    require(std::memcmp(buf.data(), "TRCL", 4) == 0, Status::format, "bad adapter magic");
    off = 4;
    uint16_t version, concept_token, rank, n_blocks, d_k, d_v, d_text;
    int32_t t_late;
    float scale;
    take(version);
    require(version == 1, Status::format, "unsupported adapter version");
    take(concept_token);
    take(rank);
    take(t_late);
    take(scale);
    take(n_blocks);
    take(d_k);
    take(d_v);
    take(d_text);
    ConceptAdapter a;
    a.concept_token = concept_token;
    a.rank = rank;
    a.t_late = t_late;
    a.scale = double(scale);
    auto take_mat = [&](int r, int c) {
        Mat m(r, c);
        need(sizeof(float) * m.a.size());
        for (auto& v : m.a) {
            float x;
            std::memcpy(&x, buf.data() + off, 4);
            off += 4;
            v = double(x);
        }
        return m;
    };
    for (int b = 0; b < n_blocks; b++) {
        LoraBlock blk;
        blk.K.B = take_mat(d_k, rank);
        blk.K.C = take_mat(rank, d_text);
        blk.V.B = take_mat(d_v, rank);
        blk.V.C = take_mat(rank, d_text);
        a.blocks.push_back(std::move(blk));
    }
    require(off == buf.size(), Status::format, "trailing bytes in adapter file");
    return a;
}

}  // namespace trace
