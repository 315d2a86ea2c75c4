#include "trace/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace trace {

template <typename T>
static void put(std::string& b, T v) {
    b.append(reinterpret_cast<const char*>(&v), sizeof v);
}

static void put_name(std::string& b, const std::string& s) {
    require(s.size() < 65536, Status::invalid_argument, "name too long");
    put<uint16_t>(b, uint16_t(s.size()));
    b.append(s);
}

static void put_block_f32(std::string& b, const ParamBlockRef& blk) {
    put_name(b, blk.name);
    put<uint16_t>(b, uint16_t(blk.rows));
    put<uint16_t>(b, uint16_t(blk.cols));
    for (double v : blk.v) put<float>(b, float(v));
}

static void write_file(const std::string& path, const std::string& buf) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), Status::io, "cannot open for write: " + path);
    f.write(buf.data(), std::streamsize(buf.size()));
    require(f.good(), Status::io, "write failed: " + path);
}

static std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), Status::io, "cannot open: " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

namespace {
struct Reader {
    const std::string& buf;
    const std::string& path;
    size_t off = 0;

    void need(size_t n) const {
        require(off + n <= buf.size(), Status::format, "file truncated: " + path);
    }
    template <typename T>
    T take() {
        T v;
        need(sizeof v);
        std::memcpy(&v, buf.data() + off, sizeof v);
        off += sizeof v;
        return v;
    }
    std::string take_name() {
        uint16_t n = take<uint16_t>();
        need(n);
        std::string s(buf.data() + off, n);
        off += n;
        return s;
    }
    Mat take_mat_f32(int r, int c) {
        Mat m(r, c);
        need(4 * m.a.size());
        for (auto& v : m.a) {
            float x;
            std::memcpy(&x, buf.data() + off, 4);
            off += 4;
            v = double(x);
        }
        return m;
    }
    void done() const {
        require(off == buf.size(), Status::format, "trailing bytes in " + path);
    }
};
}  // namespace

// named f32 blocks ended by an empty name
static void put_param_section(std::string& buf, std::vector<ParamBlockRef> blocks) {
    for (const auto& blk : blocks) put_block_f32(buf, blk);
    put<uint16_t>(buf, 0);
}

static void load_param_section(Reader& r, std::vector<ParamBlockRef> blocks) {
    std::map<std::string, std::pair<Mat, bool>> seen;
    for (;;) {
        std::string name = r.take_name();
        if (name.empty()) break;
        uint16_t rows = r.take<uint16_t>(), cols = r.take<uint16_t>();
        require(!seen.count(name), Status::format, "duplicate parameter block: " + name);
        seen.emplace(name, std::make_pair(r.take_mat_f32(rows, cols), false));
    }
    for (auto& blk : blocks) {
        auto it = seen.find(blk.name);
        require(it != seen.end(), Status::format, "missing parameter block: " + blk.name);
        const Mat& m = it->second.first;
        require(m.rows == blk.rows && m.cols == blk.cols, Status::format,
                "parameter block shape mismatch: " + blk.name);
        std::copy(m.a.begin(), m.a.end(), blk.v.begin());
        it->second.second = true;
    }
    for (const auto& [name, v] : seen)
        require(v.second, Status::format, "unknown parameter block: " + name);
}

void save_model(const std::string& path, const DenoiserModel& m) {
    std::string buf;
    buf.append("TRCM", 4);
    put<uint16_t>(buf, 1);
    put<uint64_t>(buf, m.config_hash);

    const auto& d = m.dims;
    put<uint16_t>(buf, uint16_t(d.n_pixels));
    put<uint16_t>(buf, uint16_t(d.d_h));
    put<uint16_t>(buf, uint16_t(d.d_k));
    put<uint16_t>(buf, uint16_t(d.d_v));
    put<uint16_t>(buf, uint16_t(d.d_text));
    put<uint16_t>(buf, uint16_t(d.n_blocks));
    put<uint16_t>(buf, uint16_t(d.n_heads));
    put<uint16_t>(buf, uint16_t(d.time_dim));

    put<uint16_t>(buf, uint16_t(m.schedule.T));
    for (int t = 1; t <= m.schedule.T; t++) put<double>(buf, m.schedule.beta[t]);
    require(!m.blocks.empty(), Status::invalid_argument, "model has no blocks");
    put<double>(buf, m.blocks[0].attn.scale);

    const auto& v = m.vocab;
    put<uint16_t>(buf, uint16_t(v.n_tokens()));
    put<uint16_t>(buf, uint16_t(v.object_tokens.size()));
    put<uint16_t>(buf, uint16_t(v.style_tokens.size()));
    for (int i = 0; i < v.n_tokens(); i++) {
        put_name(buf, v.names[i]);
        put<int16_t>(buf, v.concept_id[i]);
        put<uint16_t>(buf, v.synonym_of[i]);
        for (int j = 0; j < v.d_text; j++) put<float>(buf, float(v.embed.at(i, j)));
    }

    put_param_section(buf, param_blocks(const_cast<DenoiserModel&>(m)));
    write_file(path, buf);
}

DenoiserModel load_model(const std::string& path) {
    std::string buf = read_file(path);
    Reader r{buf, path};
    r.need(4);
    require(std::memcmp(buf.data(), "TRCM", 4) == 0, Status::format, "bad model magic: " + path);
    r.off = 4;
    uint16_t version = r.take<uint16_t>();
    require(version == 1, Status::format, "unsupported model version");
    uint64_t config_hash = r.take<uint64_t>();

    ModelDims d;
    d.n_pixels = r.take<uint16_t>();
    d.d_h = r.take<uint16_t>();
    d.d_k = r.take<uint16_t>();
    d.d_v = r.take<uint16_t>();
    d.d_text = r.take<uint16_t>();
    d.n_blocks = r.take<uint16_t>();
    d.n_heads = r.take<uint16_t>();
    d.time_dim = r.take<uint16_t>();
    require(d.n_pixels == kNPix, Status::format, "model pixel count does not match this build");

    int T = r.take<uint16_t>();
    require(T >= 1, Status::format, "bad schedule length");
    NoiseSchedule sched;
    sched.T = T;
    sched.beta.assign(size_t(T) + 1, 0.0);
    sched.alpha.assign(size_t(T) + 1, 0.0);
    sched.alpha_bar.assign(size_t(T) + 1, 0.0);
    sched.alpha_bar[0] = 1.0;
    for (int t = 1; t <= T; t++) {
        sched.beta[t] = r.take<double>();
        sched.alpha[t] = 1.0 - sched.beta[t];
        sched.alpha_bar[t] = sched.alpha_bar[t - 1] * sched.alpha[t];
    }
    double attn_scale = r.take<double>();

    Vocabulary v;
    int n_tokens = r.take<uint16_t>();
    int n_objects = r.take<uint16_t>();
    int n_styles = r.take<uint16_t>();
    require(n_tokens >= 2 + n_objects + n_styles, Status::format, "bad vocabulary header");
    v.d_text = d.d_text;
    v.embed = Mat(n_tokens, d.d_text);
    v.synonyms.assign(size_t(n_tokens), {});
    for (int i = 0; i < n_tokens; i++) {
        v.names.push_back(r.take_name());
        v.concept_id.push_back(r.take<int16_t>());
        v.synonym_of.push_back(r.take<uint16_t>());
        require(v.synonym_of[i] < n_tokens, Status::format, "synonym link out of range");
        for (int j = 0; j < d.d_text; j++) v.embed.at(i, j) = double(r.take<float>());
    }
    for (int i = 0; i < n_tokens; i++) {
        bool canonical = v.synonym_of[i] == i;
        if (!canonical) {
            v.synonyms[v.synonym_of[i]].push_back(uint16_t(i));
            continue;
        }
        int cid = v.concept_id[i];
        if (cid < 0) continue;
        if (cid < n_objects) v.object_tokens.push_back(uint16_t(i));
        else
            v.style_tokens.push_back(uint16_t(i));
    }
    require(int(v.object_tokens.size()) == n_objects && int(v.style_tokens.size()) == n_styles,
            Status::format, "vocabulary concept structure is inconsistent");

    DenoiserModel m = make_denoiser(d, sched, v, 0);
    m.config_hash = config_hash;
    for (auto& blk : m.blocks) blk.attn.scale = attn_scale;
    load_param_section(r, param_blocks(m));
    r.done();
    return m;
}

void save_classifier(const std::string& path, const ConceptClassifier& c) {
    std::string buf;
    buf.append("TRCC", 4);
    put<uint16_t>(buf, 1);
    put<uint16_t>(buf, uint16_t(c.n_objects));
    put<uint16_t>(buf, uint16_t(c.n_styles));
    put_param_section(buf, param_blocks(const_cast<ConceptClassifier&>(c)));
    write_file(path, buf);
}

ConceptClassifier load_classifier(const std::string& path) {
    std::string buf = read_file(path);
    Reader r{buf, path};
    r.need(4);
    require(std::memcmp(buf.data(), "TRCC", 4) == 0, Status::format,
            "bad classifier magic: " + path);
    r.off = 4;
    uint16_t version = r.take<uint16_t>();
    require(version == 1, Status::format, "unsupported classifier version");
    ConceptClassifier c;
    c.n_objects = r.take<uint16_t>();
    c.n_styles = r.take<uint16_t>();
    require(c.n_objects >= 2, Status::format, "bad classifier head sizes");
    c.W1 = Mat(64, kNPix);
    c.b1.assign(64, 0.0);
    c.W2 = Mat(32, 64);
    c.b2.assign(32, 0.0);
    c.Wo = Mat(c.n_objects, 32);
    c.bo.assign(size_t(c.n_objects), 0.0);
    c.Ws = Mat(c.n_styles + 1, 32);
    c.bs.assign(size_t(c.n_styles) + 1, 0.0);
    load_param_section(r, param_blocks(c));
    r.done();
    return c;
}

uint64_t file_digest(const std::string& path) {
    std::string buf = read_file(path);
    return fnv1a64(buf.data(), buf.size());
}

}  // namespace trace
