#include "trace/world.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace trace {

uint16_t Vocabulary::token_of_concept(int cid) const {
    for (uint16_t t = 0; t < n_tokens(); t++)
        if (concept_id[t] == cid && synonym_of[t] == t) return t;
    fail(Status::invalid_argument, "no canonical token for concept " + std::to_string(cid));
}

bool Vocabulary::mentions(const std::vector<uint16_t>& prompt, uint16_t canonical_tok) const {
    for (uint16_t t : prompt)
        if (synonym_of[t] == canonical_tok) return true;
    return false;
}

static const char* kObjectNames[] = {"disc", "square", "cross", "bar"};
static const char* kStyleNames[] = {"stripes", "checker"};

static Vec random_unit(int d, Rng& rng) {
    Vec v = vec_randn(d, 1.0, rng);
    normalize(v);
    return v;
}

static void snap_row_f32(Vec& v) {
    for (auto& x : v) x = snap_f32(x);
}

Vocabulary build_vocabulary(const WorldConfig& cfg, uint64_t seed) {
    require(cfg.n_objects >= 2 && cfg.n_objects <= 4, Status::invalid_argument,
            "world.n_objects must be in [2,4]");
    require(cfg.n_styles >= 0 && cfg.n_styles <= 2, Status::invalid_argument,
            "world.n_styles must be in [0,2]");
    require(cfg.d_text >= 8, Status::invalid_argument, "world.d_text too small");

    Rng rng(seed, "world.vocab");
    Vocabulary v;
    v.d_text = cfg.d_text;

    int n_concepts = cfg.n_objects + cfg.n_styles;
    // photo + u + canonicals: rejection-sample until pairwise |cos| <= bound
    std::vector<Vec> base;
    for (int i = 0; i < 2 + n_concepts; i++) {
        for (int attempt = 0;; attempt++) {
            require(attempt < 10000, Status::numeric, "vocabulary rejection sampling stalled");
            Vec e = random_unit(cfg.d_text, rng);
            bool ok = true;
            for (const auto& other : base)
                if (std::abs(cosine(e, other)) > cfg.max_concept_cos) ok = false;
            if (ok) {
                base.push_back(std::move(e));
                break;
            }
        }
    }

    auto push_token = [&](const std::string& name, Vec e, int cid) {
        snap_row_f32(e);
        uint16_t id = uint16_t(v.names.size());
        v.names.push_back(name);
        v.concept_id.push_back(int16_t(cid));
        v.synonym_of.push_back(id);
        if (v.embed.rows == 0) v.embed = Mat(0, cfg.d_text);
        v.embed.rows++;
        v.embed.a.insert(v.embed.a.end(), e.begin(), e.end());
        return id;
    };

    v.photo_id = push_token("photo", base[0], -1);
    v.u_id = push_token("u", base[1], -1);
    for (int i = 0; i < cfg.n_objects; i++)
        v.object_tokens.push_back(push_token(kObjectNames[i], base[2 + i], i));
    for (int i = 0; i < cfg.n_styles; i++)
        v.style_tokens.push_back(
            push_token(kStyleNames[i], base[2 + cfg.n_objects + i], cfg.n_objects + i));

    v.synonyms.assign(v.names.size(), {});
    size_t n_canonical = v.names.size();
    for (size_t c = 2; c < n_canonical; c++) {
        Vec e_c = v.embedding(uint16_t(c));
        for (int s = 0; s < cfg.synonyms_per_concept; s++) {
            // synonym = cos*e_c + sin*orth, cos drawn in the configured band
            double target = cfg.syn_cos_lo + (cfg.syn_cos_hi - cfg.syn_cos_lo) * rng.uniform();
            Vec orth = random_unit(cfg.d_text, rng);
            axpy(-dot(orth, e_c), e_c, orth);
            normalize(orth);
            Vec e(cfg.d_text);
            double sin_t = std::sqrt(1.0 - target * target);
            for (int j = 0; j < cfg.d_text; j++) e[j] = target * e_c[j] + sin_t * orth[j];
            char name[32];
            std::snprintf(name, sizeof name, "%s_syn%d", v.names[c].c_str(), s);
            uint16_t id = push_token(name, e, v.concept_id[c]);
            v.synonym_of[id] = uint16_t(c);
            v.synonyms[c].push_back(id);
        }
    }
    v.synonyms.resize(v.names.size());
    return v;
}

// Shapes are drawn at value +1 over a background at -1; styles texture the
// background so both heads of the classifier have disjoint evidence.
// style_idx: -1 none, 0 stripes, 1 checker.
std::vector<float> render_clean(int object_cid, int style_idx, int dx, int dy) {
    std::vector<float> img(kNPix);
    int cx = kImgW / 2 + dx, cy = kImgH / 2 + dy;
    for (int y = 0; y < kImgH; y++)
        for (int x = 0; x < kImgW; x++) {
            double bg = -1.0;
            if (style_idx == 0) bg += (y % 4 < 2) ? 0.7 : 0.0;                // stripes
            if (style_idx == 1) bg += (((x / 2) + (y / 2)) % 2) ? 0.7 : 0.0;  // checker
            bool inside = false;
            int rx = x - cx, ry = y - cy;
            switch (object_cid) {
                case 0: inside = rx * rx + ry * ry <= 18; break;              // disc
                case 1: inside = std::abs(rx) <= 3 && std::abs(ry) <= 3; break;  // square
                case 2:
                    inside = (std::abs(rx) <= 1 && std::abs(ry) <= 5) ||
                             (std::abs(ry) <= 1 && std::abs(rx) <= 5);
                    break;  // cross
                case 3: inside = std::abs(ry) <= 1 && std::abs(rx) <= 6; break;  // bar
                default: break;
            }
            img[y * kImgW + x] = float(inside ? 1.0 : bg);
        }
    return img;
}

std::vector<WorldSample> generate_corpus(const Vocabulary& vocab, const WorldConfig& cfg,
                                         uint64_t seed) {
    require(cfg.corpus_n >= cfg.n_objects, Status::invalid_argument, "world.corpus_n too small");
    Rng rng(seed, "world.corpus");
    std::vector<WorldSample> out;
    out.reserve(cfg.corpus_n);
    int n_style_variants = cfg.n_styles + 1;  // none + each style
    for (int i = 0; i < cfg.corpus_n; i++) {
        // round-robin object and style keeps label counts balanced within +-1
        int obj = i % cfg.n_objects;
        int sty_idx = (i / cfg.n_objects) % n_style_variants - 1;  // -1 none
        int sty_cid = sty_idx < 0 ? -1 : cfg.n_objects + sty_idx;
        int dx = rng.uniform_int(2 * cfg.jitter + 1) - cfg.jitter;
        int dy = rng.uniform_int(2 * cfg.jitter + 1) - cfg.jitter;
        WorldSample s;
        s.pixels = render_clean(obj, sty_idx, dx, dy);
        for (auto& p : s.pixels) {
            double v = double(p) + cfg.image_noise * rng.gauss();
            p = float(std::min(1.0, std::max(-1.0, v)));
        }
        s.object_label = int8_t(obj);
        s.style_label = int8_t(sty_cid);
        s.prompt = {vocab.photo_id, vocab.object_tokens[obj]};
        if (sty_idx >= 0) s.prompt.push_back(vocab.style_tokens[sty_idx]);
        out.push_back(std::move(s));
    }
    return out;
}

PromptEmbedding encode(const std::vector<uint16_t>& prompt, const Vocabulary& vocab) {
    require(!prompt.empty(), Status::invalid_argument, "empty prompt");
    PromptEmbedding pe;
    pe.token_ids = prompt;
    pe.E = Mat(int(prompt.size()), vocab.d_text);
    for (size_t i = 0; i < prompt.size(); i++) {
        require(prompt[i] < vocab.n_tokens(), Status::invalid_argument,
                "token id out of range: " + std::to_string(prompt[i]));
        std::memcpy(pe.E.row(int(i)), vocab.embed.row(prompt[i]), sizeof(double) * vocab.d_text);
    }
    return pe;
}

std::vector<uint16_t> substitute(const std::vector<uint16_t>& prompt, uint16_t w_tok,
                                 uint16_t u_tok, const Vocabulary& vocab) {
    require(w_tok < vocab.n_tokens() && u_tok < vocab.n_tokens(), Status::invalid_argument,
            "substitute: token id out of range");
    std::vector<uint16_t> out = prompt;
    uint16_t w_canon = vocab.synonym_of[w_tok];
    for (auto& t : out)
        if (vocab.synonym_of[t] == w_canon) t = u_tok;
    return out;
}

std::string prompt_to_string(const std::vector<uint16_t>& prompt, const Vocabulary& vocab) {
    std::string s;
    for (size_t i = 0; i < prompt.size(); i++) {
        if (i) s += ' ';
        s += vocab.names[prompt[i]];
    }
    return s;
}

std::vector<uint16_t> prompt_from_names(const std::string& names, const Vocabulary& vocab) {
    std::vector<uint16_t> out;
    std::istringstream is(names);
    std::string word;
    while (is >> word) {
        int found = -1;
        for (int t = 0; t < vocab.n_tokens(); t++)
            if (vocab.names[t] == word) found = t;
        require(found >= 0, Status::invalid_argument, "unknown token name: " + word);
        out.push_back(uint16_t(found));
    }
    return out;
}

// ---- corpus file io (TRCW) ----

static void put_u32(std::string& b, uint32_t v) { b.append(reinterpret_cast<char*>(&v), 4); }
static void put_u16(std::string& b, uint16_t v) { b.append(reinterpret_cast<char*>(&v), 2); }

void save_corpus(const std::string& path, const std::vector<WorldSample>& corpus) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    std::string buf;
    buf.append("TRCW", 4);
    put_u32(buf, 1);  // version
    put_u32(buf, uint32_t(corpus.size()));
    put_u16(buf, uint16_t(kImgH));
    put_u16(buf, uint16_t(kImgW));
    for (const auto& s : corpus) {
        require(s.pixels.size() == kNPix, Status::invalid_argument, "bad pixel count");
        buf.append(reinterpret_cast<const char*>(s.pixels.data()), sizeof(float) * kNPix);
        buf.push_back(char(s.object_label));
        buf.push_back(char(s.style_label));
        require(s.prompt.size() < 256, Status::invalid_argument, "prompt too long");
        buf.push_back(char(uint8_t(s.prompt.size())));
        buf.append(reinterpret_cast<const char*>(s.prompt.data()), 2 * s.prompt.size());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), Status::io, "cannot open for write: " + path);
    f.write(buf.data(), std::streamsize(buf.size()));
    require(f.good(), Status::io, "write failed: " + path);
}

std::vector<WorldSample> load_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), Status::io, "cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    size_t off = 0;
    auto need = [&](size_t n) {
        require(off + n <= buf.size(), Status::format, "corpus file truncated: " + path);
    };
    need(16);
    require(std::memcmp(buf.data(), "TRCW", 4) == 0, Status::format, "bad corpus magic");
    uint32_t version, count;
    uint16_t h, w;
    std::memcpy(&version, buf.data() + 4, 4);
    std::memcpy(&count, buf.data() + 8, 4);
    std::memcpy(&h, buf.data() + 12, 2);
    std::memcpy(&w, buf.data() + 14, 2);
    require(version == 1, Status::format, "unsupported corpus version");
    require(h == kImgH && w == kImgW, Status::format, "unexpected image dims");
    off = 16;
    std::vector<WorldSample> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; i++) {
        WorldSample s;
        need(sizeof(float) * kNPix + 3);
        s.pixels.resize(kNPix);
        std::memcpy(s.pixels.data(), buf.data() + off, sizeof(float) * kNPix);
        off += sizeof(float) * kNPix;
        s.object_label = int8_t(buf[off++]);
        s.style_label = int8_t(buf[off++]);
        uint8_t plen = uint8_t(buf[off++]);
        need(2 * size_t(plen));
        s.prompt.resize(plen);
        std::memcpy(s.prompt.data(), buf.data() + off, 2 * size_t(plen));
        off += 2 * size_t(plen);
        out.push_back(std::move(s));
    }
    require(off == buf.size(), Status::format, "trailing bytes in corpus file");
    return out;
}

}  // namespace trace
