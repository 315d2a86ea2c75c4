#include "trace/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace trace {

static inline double silu(double z) { return z / (1.0 + std::exp(-z)); }
static inline double silu_grad(double z) {
    double s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
}

ClfOut classifier_forward(const ConceptClassifier& c, const Vec& x, ClfCache* cache) {
    require(int(x.size()) == c.W1.cols, Status::invalid_argument, "classifier: bad input size");
    Vec z1 = matvec(c.W1, x);
    axpy(1.0, c.b1, z1);
    Vec h1(z1.size());
    for (size_t i = 0; i < z1.size(); i++) h1[i] = silu(z1[i]);
    Vec z2 = matvec(c.W2, h1);
    axpy(1.0, c.b2, z2);
    Vec h2(z2.size());
    for (size_t i = 0; i < z2.size(); i++) h2[i] = silu(z2[i]);
    ClfOut out;
    out.obj_logits = matvec(c.Wo, h2);
    axpy(1.0, c.bo, out.obj_logits);
    out.sty_logits = matvec(c.Ws, h2);
    axpy(1.0, c.bs, out.sty_logits);
    out.feat = h2;
    if (cache) {
        cache->x = x;
        cache->z1 = std::move(z1);
        cache->h1 = std::move(h1);
        cache->z2 = std::move(z2);
        cache->h2 = std::move(h2);
    }
    return out;
}

void classifier_backward(const ConceptClassifier& c, const ClfCache& cache,
                         const Vec& d_obj_logits, const Vec& d_sty_logits,
                         ConceptClassifier* grads, Vec* dx) {
    Vec dh2(cache.h2.size(), 0.0);
    if (!d_obj_logits.empty()) {
        Vec t = matvec_t(c.Wo, d_obj_logits);
        axpy(1.0, t, dh2);
        if (grads) {
            add_outer(grads->Wo, 1.0, d_obj_logits, cache.h2);
            axpy(1.0, d_obj_logits, grads->bo);
        }
    }
    if (!d_sty_logits.empty()) {
        Vec t = matvec_t(c.Ws, d_sty_logits);
        axpy(1.0, t, dh2);
        if (grads) {
            add_outer(grads->Ws, 1.0, d_sty_logits, cache.h2);
            axpy(1.0, d_sty_logits, grads->bs);
        }
    }
    Vec dz2(dh2.size());
    for (size_t i = 0; i < dh2.size(); i++) dz2[i] = dh2[i] * silu_grad(cache.z2[i]);
    Vec dh1 = matvec_t(c.W2, dz2);
    if (grads) {
        add_outer(grads->W2, 1.0, dz2, cache.h1);
        axpy(1.0, dz2, grads->b2);
    }
    Vec dz1(dh1.size());
    for (size_t i = 0; i < dh1.size(); i++) dz1[i] = dh1[i] * silu_grad(cache.z1[i]);
    if (grads) {
        add_outer(grads->W1, 1.0, dz1, cache.x);
        axpy(1.0, dz1, grads->b1);
    }
    if (dx) *dx = matvec_t(c.W1, dz1);
}

static std::span<double> span_of(Mat& m) { return {m.a.data(), m.a.size()}; }
static std::span<double> span_of(Vec& v) { return {v.data(), v.size()}; }

std::vector<ParamBlockRef> param_blocks(ConceptClassifier& c) {
    return {
        {"W1", c.W1.rows, c.W1.cols, span_of(c.W1)}, {"b1", 1, int(c.b1.size()), span_of(c.b1)},
        {"W2", c.W2.rows, c.W2.cols, span_of(c.W2)}, {"b2", 1, int(c.b2.size()), span_of(c.b2)},
        {"Wo", c.Wo.rows, c.Wo.cols, span_of(c.Wo)}, {"bo", 1, int(c.bo.size()), span_of(c.bo)},
        {"Ws", c.Ws.rows, c.Ws.cols, span_of(c.Ws)}, {"bs", 1, int(c.bs.size()), span_of(c.bs)},
    };
}

ConceptClassifier make_like_zero(const ConceptClassifier& c) {
    ConceptClassifier z = c;
    for (auto& blk : param_blocks(z))
        for (auto& v : blk.v) v = 0.0;
    return z;
}

int classify_object(const ConceptClassifier& c, const Vec& x) {
    ClfOut o = classifier_forward(c, x);
    return int(std::max_element(o.obj_logits.begin(), o.obj_logits.end()) -
               o.obj_logits.begin());
}

int classify_style(const ConceptClassifier& c, const Vec& x) {
    ClfOut o = classifier_forward(c, x);
    return int(std::max_element(o.sty_logits.begin(), o.sty_logits.end()) -
               o.sty_logits.begin());
}

static void softmax_ce_grad(const Vec& logits, int label, double& loss, Vec& dlogits) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double v : logits) denom += std::exp(v - mx);
    loss += -(logits[label] - mx - std::log(denom));
    dlogits.resize(logits.size());
    for (size_t i = 0; i < logits.size(); i++)
        dlogits[i] = std::exp(logits[i] - mx) / denom - (int(i) == label ? 1.0 : 0.0);
}

ConceptClassifier train_classifier(const std::vector<WorldSample>& corpus,
                                   const ClassifierTrainConfig& cfg, ClassifierStats* stats) {
    require(!corpus.empty(), Status::invalid_argument, "classifier: empty corpus");
    int n_obj = 0, n_sty = 0;
    for (const auto& s : corpus) n_obj = std::max(n_obj, int(s.object_label) + 1);
    // style concept ids sit above the object ids
    for (const auto& s : corpus)
        if (s.style_label >= 0) n_sty = std::max(n_sty, int(s.style_label) - n_obj + 1);
    require(n_obj >= 2, Status::invalid_argument, "classifier: need at least two object classes");

    Rng rng(cfg.seed, "clf.init");
    ConceptClassifier c;
    c.n_objects = n_obj;
    c.n_styles = n_sty;
    c.W1 = Mat::randn(64, kNPix, 1.0 / std::sqrt(double(kNPix)), rng);
    c.b1.assign(64, 0.0);
    c.W2 = Mat::randn(32, 64, 1.0 / std::sqrt(64.0), rng);
    c.b2.assign(32, 0.0);
    c.Wo = Mat::randn(n_obj, 32, 1.0 / std::sqrt(32.0), rng);
    c.bo.assign(n_obj, 0.0);
    c.Ws = Mat::randn(n_sty + 1, 32, 1.0 / std::sqrt(32.0), rng);
    c.bs.assign(n_sty + 1, 0.0);

    // deterministic holdout split
    Rng split(cfg.seed, "clf.split");
    std::vector<int> idx(corpus.size());
    for (size_t i = 0; i < idx.size(); i++) idx[i] = int(i);
    for (size_t i = idx.size(); i > 1; i--) std::swap(idx[i - 1], idx[split.uniform_int(int(i))]);
    size_t n_hold = size_t(double(corpus.size()) * cfg.holdout);
    std::vector<int> hold(idx.begin(), idx.begin() + n_hold);
    std::vector<int> train(idx.begin() + n_hold, idx.end());
    require(!train.empty() && !hold.empty(), Status::invalid_argument,
            "classifier: holdout split left an empty side");

    ConceptClassifier g = make_like_zero(c);
    auto cparams = param_blocks(c);
    auto gparams = param_blocks(g);
    // adam state
    std::vector<Vec> m1(cparams.size()), m2(cparams.size());
    for (size_t i = 0; i < cparams.size(); i++) {
        m1[i].assign(cparams[i].v.size(), 0.0);
        m2[i].assign(cparams[i].v.size(), 0.0);
    }
    int adam_t = 0;
    Rng order(cfg.seed, "clf.order");
    Rng aug(cfg.seed, "clf.aug");

    double last_loss = 0;
    for (int epoch = 0; epoch < cfg.epochs; epoch++) {
        for (size_t i = train.size(); i > 1; i--)
            std::swap(train[i - 1], train[order.uniform_int(int(i))]);
        for (size_t start = 0; start < train.size(); start += size_t(cfg.batch)) {
            size_t stop = std::min(train.size(), start + size_t(cfg.batch));
            for (auto& blk : gparams)
                for (auto& v : blk.v) v = 0.0;
            double loss = 0;
            for (size_t bi = start; bi < stop; bi++) {
                const auto& s = corpus[size_t(train[bi])];
                Vec x(s.pixels.begin(), s.pixels.end());
                for (auto& v : x) v += cfg.noise_aug * aug.gauss();
                ClfCache cache;
                ClfOut out = classifier_forward(c, x, &cache);
                Vec dobj, dsty;
                softmax_ce_grad(out.obj_logits, s.object_label, loss, dobj);
                int sty_label = s.style_label < 0 ? 0 : int(s.style_label) - n_obj + 1;
                softmax_ce_grad(out.sty_logits, sty_label, loss, dsty);
                classifier_backward(c, cache, dobj, dsty, &g, nullptr);
            }
            double inv = 1.0 / double(stop - start);
            last_loss = loss * inv;
            adam_t++;
            double b1c = 1.0 - std::pow(0.9, adam_t), b2c = 1.0 - std::pow(0.999, adam_t);
            for (size_t p = 0; p < cparams.size(); p++)
                for (size_t k = 0; k < cparams[p].v.size(); k++) {
                    double gk = gparams[p].v[k] * inv;
                    m1[p][k] = 0.9 * m1[p][k] + 0.1 * gk;
                    m2[p][k] = 0.999 * m2[p][k] + 0.001 * gk * gk;
                    double mhat = m1[p][k] / b1c, vhat = m2[p][k] / b2c;
                    cparams[p].v[k] -= cfg.lr * mhat / (std::sqrt(vhat) + 1e-8);
                }
        }
    }

    int obj_ok = 0, sty_ok = 0;
    for (int i : hold) {
        const auto& s = corpus[size_t(i)];
        Vec x(s.pixels.begin(), s.pixels.end());
        if (classify_object(c, x) == int(s.object_label)) obj_ok++;
        int sty_label = s.style_label < 0 ? 0 : int(s.style_label) - n_obj + 1;
        if (classify_style(c, x) == sty_label) sty_ok++;
    }
    double obj_acc = double(obj_ok) / double(hold.size());
    double sty_acc = double(sty_ok) / double(hold.size());
    if (stats) {
        stats->obj_holdout_acc = obj_acc;
        stats->sty_holdout_acc = sty_acc;
        stats->final_loss = last_loss;
    }
    char msg[160];
    std::snprintf(msg, sizeof msg,
                  "separability gate failed: holdout accuracy obj=%.3f sty=%.3f < %.2f", obj_acc,
                  sty_acc, cfg.gate_acc);
    require(obj_acc >= cfg.gate_acc && sty_acc >= cfg.gate_acc, Status::gate, msg);
    return c;
}

double harmonic_h_o(double acc_e, double acc_s, double acc_g) {
    double a = 1.0 - acc_e, b = acc_s, c = 1.0 - acc_g;
    if (a <= 0 || b <= 0 || c <= 0) return 0.0;
    return 3.0 / (1.0 / a + 1.0 / b + 1.0 / c);
}

// unbiased RBF MMD^2 over pooled pointers with split at m; unclamped, so
// same-distribution inputs fluctuate around zero
static double mmd2_over(const std::vector<const Vec*>& all, size_t m) {
    size_t n = all.size() - m;
    require(m >= 2 && n >= 2, Status::invalid_argument, "mmd2 needs at least 2 samples per side");
    std::vector<double> d2;
    d2.reserve(all.size() * (all.size() - 1) / 2);
    for (size_t i = 0; i < all.size(); i++)
        for (size_t j = i + 1; j < all.size(); j++) {
            double s = 0;
            for (size_t k = 0; k < all[i]->size(); k++) {
                double d = (*all[i])[k] - (*all[j])[k];
                s += d * d;
            }
            d2.push_back(s);
        }
    std::vector<double> med = d2;
    std::nth_element(med.begin(), med.begin() + med.size() / 2, med.end());
    double bw = med[med.size() / 2];
    if (bw <= 0) bw = 1.0;
    auto kern = [&](size_t i, size_t j) {
        // distances were computed in pooled order: recover index
        size_t a = std::min(i, j), b = std::max(i, j);
        size_t pos = a * (2 * all.size() - a - 1) / 2 + (b - a - 1);
        return std::exp(-d2[pos] / bw);
    };
    double kxx = 0, kyy = 0, kxy = 0;
    for (size_t i = 0; i < m; i++)
        for (size_t j = 0; j < m; j++)
            if (i != j) kxx += kern(i, j);
    for (size_t i = 0; i < n; i++)
        for (size_t j = 0; j < n; j++)
            if (i != j) kyy += kern(m + i, m + j);
    for (size_t i = 0; i < m; i++)
        for (size_t j = 0; j < n; j++) kxy += kern(i, m + j);
    double v = kxx / double(m * (m - 1)) + kyy / double(n * (n - 1)) - 2.0 * kxy / double(m * n);
    return v;
}

double mmd2(const std::vector<Vec>& xs, const std::vector<Vec>& ys) {
    std::vector<const Vec*> all;
    for (const auto& v : xs) all.push_back(&v);
    for (const auto& v : ys) all.push_back(&v);
    return std::max(0.0, mmd2_over(all, xs.size()));
}

// noise-floor scale for the mmd statistic: both inputs are draws from the same
// distribution, so the pooled set is permuted into random halves and the mean
// absolute unclamped estimate over those splits measures the estimator's
// magnitude under the null
double mmd_floor_h0(const std::vector<Vec>& a, const std::vector<Vec>& b, int n_perm,
                    uint64_t seed) {
    require(n_perm >= 1, Status::invalid_argument, "mmd floor needs at least one permutation");
    std::vector<const Vec*> pool;
    for (const auto& v : a) pool.push_back(&v);
    for (const auto& v : b) pool.push_back(&v);
    size_t half = pool.size() / 2;
    Rng perm(seed, "eval.floor");
    double acc = 0.0;
    for (int k = 0; k < n_perm; k++) {
        for (size_t i = pool.size(); i > 1; i--)
            std::swap(pool[i - 1], pool[size_t(perm.uniform_int(int(i)))]);
        acc += std::abs(mmd2_over(pool, half));
    }
    return acc / double(n_perm);
}

// one sampled image -> classifier features / labels
struct EvalSampler {
    const DenoiserModel& model;
    const AdapterSet* adapters;
    const EvalConfig& cfg;
    PromptEmbedding uncond;

    EvalSampler(const DenoiserModel& m, const AdapterSet* a, const EvalConfig& c)
        : model(m), adapters(a), cfg(c) {
        uncond = encode({m.vocab.u_id}, m.vocab);
    }

    Vec sample_image(const std::vector<uint16_t>& prompt, uint64_t seed) const {
        PromptEmbedding pe = encode(prompt, model.vocab);
        SampleOpts opts;
        opts.seed = seed;
        opts.adapters = adapters;
        opts.record_eps = false;
        GuidanceSpec g;
        if (cfg.guidance == GuidanceMode::cfg) {
            g.mode = GuidanceMode::cfg;
            g.scale = cfg.scale;
            return sample(model, pe, &uncond, g, opts).latents[0];
        }
        return sample(model, pe, nullptr, g, opts).latents[0];
    }
};

// prompt classes used for evaluation and drift measurement
struct PromptClass {
    std::vector<uint16_t> prompt;
    std::string kind;  // erased | synonym | retained
    int concept_cid;   // concept the prompt names
    uint16_t canonical;
};

static std::vector<PromptClass> eval_prompt_classes(const Vocabulary& vocab,
                                                    const std::vector<uint16_t>& erased) {
    auto is_erased = [&](uint16_t canon) {
        for (uint16_t w : erased)
            if (vocab.canonical_of(w) == canon) return true;
        return false;
    };
    std::vector<PromptClass> out;
    for (uint16_t tok : vocab.object_tokens) {
        bool e = is_erased(tok);
        out.push_back({{vocab.photo_id, tok}, e ? "erased" : "retained", vocab.concept_id[tok], tok});
        if (e)
            for (uint16_t syn : vocab.synonyms[tok])
                out.push_back({{vocab.photo_id, syn}, "synonym", vocab.concept_id[tok], tok});
    }
    // style prompts ride on a retained object so object suppression does not
    // contaminate the style accuracy
    uint16_t carrier = vocab.object_tokens[0];
    for (uint16_t tok : vocab.object_tokens)
        if (!is_erased(tok)) {
            carrier = tok;
            break;
        }
    for (uint16_t tok : vocab.style_tokens) {
        bool e = is_erased(tok);
        out.push_back({{vocab.photo_id, carrier, tok}, e ? "erased" : "retained",
                       vocab.concept_id[tok], tok});
        if (e)
            for (uint16_t syn : vocab.synonyms[tok])
                out.push_back(
                    {{vocab.photo_id, carrier, syn}, "synonym", vocab.concept_id[tok], tok});
    }
    return out;
}

MetricsReport evaluate(const DenoiserModel& model, const AdapterSet* adapters,
                       const DenoiserModel& reference, const ConceptClassifier& clf,
                       const std::vector<uint16_t>& erased, const EvalConfig& cfg) {
    require(cfg.n_per_class >= 10, Status::invalid_argument,
            "eval.n must be >= 10 for usable rates");
    if (cfg.n_per_class < 50)
        std::fprintf(stderr, "[trace] warning: eval.n = %d is small; rates are coarse\n",
                     cfg.n_per_class);
    const Vocabulary& vocab = model.vocab;
    EvalSampler ms(model, adapters, cfg);

    auto classes = eval_prompt_classes(vocab, erased);
    MetricsReport rep;
    double acc_e_num = 0, acc_e_den = 0, acc_s_num = 0, acc_s_den = 0;
    double acc_g_num = 0, acc_g_den = 0;

    Rng seeds(cfg.seed, "eval.seeds");
    for (const auto& pc : classes) {
        int own = 0;
        bool is_style_concept = pc.concept_cid >= int(vocab.object_tokens.size());
        for (int i = 0; i < cfg.n_per_class; i++) {
            uint64_t s = seeds.next_u64();
            Vec img = ms.sample_image(pc.prompt, s);
            int got = is_style_concept ? classify_style(clf, img) : classify_object(clf, img);
            int want = is_style_concept ? pc.concept_cid - int(vocab.object_tokens.size()) + 1
                                        : pc.concept_cid;
            if (got == want) own++;
        }
        double acc = double(own) / double(cfg.n_per_class);
        rep.rows.push_back({prompt_to_string(pc.prompt, vocab), pc.kind, acc, cfg.n_per_class});
        if (pc.kind == "erased") {
            acc_e_num += acc;
            acc_e_den += 1;
        } else if (pc.kind == "synonym") {
            acc_g_num += acc;
            acc_g_den += 1;
        } else {
            acc_s_num += acc;
            acc_s_den += 1;
        }
    }
    rep.acc_e = acc_e_den > 0 ? acc_e_num / acc_e_den : 0.0;
    rep.acc_g = acc_g_den > 0 ? acc_g_num / acc_g_den : 0.0;
    rep.acc_s = acc_s_den > 0 ? acc_s_num / acc_s_den : 1.0;
    rep.h_o = harmonic_h_o(rep.acc_e, rep.acc_s, rep.acc_g);

    // feature drift on retained prompts: model vs reference, plus the
    // reference-vs-itself floor on fresh seeds
    EvalSampler rs(reference, nullptr, cfg);
    std::vector<PromptClass> retained;
    for (const auto& pc : classes)
        if (pc.kind == "retained" || pc.kind == "retained_style") retained.push_back(pc);
    if (!retained.empty() && cfg.mmd_n >= 4) {
        Rng mseed(cfg.seed, "eval.mmd");
        std::vector<Vec> fx, fy, fz;
        for (int i = 0; i < cfg.mmd_n; i++) {
            const auto& pc = retained[size_t(i) % retained.size()];
            uint64_t s1 = mseed.next_u64(), s2 = mseed.next_u64(), s3 = mseed.next_u64();
            fx.push_back(classifier_forward(clf, ms.sample_image(pc.prompt, s1)).feat);
            fy.push_back(classifier_forward(clf, rs.sample_image(pc.prompt, s2)).feat);
            fz.push_back(classifier_forward(clf, rs.sample_image(pc.prompt, s3)).feat);
        }
        rep.feature_mmd = mmd2(fx, fy);
        rep.mmd_floor = mmd_floor_h0(fz, fy, 8, cfg.seed);
    }
    return rep;
}

std::vector<StabilityRow> stability_sweep(const DenoiserModel& base,
                                          const std::vector<RankOneEdit>& edits,
                                          const std::vector<double>& scales,
                                          const ConceptClassifier& clf, uint16_t w_tok,
                                          const EvalConfig& cfg) {
    require(!scales.empty(), Status::invalid_argument, "stability sweep: no scales");
    const Vocabulary& vocab = base.vocab;
    std::vector<uint16_t> prompt{vocab.photo_id, vocab.canonical_of(w_tok)};
    bool is_style = vocab.concept_id[w_tok] >= int(vocab.object_tokens.size());
    if (is_style) prompt = {vocab.photo_id, vocab.object_tokens[0], vocab.canonical_of(w_tok)};

    EvalSampler ref_sampler(base, nullptr, cfg);
    Rng seeds(cfg.seed, "sweep.seeds");
    std::vector<uint64_t> s_model(size_t(cfg.mmd_n)), s_ref(size_t(cfg.mmd_n)),
        s_floor(size_t(cfg.mmd_n));
    for (int i = 0; i < cfg.mmd_n; i++) {
        s_model[i] = seeds.next_u64();
        s_ref[i] = seeds.next_u64();
        s_floor[i] = seeds.next_u64();
    }
    std::vector<Vec> ref_feats, floor_feats;
    for (int i = 0; i < cfg.mmd_n; i++) {
        ref_feats.push_back(classifier_forward(clf, ref_sampler.sample_image(prompt, s_ref[i])).feat);
        floor_feats.push_back(
            classifier_forward(clf, ref_sampler.sample_image(prompt, s_floor[i])).feat);
    }
    double floor = mmd_floor_h0(floor_feats, ref_feats, 8, cfg.seed);

    std::vector<StabilityRow> out;
    for (double s : scales) {
        DenoiserModel edited = base;
        apply_edits(edited, edits, s);
        EvalSampler es(edited, nullptr, cfg);
        std::vector<Vec> feats;
        int as_w = 0;
        int want = is_style ? vocab.concept_id[w_tok] - int(vocab.object_tokens.size()) + 1
                            : vocab.concept_id[w_tok];
        for (int i = 0; i < cfg.mmd_n; i++) {
            Vec img = es.sample_image(prompt, s_model[i]);
            feats.push_back(classifier_forward(clf, img).feat);
            int got = is_style ? classify_style(clf, img) : classify_object(clf, img);
            if (got == want) as_w++;
        }
        StabilityRow row;
        row.scale = s;
        row.delta_frob = s * edits_fro_norm(edits);
        row.strength = mmd2(feats, ref_feats);
        row.acc_w = double(as_w) / double(cfg.mmd_n);
        row.floor = floor;
        out.push_back(row);
    }
    return out;
}

LocalityReport locality_check(const DenoiserModel& base, const AdapterSet& adapters,
                              int n_prompts, int n_seeds, uint64_t seed) {
    require(!adapters.empty(), Status::invalid_argument, "locality check needs an adapter");
    int gate_t = 0;
    for (const auto& a : adapters.adapters) gate_t = std::max(gate_t, a.t_late);
    gate_t = std::min(gate_t, base.schedule.T);

    const Vocabulary& vocab = base.vocab;
    std::vector<std::vector<uint16_t>> prompts;
    for (uint16_t tok : vocab.object_tokens) {
        prompts.push_back({vocab.photo_id, tok});
        for (uint16_t sty : vocab.style_tokens) prompts.push_back({vocab.photo_id, tok, sty});
    }
    Rng pick(seed, "loc.prompts");
    LocalityReport rep;
    rep.prompts = n_prompts;
    rep.seeds = n_seeds;
    rep.gate_t = gate_t;
    rep.prefixes_identical = true;
    rep.full_identical = true;
    Rng seeds(seed, "loc.seeds");
    for (int p = 0; p < n_prompts; p++) {
        const auto& prompt = prompts[size_t(pick.uniform_int(int(prompts.size())))];
        for (int sd = 0; sd < n_seeds; sd++) {
            uint64_t s = seeds.next_u64();
            SampleOpts o1;
            o1.seed = s;
            o1.record_eps = false;
            Trajectory t_base = sample_prompt(base, prompt, o1);
            SampleOpts o2 = o1;
            o2.adapters = &adapters;
            Trajectory t_ad = sample_prompt(base, prompt, o2);
            for (int t = 0; t <= base.schedule.T; t++) {
                const Vec& a = t_base.latents[t];
                const Vec& b = t_ad.latents[t];
                bool same = std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
                if (!same) {
                    rep.full_identical = false;
                    if (t >= gate_t) {
                        rep.prefixes_identical = false;
                        for (size_t i = 0; i < a.size(); i++)
                            rep.max_prefix_abs_diff =
                                std::max(rep.max_prefix_abs_diff, std::abs(a[i] - b[i]));
                    }
                }
            }
        }
    }
    return rep;
}

}  // namespace trace
