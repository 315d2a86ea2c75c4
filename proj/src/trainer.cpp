#include "trace/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace trace {

OptKind opt_kind_from(const std::string& name) {
    if (name == "sgd") return OptKind::sgd;
    if (name == "adam") return OptKind::adam;
    fail(Status::invalid_argument, "unknown optimizer: " + name);
}

void Optimizer::init(const std::vector<ParamBlockRef>& params) {
    t = 0;
    m1.assign(params.size(), {});
    m2.assign(params.size(), {});
    for (size_t i = 0; i < params.size(); i++) {
        m1[i].assign(params[i].v.size(), 0.0);
        m2[i].assign(params[i].v.size(), 0.0);
    }
}

void Optimizer::step(std::vector<ParamBlockRef>& params, const std::vector<ParamBlockRef>& grads) {
    require(params.size() == grads.size(), Status::state, "optimizer: mismatched block count");
    for (size_t i = 0; i < params.size(); i++)
        require(params[i].v.size() == grads[i].v.size(), Status::state,
                "optimizer: mismatched block size");
    if (kind == OptKind::sgd) {
        // exactly p -= lr * g, nothing else
        for (size_t i = 0; i < params.size(); i++)
            for (size_t k = 0; k < params[i].v.size(); k++) params[i].v[k] -= lr * grads[i].v[k];
        return;
    }
    if (m1.size() != params.size()) init(params);
    t++;
    double b1c = 1.0 - std::pow(beta1, t), b2c = 1.0 - std::pow(beta2, t);
    for (size_t i = 0; i < params.size(); i++)
        for (size_t k = 0; k < params[i].v.size(); k++) {
            double g = grads[i].v[k];
            m1[i][k] = beta1 * m1[i][k] + (1.0 - beta1) * g;
            m2[i][k] = beta2 * m2[i][k] + (1.0 - beta2) * g * g;
            params[i].v[k] -= lr * (m1[i][k] / b1c) / (std::sqrt(m2[i][k] / b2c) + eps);
        }
}

static double wall_ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
}

static void zero_blocks(std::vector<ParamBlockRef>& blocks) {
    for (auto& b : blocks)
        for (auto& v : b.v) v = 0.0;
}

// ---- base model training ----

static DenoiserModel train_base_once(const std::vector<WorldSample>& corpus,
                                     const ModelDims& dims, const NoiseSchedule& sched,
                                     const Vocabulary& vocab, const BaseTrainConfig& cfg,
                                     uint64_t seed, std::vector<BaseLossRow>* rows,
                                     BaseTrainStats* stats) {
    DenoiserModel m = make_denoiser(dims, sched, vocab, seed);
    DenoiserModel g = make_like_zero(m);
    auto mp = param_blocks(m);
    auto gp = param_blocks(g);
    Optimizer opt;
    opt.kind = cfg.opt;
    opt.lr = cfg.lr;
    opt.init(mp);

    Rng order(seed, "base.order"), tdraw(seed, "base.t"), edraw(seed, "base.eps"),
        drop(seed, "base.drop");
    PromptEmbedding uncond = encode({vocab.u_id}, vocab);
    const int n_pix = dims.n_pixels;

    std::vector<int> idx(corpus.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto t_start = std::chrono::steady_clock::now();
    size_t steps_per_epoch = (idx.size() + size_t(cfg.batch) - 1) / size_t(cfg.batch);
    double total_steps = double(cfg.epochs) * double(steps_per_epoch);
    constexpr double kPi = 3.14159265358979323846;
    int gstep = 0;
    bool first = true;
    double last_loss = 0;
    for (int epoch = 0; epoch < cfg.epochs; epoch++) {
        for (size_t i = idx.size(); i > 1; i--) std::swap(idx[i - 1], idx[order.uniform_int(int(i))]);
        for (size_t start = 0; start < idx.size(); start += size_t(cfg.batch)) {
            size_t stop = std::min(idx.size(), start + size_t(cfg.batch));
            int bsz = int(stop - start);
            zero_blocks(gp);
            double loss = 0;
            for (size_t b = start; b < stop; b++) {
                const auto& s = corpus[size_t(idx[b])];
                Vec x0(s.pixels.begin(), s.pixels.end());
                int t = 1 + tdraw.uniform_int(sched.T);
                Vec eps = vec_randn(n_pix, 1.0, edraw);
                Vec xt = forward_noise(x0, t, eps, sched);
                bool drop_cond = drop.uniform() < cfg.uncond_dropout;
                PromptEmbedding pe = drop_cond ? uncond : encode(s.prompt, vocab);
                EvalCache cache;
                Vec eh = predict_eps(m, xt, pe, t, nullptr, nullptr, &cache);
                Vec d(size_t(n_pix), 0.0);
                double l = 0;
                for (int i = 0; i < n_pix; i++) {
                    double diff = eh[i] - eps[i];
                    l += diff * diff;
                    d[i] = 2.0 * diff / (double(n_pix) * bsz);
                }
                loss += l / n_pix;
                predict_eps_backward(m, cache, d, nullptr, &g, nullptr, nullptr);
            }
            loss /= bsz;
            if (first && stats) stats->first_batch_loss = loss;
            first = false;
            char where[96];
            std::snprintf(where, sizeof where, "base training diverged at epoch %d step %d", epoch,
                          gstep);
            require(std::isfinite(loss), Status::numeric, where);
            // cosine decay with a floor; late updates stay small so the loss
            // settles instead of cycling
            double prog = double(gstep) / total_steps;
            opt.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(prog * kPi)));
            opt.step(mp, gp);
            gstep++;
            last_loss = loss;
            if (rows) rows->push_back({epoch, gstep, loss, wall_ms_since(t_start)});
        }
    }
    if (stats) stats->final_loss = last_loss;
    return m;
}

// fraction of conditional samples the frozen classifier assigns to the
// prompted concept, per concept
static std::vector<double> base_gate_accs(const DenoiserModel& m, const ConceptClassifier& clf,
                                          const BaseTrainConfig& cfg) {
    const Vocabulary& vocab = m.vocab;
    Rng seeds(cfg.seed, "base.gate");
    PromptEmbedding uncond = encode({vocab.u_id}, vocab);
    GuidanceSpec g{cfg.gate_guidance, cfg.gate_scale};
    std::vector<double> accs;
    auto run = [&](const std::vector<uint16_t>& prompt, bool style_head, int want) {
        PromptEmbedding pe = encode(prompt, vocab);
        int ok = 0;
        for (int i = 0; i < cfg.gate_n; i++) {
            SampleOpts o;
            o.seed = seeds.next_u64();
            o.record_eps = false;
            Trajectory tr = sample(m, pe, g.mode == GuidanceMode::none ? nullptr : &uncond, g, o);
            int got = style_head ? classify_style(clf, tr.latents[0])
                                 : classify_object(clf, tr.latents[0]);
            if (got == want) ok++;
        }
        accs.push_back(double(ok) / double(cfg.gate_n));
    };
    for (uint16_t tok : vocab.object_tokens) run({vocab.photo_id, tok}, false, vocab.concept_id[tok]);
    int n_obj = int(vocab.object_tokens.size());
    for (uint16_t tok : vocab.style_tokens)
        run({vocab.photo_id, vocab.object_tokens[0], tok}, true, vocab.concept_id[tok] - n_obj + 1);
    return accs;
}

DenoiserModel train_base(const std::vector<WorldSample>& corpus, const ModelDims& dims,
                         const NoiseSchedule& sched, const Vocabulary& vocab,
                         const BaseTrainConfig& cfg, const ConceptClassifier* gate_clf,
                         std::vector<BaseLossRow>* rows, BaseTrainStats* stats) {
    require(!corpus.empty(), Status::invalid_argument, "base training: empty corpus");
    require(cfg.batch > 0, Status::invalid_argument, "base training: batch must be positive");
    std::vector<double> last_accs;
    for (int attempt = 0; attempt <= cfg.max_retrain; attempt++) {
        uint64_t seed = cfg.seed + uint64_t(attempt) * 0x9e3779b97f4a7c15ULL;
        if (rows) rows->clear();
        DenoiserModel m = train_base_once(corpus, dims, sched, vocab, cfg, seed, rows, stats);
        if (stats) stats->attempts = attempt + 1;
        if (!gate_clf) return m;
        last_accs = base_gate_accs(m, *gate_clf, cfg);
        if (stats) stats->gate_accs = last_accs;
        double lo = *std::min_element(last_accs.begin(), last_accs.end());
        if (lo >= cfg.gate_acc) return m;
        std::fprintf(stderr, "[trace] base gate attempt %d: min concept accuracy %.3f < %.2f\n",
                     attempt + 1, lo, cfg.gate_acc);
    }
    std::string msg = "base model gate failed; per-concept accuracies:";
    for (double a : last_accs) {
        char buf[16];
        std::snprintf(buf, sizeof buf, " %.3f", a);
        msg += buf;
    }
    fail(Status::gate, msg);
}

// ---- erasure objective ----

static double divergence_sq(const Vec& a, const Vec& b, bool sum_mode) {
    require(a.size() == b.size(), Status::state, "divergence: size mismatch");
    double s = 0;
    for (size_t i = 0; i < a.size(); i++) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return sum_mode ? s : s / double(a.size());
}

// object-head flag and class index for a canonical concept token
static std::pair<bool, int> concept_head(const Vocabulary& v, uint16_t w) {
    int cid = v.concept_id[w];
    require(cid >= 0, Status::invalid_argument, "not a concept token: " + v.names[w]);
    int n_obj = int(v.object_tokens.size());
    if (cid < n_obj) return {false, cid};
    return {true, cid - n_obj + 1};
}

namespace {
struct SuffixRollout {
    int t_gate = 0;
    std::vector<Vec> xs;            // xs[t] for t in [0, t_gate]; xs[t_gate] is the prefix
    std::vector<EvalCache> caches;  // slot t is the eval at step t, t in [1, t_gate]
};
}  // namespace

// theta' rollout below the gate, pure f64, same update expression as the
// sampler so equal inputs give bit-equal latents
static void rollout_suffix(const DenoiserModel& m, const AdapterSet* adapters,
                           const PromptEmbedding& pe, int t_gate, const Vec& prefix,
                           bool want_caches, SuffixRollout* out) {
    const auto& sched = m.schedule;
    out->t_gate = t_gate;
    out->xs.assign(size_t(t_gate) + 1, {});
    out->caches.clear();
    if (want_caches) out->caches.resize(size_t(t_gate) + 1);
    out->xs[t_gate] = prefix;
    for (int t = t_gate; t >= 1; t--) {
        Vec eps = predict_eps(m, out->xs[t], pe, t, nullptr, adapters,
                              want_caches ? &out->caches[t] : nullptr);
        double ab_t = sched.alpha_bar[t], ab_p = sched.alpha_bar[t - 1];
        double ca = std::sqrt(ab_p / ab_t);
        double cb = std::sqrt(1.0 - ab_p) - std::sqrt(ab_p * (1.0 - ab_t) / ab_t);
        const Vec& x = out->xs[t];
        Vec nx(x.size());
        for (size_t i = 0; i < x.size(); i++) nx[i] = ca * x[i] + cb * eps[i];
        out->xs[t - 1] = std::move(nx);
    }
}

// adjoint sweep over the rollout; direct[t] is dL/dx_t (may be empty). Steps
// above t_hi cannot reach any adapter-active prediction, so the sweep stops
// there.
static void backprop_suffix(const DenoiserModel& m, const AdapterSet& adapters,
                            const SuffixRollout& ro, const std::vector<Vec>& direct, int t_hi,
                            AdapterSet* grads) {
    const auto& sched = m.schedule;
    const int n = m.dims.n_pixels;
    Vec lam(size_t(n), 0.0);
    if (!direct.empty() && !direct[0].empty()) lam = direct[0];
    for (int t = 1; t <= t_hi; t++) {
        double ab_t = sched.alpha_bar[t], ab_p = sched.alpha_bar[t - 1];
        double ca = std::sqrt(ab_p / ab_t);
        double cb = std::sqrt(1.0 - ab_p) - std::sqrt(ab_p * (1.0 - ab_t) / ab_t);
        Vec de(size_t(n), 0.0);
        for (int i = 0; i < n; i++) de[i] = cb * lam[i];
        Vec dx;
        predict_eps_backward(m, ro.caches[t], de, &dx, nullptr, &adapters, grads);
        Vec nlam(size_t(n), 0.0);
        for (int i = 0; i < n; i++) nlam[i] = ca * lam[i] + dx[i];
        if (t < int(direct.size()) && !direct[t].empty())
            for (int i = 0; i < n; i++) nlam[i] += direct[t][i];
        lam = std::move(nlam);
    }
}

TargetPool build_target_pool(const DenoiserModel& original, const DenoiserModel& edited,
                             uint16_t w_tok, int n, const ErasureLossConfig& loss, int t_late,
                             TargetMode mode, double neg_scale, bool include_synonyms,
                             uint64_t seed) {
    require(n > 0, Status::invalid_argument, "target pool: size must be positive");
    const Vocabulary& vocab = original.vocab;
    const int T = original.schedule.T;
    TargetPool pool;
    pool.concept_tok = vocab.canonical_of(w_tok);
    pool.t0 = loss.t0;
    pool.t_late = t_late;
    pool.t_gate = std::min(t_late, T);
    for (int c : target_checkpoints(loss.t0))
        if (c < pool.t_gate) pool.live_checkpoints.push_back(c);

    bool is_style = concept_head(vocab, pool.concept_tok).first;
    std::vector<uint16_t> mention{pool.concept_tok};
    if (include_synonyms)
        for (uint16_t sy : vocab.synonyms[pool.concept_tok]) mention.push_back(sy);
    std::vector<std::vector<uint16_t>> prompts;
    for (uint16_t mt : mention) {
        if (is_style) {
            for (uint16_t obj : vocab.object_tokens)
                prompts.push_back({vocab.photo_id, obj, mt});
        } else {
            prompts.push_back({vocab.photo_id, mt});
            for (uint16_t sty : vocab.style_tokens)
                prompts.push_back({vocab.photo_id, mt, sty});
        }
    }

    Rng rs(seed, "ft.targets/" + vocab.names[pool.concept_tok]);
    for (int i = 0; i < n; i++) {
        TargetEntry e;
        e.prompt = prompts[size_t(i) % prompts.size()];
        e.seed = rs.next_u64();
        e.target = build_target_trajectory(original, e.prompt, pool.concept_tok, loss.t0, mode,
                                           neg_scale, e.seed, false, false);
        SampleOpts o;
        o.seed = e.seed;
        o.snap = false;
        o.record_eps = false;
        Trajectory tp = sample_prompt(edited, e.prompt, o);
        e.prefix = tp.latents[pool.t_gate];
        for (int c : target_checkpoints(loss.t0))
            if (c >= pool.t_gate)
                e.const_concept += divergence_sq(tp.latents[c], e.target.latent(c), loss.mse_sum);
        pool.entries.push_back(std::move(e));
    }
    return pool;
}

CleanPool build_clean_pool(const DenoiserModel& original, const DenoiserModel& edited,
                           const std::vector<uint16_t>& erased, int n,
                           const ErasureLossConfig& loss, int t_late, int t_anchor,
                           uint64_t seed) {
    require(n > 0, Status::invalid_argument, "clean pool: size must be positive");
    const Vocabulary& vocab = original.vocab;
    const int T = original.schedule.T;
    CleanPool pool;
    pool.t_late = t_late;
    pool.t_gate = std::min(t_late, T);
    pool.t_anchor = t_anchor;

    auto is_erased = [&](uint16_t tok) {
        uint16_t canon = vocab.canonical_of(tok);
        for (uint16_t w : erased)
            if (vocab.canonical_of(w) == canon) return true;
        return false;
    };
    std::vector<std::vector<uint16_t>> prompts;
    for (uint16_t obj : vocab.object_tokens) {
        if (is_erased(obj)) continue;
        prompts.push_back({vocab.photo_id, obj});
        for (uint16_t sty : vocab.style_tokens)
            if (!is_erased(sty)) prompts.push_back({vocab.photo_id, obj, sty});
    }
    require(!prompts.empty(), Status::invalid_argument, "clean pool: every concept is erased");

    Rng rs(seed, "ft.clean");
    int ci = 0;
    for (int i = 0; i < n; i++) {
        CleanEntry e;
        // one sample in five is unconditional
        e.prompt = (i % 5 == 4) ? std::vector<uint16_t>{vocab.u_id}
                                : prompts[size_t(ci++) % prompts.size()];
        e.seed = rs.next_u64();
        PromptEmbedding pe = encode(e.prompt, vocab);
        SampleOpts ro;
        ro.seed = e.seed;
        ro.snap = false;
        ro.record_eps = true;
        e.ref = sample_prompt(original, e.prompt, ro);
        SampleOpts po;
        po.seed = e.seed;
        po.snap = false;
        po.record_eps = false;
        Trajectory tp = sample_prompt(edited, e.prompt, po);
        e.prefix = tp.latents[pool.t_gate];
        for (int t = pool.t_gate; t <= T; t++)
            e.const_preserve += divergence_sq(tp.latents[t], e.ref.latents[t], loss.mse_sum);
        for (int t = std::max(t_anchor + 1, t_late); t <= T; t++) {
            Vec eh = predict_eps(edited, e.ref.latents[t], pe, t);
            e.const_anchor += divergence_sq(eh, e.ref.eps_hats[t], loss.mse_sum);
        }
        pool.entries.push_back(std::move(e));
    }
    return pool;
}

// softmax probability of class cls; accumulates w * dp/dlogits into dlogits
// when given, so the two heads of a pair prompt can share one buffer
static double class_prob(const Vec& logits, size_t cls, double w, Vec* dlogits) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    double p = std::exp(logits[cls] - mx) / z;
    if (dlogits)
        for (size_t j = 0; j < logits.size(); j++) {
            double pj = std::exp(logits[j] - mx) / z;
            (*dlogits)[j] += w * p * ((j == cls ? 1.0 : 0.0) - pj);
        }
    return p;
}

LossBreakdown erasure_loss(const DenoiserModel& edited, const AdapterSet& adapters,
                           const TargetPool& targets, const CleanPool& cleans,
                           const ErasureBatch& batch, const ConceptClassifier& clf,
                           const ErasureLossConfig& cfg, AdapterSet* grads) {
    const Vocabulary& vocab = edited.vocab;
    const int n_pix = edited.dims.n_pixels;
    const double dscale = cfg.mse_sum ? 2.0 : 2.0 / n_pix;

    int t_gate = batch.target_idx.empty() ? cleans.t_gate : targets.t_gate;
    if (!batch.target_idx.empty() && !batch.clean_idx.empty())
        require(targets.t_gate == cleans.t_gate, Status::state, "pools disagree on the gate step");
    if (!batch.target_idx.empty())
        require(targets.t0 == cfg.t0, Status::state,
                "target pool was built for a different t0");
    if (!batch.clean_idx.empty())
        require(cleans.t_anchor == cfg.t_anchor, Status::state,
                "clean pool was built for a different anchor cutoff");
    int pool_t_late = batch.target_idx.empty() ? cleans.t_late : targets.t_late;
    int max_tlate = 0;
    for (const auto& a : adapters.adapters) {
        require(a.t_late == pool_t_late, Status::state,
                "adapter gate does not match the pools the prefixes were built for");
        max_tlate = std::max(max_tlate, a.t_late);
    }
    if (cfg.alpha > 0 && !batch.target_idx.empty())
        for (const auto& a : adapters.adapters)
            require(cfg.t0 >= a.t_late, Status::gate,
                    "t0 must be >= t_late while the concept term is on");
    const int t_hi = std::min(max_tlate - 1, t_gate);

    LossBreakdown bd;

    if (!batch.target_idx.empty()) {
        const double inv_p = 1.0 / double(batch.target_idx.size());
        auto [style_head, cls] = concept_head(vocab, targets.concept_tok);
        for (int idx : batch.target_idx) {
            require(idx >= 0 && idx < int(targets.entries.size()), Status::invalid_argument,
                    "missing target trajectory");
            const TargetEntry& e = targets.entries[size_t(idx)];
            PromptEmbedding pe = encode(e.prompt, vocab);
            SuffixRollout ro;
            rollout_suffix(edited, &adapters, pe, t_gate, e.prefix, grads != nullptr, &ro);

            double cterm = e.const_concept;
            for (int c : targets.live_checkpoints)
                cterm += divergence_sq(ro.xs[c], e.target.latent(c), cfg.mse_sum);
            bd.concept_term += cfg.alpha * cterm * inv_p;

            // concept presence measured as the classifier's softmax assignment;
            // bounded, and its pull fades once the concept is gone
            ClfCache cc;
            ClfOut out = classifier_forward(clf, ro.xs[0], grads ? &cc : nullptr);
            Vec dobj(out.obj_logits.size(), 0.0), dsty(out.sty_logits.size(), 0.0);
            double dw = class_prob(style_head ? out.sty_logits : out.obj_logits, size_t(cls),
                                   cfg.score_weight * inv_p,
                                   grads ? (style_head ? &dsty : &dobj) : nullptr);
            bd.score_term += cfg.score_weight * dw * inv_p;

            if (grads) {
                std::vector<Vec> direct(size_t(t_gate), Vec{});
                for (int c : targets.live_checkpoints) {
                    if (direct[c].empty()) direct[c].assign(size_t(n_pix), 0.0);
                    const Vec& tgt = e.target.latent(c);
                    for (int i = 0; i < n_pix; i++)
                        direct[c][i] += cfg.alpha * dscale * (ro.xs[c][i] - tgt[i]) * inv_p;
                }
                if (t_gate > 0) {
                    Vec dx0;
                    classifier_backward(clf, cc, dobj, dsty, nullptr, &dx0);
                    if (direct[0].empty()) direct[0] = std::move(dx0);
                    else
                        for (int i = 0; i < n_pix; i++) direct[0][i] += dx0[i];
                }
                backprop_suffix(edited, adapters, ro, direct, t_hi, grads);
            }
        }
    }

    if (!batch.clean_idx.empty()) {
        const double inv_q = 1.0 / double(batch.clean_idx.size());
        const int T = edited.schedule.T;
        for (int idx : batch.clean_idx) {
            require(idx >= 0 && idx < int(cleans.entries.size()), Status::invalid_argument,
                    "missing clean reference trajectory");
            const CleanEntry& e = cleans.entries[size_t(idx)];
            PromptEmbedding pe = encode(e.prompt, vocab);
            SuffixRollout ro;
            rollout_suffix(edited, &adapters, pe, t_gate, e.prefix, grads != nullptr, &ro);

            double pterm = e.const_preserve;
            for (int t = 0; t < t_gate; t++)
                pterm += divergence_sq(ro.xs[t], e.ref.latents[t], cfg.mse_sum);
            bd.preserve_term += cfg.lambda * pterm * inv_q;

            // anchor: predicted-noise match at the reference latents; steps the
            // gate closes are constants measured at pool build
            double aterm = e.const_anchor;
            for (int t = cfg.t_anchor + 1; t <= T; t++) {
                if (!adapters.any_active_at(t)) continue;
                EvalCache ac;
                Vec eh = predict_eps(edited, e.ref.latents[t], pe, t, nullptr, &adapters,
                                     grads ? &ac : nullptr);
                aterm += divergence_sq(eh, e.ref.eps_hats[t], cfg.mse_sum);
                if (grads) {
                    Vec de(size_t(n_pix), 0.0);
                    for (int i = 0; i < n_pix; i++)
                        de[i] = cfg.anchor_weight * dscale * (eh[i] - e.ref.eps_hats[t][i]) * inv_q;
                    predict_eps_backward(edited, ac, de, nullptr, nullptr, &adapters, grads);
                }
            }
            bd.anchor_term += cfg.anchor_weight * aterm * inv_q;

            if (grads) {
                std::vector<Vec> direct(size_t(t_gate), Vec{});
                for (int t = 0; t < t_gate; t++) {
                    direct[t].assign(size_t(n_pix), 0.0);
                    for (int i = 0; i < n_pix; i++)
                        direct[t][i] =
                            cfg.lambda * dscale * (ro.xs[t][i] - e.ref.latents[t][i]) * inv_q;
                }
                backprop_suffix(edited, adapters, ro, direct, t_hi, grads);
            }
        }
    }

    bd.total = bd.concept_term + bd.score_term + bd.preserve_term + bd.anchor_term;
    require(std::isfinite(bd.total), Status::numeric, "erasure loss is not finite");
    return bd;
}

double integration_pair_loss(const DenoiserModel& edited, const AdapterSet& adapters,
                             const std::vector<uint16_t>& prompt, uint16_t wi, uint16_t wj,
                             const std::vector<uint64_t>& seeds, const std::vector<Vec>& prefixes,
                             int t_gate, const ConceptClassifier& clf, AdapterSet* grads) {
    require(!seeds.empty() && seeds.size() == prefixes.size(), Status::invalid_argument,
            "integration loss: seeds and prefixes must align");
    const Vocabulary& vocab = edited.vocab;
    PromptEmbedding pe = encode(prompt, vocab);
    auto [si, ci] = concept_head(vocab, vocab.canonical_of(wi));
    auto [sj, cj] = concept_head(vocab, vocab.canonical_of(wj));
    int max_tlate = 0;
    for (const auto& a : adapters.adapters) max_tlate = std::max(max_tlate, a.t_late);
    const int t_hi = std::min(max_tlate - 1, t_gate);
    const double inv = 1.0 / double(seeds.size());

    double loss = 0;
    for (size_t k = 0; k < seeds.size(); k++) {
        SuffixRollout ro;
        rollout_suffix(edited, &adapters, pe, t_gate, prefixes[k], grads != nullptr, &ro);
        ClfCache cc;
        ClfOut out = classifier_forward(clf, ro.xs[0], grads ? &cc : nullptr);
        Vec dobj(out.obj_logits.size(), 0.0), dsty(out.sty_logits.size(), 0.0);
        double pi = class_prob(si ? out.sty_logits : out.obj_logits, size_t(ci), inv,
                               grads ? (si ? &dsty : &dobj) : nullptr);
        double pj = class_prob(sj ? out.sty_logits : out.obj_logits, size_t(cj), inv,
                               grads ? (sj ? &dsty : &dobj) : nullptr);
        loss += (pi + pj) * inv;
        if (grads) {
            Vec dx0;
            classifier_backward(clf, cc, dobj, dsty, nullptr, &dx0);
            std::vector<Vec> direct(size_t(t_gate), Vec{});
            if (t_gate > 0) direct[0] = std::move(dx0);
            backprop_suffix(edited, adapters, ro, direct, t_hi, grads);
        }
    }
    require(std::isfinite(loss), Status::numeric, "integration loss is not finite");
    return loss;
}

// prompt that names both concepts at once
static std::vector<uint16_t> pair_prompt(const Vocabulary& v, uint16_t wi, uint16_t wj,
                                         uint16_t carrier) {
    bool si = concept_head(v, wi).first, sj = concept_head(v, wj).first;
    if (!si && !sj) return {v.photo_id, wi, wj};
    if (!si && sj) return {v.photo_id, wi, wj};
    if (si && !sj) return {v.photo_id, wj, wi};
    return {v.photo_id, carrier, wi, wj};
}

AdapterSet train_multi(const DenoiserModel& original, const DenoiserModel& edited,
                       std::vector<uint16_t> concepts, const ConceptClassifier& clf,
                       const FinetuneConfig& cfg, std::vector<FtLossRow>* rows) {
    const Vocabulary& vocab = edited.vocab;
    const int T = edited.schedule.T;
    require(!concepts.empty(), Status::invalid_argument, "no concepts to erase");
    for (auto& w : concepts) w = vocab.canonical_of(w);
    std::sort(concepts.begin(), concepts.end());
    concepts.erase(std::unique(concepts.begin(), concepts.end()), concepts.end());
    require(cfg.steps >= 0 && cfg.batch_concept > 0 && cfg.batch_clean >= 0,
            Status::invalid_argument, "bad finetune sizes");
    const int t_gate = std::min(cfg.t_late, T);

    std::vector<TargetPool> tpools;
    for (uint16_t w : concepts)
        tpools.push_back(build_target_pool(original, edited, w, cfg.pool, cfg.loss, cfg.t_late,
                                           cfg.target_mode, cfg.neg_scale, cfg.syn_targets,
                                           cfg.seed));
    CleanPool cpool = build_clean_pool(original, edited, concepts, cfg.clean_pool, cfg.loss,
                                       cfg.t_late, cfg.loss.t_anchor, cfg.seed);

    AdapterSet set;
    size_t n_ad = cfg.shared_adapter ? 1 : concepts.size();
    for (size_t i = 0; i < n_ad; i++) {
        uint16_t tok = concepts[cfg.shared_adapter ? 0 : i];
        set.adapters.push_back(make_adapter(edited.dims.n_blocks, edited.dims.d_k,
                                            edited.dims.d_v, edited.dims.d_text, tok, cfg.rank,
                                            cfg.t_late, cfg.adapter_scale, cfg.init_sigma,
                                            cfg.seed ^ fnv1a64("adapter/" + vocab.names[tok])));
    }
    set.canonicalize();

    AdapterSet gbuf = make_like_zero(set);
    std::vector<std::vector<ParamBlockRef>> prefs(n_ad), grefs(n_ad);
    std::vector<Optimizer> opts(n_ad);
    for (size_t i = 0; i < n_ad; i++) {
        prefs[i] = param_blocks(set.adapters[i]);
        grefs[i] = param_blocks(gbuf.adapters[i]);
        opts[i].kind = cfg.opt;
        opts[i].lr = cfg.lr;
        opts[i].init(prefs[i]);
    }
    auto zero_gbuf = [&] {
        for (auto& blocks : grefs) zero_blocks(blocks);
    };

    // pair prompts for the integration term
    struct PairData {
        size_t i, j;
        std::vector<uint16_t> prompt;
        std::vector<uint64_t> seeds;
        std::vector<Vec> prefixes;
    };
    std::vector<PairData> pairs;
    const bool integrate = cfg.multi_every > 0 && concepts.size() >= 2 && cfg.multi_weight != 0;
    if (integrate) {
        uint16_t carrier = vocab.object_tokens[0];
        for (uint16_t obj : vocab.object_tokens)
            if (std::find(concepts.begin(), concepts.end(), obj) == concepts.end()) {
                carrier = obj;
                break;
            }
        Rng prng(cfg.seed, "ft.pairs");
        for (size_t i = 0; i < concepts.size(); i++)
            for (size_t j = i + 1; j < concepts.size(); j++) {
                PairData pd;
                pd.i = i;
                pd.j = j;
                pd.prompt = pair_prompt(vocab, concepts[i], concepts[j], carrier);
                for (int k = 0; k < cfg.pair_seeds; k++) {
                    uint64_t s = prng.next_u64();
                    SampleOpts o;
                    o.seed = s;
                    o.snap = false;
                    o.record_eps = false;
                    Trajectory tp = sample_prompt(edited, pd.prompt, o);
                    pd.seeds.push_back(s);
                    pd.prefixes.push_back(tp.latents[t_gate]);
                }
                pairs.push_back(std::move(pd));
            }
    }

    Rng order(cfg.seed, "ft.order");
    Rng pairpick(cfg.seed, "ft.pairpick");
    auto t_start = std::chrono::steady_clock::now();
    for (int step = 0; step < cfg.steps; step++) {
        size_t ci = size_t(step) % concepts.size();
        ErasureBatch batch;
        for (int k = 0; k < cfg.batch_concept; k++)
            batch.target_idx.push_back(order.uniform_int(int(tpools[ci].entries.size())));
        for (int k = 0; k < cfg.batch_clean; k++)
            batch.clean_idx.push_back(order.uniform_int(int(cpool.entries.size())));

        zero_gbuf();
        LossBreakdown bd = erasure_loss(edited, set, tpools[ci], cpool, batch, clf, cfg.loss, &gbuf);
        size_t ai = cfg.shared_adapter ? 0 : ci;
        opts[ai].step(prefs[ai], grefs[ai]);

        double integ = 0;
        if (integrate && (step + 1) % cfg.multi_every == 0) {
            // round-robin over pairs so every combination gets equal coverage
            PairData& pd = pairs[size_t(step / cfg.multi_every) % pairs.size()];
            std::vector<uint64_t> seeds;
            std::vector<Vec> prefixes;
            for (int k = 0; k < cfg.pair_batch; k++) {
                int pick = pairpick.uniform_int(int(pd.seeds.size()));
                seeds.push_back(pd.seeds[size_t(pick)]);
                prefixes.push_back(pd.prefixes[size_t(pick)]);
            }
            zero_gbuf();
            double L = integration_pair_loss(edited, set, pd.prompt, concepts[pd.i],
                                             concepts[pd.j], seeds, prefixes, t_gate, clf, &gbuf);
            integ = cfg.multi_weight * L;
            // every adapter shapes the joint trajectory, so every adapter takes
            // the update; bystanders learn to stop injecting content on prompts
            // that pair two other concepts
            for (size_t i = 0; i < n_ad; i++) {
                if (cfg.multi_weight != 1.0)
                    for (auto& blk : grefs[i])
                        for (auto& v : blk.v) v *= cfg.multi_weight;
                opts[i].step(prefs[i], grefs[i]);
            }
        }

        if (rows)
            rows->push_back({step, vocab.names[concepts[ci]], bd.total, bd.concept_term,
                             bd.score_term, bd.preserve_term, bd.anchor_term, integ,
                             wall_ms_since(t_start)});
    }
    return set;
}

ConceptAdapter finetune_concept(const DenoiserModel& original, const DenoiserModel& edited,
                                uint16_t w, const ConceptClassifier& clf,
                                const FinetuneConfig& cfg, std::vector<FtLossRow>* rows) {
    AdapterSet set = train_multi(original, edited, {w}, clf, cfg, rows);
    return std::move(set.adapters[0]);
}

GradCheckReport grad_check(const DenoiserModel& edited, AdapterSet& adapters,
                           const TargetPool& targets, const CleanPool& cleans,
                           const ErasureBatch& batch, const ConceptClassifier& clf,
                           const ErasureLossConfig& cfg, int coords_per_block, uint64_t seed,
                           double tol) {
    GradCheckReport rep;
    rep.tol = tol;
    AdapterSet gbuf = make_like_zero(adapters);
    erasure_loss(edited, adapters, targets, cleans, batch, clf, cfg, &gbuf);

    auto prefs = param_blocks(adapters);
    auto grefs = param_blocks(gbuf);
    Rng pick(seed, "gradcheck");
    for (size_t bi = 0; bi < prefs.size(); bi++) {
        GradCheckRow row;
        row.block = prefs[bi].name;
        int n = int(prefs[bi].v.size());
        for (int c = 0; c < coords_per_block; c++) {
            int k = pick.uniform_int(n);
            double orig = prefs[bi].v[size_t(k)];
            double h = 1e-4 * std::max(1.0, std::abs(orig));
            prefs[bi].v[size_t(k)] = orig + h;
            double lp = erasure_loss(edited, adapters, targets, cleans, batch, clf, cfg, nullptr)
                            .total;
            prefs[bi].v[size_t(k)] = orig - h;
            double lm = erasure_loss(edited, adapters, targets, cleans, batch, clf, cfg, nullptr)
                            .total;
            prefs[bi].v[size_t(k)] = orig;
            double fd = (lp - lm) / (2.0 * h);
            double an = grefs[bi].v[size_t(k)];
            double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            row.max_rel_err = std::max(row.max_rel_err, rel);
            row.n_checked++;
        }
        row.pass = row.max_rel_err <= tol;
        if (!row.pass) rep.pass = false;
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

}  // namespace trace
