#include "trace/sampler.hpp"

#include <fstream>

namespace trace {

static void snap_vec(Vec& x) {
    for (auto& v : x) v = snap_half(v);
}

static void check_bounded(const Vec& x, double max_abs, int t) {
    for (double v : x)
        require(std::isfinite(v) && std::abs(v) <= max_abs, Status::numeric,
                "exploding latent at t=" + std::to_string(t));
}

Trajectory sample(const DenoiserModel& m, const PromptEmbedding& primary,
                  const PromptEmbedding* secondary, const GuidanceSpec& g,
                  const SampleOpts& opts) {
    const auto& sched = m.schedule;
    const int T = sched.T;
    int start = opts.from_t < 0 ? T : opts.from_t;
    require(start >= 0 && start <= T, Status::invalid_argument, "sample: from_t out of range");
    if (g.mode != GuidanceMode::none)
        require(secondary != nullptr, Status::invalid_argument,
                "sample: guidance needs a secondary prompt");

    Trajectory tr;
    tr.T = T;
    tr.seed = opts.seed;
    tr.latents.assign(T + 1, {});
    tr.eps_hats.assign(T + 1, {});
    tr.kept.assign(T + 1, 0);

    Rng noise(opts.seed, "sample.traj");
    Vec x;
    if (opts.x_start) {
        require(int(opts.x_start->size()) == m.dims.n_pixels, Status::invalid_argument,
                "sample: bad x_start size");
        x = *opts.x_start;
    } else {
        require(start == T, Status::invalid_argument, "sample: resuming requires x_start");
        x = vec_randn(m.dims.n_pixels, 1.0, noise);
        if (opts.snap) snap_vec(x);
    }
    tr.latents[start] = x;
    tr.kept[start] = 1;

    auto predict = [&](const Vec& xt, int t) -> Vec {
        switch (g.mode) {
            case GuidanceMode::none:
                return predict_eps(m, xt, primary, t, opts.overrides, opts.adapters);
            case GuidanceMode::cfg: {
                // exact collapse at the endpoints keeps the equalities bitwise
                if (g.scale == 0.0)
                    return predict_eps(m, xt, *secondary, t, opts.overrides, opts.adapters);
                if (g.scale == 1.0)
                    return predict_eps(m, xt, primary, t, opts.overrides, opts.adapters);
                Vec eu = predict_eps(m, xt, *secondary, t, opts.overrides, opts.adapters);
                Vec ec = predict_eps(m, xt, primary, t, opts.overrides, opts.adapters);
                Vec out(eu.size());
                for (size_t i = 0; i < out.size(); i++)
                    out[i] = eu[i] + g.scale * (ec[i] - eu[i]);
                return out;
            }
            case GuidanceMode::negative: {
                if (g.scale == 0.0)
                    return predict_eps(m, xt, primary, t, opts.overrides, opts.adapters);
                Vec eb = predict_eps(m, xt, primary, t, opts.overrides, opts.adapters);
                Vec en = predict_eps(m, xt, *secondary, t, opts.overrides, opts.adapters);
                Vec out(eb.size());
                for (size_t i = 0; i < out.size(); i++)
                    out[i] = eb[i] - g.scale * (en[i] - eb[i]);
                return out;
            }
        }
        fail(Status::internal, "unreachable guidance mode");
    };

    for (int t = start; t >= 1; t--) {
        Vec eps = predict(x, t);
        if (opts.snap) snap_vec(eps);
        double ab_t = sched.alpha_bar[t], ab_p = sched.alpha_bar[t - 1];
        Vec nx(x.size());
        if (opts.kind == SamplerKind::ddim) {
            double ca = std::sqrt(ab_p / ab_t);
            double cb = std::sqrt(1.0 - ab_p) - std::sqrt(ab_p * (1.0 - ab_t) / ab_t);
            for (size_t i = 0; i < x.size(); i++) nx[i] = ca * x[i] + cb * eps[i];
        } else {
            double a_t = sched.alpha[t];
            double cm = sched.beta[t] / std::sqrt(1.0 - ab_t);
            double inv = 1.0 / std::sqrt(a_t);
            double sigma = t > 1 ? std::sqrt(sched.beta[t] * (1.0 - ab_p) / (1.0 - ab_t)) : 0.0;
            for (size_t i = 0; i < x.size(); i++) {
                double z = t > 1 ? noise.gauss() : 0.0;
                nx[i] = inv * (x[i] - cm * eps[i]) + sigma * z;
            }
        }
        if (opts.snap) snap_vec(nx);
        check_bounded(nx, opts.max_abs, t - 1);
        x = std::move(nx);
        tr.latents[t - 1] = x;
        tr.kept[t - 1] = 1;
        if (opts.record_eps) tr.eps_hats[t] = std::move(eps);
    }
    return tr;
}

Trajectory sample_prompt(const DenoiserModel& m, const std::vector<uint16_t>& prompt,
                         const SampleOpts& opts) {
    PromptEmbedding pe = encode(prompt, m.vocab);
    return sample(m, pe, nullptr, {}, opts);
}

std::vector<int> target_checkpoints(int t0) {
    std::vector<int> cps{t0, t0 - t0 / 2, 0};
    std::vector<int> out;
    for (int c : cps)
        if (out.empty() || out.back() != c) out.push_back(c);
    return out;
}

Trajectory build_target_trajectory(const DenoiserModel& m, const std::vector<uint16_t>& prompt,
                                   uint16_t w_tok, int t0, TargetMode mode, double guide_scale,
                                   uint64_t seed, bool retain_full, bool snap) {
    const int T = m.schedule.T;
    require(t0 >= 0 && t0 <= T, Status::invalid_argument, "target: t0 out of range");
    require(m.vocab.mentions(prompt, m.vocab.canonical_of(w_tok)) || t0 == 0,
            Status::invalid_argument, "target: prompt does not mention the concept");

    PromptEmbedding pe_p = encode(prompt, m.vocab);
    std::vector<uint16_t> sub = substitute(prompt, w_tok, m.vocab.u_id, m.vocab);
    PromptEmbedding pe_sub = encode(sub, m.vocab);

    Trajectory tr;
    tr.T = T;
    tr.seed = seed;
    tr.switch_index = t0;
    tr.latents.assign(T + 1, {});
    tr.eps_hats.assign(T + 1, {});
    tr.kept.assign(T + 1, 0);

    Rng noise(seed, "sample.traj");
    Vec x = vec_randn(m.dims.n_pixels, 1.0, noise);
    if (snap) snap_vec(x);
    tr.latents[T] = x;
    tr.kept[T] = 1;

    for (int t = T; t >= 1; t--) {
        Vec eps;
        if (t > t0) {
            eps = predict_eps(m, x, pe_p, t);
        } else if (mode == TargetMode::substitute) {
            eps = predict_eps(m, x, pe_sub, t);
        } else {
            // steer away from the concept: base is the substituted prompt
            Vec eb = predict_eps(m, x, pe_sub, t);
            Vec en = predict_eps(m, x, pe_p, t);
            eps.resize(eb.size());
            for (size_t i = 0; i < eps.size(); i++)
                eps[i] = eb[i] - guide_scale * (en[i] - eb[i]);
        }
        if (snap) snap_vec(eps);
        double ab_t = m.schedule.alpha_bar[t], ab_p = m.schedule.alpha_bar[t - 1];
        double ca = std::sqrt(ab_p / ab_t);
        double cb = std::sqrt(1.0 - ab_p) - std::sqrt(ab_p * (1.0 - ab_t) / ab_t);
        Vec nx(x.size());
        for (size_t i = 0; i < x.size(); i++) nx[i] = ca * x[i] + cb * eps[i];
        if (snap) snap_vec(nx);
        check_bounded(nx, 1e3, t - 1);
        x = std::move(nx);
        tr.latents[t - 1] = x;
        tr.kept[t - 1] = 1;
        tr.eps_hats[t] = std::move(eps);
    }

    if (!retain_full) {
        std::vector<uint8_t> keep(T + 1, 0);
        keep[T] = 1;  // initial noise kept for seed checks
        for (int c : target_checkpoints(t0)) keep[c] = 1;
        for (int t = t0 + 1; t <= T; t++) keep[t] = 1;  // prefix kept for reuse
        for (int t = 0; t <= T; t++)
            if (!keep[t]) {
                tr.latents[t] = {};
                tr.kept[t] = 0;
            }
    }
    return tr;
}

void write_pgm(const std::string& path, const Vec& x0) {
    require(int(x0.size()) == kNPix, Status::invalid_argument, "write_pgm: bad size");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), Status::io, "cannot open for write: " + path);
    f << "P5\n" << kImgW << " " << kImgH << "\n255\n";
    for (double v : x0) {
        double c = std::min(1.0, std::max(-1.0, v));
        unsigned char byte = (unsigned char)(std::lround((c + 1.0) * 127.5));
        f.write(reinterpret_cast<const char*>(&byte), 1);
    }
    require(f.good(), Status::io, "write failed: " + path);
}

}  // namespace trace
