#include "trace/denoiser.hpp"

namespace trace {

NoiseSchedule NoiseSchedule::linear(int T, double beta_min, double beta_max) {
    require(T >= 1, Status::invalid_argument, "schedule T must be >= 1");
    require(beta_min > 0 && beta_max < 1 && beta_min <= beta_max, Status::invalid_argument,
            "schedule betas must satisfy 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(T + 1, 0.0);
    s.alpha.assign(T + 1, 1.0);
    s.alpha_bar.assign(T + 1, 1.0);
    for (int t = 1; t <= T; t++) {
        s.beta[t] = T == 1 ? beta_min
                           : beta_min + (beta_max - beta_min) * double(t - 1) / double(T - 1);
        s.alpha[t] = 1.0 - s.beta[t];
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    }
    return s;
}

Vec time_features(int t, int dim) {
    Vec f(dim, 0.0);
    int half = dim / 2;
    for (int k = 0; k < half; k++) {
        double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
        f[2 * k] = std::sin(double(t) * freq);
        f[2 * k + 1] = std::cos(double(t) * freq);
    }
    return f;
}

Vec forward_noise(const Vec& x0, int t, const Vec& eps, const NoiseSchedule& s) {
    require(t >= 0 && t <= s.T, Status::invalid_argument, "forward_noise: t out of range");
    if (t == 0) return x0;
    require(x0.size() == eps.size(), Status::invalid_argument, "forward_noise: size mismatch");
    double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
    Vec out(x0.size());
    for (size_t i = 0; i < x0.size(); i++) out[i] = a * x0[i] + b * eps[i];
    return out;
}

DenoiserModel make_denoiser(const ModelDims& dims, const NoiseSchedule& sched,
                            const Vocabulary& vocab, uint64_t seed) {
    require(dims.d_text == vocab.d_text, Status::invalid_argument,
            "model d_text does not match vocabulary");
    require(dims.time_dim % 2 == 0, Status::invalid_argument, "time_dim must be even");
    Rng rng(seed, "model.init");
    DenoiserModel m;
    m.dims = dims;
    m.W_in = Mat::randn(dims.d_h, dims.n_pixels, 1.0 / std::sqrt(double(dims.n_pixels)), rng);
    m.b_in.assign(dims.d_h, 0.0);
    m.W_t = Mat::randn(dims.d_h, dims.time_dim, 1.0 / std::sqrt(double(dims.time_dim)), rng);
    m.b_t.assign(dims.d_h, 0.0);
    for (int b = 0; b < dims.n_blocks; b++) {
        DenoiserBlock blk;
        blk.W1 = Mat::randn(dims.d_h, dims.d_h, 1.0 / std::sqrt(double(dims.d_h)), rng);
        blk.b1.assign(dims.d_h, 0.0);
        blk.attn = make_attn_layer(dims.d_h, dims.d_k, dims.d_v, dims.d_text, dims.n_heads, rng);
        blk.W2 = Mat::randn(dims.d_h, dims.d_h, 0.5 / std::sqrt(double(dims.d_h)), rng);
        blk.b2.assign(dims.d_h, 0.0);
        m.blocks.push_back(std::move(blk));
    }
    m.W_out = Mat(dims.n_pixels, dims.d_h);  // zero: untrained model predicts 0
    m.b_out.assign(dims.n_pixels, 0.0);
    m.W_skip = Mat(dims.n_pixels, dims.n_pixels);
    m.g_skip.assign(dims.time_dim, 0.0);
    m.schedule = sched;
    m.vocab = vocab;
    return m;
}

DenoiserModel make_like_zero(const DenoiserModel& m) {
    DenoiserModel z = m;
    for (auto& blk : param_blocks(z))
        for (auto& v : blk.v) v = 0.0;
    return z;
}

static std::span<double> span_of(Mat& m) { return {m.a.data(), m.a.size()}; }
static std::span<double> span_of(Vec& v) { return {v.data(), v.size()}; }

std::vector<ParamBlockRef> param_blocks(DenoiserModel& m) {
    std::vector<ParamBlockRef> out;
    auto mat = [&](const std::string& name, Mat& w) {
        out.push_back({name, w.rows, w.cols, span_of(w)});
    };
    auto vec = [&](const std::string& name, Vec& v) {
        out.push_back({name, 1, int(v.size()), span_of(v)});
    };
    mat("in.W", m.W_in);
    vec("in.b", m.b_in);
    mat("time.W", m.W_t);
    vec("time.b", m.b_t);
    for (size_t b = 0; b < m.blocks.size(); b++) {
        std::string p = "blk" + std::to_string(b) + ".";
        auto& blk = m.blocks[b];
        mat(p + "aff1.W", blk.W1);
        vec(p + "aff1.b", blk.b1);
        mat(p + "attn.wq", blk.attn.W_Q);
        mat(p + "attn.wk", blk.attn.W_K);
        mat(p + "attn.wv", blk.attn.W_V);
        mat(p + "attn.wo", blk.attn.W_O);
        mat(p + "aff2.W", blk.W2);
        vec(p + "aff2.b", blk.b2);
    }
    mat("out.W", m.W_out);
    vec("out.b", m.b_out);
    mat("skip.W", m.W_skip);
    vec("skip.g", m.g_skip);
    return out;
}

static inline double silu(double z) { return z / (1.0 + std::exp(-z)); }
static inline double silu_grad(double z) {
    double s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
}

Vec predict_eps(const DenoiserModel& m, const Vec& x, const PromptEmbedding& pe, int t,
                const LayerOverrides* overrides, const AdapterSet* adapters, EvalCache* cache) {
    const auto& d = m.dims;
    require(int(x.size()) == d.n_pixels, Status::invalid_argument, "predict_eps: bad x size");
    require(t >= 1 && t <= m.schedule.T, Status::invalid_argument, "predict_eps: t out of range");
    require(!overrides || int(overrides->size()) == d.n_blocks, Status::invalid_argument,
            "predict_eps: overrides must have one entry per block");

    Vec tau = time_features(t, d.time_dim);
    Vec h = matvec(m.W_in, x);
    axpy(1.0, m.b_in, h);
    {
        Vec ht = matvec(m.W_t, tau);
        axpy(1.0, ht, h);
        axpy(1.0, m.b_t, h);
    }
    if (cache) {
        cache->x = x;
        cache->t = t;
        cache->tau = tau;
        cache->h0 = h;
        cache->blocks.assign(d.n_blocks, {});
        cache->attn_eff.clear();
    }

    for (int b = 0; b < d.n_blocks; b++) {
        const auto& blk = m.blocks[b];
        AttnLayer eff = blk.attn;
        if (adapters) add_active_deltas(eff.W_K, eff.W_V, *adapters, b, t);

        Vec z1 = matvec(blk.W1, h);
        axpy(1.0, blk.b1, z1);
        Vec u(z1.size());
        for (size_t i = 0; i < z1.size(); i++) u[i] = silu(z1[i]);

        Mat Hrow(1, d.d_h);
        std::copy(u.begin(), u.end(), Hrow.row(0));
        const LayerOverride* ovr = overrides && !(*overrides)[b].empty() ? &(*overrides)[b] : nullptr;
        AttnCache* ac = cache ? &cache->blocks[b].attn : nullptr;
        Mat Y = attend(eff, Hrow, pe, ovr, ac);

        Vec v(u);
        for (int i = 0; i < d.d_h; i++) v[i] += Y.at(0, i);

        Vec dh = matvec(blk.W2, v);
        axpy(1.0, blk.b2, dh);

        if (cache) {
            auto& bc = cache->blocks[b];
            bc.h_in = h;
            bc.z1 = std::move(z1);
            bc.u = std::move(u);
            bc.v = v;
            cache->attn_eff.push_back(eff);
        }
        axpy(1.0, dh, h);
    }

    Vec eps = matvec(m.W_out, h);
    axpy(1.0, m.b_out, eps);
    {
        double gain = dot(m.g_skip, tau);
        Vec sx = matvec(m.W_skip, x);
        for (int i = 0; i < d.n_pixels; i++) eps[i] += gain * x[i] + sx[i];
    }
    if (cache) cache->h_final = h;

    for (double v : eps)
        require(std::isfinite(v), Status::numeric,
                "predict_eps: non-finite output at t=" + std::to_string(t));
    return eps;
}

void predict_eps_backward(const DenoiserModel& m, const EvalCache& cache, const Vec& d_eps,
                          Vec* dx, DenoiserModel* base_grads, const AdapterSet* adapters,
                          AdapterSet* adapter_grads) {
    const auto& d = m.dims;
    require(int(d_eps.size()) == d.n_pixels, Status::invalid_argument,
            "predict_eps_backward: bad adjoint size");
    require(int(cache.blocks.size()) == d.n_blocks, Status::state,
            "predict_eps_backward: cache does not match model");

    // eps = W_out h_final + b_out + (g_skip . tau) x + W_skip x
    Vec dh = matvec_t(m.W_out, d_eps);
    if (base_grads) {
        add_outer(base_grads->W_out, 1.0, d_eps, cache.h_final);
        axpy(1.0, d_eps, base_grads->b_out);
        add_outer(base_grads->W_skip, 1.0, d_eps, cache.x);
        axpy(dot(d_eps, cache.x), cache.tau, base_grads->g_skip);
    }

    for (int b = d.n_blocks - 1; b >= 0; b--) {
        const auto& blk = m.blocks[b];
        const auto& bc = cache.blocks[b];
        const AttnLayer& eff = cache.attn_eff[b];

        // h_out = h_in + W2 v + b2
        Vec dv = matvec_t(blk.W2, dh);
        if (base_grads) {
            add_outer(base_grads->blocks[b].W2, 1.0, dh, bc.v);
            axpy(1.0, dh, base_grads->blocks[b].b2);
        }
        // v = u + attend(u)
        Mat dY(1, d.d_h);
        std::copy(dv.begin(), dv.end(), dY.row(0));
        Mat dHrow;
        AttnGrads ag = make_attn_grads(eff);
        attend_backward(eff, bc.attn, dY, &dHrow, &ag);

        if (base_grads) {
            auto& g = base_grads->blocks[b].attn;
            for (size_t i = 0; i < ag.dW_Q.a.size(); i++) g.W_Q.a[i] += ag.dW_Q.a[i];
            for (size_t i = 0; i < ag.dW_K.a.size(); i++) g.W_K.a[i] += ag.dW_K.a[i];
            for (size_t i = 0; i < ag.dW_V.a.size(); i++) g.W_V.a[i] += ag.dW_V.a[i];
            for (size_t i = 0; i < ag.dW_O.a.size(); i++) g.W_O.a[i] += ag.dW_O.a[i];
        }
        if (adapter_grads) {
            require(adapters, Status::invalid_argument,
                    "adapter_grads requires the adapter set used in forward");
            require(adapter_grads->adapters.size() == adapters->adapters.size(), Status::state,
                    "adapter_grads does not mirror adapters");
            for (size_t ai = 0; ai < adapters->adapters.size(); ai++) {
                const auto& a = adapters->adapters[ai];
                if (!a.active_at(cache.t)) continue;
                auto& ga = adapter_grads->adapters[ai];
                // dW_eff flows into both factors: dB = s dW C^T, dC = s B^T dW
                auto accumulate = [&](const Mat& dW, const LoraTarget& tgt, LoraTarget& gt) {
                    for (int i = 0; i < dW.rows; i++)
                        for (int r = 0; r < tgt.B.cols; r++) {
                            double acc = 0.0;
                            for (int j = 0; j < dW.cols; j++)
                                acc += dW.at(i, j) * tgt.C.at(r, j);
                            gt.B.at(i, r) += a.scale * acc;
                        }
                    for (int r = 0; r < tgt.B.cols; r++)
                        for (int j = 0; j < dW.cols; j++) {
                            double acc = 0.0;
                            for (int i = 0; i < dW.rows; i++)
                                acc += tgt.B.at(i, r) * dW.at(i, j);
                            gt.C.at(r, j) += a.scale * acc;
                        }
                };
                accumulate(ag.dW_K, a.blocks[b].K, ga.blocks[b].K);
                accumulate(ag.dW_V, a.blocks[b].V, ga.blocks[b].V);
            }
        }

        // du = dv (residual) + dH from attention
        Vec du = dv;
        for (int i = 0; i < d.d_h; i++) du[i] += dHrow.at(0, i);
        // u = silu(z1)
        Vec dz1(du.size());
        for (size_t i = 0; i < du.size(); i++) dz1[i] = du[i] * silu_grad(bc.z1[i]);
        // z1 = W1 h_in + b1
        Vec dh_in = matvec_t(blk.W1, dz1);
        if (base_grads) {
            add_outer(base_grads->blocks[b].W1, 1.0, dz1, bc.h_in);
            axpy(1.0, dz1, base_grads->blocks[b].b1);
        }
        // residual: dh flows through unchanged plus the branch contribution
        axpy(1.0, dh_in, dh);
    }

    // h0 = W_in x + b_in + W_t tau + b_t
    if (base_grads) {
        add_outer(base_grads->W_in, 1.0, dh, cache.x);
        axpy(1.0, dh, base_grads->b_in);
        add_outer(base_grads->W_t, 1.0, dh, cache.tau);
        axpy(1.0, dh, base_grads->b_t);
    }
    if (dx) {
        *dx = matvec_t(m.W_in, dh);
        Vec sx = matvec_t(m.W_skip, d_eps);
        axpy(1.0, sx, *dx);
        axpy(dot(m.g_skip, cache.tau), d_eps, *dx);
    }
}

}  // namespace trace
