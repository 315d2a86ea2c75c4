#include "trace/attention.hpp"

namespace trace {

AttnLayer make_attn_layer(int d_h, int d_k, int d_v, int d_text, int n_heads, Rng& rng) {
    require(n_heads >= 1 && d_k % n_heads == 0 && d_v % n_heads == 0, Status::invalid_argument,
            "d_k and d_v must be divisible by n_heads");
    AttnLayer l;
    l.W_Q = Mat::randn(d_k, d_h, 1.0 / std::sqrt(double(d_h)), rng);
    l.W_K = Mat::randn(d_k, d_text, 1.0 / std::sqrt(double(d_text)), rng);
    l.W_V = Mat::randn(d_v, d_text, 1.0 / std::sqrt(double(d_text)), rng);
    l.W_O = Mat::randn(d_h, d_v, 1.0 / std::sqrt(double(d_v)), rng);
    l.n_heads = n_heads;
    l.scale = 1.0 / std::sqrt(double(d_k / n_heads));
    return l;
}

Mat attend(const AttnLayer& layer, const Mat& H, const PromptEmbedding& pe,
           const LayerOverride* ovr, AttnCache* cache) {
    const int m = H.rows, L = pe.E.rows;
    const int dk = layer.d_k(), dv = layer.d_v(), nh = layer.n_heads;
    const int hk = dk / nh, hv = dv / nh;
    require(H.cols == layer.d_h(), Status::invalid_argument, "attend: bad H width");
    require(pe.E.cols == layer.d_text(), Status::invalid_argument, "attend: bad E width");
    require(L > 0, Status::invalid_argument, "attend: empty prompt");
    require(int(pe.token_ids.size()) == L, Status::invalid_argument,
            "attend: token ids misaligned with E");

    Mat Q(m, dk), K(L, dk), V(L, dv);
    for (int i = 0; i < m; i++) {
        Vec h(H.row(i), H.row(i) + H.cols);
        Vec q = matvec(layer.W_Q, h);
        std::copy(q.begin(), q.end(), Q.row(i));
    }
    std::vector<uint8_t> k_ovr(L, 0), v_ovr(L, 0);
    for (int j = 0; j < L; j++) {
        Vec e(pe.E.row(j), pe.E.row(j) + pe.E.cols);
        Vec k = matvec(layer.W_K, e);
        Vec v = matvec(layer.W_V, e);
        if (ovr) {
            auto it = ovr->rows.find(pe.token_ids[j]);
            if (it != ovr->rows.end()) {
                if (!it->second.k.empty()) {
                    require(int(it->second.k.size()) == dk, Status::invalid_argument,
                            "override key row has wrong width");
                    k = it->second.k;
                    k_ovr[j] = 1;
                }
                if (!it->second.v.empty()) {
                    require(int(it->second.v.size()) == dv, Status::invalid_argument,
                            "override value row has wrong width");
                    v = it->second.v;
                    v_ovr[j] = 1;
                }
            }
        }
        std::copy(k.begin(), k.end(), K.row(j));
        std::copy(v.begin(), v.end(), V.row(j));
    }

    Mat P(m, nh * L), O(m, dv);
    for (int i = 0; i < m; i++) {
        for (int h = 0; h < nh; h++) {
            // scores for this head, max-subtracted softmax
            Vec s(L);
            double smax = -1e300;
            for (int j = 0; j < L; j++) {
                double acc = 0.0;
                const double* qr = Q.row(i) + h * hk;
                const double* kr = K.row(j) + h * hk;
                for (int c = 0; c < hk; c++) acc += qr[c] * kr[c];
                s[j] = acc * layer.scale;
                smax = std::max(smax, s[j]);
            }
            double denom = 0.0;
            for (int j = 0; j < L; j++) {
                s[j] = std::exp(s[j] - smax);
                denom += s[j];
            }
            double* pr = P.row(i) + h * L;
            for (int j = 0; j < L; j++) pr[j] = s[j] / denom;
            double* orow = O.row(i) + h * hv;
            for (int j = 0; j < L; j++) {
                const double* vr = V.row(j) + h * hv;
                for (int c = 0; c < hv; c++) orow[c] += pr[j] * vr[c];
            }
        }
    }

    Mat Y(m, layer.d_h());
    for (int i = 0; i < m; i++) {
        Vec o(O.row(i), O.row(i) + dv);
        Vec y = matvec(layer.W_O, o);
        std::copy(y.begin(), y.end(), Y.row(i));
    }

    if (cache) {
        cache->H = H;
        cache->E = pe.E;
        cache->token_ids = pe.token_ids;
        cache->k_overridden = std::move(k_ovr);
        cache->v_overridden = std::move(v_ovr);
        cache->Q = std::move(Q);
        cache->K = std::move(K);
        cache->V = std::move(V);
        cache->P = std::move(P);
        cache->O = std::move(O);
    }
    return Y;
}

void attend_backward(const AttnLayer& layer, const AttnCache& cache, const Mat& dY, Mat* dH,
                     AttnGrads* grads) {
    const int m = cache.H.rows, L = cache.E.rows;
    const int dk = layer.d_k(), dv = layer.d_v(), nh = layer.n_heads;
    const int hk = dk / nh, hv = dv / nh;
    require(dY.rows == m && dY.cols == layer.d_h(), Status::invalid_argument,
            "attend_backward: bad dY shape");

    Mat dQ(m, dk), dK(L, dk), dV(L, dv), dO(m, dv);

    for (int i = 0; i < m; i++) {
        // y_i = W_O o_i:  dO_i = W_O^T dy_i, dW_O += dy_i o_i^T
        Vec dy(dY.row(i), dY.row(i) + dY.cols);
        Vec o(cache.O.row(i), cache.O.row(i) + dv);
        Vec doi = matvec_t(layer.W_O, dy);
        std::copy(doi.begin(), doi.end(), dO.row(i));
        if (grads) add_outer(grads->dW_O, 1.0, dy, o);
    }

    for (int i = 0; i < m; i++) {
        for (int h = 0; h < nh; h++) {
            const double* pr = cache.P.row(i) + h * L;
            const double* dor = dO.row(i) + h * hv;
            // o = sum_j p_j v_j: dp_j = do . v_j, dv_j += p_j do
            Vec dp(L);
            for (int j = 0; j < L; j++) {
                const double* vr = cache.V.row(j) + h * hv;
                double acc = 0.0;
                for (int c = 0; c < hv; c++) acc += dor[c] * vr[c];
                dp[j] = acc;
                double* dvr = dV.row(j) + h * hv;
                for (int c = 0; c < hv; c++) dvr[c] += pr[j] * dor[c];
            }
            // softmax: ds_j = p_j (dp_j - sum_k dp_k p_k), then ds *= scale
            double mix = 0.0;
            for (int j = 0; j < L; j++) mix += dp[j] * pr[j];
            for (int j = 0; j < L; j++) {
                double ds = pr[j] * (dp[j] - mix) * layer.scale;
                // s_j = q . k_j
                const double* qr = cache.Q.row(i) + h * hk;
                const double* kr = cache.K.row(j) + h * hk;
                double* dqr = dQ.row(i) + h * hk;
                double* dkr = dK.row(j) + h * hk;
                for (int c = 0; c < hk; c++) {
                    dqr[c] += ds * kr[c];
                    dkr[c] += ds * qr[c];
                }
            }
        }
    }

    if (dH) {
        *dH = Mat(m, layer.d_h());
        for (int i = 0; i < m; i++) {
            Vec dq(dQ.row(i), dQ.row(i) + dk);
            Vec dh = matvec_t(layer.W_Q, dq);
            std::copy(dh.begin(), dh.end(), dH->row(i));
        }
    }
    if (grads) {
        for (int i = 0; i < m; i++) {
            Vec dq(dQ.row(i), dQ.row(i) + dk);
            Vec h(cache.H.row(i), cache.H.row(i) + cache.H.cols);
            add_outer(grads->dW_Q, 1.0, dq, h);
        }
        for (int j = 0; j < L; j++) {
            Vec e(cache.E.row(j), cache.E.row(j) + cache.E.cols);
            if (!cache.k_overridden[j]) {
                Vec dk_j(dK.row(j), dK.row(j) + dk);
                add_outer(grads->dW_K, 1.0, dk_j, e);
            }
            if (!cache.v_overridden[j]) {
                Vec dv_j(dV.row(j), dV.row(j) + dv);
                add_outer(grads->dW_V, 1.0, dv_j, e);
            }
        }
    }
}

}  // namespace trace
