#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "splab/model.hpp"

namespace splab {

// ---------------------------------------------------------------------------
// gradient buffers
// ---------------------------------------------------------------------------

struct WeightGrads {
    Weights g;

    explicit WeightGrads(const Model& m) {
        Model shaped(m.cfg);  // reuse the allocation logic
        g = shaped.w;
        zero();
    }

    void zero() {
        g.for_each_tensor([](std::vector<float>& t) { std::fill(t.begin(), t.end(), 0.0f); });
    }
};

// ---------------------------------------------------------------------------
// cross-entropy over selected positions
// ---------------------------------------------------------------------------

struct TargetAt {
    int position;
    TokenId token;
};

/// Mean cross-entropy over the targets; fills dlogits (same shape as logits)
/// with d(loss)/d(logits). Probabilities and the loss accumulate in f64.
inline double cross_entropy(const std::vector<float>& logits, int rows, int vocab,
                            const std::vector<TargetAt>& targets, std::vector<float>& dlogits) {
    if (targets.empty()) throw std::invalid_argument("cross_entropy: no targets");
    dlogits.assign(logits.size(), 0.0f);
    const double inv_n = 1.0 / static_cast<double>(targets.size());
    double loss = 0.0;
    std::vector<double> probs(vocab);
    for (const auto& tgt : targets) {
        if (tgt.position < 0 || tgt.position >= rows)
            throw std::invalid_argument("cross_entropy: target position out of range");
        if (tgt.token < 0 || tgt.token >= vocab)
            throw std::invalid_argument("cross_entropy: target token out of range");
        const float* row = logits.data() + static_cast<std::size_t>(tgt.position) * vocab;
        double mx = row[0];
        for (int v = 1; v < vocab; ++v) mx = std::max(mx, static_cast<double>(row[v]));
        double denom = 0.0;
        for (int v = 0; v < vocab; ++v) {
            probs[v] = std::exp(row[v] - mx);
            denom += probs[v];
        }
        loss += -(std::log(probs[tgt.token]) - std::log(denom)) * inv_n;
        float* drow = dlogits.data() + static_cast<std::size_t>(tgt.position) * vocab;
        const double inv_denom = 1.0 / denom;
        for (int v = 0; v < vocab; ++v)
            drow[v] += static_cast<float>(probs[v] * inv_denom * inv_n);
        drow[tgt.token] -= static_cast<float>(inv_n);
    }
    return loss;
}

// ---------------------------------------------------------------------------
// backward pass
// ---------------------------------------------------------------------------

namespace detail {

/// LayerNorm backward for one row. dy is the gradient at the affine output;
/// dx accumulates into the input gradient. Means computed in f64.
inline void layer_norm_backward_row(const float* dy, const float* normalized, float rstd,
                                    const float* gain, int n, float* dx, float* dgain,
                                    float* dbias) {
    double sum_dn = 0.0, sum_dn_norm = 0.0;
    for (int i = 0; i < n; ++i) {
        const double dn = static_cast<double>(dy[i]) * gain[i];
        sum_dn += dn;
        sum_dn_norm += dn * normalized[i];
    }
    const double mean_dn = sum_dn / n;
    const double mean_dn_norm = sum_dn_norm / n;
    for (int i = 0; i < n; ++i) {
        const double dn = static_cast<double>(dy[i]) * gain[i];
        dx[i] += static_cast<float>(rstd * (dn - mean_dn - normalized[i] * mean_dn_norm));
        if (dgain) dgain[i] += dy[i] * normalized[i];
        if (dbias) dbias[i] += dy[i];
    }
}

/// Backward of y[t][o] = sum_k x[t][k] w[o][k]:
/// dx[t][k] += sum_o dy[t][o] w[o][k]; dw[o][k] += sum_t dy[t][o] x[t][k].
inline void matmul_backward(const float* x, const float* w, const float* dy, int rows, int in,
                            int out, float* dx, float* dw) {
    for (int t = 0; t < rows; ++t) {
        const float* xt = x + static_cast<std::size_t>(t) * in;
        const float* dyt = dy + static_cast<std::size_t>(t) * out;
        float* dxt = dx ? dx + static_cast<std::size_t>(t) * in : nullptr;
        for (int o = 0; o < out; ++o) {
            const float g = dyt[o];
            if (g == 0.0f) continue;
            const float* wo = w + static_cast<std::size_t>(o) * in;
            if (dxt) axpy(dxt, g, wo, in);
            if (dw) axpy(dw + static_cast<std::size_t>(o) * in, g, xt, in);
        }
    }
}

}  // namespace detail

/// Backprop through a taped forward pass. dlogits is d(loss)/d(logits).
/// Fills d(loss)/d(input rows) into `dinput` (shape rows x d) when non-null
/// and accumulates weight gradients into `wg` when non-null (token-embedding
/// rows require input.tokens to carry real ids).
inline void backward(const Model& m, const EmbeddingSequence& input, const ForwardTape& tape,
                     const std::vector<float>& dlogits, std::vector<float>* dinput,
                     WeightGrads* wg) {
    const int n = tape.rows;
    const int d = m.cfg.hidden_dim;
    const int L = m.cfg.num_layers;
    const int heads = m.cfg.num_heads;
    const int hd = m.cfg.head_dim();
    const int ffn = m.cfg.ffn_dim;
    const int V = m.cfg.vocab_size;
    const std::size_t nd = static_cast<std::size_t>(n) * d;

    if (static_cast<int>(dlogits.size()) != n * V)
        throw std::invalid_argument("backward: dlogits shape mismatch");

    // head and final norm
    std::vector<float> lnf_out(nd);
    for (int t = 0; t < n; ++t)
        for (int i = 0; i < d; ++i) {
            const std::size_t idx = static_cast<std::size_t>(t) * d + i;
            lnf_out[idx] = tape.normf[idx] * m.w.lnf_gain[i] + m.w.lnf_bias[i];
        }
    std::vector<float> d_lnf_out(nd, 0.0f);
    detail::matmul_backward(lnf_out.data(), m.w.head_w.data(), dlogits.data(), n, d, V,
                            d_lnf_out.data(), wg ? wg->g.head_w.data() : nullptr);

    std::vector<float> dx(nd, 0.0f);
    for (int t = 0; t < n; ++t)
        detail::layer_norm_backward_row(d_lnf_out.data() + static_cast<std::size_t>(t) * d,
                                        tape.normf.data() + static_cast<std::size_t>(t) * d,
                                        tape.rstdf[t], m.w.lnf_gain.data(), d,
                                        dx.data() + static_cast<std::size_t>(t) * d,
                                        wg ? wg->g.lnf_gain.data() : nullptr,
                                        wg ? wg->g.lnf_bias.data() : nullptr);

    // blocks, last to first; dx holds d(loss)/d(stream[l+1]) entering each step
    std::vector<float> ln_out(nd), d_ln_out(nd), d_mid(nd), d_h(static_cast<std::size_t>(n) * ffn);
    std::vector<float> d_att(nd), dq(nd), dk(nd), dv(nd);
    std::vector<float> dscores;
    for (int l = L - 1; l >= 0; --l) {
        const LayerWeights& lw = m.w.layers[l];
        const auto& lt = tape.layers[l];
        LayerWeights* gw = wg ? &wg->g.layers[l] : nullptr;

        // FFN: x_next = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        for (int t = 0; t < n; ++t)
            for (int i = 0; i < d; ++i) {
                const std::size_t idx = static_cast<std::size_t>(t) * d + i;
                ln_out[idx] = lt.norm2[idx] * lw.ln2_gain[i] + lw.ln2_bias[i];
            }
        std::fill(d_h.begin(), d_h.end(), 0.0f);
        detail::matmul_backward(lt.h_act.data(), lw.fc2_w.data(), dx.data(), n, ffn, d,
                                d_h.data(), gw ? gw->fc2_w.data() : nullptr);
        if (gw)
            for (int t = 0; t < n; ++t)
                detail::axpy(gw->fc2_b.data(), 1.0f, dx.data() + static_cast<std::size_t>(t) * d,
                             d);
        for (std::size_t i = 0; i < d_h.size(); ++i)
            d_h[i] *= detail::gelu_grad(lt.h_pre[i]);
        std::fill(d_ln_out.begin(), d_ln_out.end(), 0.0f);
        detail::matmul_backward(ln_out.data(), lw.fc1_w.data(), d_h.data(), n, d, ffn,
                                d_ln_out.data(), gw ? gw->fc1_w.data() : nullptr);
        if (gw)
            for (int t = 0; t < n; ++t)
                detail::axpy(gw->fc1_b.data(), 1.0f,
                             d_h.data() + static_cast<std::size_t>(t) * ffn, ffn);

        // residual: d_mid starts as dx (identity path) plus the LN path
        std::copy(dx.begin(), dx.end(), d_mid.begin());
        for (int t = 0; t < n; ++t)
            detail::layer_norm_backward_row(d_ln_out.data() + static_cast<std::size_t>(t) * d,
                                            lt.norm2.data() + static_cast<std::size_t>(t) * d,
                                            lt.rstd2[t], lw.ln2_gain.data(), d,
                                            d_mid.data() + static_cast<std::size_t>(t) * d,
                                            gw ? gw->ln2_gain.data() : nullptr,
                                            gw ? gw->ln2_bias.data() : nullptr);

        // attention: x_mid = x + wo(att_concat)
        std::fill(d_att.begin(), d_att.end(), 0.0f);
        detail::matmul_backward(lt.att_concat.data(), lw.wo.data(), d_mid.data(), n, d, d,
                                d_att.data(), gw ? gw->wo.data() : nullptr);

        std::fill(dq.begin(), dq.end(), 0.0f);
        std::fill(dk.begin(), dk.end(), 0.0f);
        std::fill(dv.begin(), dv.end(), 0.0f);
        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
        dscores.assign(n, 0.0f);
        for (int h = 0; h < heads; ++h) {
            const int off = h * hd;
            const float* probs_h = lt.probs.data() + static_cast<std::size_t>(h) * n * n;
            for (int t = 0; t < n; ++t) {
                const float* p_row = probs_h + static_cast<std::size_t>(t) * n;
                const float* da = d_att.data() + static_cast<std::size_t>(t) * d + off;
                // dP[u] = da . v[u]; dv[u] += P[u] * da
                double dot_p_dp = 0.0;
                for (int u = 0; u <= t; ++u) {
                    const float* vu = lt.v.data() + static_cast<std::size_t>(u) * d + off;
                    const float dp = detail::dot(da, vu, hd);
                    dscores[u] = dp;
                    detail::axpy(dv.data() + static_cast<std::size_t>(u) * d + off, p_row[u], da,
                                 hd);
                    dot_p_dp += static_cast<double>(p_row[u]) * dp;
                }
                // softmax backward, then scores -> q,k
                float* dqt = dq.data() + static_cast<std::size_t>(t) * d + off;
                const float* qt = lt.q.data() + static_cast<std::size_t>(t) * d + off;
                for (int u = 0; u <= t; ++u) {
                    const float ds =
                        p_row[u] * static_cast<float>(dscores[u] - dot_p_dp) * scale;
                    detail::axpy(dqt, ds, lt.k.data() + static_cast<std::size_t>(u) * d + off, hd);
                    detail::axpy(dk.data() + static_cast<std::size_t>(u) * d + off, ds, qt, hd);
                }
            }
        }

        for (int t = 0; t < n; ++t)
            for (int i = 0; i < d; ++i) {
                const std::size_t idx = static_cast<std::size_t>(t) * d + i;
                ln_out[idx] = lt.norm1[idx] * lw.ln1_gain[i] + lw.ln1_bias[i];
            }
        std::fill(d_ln_out.begin(), d_ln_out.end(), 0.0f);
        detail::matmul_backward(ln_out.data(), lw.wq.data(), dq.data(), n, d, d, d_ln_out.data(),
                                gw ? gw->wq.data() : nullptr);
        detail::matmul_backward(ln_out.data(), lw.wk.data(), dk.data(), n, d, d, d_ln_out.data(),
                                gw ? gw->wk.data() : nullptr);
        detail::matmul_backward(ln_out.data(), lw.wv.data(), dv.data(), n, d, d, d_ln_out.data(),
                                gw ? gw->wv.data() : nullptr);

        // residual: d(stream[l]) = d_mid (identity) plus the LN1 path
        std::copy(d_mid.begin(), d_mid.end(), dx.begin());
        for (int t = 0; t < n; ++t)
            detail::layer_norm_backward_row(d_ln_out.data() + static_cast<std::size_t>(t) * d,
                                            lt.norm1.data() + static_cast<std::size_t>(t) * d,
                                            lt.rstd1[t], lw.ln1_gain.data(), d,
                                            dx.data() + static_cast<std::size_t>(t) * d,
                                            gw ? gw->ln1_gain.data() : nullptr,
                                            gw ? gw->ln1_bias.data() : nullptr);
    }

    // dx now holds d(loss)/d(stream[0]); the embedding sum routes it to the
    // input rows unchanged and to the positional table.
    if (dinput) {
        dinput->assign(nd, 0.0f);
        std::copy(dx.begin(), dx.end(), dinput->begin());
    }
    if (wg) {
        for (int t = 0; t < n; ++t) {
            const float* g = dx.data() + static_cast<std::size_t>(t) * d;
            detail::axpy(wg->g.pos_emb.data() + static_cast<std::size_t>(t) * d, 1.0f, g, d);
            if (input.origin[t] == PositionOrigin::TokenEmbedded ||
                input.origin[t] == PositionOrigin::Placeholder) {
                const TokenId id = input.tokens[t];
                if (id < 0) throw std::runtime_error("backward: token row without id");
                detail::axpy(wg->g.token_emb.data() + static_cast<std::size_t>(id) * d, 1.0f, g,
                             d);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// gradients of an arbitrary scalar loss w.r.t. selected input rows
// ---------------------------------------------------------------------------

/// Loss callback: reads logits (rows x vocab), writes d(loss)/d(logits) into
/// dlogits (pre-sized, zero-filled), returns the scalar loss.
using LossFn =
    std::function<double(const std::vector<float>& logits, int rows, int vocab,
                         std::vector<float>& dlogits)>;

/// Gradient of `loss` with respect to the input rows listed in
/// `trainable_positions` (which must all carry the continuous-prompt tag).
/// Returns |positions| x d values in listing order. Model weights are
/// untouched; rows outside the list receive no update from callers.
inline std::vector<float> grad_wrt_input(const Model& m, const EmbeddingSequence& input,
                                         const LossFn& loss,
                                         const std::vector<int>& trainable_positions,
                                         double* loss_out = nullptr) {
    for (int p : trainable_positions) {
        if (p < 0 || p >= input.length())
            throw std::invalid_argument("grad_wrt_input: position out of range");
        if (input.origin[p] != PositionOrigin::ContinuousPrompt)
            throw std::invalid_argument("grad_wrt_input: position " + std::to_string(p) +
                                        " is not a continuous-prompt row");
    }
    ForwardTape tape;
    forward_full(m, input, tape);
    std::vector<float> dlogits(tape.logits.size(), 0.0f);
    const double value = loss(tape.logits, tape.rows, m.cfg.vocab_size, dlogits);
    if (!std::isfinite(value)) {
        for (int t = 0; t < tape.rows; ++t) {
            const float* row = tape.logits.data() + static_cast<std::size_t>(t) * m.cfg.vocab_size;
            for (int v = 0; v < m.cfg.vocab_size; ++v)
                if (!std::isfinite(row[v]))
                    throw std::runtime_error("grad_wrt_input: non-finite activation at position " +
                                             std::to_string(t));
        }
        throw std::runtime_error("grad_wrt_input: non-finite loss");
    }
    if (loss_out) *loss_out = value;
    std::vector<float> dinput;
    backward(m, input, tape, dlogits, &dinput, nullptr);
    std::vector<float> out;
    out.reserve(trainable_positions.size() * m.cfg.hidden_dim);
    for (int p : trainable_positions) {
        const float* g = dinput.data() + static_cast<std::size_t>(p) * m.cfg.hidden_dim;
        out.insert(out.end(), g, g + m.cfg.hidden_dim);
    }
    return out;
}

}  // namespace splab
