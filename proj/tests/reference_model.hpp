// Independent f64 reference forward pass shared by the gradient tests and
// the acceptance suite. Same architecture as the production model, separate
// plain-loop code, double precision throughout.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "splab/grad.hpp"
#include "splab/model.hpp"
#include "splab/rng.hpp"

namespace testref {

using Rows = std::vector<std::vector<double>>;

inline double ref_loss(const splab::Model& model, const Rows& rows,
                       const std::vector<splab::TargetAt>& targets) {
    using splab::LayerWeights;
    const int n = static_cast<int>(rows.size());
    const int d = model.cfg.hidden_dim;
    const int L = model.cfg.num_layers;
    const int heads = model.cfg.num_heads;
    const int hd = model.cfg.head_dim();
    const int ffn = model.cfg.ffn_dim;
    const int V = model.cfg.vocab_size;

    auto layer_norm = [d](const Rows& x, const std::vector<float>& gain,
                          const std::vector<float>& bias) {
        Rows out(x.size(), std::vector<double>(d));
        for (std::size_t t = 0; t < x.size(); ++t) {
            double mean = 0.0;
            for (int i = 0; i < d; ++i) mean += x[t][i];
            mean /= d;
            double var = 0.0;
            for (int i = 0; i < d; ++i) var += (x[t][i] - mean) * (x[t][i] - mean);
            var /= d;
            const double rstd = 1.0 / std::sqrt(var + 1e-5);
            for (int i = 0; i < d; ++i)
                out[t][i] = (x[t][i] - mean) * rstd * gain[i] + bias[i];
        }
        return out;
    };
    auto project = [](const Rows& x, const std::vector<float>& w, int in, int out_dim,
                      const std::vector<float>* b) {
        Rows y(x.size(), std::vector<double>(out_dim));
        for (std::size_t t = 0; t < x.size(); ++t)
            for (int o = 0; o < out_dim; ++o) {
                double s = b ? (*b)[o] : 0.0;
                for (int k = 0; k < in; ++k)
                    s += x[t][k] * static_cast<double>(w[static_cast<std::size_t>(o) * in + k]);
                y[t][o] = s;
            }
        return y;
    };

    Rows x(n, std::vector<double>(d));
    for (int t = 0; t < n; ++t)
        for (int i = 0; i < d; ++i)
            x[t][i] = rows[t][i] +
                      static_cast<double>(model.w.pos_emb[static_cast<std::size_t>(t) * d + i]);

    for (int l = 0; l < L; ++l) {
        const LayerWeights& lw = model.w.layers[l];
        const Rows ln1 = layer_norm(x, lw.ln1_gain, lw.ln1_bias);
        const Rows q = project(ln1, lw.wq, d, d, nullptr);
        const Rows k = project(ln1, lw.wk, d, d, nullptr);
        const Rows v = project(ln1, lw.wv, d, d, nullptr);

        Rows att(n, std::vector<double>(d, 0.0));
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        for (int h = 0; h < heads; ++h) {
            const int off = h * hd;
            for (int t = 0; t < n; ++t) {
                std::vector<double> scores(t + 1);
                double mx = -1e300;
                for (int u = 0; u <= t; ++u) {
                    double s = 0.0;
                    for (int j = 0; j < hd; ++j) s += q[t][off + j] * k[u][off + j];
                    scores[u] = s * scale;
                    mx = std::max(mx, scores[u]);
                }
                double z = 0.0;
                for (int u = 0; u <= t; ++u) {
                    scores[u] = std::exp(scores[u] - mx);
                    z += scores[u];
                }
                for (int u = 0; u <= t; ++u)
                    for (int j = 0; j < hd; ++j)
                        att[t][off + j] += scores[u] / z * v[u][off + j];
            }
        }
        const Rows attn_out = project(att, lw.wo, d, d, nullptr);
        for (int t = 0; t < n; ++t)
            for (int i = 0; i < d; ++i) x[t][i] += attn_out[t][i];

        const Rows ln2 = layer_norm(x, lw.ln2_gain, lw.ln2_bias);
        Rows h_act = project(ln2, lw.fc1_w, d, ffn, &lw.fc1_b);
        for (int t = 0; t < n; ++t)
            for (int o = 0; o < ffn; ++o) {
                const double u = h_act[t][o];
                h_act[t][o] = 0.5 * u * (1.0 + std::erf(u * 0.7071067811865475244));
            }
        const Rows ffn_out = project(h_act, lw.fc2_w, ffn, d, &lw.fc2_b);
        for (int t = 0; t < n; ++t)
            for (int i = 0; i < d; ++i) x[t][i] += ffn_out[t][i];
    }

    const Rows lnf = layer_norm(x, model.w.lnf_gain, model.w.lnf_bias);
    const Rows logits = project(lnf, model.w.head_w, d, V, nullptr);

    double loss = 0.0;
    for (const auto& tgt : targets) {
        const auto& row = logits[tgt.position];
        double mx = row[0];
        for (int u = 1; u < V; ++u) mx = std::max(mx, row[u]);
        double z = 0.0;
        for (int u = 0; u < V; ++u) z += std::exp(row[u] - mx);
        loss += std::log(z) - (row[tgt.token] - mx);
    }
    return loss / targets.size();
}

/// Fill every tensor with moderate random values so all gradient paths carry
/// signal (plain 0.02 init makes many paths numerically tiny).
inline void randomize_weights(splab::Model& m, std::uint64_t seed) {
    splab::Rng rng(seed);
    const double proj_scale = 0.35 / std::sqrt(static_cast<double>(m.cfg.hidden_dim));
    auto fill = [&](std::vector<float>& t, double mean, double std) {
        for (auto& v : t) v = static_cast<float>(rng.gaussian(mean, std));
    };
    fill(m.w.token_emb, 0.0, 0.25);
    fill(m.w.pos_emb, 0.0, 0.1);
    for (auto& lw : m.w.layers) {
        fill(lw.ln1_gain, 1.0, 0.1);
        fill(lw.ln1_bias, 0.0, 0.05);
        fill(lw.wq, 0.0, proj_scale);
        fill(lw.wk, 0.0, proj_scale);
        fill(lw.wv, 0.0, proj_scale);
        fill(lw.wo, 0.0, proj_scale);
        fill(lw.ln2_gain, 1.0, 0.1);
        fill(lw.ln2_bias, 0.0, 0.05);
        fill(lw.fc1_w, 0.0, proj_scale);
        fill(lw.fc1_b, 0.0, 0.05);
        fill(lw.fc2_w, 0.0, 0.35 / std::sqrt(static_cast<double>(m.cfg.ffn_dim)));
        fill(lw.fc2_b, 0.0, 0.05);
    }
    fill(m.w.lnf_gain, 1.0, 0.1);
    fill(m.w.lnf_bias, 0.0, 0.05);
    fill(m.w.head_w, 0.0, proj_scale);
}

}  // namespace testref
