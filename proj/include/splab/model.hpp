#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "splab/io.hpp"
#include "splab/rng.hpp"
#include "splab/vocab.hpp"

namespace splab {

// ---------------------------------------------------------------------------
// configuration and core data types
// ---------------------------------------------------------------------------

struct ModelConfig {
    int num_layers = 2;
    int hidden_dim = 64;
    int num_heads = 4;
    int ffn_dim = 256;
    int vocab_size = 0;
    int max_seq_len = 192;
    std::uint64_t seed = 1;

    void validate() const {
        if (num_layers < 1) throw std::invalid_argument("ModelConfig: num_layers must be >= 1");
        if (hidden_dim < 1 || num_heads < 1 || hidden_dim % num_heads != 0)
            throw std::invalid_argument("ModelConfig: hidden_dim must be divisible by num_heads");
        if (ffn_dim < 1) throw std::invalid_argument("ModelConfig: ffn_dim must be >= 1");
        if (vocab_size < 1) throw std::invalid_argument("ModelConfig: vocab_size must be >= 1");
        if (max_seq_len < 1) throw std::invalid_argument("ModelConfig: max_seq_len must be >= 1");
        if (num_layers > 63) throw std::invalid_argument("ModelConfig: num_layers must be <= 63");
    }

    int head_dim() const { return hidden_dim / num_heads; }

    bool operator==(const ModelConfig&) const = default;

    json to_json() const {
        json j;
        j["num_layers"] = num_layers;
        j["hidden_dim"] = hidden_dim;
        j["num_heads"] = num_heads;
        j["ffn_dim"] = ffn_dim;
        j["vocab_size"] = vocab_size;
        j["max_seq_len"] = max_seq_len;
        j["seed"] = seed;
        return j;
    }

    static ModelConfig from_json(const json& j) {
        ModelConfig c;
        c.num_layers = j.at("num_layers").get<int>();
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.ffn_dim = j.at("ffn_dim").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

enum class PositionOrigin : std::uint8_t { TokenEmbedded, ContinuousPrompt, Placeholder };

/// A sequence of input rows for the model: token embeddings, continuous
/// prompt vectors, or placeholder-token embeddings, tagged per position.
/// Positional embeddings are added inside the forward pass for every origin.
struct EmbeddingSequence {
    int dim = 0;
    std::vector<float> data;  // length() x dim, row-major
    std::vector<PositionOrigin> origin;
    std::vector<TokenId> tokens;  // -1 for non-token rows

    int length() const { return static_cast<int>(origin.size()); }

    float* row(int t) { return data.data() + static_cast<std::size_t>(t) * dim; }
    const float* row(int t) const { return data.data() + static_cast<std::size_t>(t) * dim; }

    void append(const float* v, PositionOrigin o, TokenId tok = -1) {
        data.insert(data.end(), v, v + dim);
        origin.push_back(o);
        tokens.push_back(tok);
    }

    void append(const EmbeddingSequence& other) {
        if (other.dim != dim) throw std::invalid_argument("EmbeddingSequence: dim mismatch");
        data.insert(data.end(), other.data.begin(), other.data.end());
        origin.insert(origin.end(), other.origin.begin(), other.origin.end());
        tokens.insert(tokens.end(), other.tokens.begin(), other.tokens.end());
    }
};

/// Captured residual-stream vectors keyed by (layer, position).
/// Layer 0 is the embedding stream; layer l in 1..L is the stream after
/// block l completes.
struct ActivationRecord {
    int dim = 0;
    std::string run_id;
    std::map<std::pair<int, int>, std::vector<float>> entries;

    void put(int layer, int position, const float* v) {
        entries[{layer, position}] = std::vector<float>(v, v + dim);
    }

    bool has(int layer, int position) const { return entries.count({layer, position}) > 0; }

    const std::vector<float>& at(int layer, int position) const {
        auto it = entries.find({layer, position});
        if (it == entries.end())
            throw std::runtime_error("activation record: missing entry (layer " +
                                     std::to_string(layer) + ", position " +
                                     std::to_string(position) + ")");
        return it->second;
    }
};

/// Replace the residual stream at target_layer for each (source, target)
/// position pair with the recorded source vector, before the next layer runs.
struct PatchPlan {
    std::vector<std::pair<int, int>> pairs;  // (source_position, target_position)
    int source_layer = 0;
    int target_layer = 0;
};

// ---------------------------------------------------------------------------
// numeric kernels
// ---------------------------------------------------------------------------

namespace detail {

inline float dot(const float* a, const float* b, int n) {
    float acc[16] = {};
    int i = 0;
    for (; i + 16 <= n; i += 16)
        for (int j = 0; j < 16; ++j) acc[j] += a[i + j] * b[i + j];
    float tail = 0.0f;
    for (; i < n; ++i) tail += a[i] * b[i];
    float s = tail;
    for (int j = 0; j < 16; ++j) s += acc[j];
    return s;
}

inline void axpy(float* y, float a, const float* x, int n) {
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

/// y[t][o] = sum_k x[t][k] * w[o][k]  (w row-major [out][in])
inline void matmul(const float* x, const float* w, float* y, int rows, int in, int out) {
    for (int t = 0; t < rows; ++t) {
        const float* xt = x + static_cast<std::size_t>(t) * in;
        float* yt = y + static_cast<std::size_t>(t) * out;
        for (int o = 0; o < out; ++o) yt[o] = dot(xt, w + static_cast<std::size_t>(o) * in, in);
    }
}

/// LayerNorm over one row; f64 statistics. Returns (normalized, rstd).
inline void layer_norm_row(const float* x, const float* gain, const float* bias, int n,
                           float* normalized, float* out, float* rstd_out) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += x[i];
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = x[i] - mean;
        var += d * d;
    }
    var /= n;
    const float rstd = static_cast<float>(1.0 / std::sqrt(var + 1e-5));
    for (int i = 0; i < n; ++i) {
        const float nrm = (static_cast<float>(x[i] - mean)) * rstd;
        normalized[i] = nrm;
        out[i] = nrm * gain[i] + bias[i];
    }
    *rstd_out = rstd;
}

inline float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * 0.7071067811865475f));
}

inline float gelu_grad(float x) {
    const float cdf = 0.5f * (1.0f + std::erf(x * 0.7071067811865475f));
    const float pdf = 0.3989422804014327f * std::exp(-0.5f * x * x);
    return cdf + x * pdf;
}

/// Causal softmax over scores[0..t]; f64 denominator.
inline void softmax_causal_row(float* scores, int count) {
    float mx = scores[0];
    for (int i = 1; i < count; ++i) mx = std::max(mx, scores[i]);
    double denom = 0.0;
    for (int i = 0; i < count; ++i) {
        const double e = std::exp(static_cast<double>(scores[i] - mx));
        scores[i] = static_cast<float>(e);
        denom += e;
    }
    const double inv = 1.0 / denom;
    for (int i = 0; i < count; ++i) scores[i] = static_cast<float>(scores[i] * inv);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// weights
// ---------------------------------------------------------------------------

struct LayerWeights {
    std::vector<float> ln1_gain, ln1_bias;
    std::vector<float> wq, wk, wv, wo;  // [d x d]
    std::vector<float> ln2_gain, ln2_bias;
    std::vector<float> fc1_w, fc1_b;  // [ffn x d], [ffn]
    std::vector<float> fc2_w, fc2_b;  // [d x ffn], [d]
};

/// Weight tensors. Serialization order (checkpoint format and weights_hash):
/// token_emb, pos_emb, then per layer ln1_gain, ln1_bias, wq, wk, wv, wo,
/// ln2_gain, ln2_bias, fc1_w, fc1_b, fc2_w, fc2_b, then lnf_gain, lnf_bias,
/// head_w. All blobs little-endian f32 row-major.
struct Weights {
    std::vector<float> token_emb;  // [V x d]
    std::vector<float> pos_emb;    // [max_seq_len x d]
    std::vector<LayerWeights> layers;
    std::vector<float> lnf_gain, lnf_bias;
    std::vector<float> head_w;  // [V x d]

    template <typename F>
    void for_each_tensor(F&& f) {
        f(token_emb);
        f(pos_emb);
        for (auto& l : layers) {
            f(l.ln1_gain);
            f(l.ln1_bias);
            f(l.wq);
            f(l.wk);
            f(l.wv);
            f(l.wo);
            f(l.ln2_gain);
            f(l.ln2_bias);
            f(l.fc1_w);
            f(l.fc1_b);
            f(l.fc2_w);
            f(l.fc2_b);
        }
        f(lnf_gain);
        f(lnf_bias);
        f(head_w);
    }

    template <typename F>
    void for_each_tensor(F&& f) const {
        const_cast<Weights*>(this)->for_each_tensor(
            [&](std::vector<float>& t) { f(static_cast<const std::vector<float>&>(t)); });
    }
};

class Model {
public:
    Model() = default;

    explicit Model(const ModelConfig& config) : cfg(config) {
        cfg.validate();
        const auto d = static_cast<std::size_t>(cfg.hidden_dim);
        w.token_emb.resize(cfg.vocab_size * d);
        w.pos_emb.resize(cfg.max_seq_len * d);
        w.layers.resize(cfg.num_layers);
        for (auto& l : w.layers) {
            l.ln1_gain.assign(d, 1.0f);
            l.ln1_bias.assign(d, 0.0f);
            l.wq.resize(d * d);
            l.wk.resize(d * d);
            l.wv.resize(d * d);
            l.wo.resize(d * d);
            l.ln2_gain.assign(d, 1.0f);
            l.ln2_bias.assign(d, 0.0f);
            l.fc1_w.resize(cfg.ffn_dim * d);
            l.fc1_b.assign(cfg.ffn_dim, 0.0f);
            l.fc2_w.resize(d * cfg.ffn_dim);
            l.fc2_b.assign(d, 0.0f);
        }
        w.lnf_gain.assign(d, 1.0f);
        w.lnf_bias.assign(d, 0.0f);
        w.head_w.resize(cfg.vocab_size * d);
        init_weights();
    }

    /// Gaussian(0, 0.02^2) init for embeddings and projection matrices,
    /// seeded by cfg.seed; norm gains stay 1, biases 0. The fill order is
    /// the serialization order, so identical seeds give identical bytes.
    void init_weights() {
        Rng rng(cfg.seed);
        auto fill = [&](std::vector<float>& t) {
            for (auto& v : t) v = static_cast<float>(rng.gaussian(0.0, 0.02));
        };
        fill(w.token_emb);
        fill(w.pos_emb);
        for (auto& l : w.layers) {
            fill(l.wq);
            fill(l.wk);
            fill(l.wv);
            fill(l.wo);
            fill(l.fc1_w);
            fill(l.fc2_w);
        }
        fill(w.head_w);
    }

    const ModelConfig& config() const { return cfg; }

    EmbeddingSequence embed_tokens(std::span<const TokenId> ids) const {
        EmbeddingSequence seq;
        seq.dim = cfg.hidden_dim;
        seq.data.reserve(ids.size() * cfg.hidden_dim);
        for (TokenId id : ids) {
            if (id < 0 || id >= cfg.vocab_size)
                throw std::runtime_error("embed_tokens: token id out of range: " +
                                         std::to_string(id));
            seq.append(w.token_emb.data() + static_cast<std::size_t>(id) * cfg.hidden_dim,
                       PositionOrigin::TokenEmbedded, id);
        }
        return seq;
    }

    std::uint64_t weights_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        w.for_each_tensor([&](const std::vector<float>& t) {
            const auto* p = reinterpret_cast<const unsigned char*>(t.data());
            for (std::size_t i = 0; i < t.size() * sizeof(float); ++i) {
                h ^= p[i];
                h *= 0x100000001b3ull;
            }
        });
        return h;
    }

    // -- checkpoint file: magic "SPRB", version, config JSON, weight blobs --

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
        io::write_magic(os, "SPRB");
        io::write_le<std::uint32_t>(os, 1u);
        const std::string header = io::canonical(cfg.to_json());
        io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
        io::write_exact(os, header.data(), header.size());
        w.for_each_tensor([&](const std::vector<float>& t) { io::write_f32_block(os, t); });
    }

    static Model load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("cannot open " + path.string());
        io::expect_magic(is, "SPRB", "model checkpoint");
        const auto version = io::read_le<std::uint32_t>(is);
        if (version != 1) throw std::runtime_error("model checkpoint: unsupported version");
        const auto header_len = io::read_le<std::uint32_t>(is);
        std::string header(header_len, '\0');
        io::read_exact(is, header.data(), header_len);
        Model m(ModelConfig::from_json(json::parse(header)));
        m.w.for_each_tensor([&](std::vector<float>& t) { io::read_f32_block(is, t); });
        return m;
    }

    ModelConfig cfg;
    Weights w;
};

// ---------------------------------------------------------------------------
// full-sequence forward pass with capture, patching, and a gradient tape
// ---------------------------------------------------------------------------

/// Saved activations from one forward pass. stream[l] is the residual stream
/// entering block l (stream[0] = embeddings + positions, stream[L] = final).
struct ForwardTape {
    int rows = 0;

    std::vector<std::vector<float>> stream;  // (L+1) x [rows x d]
    struct LayerTape {
        std::vector<float> norm1, rstd1;       // [rows x d], [rows]
        std::vector<float> q, k, v;            // [rows x d]
        std::vector<float> probs;              // [heads x rows x rows]
        std::vector<float> att_concat;         // [rows x d]
        std::vector<float> x_mid;              // [rows x d] after attention residual
        std::vector<float> norm2, rstd2;       // [rows x d], [rows]
        std::vector<float> h_pre, h_act;       // [rows x ffn]
    };
    std::vector<LayerTape> layers;
    std::vector<float> normf, rstdf;  // [rows x d], [rows]
    std::vector<float> logits;        // [rows x V]
};

struct ForwardOptions {
    const PatchPlan* plan = nullptr;
    const ActivationRecord* patch_source = nullptr;
    const std::set<int>* capture_layers = nullptr;
    ActivationRecord* capture_out = nullptr;
};

namespace detail {

inline void apply_patch_at_layer(const Model& m, const PatchPlan& plan,
                                 const ActivationRecord& source, int layer,
                                 std::vector<float>& stream, int rows) {
    if (plan.target_layer != layer) return;
    for (const auto& [src_pos, tgt_pos] : plan.pairs) {
        if (tgt_pos < 0 || tgt_pos >= rows)
            throw std::runtime_error("patch plan: target position " + std::to_string(tgt_pos) +
                                     " out of range");
        const auto& vec = source.at(plan.source_layer, src_pos);
        if (static_cast<int>(vec.size()) != m.cfg.hidden_dim)
            throw std::runtime_error("patch plan: source vector dimension mismatch");
        std::copy(vec.begin(), vec.end(),
                  stream.begin() + static_cast<std::size_t>(tgt_pos) * m.cfg.hidden_dim);
    }
}

inline void validate_plan(const Model& m, const PatchPlan& plan, const ActivationRecord& source) {
    const int L = m.cfg.num_layers;
    if (plan.source_layer < 0 || plan.source_layer > L)
        throw std::runtime_error("patch plan: source layer " + std::to_string(plan.source_layer) +
                                 " out of range 0.." + std::to_string(L));
    if (plan.target_layer < 0 || plan.target_layer > L)
        throw std::runtime_error("patch plan: target layer " + std::to_string(plan.target_layer) +
                                 " out of range 0.." + std::to_string(L));
    std::set<int> seen;
    for (const auto& [src_pos, tgt_pos] : plan.pairs) {
        if (!seen.insert(tgt_pos).second)
            throw std::runtime_error("patch plan: duplicate target position " +
                                     std::to_string(tgt_pos));
        source.at(plan.source_layer, src_pos);  // throws if missing, naming (layer, position)
    }
}

}  // namespace detail

/// Run the model over all positions of `input`. Fills `tape` (reused across
/// calls) and returns logits for every position in tape.logits.
inline void forward_full(const Model& m, const EmbeddingSequence& input, ForwardTape& tape,
                         const ForwardOptions& opts = {}) {
    const int n = input.length();
    const int d = m.cfg.hidden_dim;
    const int L = m.cfg.num_layers;
    const int heads = m.cfg.num_heads;
    const int hd = m.cfg.head_dim();
    const int ffn = m.cfg.ffn_dim;
    const int V = m.cfg.vocab_size;

    if (n == 0) throw std::runtime_error("forward: empty input");
    if (n > m.cfg.max_seq_len)
        throw std::runtime_error("forward: input length " + std::to_string(n) +
                                 " exceeds max_seq_len " + std::to_string(m.cfg.max_seq_len));
    if (input.dim != d) throw std::runtime_error("forward: input dimension mismatch");
    if (opts.plan) {
        if (!opts.patch_source) throw std::runtime_error("forward: patch plan without record");
        detail::validate_plan(m, *opts.plan, *opts.patch_source);
    }
    if (opts.capture_layers)
        for (int l : *opts.capture_layers)
            if (l < 0 || l > L)
                throw std::runtime_error("capture: layer " + std::to_string(l) +
                                         " out of range 0.." + std::to_string(L));

    const std::size_t nd = static_cast<std::size_t>(n) * d;
    tape.rows = n;
    tape.stream.assign(L + 1, {});
    tape.layers.assign(L, {});
    for (auto& s : tape.stream) s.resize(nd);
    tape.normf.resize(nd);
    tape.rstdf.resize(n);
    tape.logits.resize(static_cast<std::size_t>(n) * V);

    // embedding stream: input rows plus positional embeddings
    for (int t = 0; t < n; ++t) {
        const float* in = input.row(t);
        const float* pos = m.w.pos_emb.data() + static_cast<std::size_t>(t) * d;
        float* out = tape.stream[0].data() + static_cast<std::size_t>(t) * d;
        for (int i = 0; i < d; ++i) out[i] = in[i] + pos[i];
    }
    if (opts.plan)
        detail::apply_patch_at_layer(m, *opts.plan, *opts.patch_source, 0, tape.stream[0], n);

    std::vector<float> scores(n);

    for (int l = 0; l < L; ++l) {
        const LayerWeights& lw = m.w.layers[l];
        auto& lt = tape.layers[l];
        const std::vector<float>& x = tape.stream[l];
        std::vector<float>& x_next = tape.stream[l + 1];

        lt.norm1.resize(nd);
        lt.rstd1.resize(n);
        lt.q.resize(nd);
        lt.k.resize(nd);
        lt.v.resize(nd);
        lt.probs.assign(static_cast<std::size_t>(heads) * n * n, 0.0f);
        lt.att_concat.assign(nd, 0.0f);
        lt.x_mid.resize(nd);
        lt.norm2.resize(nd);
        lt.rstd2.resize(n);
        lt.h_pre.resize(static_cast<std::size_t>(n) * ffn);
        lt.h_act.resize(static_cast<std::size_t>(n) * ffn);

        std::vector<float> ln_out(nd);
        for (int t = 0; t < n; ++t)
            detail::layer_norm_row(x.data() + static_cast<std::size_t>(t) * d,
                                   lw.ln1_gain.data(), lw.ln1_bias.data(), d,
                                   lt.norm1.data() + static_cast<std::size_t>(t) * d,
                                   ln_out.data() + static_cast<std::size_t>(t) * d,
                                   &lt.rstd1[t]);

        detail::matmul(ln_out.data(), lw.wq.data(), lt.q.data(), n, d, d);
        detail::matmul(ln_out.data(), lw.wk.data(), lt.k.data(), n, d, d);
        detail::matmul(ln_out.data(), lw.wv.data(), lt.v.data(), n, d, d);

        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
        for (int h = 0; h < heads; ++h) {
            const int off = h * hd;
            float* probs_h = lt.probs.data() + static_cast<std::size_t>(h) * n * n;
            for (int t = 0; t < n; ++t) {
                const float* qt = lt.q.data() + static_cast<std::size_t>(t) * d + off;
                for (int u = 0; u <= t; ++u)
                    scores[u] =
                        detail::dot(qt, lt.k.data() + static_cast<std::size_t>(u) * d + off, hd) *
                        scale;
                detail::softmax_causal_row(scores.data(), t + 1);
                float* p_row = probs_h + static_cast<std::size_t>(t) * n;
                std::copy(scores.begin(), scores.begin() + t + 1, p_row);
                float* out = lt.att_concat.data() + static_cast<std::size_t>(t) * d + off;
                for (int u = 0; u <= t; ++u)
                    detail::axpy(out, p_row[u],
                                 lt.v.data() + static_cast<std::size_t>(u) * d + off, hd);
            }
        }

        // attention output projection + residual
        for (int t = 0; t < n; ++t) {
            const float* at = lt.att_concat.data() + static_cast<std::size_t>(t) * d;
            const float* xt = x.data() + static_cast<std::size_t>(t) * d;
            float* mid = lt.x_mid.data() + static_cast<std::size_t>(t) * d;
            for (int o = 0; o < d; ++o)
                mid[o] = xt[o] + detail::dot(at, lw.wo.data() + static_cast<std::size_t>(o) * d, d);
        }

        // FFN + residual
        for (int t = 0; t < n; ++t)
            detail::layer_norm_row(lt.x_mid.data() + static_cast<std::size_t>(t) * d,
                                   lw.ln2_gain.data(), lw.ln2_bias.data(), d,
                                   lt.norm2.data() + static_cast<std::size_t>(t) * d,
                                   ln_out.data() + static_cast<std::size_t>(t) * d,
                                   &lt.rstd2[t]);
        for (int t = 0; t < n; ++t) {
            const float* lt_row = ln_out.data() + static_cast<std::size_t>(t) * d;
            float* hp = lt.h_pre.data() + static_cast<std::size_t>(t) * ffn;
            float* ha = lt.h_act.data() + static_cast<std::size_t>(t) * ffn;
            for (int o = 0; o < ffn; ++o) {
                hp[o] = detail::dot(lt_row, lw.fc1_w.data() + static_cast<std::size_t>(o) * d, d) +
                        lw.fc1_b[o];
                ha[o] = detail::gelu(hp[o]);
            }
            const float* mid = lt.x_mid.data() + static_cast<std::size_t>(t) * d;
            float* xn = x_next.data() + static_cast<std::size_t>(t) * d;
            for (int o = 0; o < d; ++o)
                xn[o] = mid[o] +
                        detail::dot(ha, lw.fc2_w.data() + static_cast<std::size_t>(o) * ffn, ffn) +
                        lw.fc2_b[o];
        }

        if (opts.plan)
            detail::apply_patch_at_layer(m, *opts.plan, *opts.patch_source, l + 1, x_next, n);
    }

    // final norm and output head
    std::vector<float> lnf_out(nd);
    for (int t = 0; t < n; ++t)
        detail::layer_norm_row(tape.stream[L].data() + static_cast<std::size_t>(t) * d,
                               m.w.lnf_gain.data(), m.w.lnf_bias.data(), d,
                               tape.normf.data() + static_cast<std::size_t>(t) * d,
                               lnf_out.data() + static_cast<std::size_t>(t) * d, &tape.rstdf[t]);
    detail::matmul(lnf_out.data(), m.w.head_w.data(), tape.logits.data(), n, d, V);

    if (opts.capture_layers && opts.capture_out) {
        opts.capture_out->dim = d;
        for (int l : *opts.capture_layers)
            for (int t = 0; t < n; ++t)
                opts.capture_out->put(l, t, tape.stream[l].data() + static_cast<std::size_t>(t) * d);
    }
}

/// Forward pass capturing the residual stream at the requested layers.
/// Returns logits for every position.
inline std::vector<float> forward_capture(const Model& m, const EmbeddingSequence& input,
                                          const std::set<int>& layers, ActivationRecord& record) {
    ForwardTape tape;
    ForwardOptions opts;
    opts.capture_layers = &layers;
    opts.capture_out = &record;
    forward_full(m, input, tape, opts);
    return std::move(tape.logits);
}

/// Forward pass with recorded activations patched in per `plan`.
inline std::vector<float> forward_patched(const Model& m, const EmbeddingSequence& input,
                                          const ActivationRecord& record, const PatchPlan& plan) {
    ForwardTape tape;
    ForwardOptions opts;
    opts.plan = &plan;
    opts.patch_source = &record;
    forward_full(m, input, tape, opts);
    return std::move(tape.logits);
}

// ---------------------------------------------------------------------------
// incremental inference with KV cache (exactly equivalent to forward_full)
// ---------------------------------------------------------------------------

class InferenceSession {
public:
    explicit InferenceSession(const Model& m) : model_(&m) {
        const auto d = static_cast<std::size_t>(m.cfg.hidden_dim);
        k_cache_.assign(m.cfg.num_layers, {});
        v_cache_.assign(m.cfg.num_layers, {});
        for (int l = 0; l < m.cfg.num_layers; ++l) {
            k_cache_[l].reserve(m.cfg.max_seq_len * d);
            v_cache_[l].reserve(m.cfg.max_seq_len * d);
        }
        logits_.resize(m.cfg.vocab_size);
    }

    int length() const { return pos_; }
    const std::vector<float>& last_logits() const { return logits_; }

    /// Append all rows of `input`; patching (if any) applies to these rows.
    void extend(const EmbeddingSequence& input, const PatchPlan* plan = nullptr,
                const ActivationRecord* record = nullptr) {
        if (plan) {
            if (!record) throw std::runtime_error("session: patch plan without record");
            detail::validate_plan(*model_, *plan, *record);
        }
        const int base = pos_;
        for (int t = 0; t < input.length(); ++t) process_row(input.row(t), plan, record, base);
    }

    void extend_token(TokenId id) {
        const Model& m = *model_;
        if (id < 0 || id >= m.cfg.vocab_size)
            throw std::runtime_error("session: token id out of range");
        process_row(m.w.token_emb.data() + static_cast<std::size_t>(id) * m.cfg.hidden_dim,
                    nullptr, nullptr, 0);
    }

private:
    void process_row(const float* in_row, const PatchPlan* plan, const ActivationRecord* record,
                     int patch_base) {
        const Model& m = *model_;
        const int d = m.cfg.hidden_dim;
        const int L = m.cfg.num_layers;
        const int heads = m.cfg.num_heads;
        const int hd = m.cfg.head_dim();
        const int ffn = m.cfg.ffn_dim;
        if (pos_ >= m.cfg.max_seq_len)
            throw std::runtime_error("context overflow: sequence would exceed max_seq_len " +
                                     std::to_string(m.cfg.max_seq_len));

        const float* patch_vec_by_layer[64] = {};
        if (plan) {
            for (const auto& [src, tgt] : plan->pairs) {
                if (patch_base + tgt == pos_) {
                    patch_vec_by_layer[plan->target_layer] =
                        record->at(plan->source_layer, src).data();
                    break;
                }
            }
        }

        std::vector<float> x(d), scratch(d), ln_out(d);
        const float* pe = m.w.pos_emb.data() + static_cast<std::size_t>(pos_) * d;
        for (int i = 0; i < d; ++i) x[i] = in_row[i] + pe[i];
        if (patch_vec_by_layer[0]) std::copy_n(patch_vec_by_layer[0], d, x.data());

        std::vector<float> q(d), att(d);
        std::vector<float> scores(pos_ + 1);
        std::vector<float> h(ffn);
        float rstd;

        for (int l = 0; l < L; ++l) {
            const LayerWeights& lw = m.w.layers[l];
            detail::layer_norm_row(x.data(), lw.ln1_gain.data(), lw.ln1_bias.data(), d,
                                   scratch.data(), ln_out.data(), &rstd);
            // append this position's k/v to the cache
            auto& kc = k_cache_[l];
            auto& vc = v_cache_[l];
            const std::size_t off = kc.size();
            kc.resize(off + d);
            vc.resize(off + d);
            for (int o = 0; o < d; ++o) {
                q[o] = detail::dot(ln_out.data(), lw.wq.data() + static_cast<std::size_t>(o) * d, d);
                kc[off + o] =
                    detail::dot(ln_out.data(), lw.wk.data() + static_cast<std::size_t>(o) * d, d);
                vc[off + o] =
                    detail::dot(ln_out.data(), lw.wv.data() + static_cast<std::size_t>(o) * d, d);
            }
            const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
            std::fill(att.begin(), att.end(), 0.0f);
            for (int hh = 0; hh < heads; ++hh) {
                const int ho = hh * hd;
                for (int u = 0; u <= pos_; ++u)
                    scores[u] = detail::dot(q.data() + ho,
                                            kc.data() + static_cast<std::size_t>(u) * d + ho, hd) *
                                scale;
                detail::softmax_causal_row(scores.data(), pos_ + 1);
                for (int u = 0; u <= pos_; ++u)
                    detail::axpy(att.data() + ho, scores[u],
                                 vc.data() + static_cast<std::size_t>(u) * d + ho, hd);
            }
            for (int o = 0; o < d; ++o)
                x[o] += detail::dot(att.data(), lw.wo.data() + static_cast<std::size_t>(o) * d, d);

            detail::layer_norm_row(x.data(), lw.ln2_gain.data(), lw.ln2_bias.data(), d,
                                   scratch.data(), ln_out.data(), &rstd);
            for (int o = 0; o < ffn; ++o)
                h[o] = detail::gelu(
                    detail::dot(ln_out.data(), lw.fc1_w.data() + static_cast<std::size_t>(o) * d,
                                d) +
                    lw.fc1_b[o]);
            // same association as the batch pass: (x + dot) + bias
            for (int o = 0; o < d; ++o)
                x[o] = x[o] +
                       detail::dot(h.data(),
                                   lw.fc2_w.data() + static_cast<std::size_t>(o) * ffn, ffn) +
                       lw.fc2_b[o];

            if (patch_vec_by_layer[l + 1]) {
                std::copy_n(patch_vec_by_layer[l + 1], d, x.data());
                // k/v above were computed pre-patch, matching full-pass semantics:
                // the replacement takes effect before the next layer runs.
            }
        }

        detail::layer_norm_row(x.data(), m.w.lnf_gain.data(), m.w.lnf_bias.data(), d,
                               scratch.data(), ln_out.data(), &rstd);
        for (int o = 0; o < m.cfg.vocab_size; ++o)
            logits_[o] =
                detail::dot(ln_out.data(), m.w.head_w.data() + static_cast<std::size_t>(o) * d, d);
        ++pos_;
    }

    const Model* model_;
    int pos_ = 0;
    std::vector<std::vector<float>> k_cache_, v_cache_;
    std::vector<float> logits_;
};

// ---------------------------------------------------------------------------
// greedy generation
// ---------------------------------------------------------------------------

struct GenerateResult {
    std::vector<TokenId> tokens;
    std::string stop_reason;  // "stop_token" | "budget"
};

inline TokenId argmax_token(const std::vector<float>& logits) {
    TokenId best = 0;
    float best_v = logits[0];
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > best_v) {
            best_v = logits[i];
            best = static_cast<TokenId>(i);
        }
    return best;
}

/// Greedy decoding. When a plan is supplied, patching applies on the pass
/// over `input`; cached states are reused afterwards. Throws on context
/// overflow rather than truncating.
inline GenerateResult generate(const Model& m, const EmbeddingSequence& input, int max_new_tokens,
                               const std::set<TokenId>& stop_tokens,
                               const PatchPlan* plan = nullptr,
                               const ActivationRecord* record = nullptr) {
    if (max_new_tokens < 1) throw std::invalid_argument("generate: max_new_tokens must be >= 1");
    InferenceSession session(m);
    session.extend(input, plan, record);
    GenerateResult out;
    while (true) {
        const TokenId next = argmax_token(session.last_logits());
        out.tokens.push_back(next);
        if (stop_tokens.count(next)) {
            out.stop_reason = "stop_token";
            break;
        }
        if (static_cast<int>(out.tokens.size()) >= max_new_tokens) {
            out.stop_reason = "budget";
            break;
        }
        session.extend_token(next);
    }
    return out;
}

}  // namespace splab
