#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "splab/grad.hpp"
#include "splab/model.hpp"
#include "splab/optim.hpp"
#include "splab/rng.hpp"

namespace splab {

struct PretrainConfig {
    std::size_t steps = 2500;
    int batch_sequences = 4;
    int seq_len = 160;
    double learning_rate = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double clip_norm = 1.0;  // global-norm clip; 0 disables
    double holdout_fraction = 0.05;
    double holdout_loss_threshold = 4.0;
    std::size_t log_every = 100;
    std::uint64_t seed = 7;

    json to_json() const {
        json j;
        j["steps"] = steps;
        j["batch_sequences"] = batch_sequences;
        j["seq_len"] = seq_len;
        j["learning_rate"] = learning_rate;
        j["clip_norm"] = clip_norm;
        j["holdout_fraction"] = holdout_fraction;
        j["holdout_loss_threshold"] = holdout_loss_threshold;
        j["log_every"] = log_every;
        j["seed"] = seed;
        return j;
    }

    static PretrainConfig from_json(const json& j) {
        PretrainConfig c;
        if (j.contains("steps")) c.steps = j.at("steps").get<std::size_t>();
        if (j.contains("batch_sequences")) c.batch_sequences = j.at("batch_sequences").get<int>();
        if (j.contains("seq_len")) c.seq_len = j.at("seq_len").get<int>();
        if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
        if (j.contains("clip_norm")) c.clip_norm = j.at("clip_norm").get<double>();
        if (j.contains("holdout_fraction"))
            c.holdout_fraction = j.at("holdout_fraction").get<double>();
        if (j.contains("holdout_loss_threshold"))
            c.holdout_loss_threshold = j.at("holdout_loss_threshold").get<double>();
        if (j.contains("log_every")) c.log_every = j.at("log_every").get<std::size_t>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

struct PretrainLogEntry {
    std::size_t step;
    double loss;
};

struct PretrainResult {
    Model model;
    std::vector<PretrainLogEntry> log;
    double holdout_loss_untrained = 0.0;
    double holdout_loss_final = 0.0;
};

namespace detail {

/// Mean next-token loss over non-overlapping windows tiled across
/// [begin, end) of the token stream.
inline double eval_next_token_loss(const Model& m, const std::vector<TokenId>& corpus,
                                   std::size_t begin, std::size_t end, int seq_len) {
    ForwardTape tape;
    std::vector<float> dlogits;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t off = begin; off + seq_len + 1 <= end; off += seq_len) {
        const std::span<const TokenId> window(corpus.data() + off, seq_len);
        EmbeddingSequence seq = m.embed_tokens(window);
        forward_full(m, seq, tape);
        std::vector<TargetAt> targets(seq_len);
        for (int t = 0; t < seq_len; ++t) targets[t] = {t, corpus[off + t + 1]};
        total += cross_entropy(tape.logits, tape.rows, m.cfg.vocab_size, targets, dlogits) *
                 seq_len;
        count += seq_len;
    }
    if (count == 0) throw std::runtime_error("holdout region shorter than one window");
    return total / static_cast<double>(count);
}

}  // namespace detail

/// Train a model from seeded initialization on next-token prediction over
/// random windows of the token stream. The tail holdout_fraction of the
/// stream is never sampled for training and scores the final model.
inline PretrainResult pretrain_base(const ModelConfig& model_cfg,
                                    const std::vector<TokenId>& corpus, const PretrainConfig& cfg,
                                    std::ostream* log_stream = nullptr) {
    model_cfg.validate();
    if (cfg.seq_len < 1 || cfg.seq_len > model_cfg.max_seq_len)
        throw std::invalid_argument("pretrain: seq_len must be in 1..max_seq_len");
    if (cfg.batch_sequences < 1)
        throw std::invalid_argument("pretrain: batch_sequences must be >= 1");

    const std::size_t holdout =
        std::max<std::size_t>(static_cast<std::size_t>(corpus.size() * cfg.holdout_fraction),
                              static_cast<std::size_t>(cfg.seq_len) + 1);
    if (corpus.size() < holdout + cfg.seq_len + 1)
        throw std::runtime_error("pretrain: corpus shorter than one batch window plus holdout");
    const std::size_t train_end = corpus.size() - holdout;
    const std::size_t max_offset = train_end - cfg.seq_len - 1;

    PretrainResult result;
    result.model = Model(model_cfg);
    Model& m = result.model;

    result.holdout_loss_untrained =
        detail::eval_next_token_loss(m, corpus, train_end, corpus.size(), cfg.seq_len);

    std::size_t param_count = 0;
    m.w.for_each_tensor([&](const std::vector<float>& t) { param_count += t.size(); });

    Adam opt;
    opt.learning_rate = cfg.learning_rate;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.eps = cfg.eps;
    opt.reset(param_count);

    WeightGrads grads(m);
    Rng rng(cfg.seed);
    ForwardTape tape;
    std::vector<float> dlogits;
    std::vector<float> flat_params(param_count), flat_grads(param_count);

    const double target_scale =
        1.0 / (static_cast<double>(cfg.batch_sequences) * cfg.seq_len);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        grads.zero();
        double step_loss = 0.0;
        for (int b = 0; b < cfg.batch_sequences; ++b) {
            const std::size_t off = rng.below(max_offset + 1);
            const std::span<const TokenId> window(corpus.data() + off, cfg.seq_len);
            EmbeddingSequence seq = m.embed_tokens(window);
            forward_full(m, seq, tape);
            std::vector<TargetAt> targets(cfg.seq_len);
            for (int t = 0; t < cfg.seq_len; ++t) targets[t] = {t, corpus[off + t + 1]};
            // cross_entropy averages over targets; rescale to the batch mean
            const double loss =
                cross_entropy(tape.logits, tape.rows, m.cfg.vocab_size, targets, dlogits);
            const float rescale = static_cast<float>(cfg.seq_len * target_scale);
            for (auto& g : dlogits) g *= rescale;
            step_loss += loss / cfg.batch_sequences;
            backward(m, seq, tape, dlogits, nullptr, &grads);
        }

        if (!std::isfinite(step_loss))
            throw std::runtime_error("pretrain diverged: non-finite loss at step " +
                                     std::to_string(step));

        // flatten, clip by global norm, update
        std::size_t cursor = 0;
        m.w.for_each_tensor([&](const std::vector<float>& t) {
            std::copy(t.begin(), t.end(), flat_params.begin() + cursor);
            cursor += t.size();
        });
        cursor = 0;
        grads.g.for_each_tensor([&](const std::vector<float>& t) {
            std::copy(t.begin(), t.end(), flat_grads.begin() + cursor);
            cursor += t.size();
        });
        if (cfg.clip_norm > 0.0) {
            double sq = 0.0;
            for (float g : flat_grads) sq += static_cast<double>(g) * g;
            const double norm = std::sqrt(sq);
            if (norm > cfg.clip_norm) {
                const float s = static_cast<float>(cfg.clip_norm / norm);
                for (auto& g : flat_grads) g *= s;
            }
        }
        opt.step(flat_params.data(), flat_grads.data(), param_count);
        cursor = 0;
        m.w.for_each_tensor([&](std::vector<float>& t) {
            std::copy(flat_params.begin() + cursor, flat_params.begin() + cursor + t.size(),
                      t.begin());
            cursor += t.size();
        });

        result.log.push_back({step, step_loss});
        if (log_stream && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
            (*log_stream) << "step " << step << " loss " << step_loss << "\n";
    }

    result.holdout_loss_final =
        cfg.steps == 0 ? result.holdout_loss_untrained
                       : detail::eval_next_token_loss(m, corpus, train_end, corpus.size(),
                                                      cfg.seq_len);
    if (cfg.steps > 0 && result.holdout_loss_final > cfg.holdout_loss_threshold)
        throw std::runtime_error("pretrain: holdout loss " +
                                 std::to_string(result.holdout_loss_final) +
                                 " above threshold " +
                                 std::to_string(cfg.holdout_loss_threshold));
    return result;
}

}  // namespace splab
