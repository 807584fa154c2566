#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "splab/grad.hpp"
#include "splab/model.hpp"
#include "splab/optim.hpp"
#include "splab/rng.hpp"
#include "splab/tasks.hpp"
#include "splab/vocab.hpp"

namespace splab {

// ---------------------------------------------------------------------------
// continuous prompt and its checkpoint file
// ---------------------------------------------------------------------------

struct ContinuousPrompt {
    int length = 0;
    int dim = 0;
    std::vector<float> vectors;  // length x dim
    std::string task_id;
    std::uint64_t init_seed = 0;
    std::uint64_t step = 0;  // examples seen

    float* row(int i) { return vectors.data() + static_cast<std::size_t>(i) * dim; }
    const float* row(int i) const { return vectors.data() + static_cast<std::size_t>(i) * dim; }

    EmbeddingSequence as_sequence() const {
        EmbeddingSequence seq;
        seq.dim = dim;
        for (int i = 0; i < length; ++i) seq.append(row(i), PositionOrigin::ContinuousPrompt);
        return seq;
    }
};

inline ContinuousPrompt init_prompt(int length, int dim, std::uint64_t seed) {
    if (length < 1 || dim < 1) throw std::invalid_argument("init_prompt: length and dim >= 1");
    ContinuousPrompt p;
    p.length = length;
    p.dim = dim;
    p.init_seed = seed;
    p.vectors.resize(static_cast<std::size_t>(length) * dim);
    Rng rng(seed);
    for (auto& v : p.vectors) v = static_cast<float>(rng.gaussian(0.0, 0.02));
    return p;
}

inline void save_prompt(const std::filesystem::path& path, const ContinuousPrompt& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    io::write_magic(os, "SPCK");
    io::write_le<std::uint32_t>(os, 1u);
    json j;
    j["length"] = p.length;
    j["dim"] = p.dim;
    j["task_id"] = p.task_id;
    j["step"] = p.step;
    j["init_seed"] = p.init_seed;
    const std::string header = io::canonical(j);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
    io::write_exact(os, header.data(), header.size());
    io::write_f32_block(os, p.vectors);
}

inline ContinuousPrompt load_prompt(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    io::expect_magic(is, "SPCK", "prompt checkpoint");
    const auto version = io::read_le<std::uint32_t>(is);
    if (version != 1) throw std::runtime_error("prompt checkpoint: unsupported version");
    const auto header_len = io::read_le<std::uint32_t>(is);
    std::string header(header_len, '\0');
    io::read_exact(is, header.data(), header_len);
    const json j = json::parse(header);
    ContinuousPrompt p;
    p.length = j.at("length").get<int>();
    p.dim = j.at("dim").get<int>();
    p.task_id = j.at("task_id").get<std::string>();
    p.step = j.at("step").get<std::uint64_t>();
    p.init_seed = j.at("init_seed").get<std::uint64_t>();
    p.vectors.resize(static_cast<std::size_t>(p.length) * p.dim);
    io::read_f32_block(is, p.vectors);
    return p;
}

// ---------------------------------------------------------------------------
// checkpoint sets
// ---------------------------------------------------------------------------

struct CheckpointSet {
    std::vector<ContinuousPrompt> checkpoints;  // ascending step, step 0 first
    bool aborted = false;
    std::string abort_reason;
};

/// Files are named step-<step>.spck inside `dir`.
inline void save_checkpoint_set(const std::filesystem::path& dir, const CheckpointSet& set) {
    std::filesystem::create_directories(dir);
    for (const auto& p : set.checkpoints)
        save_prompt(dir / ("step-" + std::to_string(p.step) + ".spck"), p);
}

inline CheckpointSet load_checkpoint_set(const std::filesystem::path& dir) {
    CheckpointSet set;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("step-", 0) == 0 && name.size() > 10 &&
            name.substr(name.size() - 5) == ".spck")
            set.checkpoints.push_back(load_prompt(entry.path()));
    }
    std::sort(set.checkpoints.begin(), set.checkpoints.end(),
              [](const auto& a, const auto& b) { return a.step < b.step; });
    if (set.checkpoints.empty())
        throw std::runtime_error("no prompt checkpoints found in " + dir.string());
    return set;
}

// ---------------------------------------------------------------------------
// classification input rendering
// ---------------------------------------------------------------------------

/// Prompt rows followed by `text : <example words> , label :`; the label
/// token is read (or trained) at the final position.
inline EmbeddingSequence render_classification_input(const Model& m, const ContinuousPrompt& p,
                                                     const std::string& text,
                                                     const Vocabulary& vocab) {
    if (p.dim != m.cfg.hidden_dim)
        throw std::invalid_argument("prompt dimension does not match the model");
    EmbeddingSequence seq = p.as_sequence();
    std::vector<TokenId> ids;
    ids.push_back(vocab.id("text"));
    ids.push_back(vocab.colon_id());
    for (const TokenId t : vocab.encode(text)) ids.push_back(t);
    ids.push_back(vocab.comma_id());
    ids.push_back(vocab.id("label"));
    ids.push_back(vocab.colon_id());
    seq.append(m.embed_tokens(ids));
    return seq;
}

// ---------------------------------------------------------------------------
// prompt tuning
// ---------------------------------------------------------------------------

struct TuneConfig {
    double learning_rate = 8e-3;
    int epochs = 8;
    int batch_size = 8;
    std::uint64_t checkpoint_interval = 200;  // examples seen between snapshots
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t seed = 1;

    json to_json() const {
        json j;
        j["learning_rate"] = learning_rate;
        j["epochs"] = epochs;
        j["batch_size"] = batch_size;
        j["checkpoint_interval"] = checkpoint_interval;
        j["seed"] = seed;
        return j;
    }

    static TuneConfig from_json(const json& j) {
        TuneConfig c;
        if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
        if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
        if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
        if (j.contains("checkpoint_interval"))
            c.checkpoint_interval = j.at("checkpoint_interval").get<std::uint64_t>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

/// Train prompt vectors against the frozen model with Adam on a label
/// cross-entropy read at the final position. Snapshots are taken whenever
/// the examples-seen counter crosses a multiple of checkpoint_interval, plus
/// the initial state (step 0) and the final state. Model weights are never
/// written. A non-finite loss aborts tuning; checkpoints up to the last
/// good state are returned with the abort flagged.
inline CheckpointSet train_prompt(const Model& m, const ContinuousPrompt& init,
                                  const std::vector<LabeledExample>& train,
                                  const std::vector<std::string>& class_labels,
                                  const TuneConfig& cfg, const Vocabulary& vocab) {
    if (train.empty()) throw std::invalid_argument("train_prompt: empty training set");
    if (cfg.epochs < 1 || cfg.batch_size < 1 || cfg.checkpoint_interval < 1)
        throw std::invalid_argument("train_prompt: epochs, batch_size, checkpoint_interval >= 1");
    if (init.dim != m.cfg.hidden_dim)
        throw std::invalid_argument("train_prompt: prompt dimension does not match the model");

    std::vector<TokenId> label_ids;
    for (const auto& label : class_labels) {
        const auto ids = vocab.encode(label);
        if (ids.size() != 1)
            throw std::invalid_argument("train_prompt: label is not a single token: " + label);
        label_ids.push_back(ids[0]);
    }

    ContinuousPrompt prompt = init;
    prompt.step = 0;

    CheckpointSet set;
    set.checkpoints.push_back(prompt);

    const std::size_t param_count = prompt.vectors.size();
    Adam opt;
    opt.learning_rate = cfg.learning_rate;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.eps = cfg.eps;
    opt.reset(param_count);

    Rng rng(cfg.seed);
    ForwardTape tape;
    std::vector<float> dlogits, dinput;
    std::vector<float> grad(param_count);
    std::vector<int> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    std::uint64_t seen = 0;
    std::uint64_t next_snapshot = cfg.checkpoint_interval;

    const int n = prompt.length;
    const int d = prompt.dim;

    for (int epoch = 0; epoch < cfg.epochs && !set.aborted; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size() && !set.aborted;
             start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            const int batch = static_cast<int>(stop - start);
            std::fill(grad.begin(), grad.end(), 0.0f);
            double batch_loss = 0.0;
            for (std::size_t i = start; i < stop; ++i) {
                const LabeledExample& ex = train[order[i]];
                const auto label_it =
                    std::find(class_labels.begin(), class_labels.end(), ex.label);
                if (label_it == class_labels.end())
                    throw std::runtime_error("train_prompt: example label not in class list: " +
                                             ex.label);
                const TokenId target = label_ids[label_it - class_labels.begin()];

                EmbeddingSequence seq = render_classification_input(m, prompt, ex.text, vocab);
                forward_full(m, seq, tape);
                const std::vector<TargetAt> targets{{seq.length() - 1, target}};
                const double loss =
                    cross_entropy(tape.logits, tape.rows, m.cfg.vocab_size, targets, dlogits);
                batch_loss += loss / batch;
                const float rescale = 1.0f / static_cast<float>(batch);
                for (auto& g : dlogits) g *= rescale;
                backward(m, seq, tape, dlogits, &dinput, nullptr);
                for (int r = 0; r < n; ++r)
                    detail::axpy(grad.data() + static_cast<std::size_t>(r) * d, 1.0f,
                                 dinput.data() + static_cast<std::size_t>(r) * d, d);
            }

            if (!std::isfinite(batch_loss)) {
                set.aborted = true;
                set.abort_reason = "non-finite loss after " + std::to_string(seen) + " examples";
                break;
            }

            opt.step(prompt.vectors.data(), grad.data(), param_count);
            seen += batch;
            prompt.step = seen;
            while (seen >= next_snapshot) {
                set.checkpoints.push_back(prompt);
                next_snapshot += cfg.checkpoint_interval;
            }
        }
    }

    if (!set.aborted && set.checkpoints.back().step != seen) set.checkpoints.push_back(prompt);
    return set;
}

// ---------------------------------------------------------------------------
// prediction and accuracy
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<TokenId> single_token_label_ids(const std::vector<std::string>& class_labels,
                                                   const Vocabulary& vocab) {
    if (class_labels.empty()) throw std::invalid_argument("empty class label list");
    std::vector<TokenId> ids;
    for (const auto& label : class_labels) {
        const auto toks = vocab.encode(label);
        if (toks.size() != 1)
            throw std::invalid_argument("label is not a single token: " + label);
        ids.push_back(toks[0]);
    }
    return ids;
}

/// Constrained argmax over the label ids; ties resolve to the first listed.
inline int pick_label(const std::vector<float>& logits, const std::vector<TokenId>& label_ids) {
    int best = 0;
    float best_v = logits[label_ids[0]];
    for (std::size_t i = 1; i < label_ids.size(); ++i)
        if (logits[label_ids[i]] > best_v) {
            best_v = logits[label_ids[i]];
            best = static_cast<int>(i);
        }
    return best;
}

}  // namespace detail

/// Classify `text` by restricting the final-position distribution to the
/// class labels.
inline std::string predict_label(const Model& m, const ContinuousPrompt& p,
                                 const std::string& text,
                                 const std::vector<std::string>& class_labels,
                                 const Vocabulary& vocab) {
    const auto label_ids = detail::single_token_label_ids(class_labels, vocab);
    InferenceSession session(m);
    session.extend(render_classification_input(m, p, text, vocab));
    return class_labels[detail::pick_label(session.last_logits(), label_ids)];
}

/// Predictions for every example. The shared prefix (prompt rows plus
/// `text :`) is processed once and its cached state copied per example, so
/// results match predict_label exactly while skipping redundant work.
inline std::vector<std::string> predict_dataset(const Model& m, const ContinuousPrompt& p,
                                                const std::vector<LabeledExample>& dataset,
                                                const std::vector<std::string>& class_labels,
                                                const Vocabulary& vocab) {
    const auto label_ids = detail::single_token_label_ids(class_labels, vocab);
    if (p.dim != m.cfg.hidden_dim)
        throw std::invalid_argument("prompt dimension does not match the model");

    InferenceSession prefix(m);
    {
        EmbeddingSequence seq = p.as_sequence();
        seq.append(m.embed_tokens(std::vector<TokenId>{vocab.id("text"), vocab.colon_id()}));
        prefix.extend(seq);
    }

    std::vector<std::string> out;
    out.reserve(dataset.size());
    for (const auto& ex : dataset) {
        std::vector<TokenId> ids = vocab.encode(ex.text);
        ids.push_back(vocab.comma_id());
        ids.push_back(vocab.id("label"));
        ids.push_back(vocab.colon_id());
        InferenceSession session = prefix;
        session.extend(m.embed_tokens(ids));
        out.push_back(class_labels[detail::pick_label(session.last_logits(), label_ids)]);
    }
    return out;
}

/// Exact-match accuracy over a dataset.
inline double task_accuracy(const Model& m, const ContinuousPrompt& p,
                            const std::vector<LabeledExample>& dataset,
                            const std::vector<std::string>& class_labels,
                            const Vocabulary& vocab) {
    if (dataset.empty()) throw std::invalid_argument("task_accuracy: empty dataset");
    const auto preds = predict_dataset(m, p, dataset, class_labels, vocab);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        if (preds[i] == dataset[i].label) ++correct;
    return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

}  // namespace splab
