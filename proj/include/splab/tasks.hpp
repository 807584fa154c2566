#pragma once

#include <array>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "splab/rng.hpp"
#include "splab/vocab.hpp"

namespace splab {

/// A synthetic classification task: a short description, 2..6 single-token
/// class labels, per-class signal words that make examples separable, and an
/// optional planted spuriously-correlated word.
struct TaskSpec {
    std::string task_id;
    std::string topic;
    std::string description_text;                    // canonical description
    std::vector<std::string> description_variants;   // [0] == description_text
    std::vector<std::string> class_labels;
    std::map<std::string, std::vector<std::string>> signal_map;  // label -> signal words
    std::map<std::string, std::string> bias_map;                 // label -> planted word
    double bias_strength = 0.0;

    json to_json() const {
        json j;
        j["task_id"] = task_id;
        j["topic"] = topic;
        j["description"] = description_text;
        j["description_variants"] = description_variants;
        j["class_labels"] = class_labels;
        j["signal_map"] = signal_map;
        j["bias_map"] = bias_map;
        j["bias_strength"] = bias_strength;
        return j;
    }

    static TaskSpec from_json(const json& j) {
        TaskSpec t;
        t.task_id = j.at("task_id").get<std::string>();
        t.topic = j.at("topic").get<std::string>();
        t.description_text = j.at("description").get<std::string>();
        t.description_variants = j.at("description_variants").get<std::vector<std::string>>();
        t.class_labels = j.at("class_labels").get<std::vector<std::string>>();
        t.signal_map = j.at("signal_map").get<std::map<std::string, std::vector<std::string>>>();
        t.bias_map = j.at("bias_map").get<std::map<std::string, std::string>>();
        t.bias_strength = j.at("bias_strength").get<double>();
        return t;
    }
};

struct LabeledExample {
    std::string text;
    std::string label;
};

namespace world_detail {

inline const std::vector<std::string>& description_templates() {
    static const std::vector<std::string> t = {
        "identify the @ of this text",
        "classify the @ of a sentence",
        "determine the @ in this text",
        "categorize this text by its @",
        "judge the @ of the sentence",
        "classify a text by the @",
        "identify the @ in a sentence",
        "determine the @ of this text",
    };
    return t;
}

inline std::string instantiate_template(const std::string& tpl, const std::string& topic) {
    std::string out;
    for (char c : tpl) {
        if (c == '@')
            out += topic;
        else
            out.push_back(c);
    }
    return out;
}

inline const std::vector<std::string>& template_words() {
    static const std::vector<std::string> w = {
        "identify", "classify", "determine", "categorize", "judge", "the", "of",
        "this", "a", "in", "by", "its", "text", "sentence",
    };
    return w;
}

inline const std::vector<std::string>& probe_words() {
    static const std::vector<std::string> w = {
        "respond", "with", "short", ".", "what", "features", "are", "used",
        "for", "classifying", "each", "label", "following", "task",
    };
    return w;
}

/// Deterministic synthetic word inventory: 2-3 syllable consonant-vowel
/// words, deduplicated against everything already in the vocabulary.
inline std::vector<std::string> make_words(Vocabulary& vocab, std::size_t count, Rng& rng) {
    static const char* consonants = "bdfgklmnprstvz";
    static const char* vowels = "aeiou";
    std::vector<std::string> out;
    out.reserve(count);
    std::unordered_set<std::string> seen;
    int guard = 0;
    while (out.size() < count) {
        const int syllables = 2 + static_cast<int>(rng.below(2));
        std::string w;
        for (int s = 0; s < syllables; ++s) {
            w.push_back(consonants[rng.below(14)]);
            w.push_back(vowels[rng.below(5)]);
        }
        if (!vocab.contains(w) && seen.insert(w).second) {
            vocab.add(w);
            out.push_back(w);
        } else if (++guard > 100000) {
            throw std::runtime_error("synthetic word inventory exhausted");
        }
    }
    return out;
}

}  // namespace world_detail

/// The text of the feature-elicitation probe. Rendered as vocabulary tokens;
/// the trailing colon is produced by the prompt builder.
inline std::string feature_probe_text() {
    return "respond with a short sentence . "
           "what features are used for classifying each label in the following task";
}

/// Reference descriptions for scoring: every phrasing template instantiated
/// with the task's topic, followed by the class list.
inline std::vector<std::string> make_reference_texts(const TaskSpec& task) {
    std::vector<std::string> refs;
    for (const auto& tpl : world_detail::description_templates()) {
        std::string text = world_detail::instantiate_template(tpl, task.topic) + " :";
        for (std::size_t i = 0; i < task.class_labels.size(); ++i) {
            if (i) text += " ,";
            text += " " + task.class_labels[i];
        }
        refs.push_back(text);
    }
    return refs;
}

/// Allocates task ingredients (topic, labels, signal words, planted words)
/// from finite seeded pools so that distinct tasks never share words.
/// Construction registers every pool word plus the description-template and
/// probe vocabulary in `vocab`.
class TaskFactory {
public:
    static constexpr int kSignalsPerClass = 3;

    TaskFactory(Vocabulary& vocab, std::uint64_t world_seed)
        : vocab_(vocab) {
        for (const auto& w : world_detail::template_words()) vocab.add(w);
        for (const auto& w : world_detail::probe_words()) vocab.add(w);
        Rng rng(world_seed);
        topics_ = world_detail::make_words(vocab, 32, rng);
        labels_ = world_detail::make_words(vocab, 96, rng);
        signals_ = world_detail::make_words(vocab, 288, rng);
        planted_ = world_detail::make_words(vocab, 24, rng);
        fillers_ = world_detail::make_words(vocab, 96, rng);
    }

    const std::vector<std::string>& fillers() const { return fillers_; }

    /// Deterministic in `seed` for a given factory state. Draws are removed
    /// from the pools, so subsequent tasks get disjoint words.
    TaskSpec make_task(std::uint64_t seed, int num_classes, bool with_bias,
                       double bias_strength) {
        if (num_classes < 2 || num_classes > 6)
            throw std::invalid_argument("make_task: num_classes must be in 2..6");
        if (topics_.empty() || labels_.size() < static_cast<std::size_t>(num_classes) ||
            signals_.size() < static_cast<std::size_t>(num_classes * kSignalsPerClass) ||
            (with_bias && planted_.empty()))
            throw std::runtime_error("make_task: vocabulary exhausted");

        Rng rng(seed);
        TaskSpec t;
        t.task_id = "task-" + io::hex64(seed).substr(8);
        t.topic = draw(topics_, rng);

        const auto& templates = world_detail::description_templates();
        // Three description variants per task; the canonical one first.
        auto variant_ids = rng.sample_without_replacement(templates.size(), 3);
        for (auto vi : variant_ids)
            t.description_variants.push_back(
                world_detail::instantiate_template(templates[vi], t.topic));
        t.description_text = t.description_variants.front();

        for (int c = 0; c < num_classes; ++c) t.class_labels.push_back(draw(labels_, rng));
        for (const auto& label : t.class_labels) {
            std::vector<std::string> sig;
            for (int s = 0; s < kSignalsPerClass; ++s) sig.push_back(draw(signals_, rng));
            t.signal_map[label] = sig;
        }
        if (with_bias) {
            t.bias_map[t.class_labels.front()] = draw(planted_, rng);
            t.bias_strength = bias_strength;
        }
        return t;
    }

private:
    std::string draw(std::vector<std::string>& pool, Rng& rng) {
        const std::size_t i = static_cast<std::size_t>(rng.below(pool.size()));
        std::string w = pool[i];
        pool[i] = pool.back();
        pool.pop_back();
        return w;
    }

    Vocabulary& vocab_;
    std::vector<std::string> topics_;
    std::vector<std::string> labels_;
    std::vector<std::string> signals_;
    std::vector<std::string> planted_;
    std::vector<std::string> fillers_;
};

/// Sample one example text for `label`: one or two of the class's signal
/// words, fillers, and possibly the planted word, in shuffled order.
inline std::vector<std::string> sample_example_words(const TaskSpec& task,
                                                     const std::string& label,
                                                     const std::vector<std::string>& fillers,
                                                     Rng& rng) {
    const auto sig_it = task.signal_map.find(label);
    if (sig_it == task.signal_map.end())
        throw std::invalid_argument("sample_example_words: unknown label " + label);
    const auto& signals = sig_it->second;

    std::vector<std::string> words;
    const int n_signal = 1 + static_cast<int>(rng.below(2));
    auto picks = rng.sample_without_replacement(signals.size(),
                                                std::min<std::size_t>(n_signal, signals.size()));
    for (auto p : picks) words.push_back(signals[p]);

    const int n_filler = 3 + static_cast<int>(rng.below(3));
    for (int i = 0; i < n_filler; ++i)
        words.push_back(fillers[rng.below(fillers.size())]);

    if (!task.bias_map.empty()) {
        const auto& [bias_label, bias_word] = *task.bias_map.begin();
        const double p = (label == bias_label) ? task.bias_strength : task.bias_strength / 4.0;
        if (rng.bernoulli(p)) words.push_back(bias_word);
    }
    rng.shuffle(words);
    return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
    std::string s;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) s.push_back(' ');
        s += words[i];
    }
    return s;
}

struct DatasetSplits {
    std::vector<LabeledExample> train, val, test;
};

/// Disjoint, class-balanced (up to remainder) splits, deterministic in seed.
/// Texts are deduplicated across all three splits.
inline DatasetSplits split_dataset(const TaskSpec& task,
                                   const std::vector<std::string>& fillers,
                                   std::size_t train_n, std::size_t val_n, std::size_t test_n,
                                   std::uint64_t seed) {
    if (train_n < 1 || val_n < 1 || test_n < 1)
        throw std::invalid_argument("split_dataset: all sizes must be >= 1");

    Rng rng(seed);
    std::unordered_set<std::string> seen;
    auto fill = [&](std::vector<LabeledExample>& out, std::size_t n) {
        const std::size_t num_classes = task.class_labels.size();
        std::size_t attempts = 0;
        const std::size_t max_attempts = 200 * n + 10000;
        for (std::size_t i = 0; i < n;) {
            // round-robin over classes balances up to the remainder
            const auto& label = task.class_labels[i % num_classes];
            const std::string text =
                join_words(sample_example_words(task, label, fillers, rng));
            if (++attempts > max_attempts)
                throw std::runtime_error(
                    "split_dataset: requested size exceeds generator capacity");
            if (!seen.insert(text).second) continue;
            out.push_back({text, label});
            ++i;
        }
    };
    DatasetSplits s;
    fill(s.train, train_n);
    fill(s.val, val_n);
    fill(s.test, test_n);
    return s;
}

// ---- dataset JSONL I/O ----

inline void write_jsonl_dataset(const std::filesystem::path& path,
                                const std::vector<LabeledExample>& examples,
                                const std::string& task_id) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (const auto& ex : examples) {
        json j;
        j["text"] = ex.text;
        j["label"] = ex.label;
        j["task_id"] = task_id;
        os << j.dump() << '\n';
    }
}

inline std::vector<LabeledExample> read_jsonl_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::vector<LabeledExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            out.push_back({j.at("text").get<std::string>(), j.at("label").get<std::string>()});
        } catch (const std::exception& e) {
            throw std::runtime_error("malformed dataset line " + std::to_string(lineno) + " in " +
                                     path.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace splab
