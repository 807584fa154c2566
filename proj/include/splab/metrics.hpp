#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "splab/elicit.hpp"
#include "splab/io.hpp"
#include "splab/stopwords.hpp"

namespace splab {

// ---------------------------------------------------------------------------
// text normalization
// ---------------------------------------------------------------------------

/// Whitespace-split tokens, lowercased, with leading and trailing
/// punctuation stripped; empties dropped.
inline std::vector<std::string> normalize_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        std::size_t begin = 0, end = current.size();
        while (begin < end && !std::isalnum(static_cast<unsigned char>(current[begin]))) ++begin;
        while (end > begin && !std::isalnum(static_cast<unsigned char>(current[end - 1]))) --end;
        if (end > begin) {
            std::string tok = current.substr(begin, end - begin);
            for (auto& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            out.push_back(std::move(tok));
        }
        current.clear();
    };
    for (const char c : text) {
        if (std::isspace(static_cast<unsigned char>(c)))
            flush();
        else
            current.push_back(c);
    }
    flush();
    return out;
}

/// Normalized tokens with stopwords removed.
inline std::vector<std::string> remove_stopwords(const std::string& text) {
    std::vector<std::string> out;
    for (auto& tok : normalize_tokens(text))
        if (!is_stopword(tok)) out.push_back(std::move(tok));
    return out;
}

// ---------------------------------------------------------------------------
// class rate
// ---------------------------------------------------------------------------

namespace detail {

/// Whole-word phrase match: the label's normalized tokens appear as a
/// consecutive run inside the description's normalized tokens.
inline bool contains_phrase(const std::vector<std::string>& haystack,
                            const std::vector<std::string>& phrase) {
    if (phrase.empty() || phrase.size() > haystack.size()) return false;
    for (std::size_t i = 0; i + phrase.size() <= haystack.size(); ++i) {
        bool match = true;
        for (std::size_t j = 0; j < phrase.size(); ++j)
            if (haystack[i + j] != phrase[j]) {
                match = false;
                break;
            }
        if (match) return true;
    }
    return false;
}

}  // namespace detail

/// Fraction of class labels mentioned in the description, case-insensitive
/// whole-word matching after punctuation stripping.
inline double class_rate(const std::string& description,
                         const std::vector<std::string>& class_labels) {
    if (class_labels.empty()) throw std::invalid_argument("class_rate: empty class label list");
    const auto tokens = normalize_tokens(description);
    std::size_t matched = 0;
    for (const auto& label : class_labels)
        if (detail::contains_phrase(tokens, normalize_tokens(label))) ++matched;
    return static_cast<double>(matched) / static_cast<double>(class_labels.size());
}

// ---------------------------------------------------------------------------
// unigram overlap (clipped-count F1)
// ---------------------------------------------------------------------------

inline double rouge1(const std::vector<std::string>& candidate,
                     const std::vector<std::string>& reference) {
    if (candidate.empty() || reference.empty()) return 0.0;
    std::map<std::string, int> ref_counts;
    for (const auto& w : reference) ++ref_counts[w];
    std::map<std::string, int> cand_counts;
    for (const auto& w : candidate) ++cand_counts[w];
    int overlap = 0;
    for (const auto& [w, c] : cand_counts) {
        auto it = ref_counts.find(w);
        if (it != ref_counts.end()) overlap += std::min(c, it->second);
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / candidate.size();
    const double recall = static_cast<double>(overlap) / reference.size();
    return 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------
// reference sets
// ---------------------------------------------------------------------------

struct ReferenceSet {
    std::string task_id;
    std::vector<std::string> class_labels;
    std::vector<std::string> references;

    json to_json() const {
        json j;
        j["task_id"] = task_id;
        j["class_labels"] = class_labels;
        j["references"] = references;
        return j;
    }

    static ReferenceSet from_json(const json& j) {
        ReferenceSet r;
        r.task_id = j.at("task_id").get<std::string>();
        r.class_labels = j.at("class_labels").get<std::vector<std::string>>();
        r.references = j.at("references").get<std::vector<std::string>>();
        return r;
    }
};

/// Best unigram F1 against any reference, both sides stopword-filtered.
inline double rouge1_max(const std::string& description,
                         const std::vector<std::string>& references) {
    if (references.empty()) throw std::invalid_argument("rouge1_max: empty reference list");
    const auto cand = remove_stopwords(description);
    double best = 0.0;
    for (const auto& ref : references) best = std::max(best, rouge1(cand, remove_stopwords(ref)));
    return best;
}

// ---------------------------------------------------------------------------
// interpretability scoring
// ---------------------------------------------------------------------------

struct ScoreRecord {
    double class_rate_mean = 0.0;
    double rouge1_mean = 0.0;
    std::array<double, 3> class_rate_each{};
    std::array<double, 3> rouge1_each{};
    std::uint64_t checkpoint_step = 0;
    double accuracy = 0.0;   // task accuracy at this checkpoint, filled by the caller
    int prompt_length = 0;   // run metadata for trend grouping
    std::string run_id;

    json to_json() const {
        json j;
        j["class_rate"] = class_rate_mean;
        j["rouge1"] = rouge1_mean;
        j["class_rate_each"] = class_rate_each;
        j["rouge1_each"] = rouge1_each;
        j["checkpoint_step"] = checkpoint_step;
        j["accuracy"] = accuracy;
        j["prompt_length"] = prompt_length;
        j["run_id"] = run_id;
        return j;
    }

    static ScoreRecord from_json(const json& j) {
        ScoreRecord r;
        r.class_rate_mean = j.at("class_rate").get<double>();
        r.rouge1_mean = j.at("rouge1").get<double>();
        r.class_rate_each = j.at("class_rate_each").get<std::array<double, 3>>();
        r.rouge1_each = j.at("rouge1_each").get<std::array<double, 3>>();
        r.checkpoint_step = j.at("checkpoint_step").get<std::uint64_t>();
        r.accuracy = j.at("accuracy").get<double>();
        r.prompt_length = j.at("prompt_length").get<int>();
        r.run_id = j.at("run_id").get<std::string>();
        return r;
    }
};

/// Score one checkpoint from exactly three elicitations (distinct target
/// prompts): the mean class rate and mean best-reference unigram F1.
inline ScoreRecord interpretability(const std::vector<ElicitationResult>& results,
                                    const ReferenceSet& refs) {
    if (results.size() != 3)
        throw std::invalid_argument("interpretability: expected exactly 3 elicitations, got " +
                                    std::to_string(results.size()));
    ScoreRecord rec;
    rec.checkpoint_step = results[0].checkpoint_step;
    for (std::size_t i = 0; i < 3; ++i) {
        rec.class_rate_each[i] = class_rate(results[i].description_text, refs.class_labels);
        rec.rouge1_each[i] = rouge1_max(results[i].description_text, refs.references);
        rec.class_rate_mean += rec.class_rate_each[i] / 3.0;
        rec.rouge1_mean += rec.rouge1_each[i] / 3.0;
    }
    return rec;
}

// ---------------------------------------------------------------------------
// confusion matrix
// ---------------------------------------------------------------------------

/// counts[actual][predicted] over the fixed class order.
inline std::vector<std::vector<int>> confusion_matrix(const std::vector<std::string>& predicted,
                                                      const std::vector<std::string>& actual,
                                                      const std::vector<std::string>& classes) {
    if (predicted.size() != actual.size())
        throw std::invalid_argument("confusion_matrix: size mismatch");
    auto index_of = [&](const std::string& label) {
        const auto it = std::find(classes.begin(), classes.end(), label);
        if (it == classes.end())
            throw std::invalid_argument("confusion_matrix: unknown label: " + label);
        return static_cast<std::size_t>(it - classes.begin());
    };
    std::vector<std::vector<int>> counts(classes.size(), std::vector<int>(classes.size(), 0));
    for (std::size_t i = 0; i < predicted.size(); ++i)
        ++counts[index_of(actual[i])][index_of(predicted[i])];
    return counts;
}

}  // namespace splab
