#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "splab/metrics.hpp"
#include "splab/prompt.hpp"
#include "splab/rng.hpp"

namespace splab {

// ---------------------------------------------------------------------------
// word groups from probe outputs
// ---------------------------------------------------------------------------

struct WordGroups {
    std::vector<std::pair<std::string, std::string>> biased;  // (word, correlated class)
    std::vector<std::string> common;                          // top 10 by frequency
    std::vector<std::string> random;                          // 10 uniform draws

    json to_json() const {
        json j;
        json b = json::array();
        for (const auto& [w, c] : biased) b.push_back({{"word", w}, {"class", c}});
        j["biased"] = b;
        j["common"] = common;
        j["random"] = random;
        return j;
    }
};

/// Tally of normalized tokens across probe outputs, minus stopwords, tokens
/// containing digits, and words of the probe prompt itself. `common` is the
/// ten most frequent remaining words (ties broken alphabetically); `random`
/// is ten distinct uniform draws from the rest.
inline WordGroups extract_word_groups(
    const std::vector<std::string>& probe_texts,
    const std::vector<std::pair<std::string, std::string>>& biased_words,
    const std::string& target_prompt_text, std::uint64_t seed) {
    std::set<std::string> excluded;
    for (const auto& tok : normalize_tokens(target_prompt_text)) excluded.insert(tok);

    std::map<std::string, int> counts;
    for (const auto& text : probe_texts)
        for (const auto& tok : normalize_tokens(text)) {
            if (is_stopword(tok)) continue;
            if (std::any_of(tok.begin(), tok.end(),
                            [](unsigned char c) { return std::isdigit(c); }))
                continue;
            if (excluded.count(tok)) continue;
            ++counts[tok];
        }

    std::vector<std::pair<std::string, int>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    constexpr std::size_t kGroupSize = 10;
    if (ranked.size() < 2 * kGroupSize)
        throw std::runtime_error("word groups: only " + std::to_string(ranked.size()) +
                                 " eligible words across probe outputs, need " +
                                 std::to_string(2 * kGroupSize));

    WordGroups groups;
    groups.biased = biased_words;
    for (std::size_t i = 0; i < kGroupSize; ++i) groups.common.push_back(ranked[i].first);

    std::vector<std::string> rest;
    for (std::size_t i = kGroupSize; i < ranked.size(); ++i) rest.push_back(ranked[i].first);
    Rng rng(seed);
    for (const std::size_t i : rng.sample_without_replacement(rest.size(), kGroupSize))
        groups.random.push_back(rest[i]);
    return groups;
}

// ---------------------------------------------------------------------------
// word counting
// ---------------------------------------------------------------------------

inline int count_word_occurrences(const std::string& text, const std::string& word) {
    int count = 0;
    for (const auto& tok : normalize_tokens(text))
        if (tok == word) ++count;
    return count;
}

/// Total occurrences of the group's words in `text` minus the same total in
/// `baseline_text` (the step-0 output of the same run).
inline int count_delta(const std::string& text, const std::string& baseline_text,
                       const std::vector<std::string>& group_words) {
    int now = 0, before = 0;
    for (const auto& w : group_words) {
        now += count_word_occurrences(text, w);
        before += count_word_occurrences(baseline_text, w);
    }
    return now - before;
}

// ---------------------------------------------------------------------------
// predictive bias
// ---------------------------------------------------------------------------

struct BiasMeasurement {
    std::string word;
    std::string correlated_class;
    double predicted_pct = 0.0;  // % of word-containing examples predicted as the class
    double actual_pct = 0.0;     // % actually labeled with the class
    double bias = 0.0;           // predicted_pct - actual_pct, percentage points
    std::size_t n_examples = 0;
};

/// Restricted to examples whose text contains `word`, the gap between the
/// predicted and actual share of the correlated class.
inline BiasMeasurement predictive_bias(const Model& m, const ContinuousPrompt& prompt,
                                       const std::vector<LabeledExample>& dataset,
                                       const std::string& word,
                                       const std::string& correlated_class,
                                       const std::vector<std::string>& class_labels,
                                       const Vocabulary& vocab) {
    std::vector<LabeledExample> subset;
    for (const auto& ex : dataset)
        if (count_word_occurrences(ex.text, word) > 0) subset.push_back(ex);
    if (subset.empty())
        throw std::runtime_error("predictive bias: no dataset example contains the word '" +
                                 word + "'");

    const auto preds = predict_dataset(m, prompt, subset, class_labels, vocab);
    std::size_t predicted = 0, actual = 0;
    for (std::size_t i = 0; i < subset.size(); ++i) {
        if (preds[i] == correlated_class) ++predicted;
        if (subset[i].label == correlated_class) ++actual;
    }
    BiasMeasurement out;
    out.word = word;
    out.correlated_class = correlated_class;
    out.n_examples = subset.size();
    out.predicted_pct = 100.0 * static_cast<double>(predicted) / subset.size();
    out.actual_pct = 100.0 * static_cast<double>(actual) / subset.size();
    out.bias = out.predicted_pct - out.actual_pct;
    return out;
}

// ---------------------------------------------------------------------------
// one-sided sign test
// ---------------------------------------------------------------------------

struct SignTestResult {
    int m = 0;  // nonzero paired differences
    int s = 0;  // positive differences
    double p_value = 1.0;
};

/// P[Bin(m, 1/2) >= s] over the nonzero differences a[i] - b[i]. Exact
/// binomial tail for m <= 64; normal approximation with continuity
/// correction above.
inline SignTestResult sign_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("sign_test: length mismatch");
    SignTestResult r;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d == 0.0) continue;
        ++r.m;
        if (d > 0.0) ++r.s;
    }
    if (r.m == 0) throw std::runtime_error("sign_test: no nonzero paired differences");

    if (r.m <= 64) {
        // P(k) = C(m,k) / 2^m via the multiplicative recurrence
        double pk = std::ldexp(1.0, -r.m);  // P(0)
        double tail = 0.0;
        for (int k = 0; k <= r.m; ++k) {
            if (k >= r.s) tail += pk;
            pk = pk * static_cast<double>(r.m - k) / static_cast<double>(k + 1);
        }
        r.p_value = std::min(tail, 1.0);
    } else {
        const double mean = r.m / 2.0;
        const double sd = std::sqrt(r.m / 4.0);
        const double z = (r.s - 0.5 - mean) / sd;
        r.p_value = 0.5 * std::erfc(z / std::sqrt(2.0));
    }
    return r;
}

// ---------------------------------------------------------------------------
// aggregate report
// ---------------------------------------------------------------------------

/// One tuning run's checkpoints and the probe output elicited from each.
struct BiasRunInput {
    std::string run_id;
    std::vector<ContinuousPrompt> checkpoints;  // ascending step, step 0 first
    std::vector<std::string> probe_texts;       // parallel to checkpoints
};

struct CountDeltaRow {
    std::string run_id;
    std::uint64_t step;
    std::string group;  // "biased" | "common" | "random"
    int delta;
};

struct BiasMeasurementRow {
    std::string run_id;
    std::uint64_t step;
    std::string word;
    std::string correlated_class;
    double predicted_pct, actual_pct, bias;
    bool word_present;  // word appears in this checkpoint's probe output
};

struct BiasReport {
    WordGroups groups;
    std::vector<CountDeltaRow> deltas;                 // per run x step x group
    std::vector<CountDeltaRow> aggregate_deltas;       // summed over runs (run_id "all")
    std::vector<BiasMeasurementRow> measurements;      // per run x step x biased word
    double mean_bias_present = 0.0, mean_bias_absent = 0.0;
    std::size_t n_present = 0, n_absent = 0;
    int pairs_m = 0, pairs_s = 0;
    double sign_test_p = 1.0;
    bool sufficient_data = false;

    json to_json() const {
        json j;
        j["groups"] = groups.to_json();
        json deltas_j = json::array();
        for (const auto& r : deltas)
            deltas_j.push_back(
                {{"run_id", r.run_id}, {"step", r.step}, {"group", r.group}, {"delta", r.delta}});
        j["deltas"] = deltas_j;
        json agg_j = json::array();
        for (const auto& r : aggregate_deltas)
            agg_j.push_back({{"step", r.step}, {"group", r.group}, {"delta", r.delta}});
        j["aggregate_deltas"] = agg_j;
        json meas_j = json::array();
        for (const auto& r : measurements)
            meas_j.push_back({{"run_id", r.run_id},
                              {"step", r.step},
                              {"word", r.word},
                              {"class", r.correlated_class},
                              {"predicted_pct", r.predicted_pct},
                              {"actual_pct", r.actual_pct},
                              {"bias", r.bias},
                              {"present", r.word_present}});
        j["measurements"] = meas_j;
        j["mean_bias_present"] = mean_bias_present;
        j["mean_bias_absent"] = mean_bias_absent;
        j["n_present"] = n_present;
        j["n_absent"] = n_absent;
        j["sign_test"] = {{"m", pairs_m}, {"s", pairs_s}, {"p_value", sign_test_p}};
        j["sufficient_data"] = sufficient_data;
        return j;
    }
};

/// Full diagnostic: count deltas per group against each run's step-0 output,
/// predictive bias for every planted word at every checkpoint, and a paired
/// sign test. Pairs are checkpoint steps: at each step, the mean bias over
/// runs whose probe output mentions the word versus runs whose output does
/// not; steps lacking either side are dropped. Fewer than one usable pair
/// flags the report insufficient instead of testing.
inline BiasReport bias_report(const Model& m, const Vocabulary& vocab,
                              const std::vector<std::string>& class_labels,
                              const std::vector<LabeledExample>& dataset,
                              const std::vector<BiasRunInput>& runs,
                              const std::vector<std::pair<std::string, std::string>>& biased_words,
                              const std::string& target_prompt_text, std::uint64_t seed) {
    if (runs.empty()) throw std::invalid_argument("bias_report: no runs");
    if (biased_words.empty()) throw std::invalid_argument("bias_report: no planted words");
    for (const auto& run : runs) {
        if (run.checkpoints.empty())
            throw std::invalid_argument("bias_report: run " + run.run_id + " has no checkpoints");
        if (run.checkpoints.size() != run.probe_texts.size())
            throw std::invalid_argument("bias_report: run " + run.run_id +
                                        " probe outputs do not match checkpoints");
        if (run.checkpoints.front().step != 0)
            throw std::invalid_argument("bias_report: run " + run.run_id +
                                        " must start at step 0");
    }

    BiasReport report;
    std::vector<std::string> all_texts;
    for (const auto& run : runs)
        all_texts.insert(all_texts.end(), run.probe_texts.begin(), run.probe_texts.end());
    report.groups = extract_word_groups(all_texts, biased_words, target_prompt_text, seed);

    std::vector<std::string> biased_only;
    for (const auto& [w, c] : biased_words) biased_only.push_back(w);
    const std::vector<std::pair<std::string, const std::vector<std::string>*>> group_list = {
        {"biased", &biased_only}, {"common", &report.groups.common},
        {"random", &report.groups.random}};

    std::map<std::pair<std::uint64_t, std::string>, int> agg;
    for (const auto& run : runs) {
        const std::string& baseline = run.probe_texts.front();
        for (std::size_t i = 0; i < run.checkpoints.size(); ++i) {
            const std::uint64_t step = run.checkpoints[i].step;
            for (const auto& [name, words] : group_list) {
                const int delta = count_delta(run.probe_texts[i], baseline, *words);
                report.deltas.push_back({run.run_id, step, name, delta});
                agg[{step, name}] += delta;
            }
        }
    }
    for (const auto& [key, delta] : agg)
        report.aggregate_deltas.push_back({"all", key.first, key.second, delta});

    double sum_present = 0.0, sum_absent = 0.0;
    std::map<std::uint64_t, std::pair<std::vector<double>, std::vector<double>>> by_step;
    for (const auto& run : runs) {
        for (std::size_t i = 0; i < run.checkpoints.size(); ++i) {
            const std::uint64_t step = run.checkpoints[i].step;
            for (const auto& [word, cls] : biased_words) {
                const BiasMeasurement meas = predictive_bias(
                    m, run.checkpoints[i], dataset, word, cls, class_labels, vocab);
                const bool present = count_word_occurrences(run.probe_texts[i], word) > 0;
                report.measurements.push_back({run.run_id, step, word, cls, meas.predicted_pct,
                                               meas.actual_pct, meas.bias, present});
                if (present) {
                    sum_present += meas.bias;
                    ++report.n_present;
                    by_step[step].first.push_back(meas.bias);
                } else {
                    sum_absent += meas.bias;
                    ++report.n_absent;
                    by_step[step].second.push_back(meas.bias);
                }
            }
        }
    }
    if (report.n_present > 0) report.mean_bias_present = sum_present / report.n_present;
    if (report.n_absent > 0) report.mean_bias_absent = sum_absent / report.n_absent;

    std::vector<double> a, b;
    for (const auto& [step, sides] : by_step) {
        if (sides.first.empty() || sides.second.empty()) continue;
        double ma = 0.0, mb = 0.0;
        for (const double v : sides.first) ma += v;
        for (const double v : sides.second) mb += v;
        a.push_back(ma / sides.first.size());
        b.push_back(mb / sides.second.size());
    }

    if (!a.empty()) {
        try {
            const SignTestResult r = sign_test(a, b);
            report.pairs_m = r.m;
            report.pairs_s = r.s;
            report.sign_test_p = r.p_value;
            report.sufficient_data = true;
        } catch (const std::runtime_error&) {
            report.sufficient_data = false;  // all paired differences were zero
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

inline std::string count_deltas_csv(const BiasReport& report) {
    std::string out = "run_id,step,group,delta\n";
    auto rows = report.deltas;
    std::sort(rows.begin(), rows.end(), [](const CountDeltaRow& x, const CountDeltaRow& y) {
        if (x.run_id != y.run_id) return x.run_id < y.run_id;
        if (x.step != y.step) return x.step < y.step;
        return x.group < y.group;
    });
    for (const auto& r : rows)
        out += r.run_id + "," + std::to_string(r.step) + "," + r.group + "," +
               std::to_string(r.delta) + "\n";
    return out;
}

inline std::string aggregate_deltas_csv(const BiasReport& report) {
    std::string out = "step,group,delta\n";
    for (const auto& r : report.aggregate_deltas)
        out += std::to_string(r.step) + "," + r.group + "," + std::to_string(r.delta) + "\n";
    return out;
}

inline std::string measurements_csv(const BiasReport& report) {
    std::string out = "run_id,step,word,class,predicted_pct,actual_pct,bias,present\n";
    auto rows = report.measurements;
    std::sort(rows.begin(), rows.end(),
              [](const BiasMeasurementRow& x, const BiasMeasurementRow& y) {
                  if (x.run_id != y.run_id) return x.run_id < y.run_id;
                  if (x.step != y.step) return x.step < y.step;
                  return x.word < y.word;
              });
    for (const auto& r : rows)
        out += r.run_id + "," + std::to_string(r.step) + "," + r.word + "," +
               r.correlated_class + "," + io::csv_number(r.predicted_pct) + "," +
               io::csv_number(r.actual_pct) + "," + io::csv_number(r.bias) + "," +
               (r.word_present ? "1" : "0") + "\n";
    return out;
}

}  // namespace splab
