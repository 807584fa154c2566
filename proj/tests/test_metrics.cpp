#include <gtest/gtest.h>

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "splab/metrics.hpp"
#include "splab/rng.hpp"

namespace {

using namespace splab;

// ---------------------------------------------------------------------------
// independent oracles, written against the documented behavior only
// ---------------------------------------------------------------------------

std::vector<std::string> oracle_normalize(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto emit = [&] {
        while (!word.empty() && !std::isalnum(static_cast<unsigned char>(word.front())))
            word.erase(word.begin());
        while (!word.empty() && !std::isalnum(static_cast<unsigned char>(word.back())))
            word.pop_back();
        if (!word.empty()) {
            for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            out.push_back(word);
        }
        word.clear();
    };
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c)))
            emit();
        else
            word.push_back(c);
    }
    emit();
    return out;
}

double oracle_rouge1(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    if (cand.empty() || ref.empty()) return 0.0;
    std::set<std::string> words(cand.begin(), cand.end());
    int overlap = 0;
    for (const auto& w : words) {
        const auto cc = std::count(cand.begin(), cand.end(), w);
        const auto rc = std::count(ref.begin(), ref.end(), w);
        overlap += static_cast<int>(std::min(cc, rc));
    }
    if (overlap == 0) return 0.0;
    const double p = static_cast<double>(overlap) / cand.size();
    const double r = static_cast<double>(overlap) / ref.size();
    return 2.0 * p * r / (p + r);
}

double oracle_class_rate(const std::string& description, const std::vector<std::string>& labels) {
    const auto hay = oracle_normalize(description);
    int matched = 0;
    for (const auto& label : labels) {
        const auto phrase = oracle_normalize(label);
        bool found = false;
        if (!phrase.empty()) {
            for (std::size_t i = 0; i + phrase.size() <= hay.size() && !found; ++i)
                found = std::equal(phrase.begin(), phrase.end(), hay.begin() + i);
        }
        if (found) ++matched;
    }
    return static_cast<double>(matched) / labels.size();
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

TEST(Normalize, LowercasesStripsPunctuationAndSplits) {
    EXPECT_EQ(normalize_tokens("Identify the sentiment of a text"),
              (std::vector<std::string>{"identify", "the", "sentiment", "of", "a", "text"}));
    EXPECT_EQ(normalize_tokens("  (Red),  BLUE!  "), (std::vector<std::string>{"red", "blue"}));
    EXPECT_EQ(normalize_tokens("..."), std::vector<std::string>{});
    EXPECT_EQ(normalize_tokens(""), std::vector<std::string>{});
    // Interior punctuation survives; only edges are stripped.
    EXPECT_EQ(normalize_tokens("o'clock"), (std::vector<std::string>{"o'clock"}));
}

TEST(Normalize, StopwordRemovalMatchesBundledList) {
    EXPECT_EQ(remove_stopwords("Identify the sentiment of a text"),
              (std::vector<std::string>{"identify", "sentiment", "text"}));
    EXPECT_EQ(remove_stopwords("is the a of"), std::vector<std::string>{});
}

TEST(Normalize, StopwordRemovalIsIdempotent) {
    const std::string text = "Classify the MOOD of this sentence, good or bad.";
    const auto once = remove_stopwords(text);
    EXPECT_EQ(remove_stopwords(join(once)), once);
}

// ---------------------------------------------------------------------------
// class rate
// ---------------------------------------------------------------------------

TEST(ClassRate, HalfWhenOneOfTwoLabelsAppears) {
    EXPECT_DOUBLE_EQ(class_rate("the text is positive overall", {"positive", "negative"}), 0.5);
    EXPECT_DOUBLE_EQ(class_rate("labels are positive , negative", {"positive", "negative"}), 1.0);
    EXPECT_DOUBLE_EQ(class_rate("nothing relevant here", {"positive", "negative"}), 0.0);
    EXPECT_DOUBLE_EQ(
        class_rate("world sports business stories", {"world", "sports", "business", "tech"}),
        0.75);
}

TEST(ClassRate, MatchingIsWholeWordCaseInsensitiveAndPunctuationProof) {
    EXPECT_DOUBLE_EQ(class_rate("positivity is not a label", {"positive"}), 0.0);
    EXPECT_DOUBLE_EQ(class_rate("judged POSITIVE!", {"positive"}), 1.0);
    EXPECT_DOUBLE_EQ(class_rate("(negative)", {"negative"}), 1.0);
}

TEST(ClassRate, MultiWordLabelsMatchAsConsecutivePhrases) {
    EXPECT_DOUBLE_EQ(class_rate("either spam or not spam", {"not spam", "spam"}), 1.0);
    // "not ... spam" with a word between is not a phrase match.
    EXPECT_DOUBLE_EQ(class_rate("not the spam", {"not spam"}), 0.0);
}

TEST(ClassRate, AddingAMentionedLabelNeverLowersTheRate) {
    Rng rng(7);
    const std::vector<std::string> pool{"alpha", "beta", "gamma", "delta", "epsilon"};
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::string> words;
        for (int i = 0; i < 6; ++i) words.push_back(pool[rng.below(pool.size())]);
        const std::vector<std::string> labels{"alpha", "beta"};
        const double before = class_rate(join(words), labels);
        words.push_back("alpha");
        EXPECT_GE(class_rate(join(words), labels), before);
    }
}

TEST(ClassRate, EmptyLabelListThrows) {
    EXPECT_THROW(class_rate("anything", {}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// unigram F1
// ---------------------------------------------------------------------------

TEST(Rouge1, ClosedFormCases) {
    const std::vector<std::string> x{"identify", "sentiment", "positive", "negative"};
    const std::vector<std::string> y{"sentiment", "sentence", "positive", "negative"};
    EXPECT_DOUBLE_EQ(rouge1(x, y), 0.75);
    EXPECT_DOUBLE_EQ(rouge1(x, x), 1.0);
    EXPECT_DOUBLE_EQ(rouge1(x, {"other", "words"}), 0.0);
    EXPECT_DOUBLE_EQ(rouge1({}, y), 0.0);
    EXPECT_DOUBLE_EQ(rouge1(x, {}), 0.0);
}

TEST(Rouge1, CountsAreClippedPerWord) {
    // cand has three "a", ref has one: overlap clips to 1, P=1/3, R=1.
    EXPECT_DOUBLE_EQ(rouge1({"aa", "aa", "aa"}, {"aa"}), 0.5);
    // Two on each side: full overlap.
    EXPECT_DOUBLE_EQ(rouge1({"aa", "aa"}, {"aa", "aa"}), 1.0);
}

TEST(Rouge1, F1IsSymmetric) {
    Rng rng(11);
    const std::vector<std::string> pool{"p", "q", "r", "s", "t"};
    for (int trial = 0; trial < 60; ++trial) {
        std::vector<std::string> a, b;
        for (std::size_t i = 0; i < 1 + rng.below(6); ++i) a.push_back(pool[rng.below(5)]);
        for (std::size_t i = 0; i < 1 + rng.below(6); ++i) b.push_back(pool[rng.below(5)]);
        EXPECT_DOUBLE_EQ(rouge1(a, b), rouge1(b, a));
    }
}

TEST(Rouge1, MatchesIndependentOracleOnRandomInstances) {
    Rng rng(13);
    const std::vector<std::string> pool{"u", "v", "w", "x1", "y1", "z1"};
    for (int trial = 0; trial < 80; ++trial) {
        std::vector<std::string> a, b;
        for (std::size_t i = 0; i < rng.below(8); ++i) a.push_back(pool[rng.below(pool.size())]);
        for (std::size_t i = 0; i < rng.below(8); ++i) b.push_back(pool[rng.below(pool.size())]);
        EXPECT_DOUBLE_EQ(rouge1(a, b), oracle_rouge1(a, b)) << "trial " << trial;
    }
}

// ---------------------------------------------------------------------------
// best-reference scoring
// ---------------------------------------------------------------------------

TEST(Rouge1Max, PicksTheBestReferenceAfterStopwordRemoval) {
    // Against the candidate, the three references score 0.4, 0.75 and 0.6.
    const std::string description = "identify the sentiment positive and negative";
    const std::vector<std::string> refs{
        "identify",                                  // overlap 1 of 4 vs 1 -> 0.4
        "the sentiment of a sentence positive negative",  // overlap 3 -> 0.75
        "sentiment positive negative apple banana cherry" // overlap 3 of 4 vs 6 -> 0.6
    };
    EXPECT_DOUBLE_EQ(rouge1_max(description, {refs[0]}), 0.4);
    EXPECT_DOUBLE_EQ(rouge1_max(description, {refs[1]}), 0.75);
    EXPECT_DOUBLE_EQ(rouge1_max(description, {refs[2]}), 0.6);
    EXPECT_DOUBLE_EQ(rouge1_max(description, refs), 0.75);
}

TEST(Rouge1Max, ExactReferenceScoresOne) {
    const std::string ref = "classify the mood of this sentence";
    EXPECT_DOUBLE_EQ(rouge1_max(ref, {"unrelated words entirely", ref}), 1.0);
}

TEST(Rouge1Max, AddingAReferenceNeverDecreasesTheScore) {
    Rng rng(17);
    const std::vector<std::string> pool{"mood", "tone", "shade", "pitch", "tempo"};
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<std::string> cand, r1, r2;
        for (int i = 0; i < 4; ++i) cand.push_back(pool[rng.below(pool.size())]);
        for (int i = 0; i < 4; ++i) r1.push_back(pool[rng.below(pool.size())]);
        for (int i = 0; i < 4; ++i) r2.push_back(pool[rng.below(pool.size())]);
        const double one = rouge1_max(join(cand), {join(r1)});
        const double two = rouge1_max(join(cand), {join(r1), join(r2)});
        EXPECT_GE(two, one);
    }
}

TEST(Rouge1Max, EmptyReferenceListThrows) {
    EXPECT_THROW(rouge1_max("anything", {}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// interpretability record
// ---------------------------------------------------------------------------

ElicitationResult result_with_text(const std::string& text) {
    ElicitationResult r;
    r.description_text = text;
    r.checkpoint_step = 600;
    return r;
}

TEST(Interpretability, AveragesExactlyThreeSubScores) {
    ReferenceSet refs;
    refs.class_labels = {"positive", "negative"};
    refs.references = {"identify the sentiment positive negative"};

    const std::vector<ElicitationResult> results{
        result_with_text("identify the sentiment positive negative"),  // cr 1.0, r1 1.0
        result_with_text("positive things only"),                      // cr 0.5
        result_with_text("unrelated entirely")};                       // cr 0.0, r1 0.0

    const ScoreRecord rec = interpretability(results, refs);
    EXPECT_EQ(rec.checkpoint_step, 600u);
    EXPECT_DOUBLE_EQ(rec.class_rate_each[0], 1.0);
    EXPECT_DOUBLE_EQ(rec.class_rate_each[1], 0.5);
    EXPECT_DOUBLE_EQ(rec.class_rate_each[2], 0.0);
    EXPECT_NEAR(rec.class_rate_mean, 0.5, 1e-12);
    EXPECT_DOUBLE_EQ(rec.rouge1_each[0], 1.0);
    EXPECT_DOUBLE_EQ(rec.rouge1_each[2], 0.0);
    EXPECT_NEAR(rec.rouge1_mean,
                (rec.rouge1_each[0] + rec.rouge1_each[1] + rec.rouge1_each[2]) / 3.0, 1e-12);

    // The mean sits inside the sub-score range.
    const auto [lo, hi] =
        std::minmax({rec.class_rate_each[0], rec.class_rate_each[1], rec.class_rate_each[2]});
    EXPECT_GE(rec.class_rate_mean, lo);
    EXPECT_LE(rec.class_rate_mean, hi);
}

TEST(Interpretability, PermutationOfResultsKeepsTheMeans) {
    ReferenceSet refs;
    refs.class_labels = {"good", "bad"};
    refs.references = {"judge the mood good bad", "classify mood"};
    std::vector<ElicitationResult> results{result_with_text("good mood text"),
                                           result_with_text("bad judge"),
                                           result_with_text("mood mood mood")};
    const ScoreRecord base = interpretability(results, refs);
    std::swap(results[0], results[2]);
    const ScoreRecord perm = interpretability(results, refs);
    EXPECT_DOUBLE_EQ(base.class_rate_mean, perm.class_rate_mean);
    EXPECT_DOUBLE_EQ(base.rouge1_mean, perm.rouge1_mean);
}

TEST(Interpretability, WrongResultCountIsRejectedWithTheCount) {
    ReferenceSet refs;
    refs.class_labels = {"good", "bad"};
    refs.references = {"judge the mood"};
    const std::vector<ElicitationResult> two{result_with_text("x"), result_with_text("y")};
    try {
        interpretability(two, refs);
        FAIL() << "expected rejection";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("got 2"), std::string::npos);
    }
}

TEST(Interpretability, ScoreRecordJsonRoundtrip) {
    ScoreRecord rec;
    rec.class_rate_mean = 0.5;
    rec.rouge1_mean = 0.25;
    rec.class_rate_each = {1.0, 0.5, 0.0};
    rec.rouge1_each = {0.75, 0.0, 0.0};
    rec.checkpoint_step = 1200;
    rec.accuracy = 0.9625;
    rec.prompt_length = 14;
    rec.run_id = "run-3";
    const ScoreRecord back = ScoreRecord::from_json(rec.to_json());
    EXPECT_DOUBLE_EQ(back.class_rate_mean, 0.5);
    EXPECT_DOUBLE_EQ(back.rouge1_mean, 0.25);
    EXPECT_EQ(back.class_rate_each, rec.class_rate_each);
    EXPECT_EQ(back.rouge1_each, rec.rouge1_each);
    EXPECT_EQ(back.checkpoint_step, 1200u);
    EXPECT_DOUBLE_EQ(back.accuracy, 0.9625);
    EXPECT_EQ(back.prompt_length, 14);
    EXPECT_EQ(back.run_id, "run-3");
}

TEST(Interpretability, ReferenceSetJsonRoundtrip) {
    ReferenceSet refs;
    refs.task_id = "task-9";
    refs.class_labels = {"good", "bad"};
    refs.references = {"judge the mood", "classify the feeling"};
    const ReferenceSet back = ReferenceSet::from_json(refs.to_json());
    EXPECT_EQ(back.task_id, "task-9");
    EXPECT_EQ(back.class_labels, refs.class_labels);
    EXPECT_EQ(back.references, refs.references);
}

// ---------------------------------------------------------------------------
// confusion matrix
// ---------------------------------------------------------------------------

TEST(Confusion, CountsActualByPredicted) {
    const std::vector<std::string> truths{"A", "A", "B", "B"};
    const std::vector<std::string> preds{"A", "B", "B", "B"};
    const auto counts = confusion_matrix(preds, truths, {"A", "B"});
    ASSERT_EQ(counts.size(), 2u);
    EXPECT_EQ(counts[0], (std::vector<int>{1, 1}));
    EXPECT_EQ(counts[1], (std::vector<int>{0, 2}));
}

TEST(Confusion, PerfectPredictionsAreDiagonal) {
    const std::vector<std::string> truths{"A", "B", "C", "B", "A"};
    const auto counts = confusion_matrix(truths, truths, {"A", "B", "C"});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            if (i != j) EXPECT_EQ(counts[i][j], 0);
    EXPECT_EQ(counts[0][0], 2);
    EXPECT_EQ(counts[1][1], 2);
    EXPECT_EQ(counts[2][2], 1);
}

TEST(Confusion, RandomInstancesMatchBruteForceAndInvariants) {
    Rng rng(23);
    const std::vector<std::string> classes{"A", "B", "C"};
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 1 + rng.below(30);
        std::vector<std::string> truths, preds;
        for (std::size_t i = 0; i < n; ++i) {
            truths.push_back(classes[rng.below(3)]);
            preds.push_back(classes[rng.below(3)]);
        }
        const auto counts = confusion_matrix(preds, truths, classes);

        int total = 0, trace = 0, correct = 0;
        for (std::size_t i = 0; i < 3; ++i) {
            int row_sum = 0, row_truths = 0;
            for (std::size_t j = 0; j < 3; ++j) {
                int brute = 0;
                for (std::size_t k = 0; k < n; ++k)
                    if (truths[k] == classes[i] && preds[k] == classes[j]) ++brute;
                EXPECT_EQ(counts[i][j], brute);
                row_sum += counts[i][j];
                total += counts[i][j];
            }
            for (std::size_t k = 0; k < n; ++k)
                if (truths[k] == classes[i]) ++row_truths;
            EXPECT_EQ(row_sum, row_truths);
            trace += counts[i][i];
        }
        for (std::size_t k = 0; k < n; ++k)
            if (truths[k] == preds[k]) ++correct;
        EXPECT_EQ(total, static_cast<int>(n));
        EXPECT_EQ(trace, correct);
    }
}

TEST(Confusion, RejectsMismatchedSizesAndUnknownLabels) {
    EXPECT_THROW(confusion_matrix({"A"}, {"A", "B"}, {"A", "B"}), std::invalid_argument);
    EXPECT_THROW(confusion_matrix({"Z"}, {"A"}, {"A", "B"}), std::invalid_argument);
    EXPECT_THROW(confusion_matrix({"A"}, {"Z"}, {"A", "B"}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// randomized cross-checks against the independent oracles
// ---------------------------------------------------------------------------

TEST(MetricOracles, ClassRateMatchesOracleOnRandomInstances) {
    Rng rng(29);
    const std::vector<std::string> pool{"Alpha", "beta", "GAMMA", "delta,", "(beta)", "beta."};
    for (int trial = 0; trial < 80; ++trial) {
        std::vector<std::string> words;
        for (std::size_t i = 0; i < rng.below(10); ++i)
            words.push_back(pool[rng.below(pool.size())]);
        const std::string description = join(words);
        const std::vector<std::string> labels{"alpha", "beta", "gamma delta"};
        EXPECT_DOUBLE_EQ(class_rate(description, labels), oracle_class_rate(description, labels))
            << description;
    }
}

TEST(MetricOracles, NormalizeMatchesOracleOnRandomInstances) {
    Rng rng(31);
    const std::vector<std::string> pool{"Word", "mix,", "(UP)", "low", "12x", "''", "a-b",
                                        "end."};
    for (int trial = 0; trial < 80; ++trial) {
        std::vector<std::string> words;
        for (std::size_t i = 0; i < rng.below(8); ++i)
            words.push_back(pool[rng.below(pool.size())]);
        const std::string text = join(words);
        EXPECT_EQ(normalize_tokens(text), oracle_normalize(text)) << text;
    }
}

}  // namespace
