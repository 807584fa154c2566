#pragma once

#include <string>
#include <vector>

#include "splab/tasks.hpp"
#include "splab/vocab.hpp"

namespace splab {

/// Episode mix for the pretraining corpus. An episode is one of:
///   listing        "desc : c1 , c2 | desc : c1 , c2 , c3 | <eot>"
///   classification "desc text : w w w w , label : c <eot>"
///   probe          "<probe text> : desc : s1 s2 s3 | <eot>"
/// Listing episodes teach the few-shot description/class-list pattern,
/// classification episodes teach label prediction from example text, and
/// probe episodes teach naming a task's signal words.
struct CorpusConfig {
    std::size_t episodes = 20000;
    double listing_fraction = 0.35;
    double classification_fraction = 0.50;  // probe fraction is the remainder
    int min_demos = 2;
    int max_demos = 3;
};

inline std::vector<TokenId> render_listing_line(const Vocabulary& vocab,
                                                const std::string& description,
                                                const std::vector<std::string>& labels) {
    std::vector<TokenId> ids = vocab.encode(description);
    ids.push_back(vocab.colon_id());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (i) ids.push_back(vocab.comma_id());
        ids.push_back(vocab.id(labels[i]));
    }
    ids.push_back(vocab.delimiter_id());
    return ids;
}

inline std::vector<TokenId> make_corpus(const Vocabulary& vocab,
                                        const std::vector<TaskSpec>& tasks,
                                        const std::vector<std::string>& fillers,
                                        const CorpusConfig& cfg, std::uint64_t seed) {
    if (tasks.empty()) throw std::invalid_argument("make_corpus: no tasks");
    Rng rng(seed);
    std::vector<TokenId> stream;
    stream.reserve(cfg.episodes * 16);

    const std::vector<TokenId> probe_prefix = vocab.encode(feature_probe_text());

    auto pick_task = [&]() -> const TaskSpec& { return tasks[rng.below(tasks.size())]; };
    auto pick_desc = [&](const TaskSpec& t) -> const std::string& {
        return t.description_variants[rng.below(t.description_variants.size())];
    };
    auto append = [&](const std::vector<TokenId>& ids) {
        stream.insert(stream.end(), ids.begin(), ids.end());
    };

    for (std::size_t e = 0; e < cfg.episodes; ++e) {
        const double u = rng.uniform();
        if (u < cfg.listing_fraction) {
            const int demos =
                cfg.min_demos + static_cast<int>(rng.below(cfg.max_demos - cfg.min_demos + 1));
            for (int d = 0; d < demos; ++d) {
                const TaskSpec& t = pick_task();
                append(render_listing_line(vocab, pick_desc(t), t.class_labels));
            }
        } else if (u < cfg.listing_fraction + cfg.classification_fraction) {
            const TaskSpec& t = pick_task();
            const std::string& label = t.class_labels[rng.below(t.class_labels.size())];
            append(vocab.encode(pick_desc(t)));
            append({vocab.id("text"), vocab.colon_id()});
            for (const auto& w : sample_example_words(t, label, fillers, rng))
                stream.push_back(vocab.id(w));
            append({vocab.comma_id(), vocab.id("label"), vocab.colon_id(), vocab.id(label)});
        } else {
            const TaskSpec& t = pick_task();
            append(probe_prefix);
            append({vocab.colon_id()});
            append(vocab.encode(pick_desc(t)));
            append({vocab.colon_id()});
            std::vector<std::string> features;
            for (const auto& [label, sig] : t.signal_map)
                features.insert(features.end(), sig.begin(), sig.end());
            for (const auto& [label, word] : t.bias_map) features.push_back(word);
            rng.shuffle(features);
            for (const auto& w : features) stream.push_back(vocab.id(w));
            stream.push_back(vocab.delimiter_id());
        }
        stream.push_back(vocab.eot_id());
    }
    return stream;
}

// ---- corpus binary file: magic "SPTC", version, vocab size, u16 token ids ----

inline void write_corpus_file(const std::filesystem::path& path,
                              const std::vector<TokenId>& ids, std::size_t vocab_size) {
    if (vocab_size > 0xFFFF)
        throw std::runtime_error("corpus file: vocabulary too large for u16 ids");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    io::write_magic(os, "SPTC");
    io::write_le<std::uint32_t>(os, 1u);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(vocab_size));
    io::write_le<std::uint64_t>(os, ids.size());
    for (TokenId id : ids) io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(id));
}

struct CorpusFile {
    std::vector<TokenId> ids;
    std::size_t vocab_size = 0;
};

inline CorpusFile read_corpus_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    io::expect_magic(is, "SPTC", "corpus");
    const auto version = io::read_le<std::uint32_t>(is);
    if (version != 1) throw std::runtime_error("corpus file: unsupported version");
    CorpusFile c;
    c.vocab_size = io::read_le<std::uint32_t>(is);
    const auto count = io::read_le<std::uint64_t>(is);
    c.ids.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i)
        c.ids.push_back(static_cast<TokenId>(io::read_le<std::uint16_t>(is)));
    return c;
}

}  // namespace splab
