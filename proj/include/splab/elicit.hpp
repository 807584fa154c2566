#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "splab/model.hpp"
#include "splab/prompt.hpp"
#include "splab/rng.hpp"
#include "splab/tasks.hpp"
#include "splab/vocab.hpp"

namespace splab {

// ---------------------------------------------------------------------------
// target prompts
// ---------------------------------------------------------------------------

/// One demonstration line: a task description and its class labels.
struct Demonstration {
    std::string description_text;
    std::vector<std::string> class_labels;

    json to_json() const {
        json j;
        j["description"] = description_text;
        j["class_labels"] = class_labels;
        return j;
    }

    static Demonstration from_json(const json& j) {
        Demonstration d;
        d.description_text = j.at("description").get<std::string>();
        d.class_labels = j.at("class_labels").get<std::vector<std::string>>();
        return d;
    }
};

enum class TargetPromptVariant { Listing, FeatureProbe };

struct TargetPromptSpec {
    std::vector<Demonstration> demonstrations;  // listing variant only
    int placeholder_count = 0;                  // must equal the source prompt length
    TargetPromptVariant variant = TargetPromptVariant::Listing;
    std::string id;
};

struct TargetPrompt {
    EmbeddingSequence input;
    std::vector<int> placeholder_positions;  // ascending; size == placeholder_count
    std::string text;                        // decoded form, placeholders as "x"
};

/// Listing variant: `desc1 : label , label | desc2 : ... | x x ... x`.
/// Feature-probe variant: the fixed probe question, a colon, then the
/// placeholders. Placeholder positions receive the patched vectors.
inline TargetPrompt build_target_prompt(const Model& m, const TargetPromptSpec& spec,
                                        const Vocabulary& vocab) {
    if (spec.placeholder_count < 1)
        throw std::invalid_argument("target prompt: placeholder_count must be >= 1");

    std::vector<TokenId> ids;
    if (spec.variant == TargetPromptVariant::Listing) {
        if (spec.demonstrations.empty())
            throw std::invalid_argument("target prompt: listing variant needs demonstrations");
        for (const auto& demo : spec.demonstrations) {
            if (demo.description_text.empty())
                throw std::invalid_argument("target prompt: empty demonstration description");
            if (demo.class_labels.size() < 2)
                throw std::invalid_argument("target prompt: demonstration needs >= 2 labels");
            for (const TokenId t : vocab.encode(demo.description_text)) ids.push_back(t);
            ids.push_back(vocab.colon_id());
            for (std::size_t i = 0; i < demo.class_labels.size(); ++i) {
                if (i > 0) ids.push_back(vocab.comma_id());
                for (const TokenId t : vocab.encode(demo.class_labels[i])) ids.push_back(t);
            }
            ids.push_back(vocab.delimiter_id());
        }
    } else {
        for (const TokenId t : vocab.encode(feature_probe_text())) ids.push_back(t);
        ids.push_back(vocab.colon_id());
    }

    TargetPrompt out;
    const int first_placeholder = static_cast<int>(ids.size());
    for (int i = 0; i < spec.placeholder_count; ++i) {
        ids.push_back(vocab.placeholder_id());
        out.placeholder_positions.push_back(first_placeholder + i);
    }

    out.input = m.embed_tokens(ids);
    for (const int pos : out.placeholder_positions)
        out.input.origin[pos] = PositionOrigin::Placeholder;
    out.text = vocab.decode(ids);
    return out;
}

/// Draw k demonstrations without replacement, in draw order.
inline std::vector<Demonstration> sample_demonstrations(const std::vector<Demonstration>& pool,
                                                        int k, std::uint64_t seed) {
    if (k < 1) throw std::invalid_argument("sample_demonstrations: k must be >= 1");
    if (static_cast<std::size_t>(k) > pool.size())
        throw std::invalid_argument("sample_demonstrations: k exceeds pool size " +
                                    std::to_string(pool.size()));
    Rng rng(seed);
    std::vector<Demonstration> out;
    for (const std::size_t i : rng.sample_without_replacement(pool.size(), k))
        out.push_back(pool[i]);
    return out;
}

// ---------------------------------------------------------------------------
// elicitation
// ---------------------------------------------------------------------------

struct ElicitationResult {
    std::string description_text;
    int source_layer = 0;
    int target_layer = 0;
    std::string target_prompt_id;
    std::uint64_t checkpoint_step = 0;
    int token_count = 0;
    std::string stop_reason;

    json to_json() const {
        json j;
        j["description"] = description_text;
        j["source_layer"] = source_layer;
        j["target_layer"] = target_layer;
        j["target_prompt_id"] = target_prompt_id;
        j["checkpoint_step"] = checkpoint_step;
        j["token_count"] = token_count;
        j["stop_reason"] = stop_reason;
        return j;
    }

    static ElicitationResult from_json(const json& j) {
        ElicitationResult r;
        r.description_text = j.at("description").get<std::string>();
        r.source_layer = j.at("source_layer").get<int>();
        r.target_layer = j.at("target_layer").get<int>();
        r.target_prompt_id = j.at("target_prompt_id").get<std::string>();
        r.checkpoint_step = j.at("checkpoint_step").get<std::uint64_t>();
        r.token_count = j.at("token_count").get<int>();
        r.stop_reason = j.at("stop_reason").get<std::string>();
        return r;
    }
};

/// Read the prompt's hidden states at source_layer (prompt run alone, no
/// surrounding text), patch them into the placeholder positions at
/// target_layer, and greedily decode a description. Decoding halts at the
/// sequence delimiter or end-of-text, or after `budget` tokens.
inline ElicitationResult elicit(const Model& m, const ContinuousPrompt& prompt,
                                const TargetPromptSpec& spec, int source_layer, int target_layer,
                                int budget, const Vocabulary& vocab) {
    if (spec.placeholder_count != prompt.length)
        throw std::invalid_argument("elicit: placeholder_count " +
                                    std::to_string(spec.placeholder_count) +
                                    " != prompt length " + std::to_string(prompt.length));
    if (budget < 1) throw std::invalid_argument("elicit: budget must be >= 1");

    // source pass: the continuous prompt alone
    ActivationRecord record;
    const std::set<int> layers{source_layer};
    forward_capture(m, prompt.as_sequence(), layers, record);

    TargetPrompt target = build_target_prompt(m, spec, vocab);
    PatchPlan plan;
    plan.source_layer = source_layer;
    plan.target_layer = target_layer;
    for (int i = 0; i < prompt.length; ++i)
        plan.pairs.emplace_back(i, target.placeholder_positions[i]);

    const std::set<TokenId> stops{vocab.delimiter_id(), vocab.eot_id()};
    const GenerateResult gen = generate(m, target.input, budget, stops, &plan, &record);

    ElicitationResult out;
    std::vector<TokenId> kept = gen.tokens;
    if (gen.stop_reason == "stop_token") kept.pop_back();
    out.description_text = vocab.decode(kept);
    out.source_layer = source_layer;
    out.target_layer = target_layer;
    out.target_prompt_id = spec.id;
    out.checkpoint_step = prompt.step;
    out.token_count = static_cast<int>(gen.tokens.size());
    out.stop_reason = gen.stop_reason;
    return out;
}

// ---------------------------------------------------------------------------
// layer sweep
// ---------------------------------------------------------------------------

/// Default grid: identity pairs (l, l) for every layer 0..L.
inline std::vector<std::pair<int, int>> identity_layer_grid(const Model& m) {
    std::vector<std::pair<int, int>> grid;
    for (int l = 0; l <= m.cfg.num_layers; ++l) grid.emplace_back(l, l);
    return grid;
}

inline std::vector<ElicitationResult> layer_sweep(const Model& m, const ContinuousPrompt& prompt,
                                                  const TargetPromptSpec& spec, int budget,
                                                  const Vocabulary& vocab,
                                                  const std::vector<std::pair<int, int>>& grid) {
    if (grid.empty()) throw std::invalid_argument("layer_sweep: empty grid");
    std::vector<ElicitationResult> out;
    out.reserve(grid.size());
    for (const auto& [src, tgt] : grid)
        out.push_back(elicit(m, prompt, spec, src, tgt, budget, vocab));
    return out;
}

}  // namespace splab
