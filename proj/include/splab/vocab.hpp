#pragma once

#include <algorithm>
#include <cctype>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "splab/io.hpp"

namespace splab {

using TokenId = std::int32_t;

/// Closed word-level vocabulary: a token <-> id bijection plus the reserved
/// structural tokens. Text is lowercased and split on whitespace, with the
/// punctuation marks : , | . split off as standalone tokens, so every class
/// label stays exactly one token.
class Vocabulary {
public:
    static constexpr const char* kPlaceholder = "x";
    static constexpr const char* kDelimiter = "|";
    static constexpr const char* kColon = ":";
    static constexpr const char* kComma = ",";
    static constexpr const char* kEndOfText = "<eot>";

    Vocabulary() {
        // Reserved ids come first and are stable across worlds.
        add(kPlaceholder);
        add(kDelimiter);
        add(kColon);
        add(kComma);
        add(kEndOfText);
    }

    TokenId add(const std::string& token) {
        auto it = to_id_.find(token);
        if (it != to_id_.end()) return it->second;
        const TokenId id = static_cast<TokenId>(tokens_.size());
        tokens_.push_back(token);
        to_id_.emplace(token, id);
        return id;
    }

    bool contains(const std::string& token) const { return to_id_.count(token) > 0; }

    TokenId id(const std::string& token) const {
        auto it = to_id_.find(token);
        if (it == to_id_.end())
            throw std::runtime_error("vocabulary: unknown token \"" + token + "\"");
        return it->second;
    }

    const std::string& token(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw std::runtime_error("vocabulary: id out of range: " + std::to_string(id));
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::size_t size() const { return tokens_.size(); }

    TokenId placeholder_id() const { return 0; }
    TokenId delimiter_id() const { return 1; }
    TokenId colon_id() const { return 2; }
    TokenId comma_id() const { return 3; }
    TokenId eot_id() const { return 4; }

    bool is_reserved(TokenId id) const { return id >= 0 && id <= 4; }

    /// Split text into vocabulary word strings (lowercased, punctuation
    /// separated). Does not consult the token table.
    static std::vector<std::string> split(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        };
        for (std::size_t i = 0; i < text.size(); ++i) {
            const char c = text[i];
            if (std::isspace(static_cast<unsigned char>(c))) {
                flush();
            } else if (c == ':' || c == ',' || c == '|' || c == '.') {
                flush();
                out.push_back(std::string(1, c));
            } else if (c == '<') {
                // keep <...> markers (e.g. <eot>) as single tokens
                flush();
                const auto close = text.find('>', i);
                if (close == std::string::npos) {
                    cur.push_back('<');
                } else {
                    out.push_back(text.substr(i, close - i + 1));
                    i = close;
                }
            } else {
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            }
        }
        flush();
        return out;
    }

    std::vector<TokenId> encode(const std::string& text) const {
        std::vector<TokenId> ids;
        for (const auto& w : split(text)) ids.push_back(id(w));
        return ids;
    }

    std::string decode(const std::vector<TokenId>& ids) const {
        std::ostringstream oss;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i > 0) oss << ' ';
            oss << token(ids[i]);
        }
        return oss.str();
    }

    json to_json() const {
        json j;
        j["tokens"] = tokens_;
        return j;
    }

    static Vocabulary from_json(const json& j) {
        Vocabulary v;
        const auto& toks = j.at("tokens");
        for (std::size_t i = 0; i < toks.size(); ++i) {
            const std::string t = toks[i].get<std::string>();
            if (i < v.tokens_.size()) {
                if (t != v.tokens_[i])
                    throw std::runtime_error("vocabulary file: reserved token mismatch at id " +
                                             std::to_string(i));
            } else {
                v.add(t);
            }
        }
        return v;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> to_id_;
};

}  // namespace splab
