#pragma once

#include "ncatlas/numerics.hpp"

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ncatlas {

// Byte-level BPE vocabulary. Token strings are stored as raw bytes; the
// printable byte-to-unicode convention of tokenizer files is undone on load.
class Vocabulary {
public:
    struct Entry {
        TokenId id = 0;
        std::string bytes;
        bool special = false;
    };

    Vocabulary() = default;
    // Rejects duplicate ids, duplicate byte strings, and ids >= vocab_size.
    Vocabulary(std::vector<Entry> entries, std::vector<std::pair<std::string, std::string>> merges,
               std::optional<std::size_t> vocab_size = std::nullopt);

    // One past the largest id.
    std::size_t size() const noexcept { return id_to_bytes_.size(); }
    bool contains(TokenId id) const noexcept { return id < present_.size() && present_[id]; }
    const std::string& bytes(TokenId id) const;
    std::optional<TokenId> find(std::string_view bytes) const;
    bool is_special(TokenId id) const noexcept { return id < special_.size() && special_[id]; }

    const std::vector<std::pair<std::string, std::string>>& merges() const noexcept { return merges_; }
    // Rank of merging (left, right), lower merges first.
    std::optional<std::size_t> merge_rank(std::string_view left, std::string_view right) const;
    const std::map<std::string, TokenId>& special_tokens() const noexcept { return specials_; }

    // When set, a pre-token chunk that is itself a vocabulary entry is emitted
    // without running merges (Llama 3 tokenizers set this).
    bool ignore_merges() const noexcept { return ignore_merges_; }
    void set_ignore_merges(bool value) noexcept { ignore_merges_ = value; }

private:
    std::vector<std::string> id_to_bytes_;
    std::vector<bool> present_;
    std::vector<bool> special_;
    std::unordered_map<std::string, TokenId> bytes_to_id_;
    std::vector<std::pair<std::string, std::string>> merges_;
    std::unordered_map<std::string, std::size_t> ranks_;
    std::map<std::string, TokenId> specials_;
    bool ignore_merges_ = false;
};

// Reads a Hugging Face style tokenizer.json (model.vocab, model.merges, added_tokens).
Vocabulary load_vocabulary(const std::filesystem::path& path, std::optional<std::size_t> vocab_size = std::nullopt);
Vocabulary parse_vocabulary(std::string_view json_text, std::optional<std::size_t> vocab_size = std::nullopt);
void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);

// 256 tokens, id i = byte i.
Vocabulary byte_vocabulary();

enum class SpecialTokens { ignore, parse };

std::vector<TokenId> encode_text(const Vocabulary& vocab, std::string_view text,
                                 SpecialTokens specials = SpecialTokens::ignore);
std::string decode_tokens(const Vocabulary& vocab, std::span<const TokenId> ids);

// Id of the token whose bytes equal `surface`; Error(multi_token) lists the
// tokenization when the surface form is not a single token.
TokenId lookup_token(const Vocabulary& vocab, std::string_view surface);

// Splits text into pre-token chunks (contractions, words with one optional
// leading non-letter, 1-3 digit runs, punctuation runs, whitespace).
std::vector<std::string_view> pretokenize(std::string_view text);

// Printable rendering of a token for tables: control bytes escaped.
std::string display_token(const Vocabulary& vocab, TokenId id);

} // namespace ncatlas
