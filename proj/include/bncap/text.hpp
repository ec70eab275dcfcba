#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bncap {

/// A normalized (NFC), whitespace-free, non-empty UTF-8 word.
using Token = std::string;
using TokenList = std::vector<Token>;
using TokenId = std::uint32_t;

inline constexpr TokenId kUnkId = 0;
inline constexpr std::string_view kUnkToken = "<unk>";

/// NFC-normalizes `raw` and splits it on runs of Unicode whitespace.
/// Throws DecodeError when `raw` is not valid UTF-8.
TokenList normalize_and_tokenize(std::string_view raw);

/// Bijection between tokens and contiguous ids; id 0 is always `<unk>`.
/// Immutable once built.
class Vocabulary {
public:
    /// A vocabulary holding only `<unk>`.
    Vocabulary();

    /// Builds from an explicit id-ordered token list. `tokens[0]` must be `<unk>`;
    /// duplicates are rejected with DuplicateKeyError.
    static Vocabulary from_entries(std::vector<Token> tokens);

    std::size_t size() const noexcept { return entries_.size(); }

    /// The id for `token`, or kUnkId when it is out of vocabulary.
    TokenId id_of(std::string_view token) const;

    bool contains(std::string_view token) const;

    /// Throws OutOfRangeError when `id >= size()`.
    const Token& token_of(TokenId id) const;

    const std::vector<Token>& entries() const noexcept { return entries_; }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.entries_ == b.entries_; }

private:
    struct StringHash {
        using is_transparent = void;
        std::size_t operator()(std::string_view s) const noexcept { return std::hash<std::string_view>{}(s); }
    };

    std::vector<Token> entries_;
    std::unordered_map<Token, TokenId, StringHash, std::equal_to<>> index_;
};

/// Keeps tokens seen at least `min_count` times, ordered by descending
/// frequency with ties broken by ascending code point order.
Vocabulary build_vocabulary(std::span<const TokenList> corpus, std::size_t min_count = 1);

/// Maps tokens to ids (unknown → `<unk>`), truncates or right-pads with `<unk>` to exactly `n` ids.
std::vector<TokenId> encode(const Vocabulary& vocab, std::span<const Token> tokens, std::size_t n);

/// Maps ids back to tokens, stopping at the first `<unk>`.
TokenList decode_ids(const Vocabulary& vocab, std::span<const TokenId> ids);

struct CorpusStats {
    std::size_t unique_tokens = 0;
    std::size_t total_tokens = 0;
    /// caption length (tokens) → number of captions with that length
    std::map<std::size_t, std::size_t> length_histogram;
};

CorpusStats corpus_stats(std::span<const TokenList> corpus);

/// Vocabulary file: one token per line, line index = id, first line `<unk>`.
void save_vocabulary(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocabulary(const std::string& path);

/// Joins tokens with single spaces.
std::string join_tokens(std::span<const Token> tokens);

}  // namespace bncap
