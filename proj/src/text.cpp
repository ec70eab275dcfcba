#include "bncap/text.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_map>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/ustring.h>

#include "bncap/errors.hpp"

namespace bncap {

namespace {

icu::UnicodeString decode_utf8(std::string_view raw) {
    if (raw.empty()) return {};
    UErrorCode status = U_ZERO_ERROR;
    int32_t needed = 0;
    u_strFromUTF8(nullptr, 0, &needed, raw.data(), static_cast<int32_t>(raw.size()), &status);
    if (status != U_BUFFER_OVERFLOW_ERROR && U_FAILURE(status)) throw DecodeError("invalid UTF-8 input");
    status = U_ZERO_ERROR;
    icu::UnicodeString out;
    UChar* buffer = out.getBuffer(needed);
    u_strFromUTF8(buffer, needed, &needed, raw.data(), static_cast<int32_t>(raw.size()), &status);
    out.releaseBuffer(U_SUCCESS(status) ? needed : 0);
    if (U_FAILURE(status)) throw DecodeError("invalid UTF-8 input");
    return out;
}

const icu::Normalizer2& nfc() {
    UErrorCode status = U_ZERO_ERROR;
    const icu::Normalizer2* normalizer = icu::Normalizer2::getNFCInstance(status);
    if (U_FAILURE(status) || normalizer == nullptr) throw Error("ICU NFC normalizer unavailable");
    return *normalizer;
}

}  // namespace

TokenList normalize_and_tokenize(std::string_view raw) {
    const icu::UnicodeString decoded = decode_utf8(raw);
    UErrorCode status = U_ZERO_ERROR;
    const icu::UnicodeString normalized = nfc().normalize(decoded, status);
    if (U_FAILURE(status)) throw DecodeError("NFC normalization failed");

    TokenList tokens;
    int32_t start = -1;
    const int32_t length = normalized.length();
    for (int32_t i = 0; i < length;) {
        const UChar32 cp = normalized.char32At(i);
        const int32_t next = normalized.moveIndex32(i, 1);
        if (u_isUWhiteSpace(cp)) {
            if (start >= 0) {
                std::string piece;
                normalized.tempSubStringBetween(start, i).toUTF8String(piece);
                tokens.push_back(std::move(piece));
                start = -1;
            }
        } else if (start < 0) {
            start = i;
        }
        i = next;
    }
    if (start >= 0) {
        std::string piece;
        normalized.tempSubStringBetween(start, length).toUTF8String(piece);
        tokens.push_back(std::move(piece));
    }
    return tokens;
}

Vocabulary::Vocabulary() {
    entries_.emplace_back(kUnkToken);
    index_.emplace(Token(kUnkToken), kUnkId);
}

Vocabulary Vocabulary::from_entries(std::vector<Token> tokens) {
    if (tokens.empty() || tokens.front() != kUnkToken) throw FormatError("vocabulary must start with <unk>");
    Vocabulary vocab;
    vocab.entries_.clear();
    vocab.index_.clear();
    vocab.entries_.reserve(tokens.size());
    for (auto& token : tokens) {
        if (token.empty()) throw FormatError("empty vocabulary entry");
        const auto id = static_cast<TokenId>(vocab.entries_.size());
        if (!vocab.index_.emplace(token, id).second) throw DuplicateKeyError("duplicate vocabulary entry: " + token);
        vocab.entries_.push_back(std::move(token));
    }
    return vocab;
}

TokenId Vocabulary::id_of(std::string_view token) const {
    const auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.find(token) != index_.end(); }

const Token& Vocabulary::token_of(TokenId id) const {
    if (id >= entries_.size())
        throw OutOfRangeError("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                              std::to_string(entries_.size()));
    return entries_[id];
}

Vocabulary build_vocabulary(std::span<const TokenList> corpus, std::size_t min_count) {
    if (min_count == 0) throw ConfigError("min_count must be at least 1");
    std::unordered_map<std::string_view, std::size_t> counts;
    for (const auto& caption : corpus)
        for (const auto& token : caption) ++counts[token];

    std::vector<std::pair<std::string_view, std::size_t>> kept;
    for (const auto& [token, count] : counts)
        if (count >= min_count && token != kUnkToken) kept.emplace_back(token, count);
    // std::string_view ordering compares bytes as unsigned char, which is code point order for UTF-8.
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    std::vector<Token> entries;
    entries.reserve(kept.size() + 1);
    entries.emplace_back(kUnkToken);
    for (const auto& [token, count] : kept) entries.emplace_back(token);
    return Vocabulary::from_entries(std::move(entries));
}

std::vector<TokenId> encode(const Vocabulary& vocab, std::span<const Token> tokens, std::size_t n) {
    std::vector<TokenId> ids(n, kUnkId);
    const std::size_t kept = std::min(n, tokens.size());
    for (std::size_t i = 0; i < kept; ++i) ids[i] = vocab.id_of(tokens[i]);
    return ids;
}

TokenList decode_ids(const Vocabulary& vocab, std::span<const TokenId> ids) {
    for (const TokenId id : ids) (void)vocab.token_of(id);
    TokenList tokens;
    for (const TokenId id : ids) {
        if (id == kUnkId) break;
        tokens.push_back(vocab.token_of(id));
    }
    return tokens;
}

CorpusStats corpus_stats(std::span<const TokenList> corpus) {
    CorpusStats stats;
    std::unordered_map<std::string_view, std::size_t> seen;
    for (const auto& caption : corpus) {
        stats.total_tokens += caption.size();
        ++stats.length_histogram[caption.size()];
        for (const auto& token : caption) ++seen[token];
    }
    stats.unique_tokens = seen.size();
    return stats;
}

void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open vocabulary file for writing: " + path);
    for (const auto& token : vocab.entries()) out << token << '\n';
    if (!out) throw IoError("failed writing vocabulary file: " + path);
}

Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open vocabulary file: " + path);
    std::vector<Token> entries;
    std::string line;
    while (std::getline(in, line)) entries.push_back(line);
    return Vocabulary::from_entries(std::move(entries));
}

std::string join_tokens(std::span<const Token> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

}  // namespace bncap
