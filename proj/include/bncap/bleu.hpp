#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "bncap/text.hpp"

namespace bncap {

using Ngram = std::vector<Token>;
using NgramCounts = std::map<Ngram, std::size_t>;

/// Every contiguous k-token window with its multiplicity. Requires k >= 1.
NgramCounts ngram_counts(std::span<const Token> tokens, std::size_t k);

struct NgramMatch {
    std::size_t matched = 0;
    std::size_t total = 0;
};

/// Candidate k-gram counts clipped by the largest count in any single reference.
NgramMatch clipped_precision(std::span<const Token> candidate, std::span<const TokenList> references, std::size_t k);

struct BleuBreakdown {
    std::vector<NgramMatch> precisions;  // index k-1 for k-grams
    double brevity_penalty = 0.0;
    double score = 0.0;
    std::size_t candidate_len = 0;
    std::size_t effective_ref_len = 0;
};

/// Reference length closest to `candidate_len`, ties going to the shorter.
std::size_t closest_ref_length(std::size_t candidate_len, std::span<const TokenList> references);

/// BLEU with uniform weights 1/max_n. Without smoothing, any zero precision
/// (including an empty k-gram total) gives score 0. With smoothing, 1 is added
/// to matched and total for k >= 2. An empty candidate scores 0 with BP 0.
BleuBreakdown sentence_bleu(std::span<const Token> candidate, std::span<const TokenList> references,
                            std::size_t max_n = 4, bool smoothing = false);

/// Combines pooled counts and lengths into a breakdown.
BleuBreakdown bleu_from_counts(std::vector<NgramMatch> precisions, std::size_t candidate_len,
                               std::size_t effective_ref_len, bool smoothing = false);

struct BleuPair {
    TokenList candidate;
    std::vector<TokenList> references;
};

struct CorpusBleu {
    BleuBreakdown pooled;
    /// Mean of unsmoothed sentence BLEU over pairs, on a 0–100 scale.
    double mean_sentence_bleu_x100 = 0.0;
};

CorpusBleu corpus_bleu(std::span<const BleuPair> pairs, std::size_t max_n = 4);

}  // namespace bncap
