#include "bncap/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bncap/errors.hpp"

namespace bncap {

NgramCounts ngram_counts(std::span<const Token> tokens, std::size_t k) {
    if (k == 0) throw ConfigError("n-gram order must be at least 1");
    NgramCounts counts;
    if (tokens.size() < k) return counts;
    for (std::size_t start = 0; start + k <= tokens.size(); ++start)
        ++counts[Ngram(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                       tokens.begin() + static_cast<std::ptrdiff_t>(start + k))];
    return counts;
}

NgramMatch clipped_precision(std::span<const Token> candidate, std::span<const TokenList> references, std::size_t k) {
    const NgramCounts cand = ngram_counts(candidate, k);
    NgramCounts max_ref;
    for (const auto& reference : references)
        for (const auto& [gram, count] : ngram_counts(reference, k)) {
            auto& best = max_ref[gram];
            best = std::max(best, count);
        }

    NgramMatch match;
    match.total = candidate.size() >= k ? candidate.size() - k + 1 : 0;
    for (const auto& [gram, count] : cand) {
        const auto it = max_ref.find(gram);
        if (it != max_ref.end()) match.matched += std::min(count, it->second);
    }
    return match;
}

std::size_t closest_ref_length(std::size_t candidate_len, std::span<const TokenList> references) {
    if (references.empty()) throw ConfigError("BLEU needs at least one reference");
    std::size_t best = references.front().size();
    const auto distance = [&](std::size_t len) {
        return len > candidate_len ? len - candidate_len : candidate_len - len;
    };
    for (const auto& reference : references) {
        const std::size_t len = reference.size();
        if (distance(len) < distance(best) || (distance(len) == distance(best) && len < best)) best = len;
    }
    return best;
}

BleuBreakdown bleu_from_counts(std::vector<NgramMatch> precisions, std::size_t candidate_len,
                               std::size_t effective_ref_len, bool smoothing) {
    BleuBreakdown out;
    out.candidate_len = candidate_len;
    out.effective_ref_len = effective_ref_len;
    if (smoothing)
        for (std::size_t k = 1; k < precisions.size(); ++k) {
            ++precisions[k].matched;
            ++precisions[k].total;
        }
    out.precisions = std::move(precisions);

    if (candidate_len == 0) {
        out.brevity_penalty = 0.0;
        out.score = 0.0;
        return out;
    }
    out.brevity_penalty = candidate_len > effective_ref_len
                              ? 1.0
                              : std::exp(1.0 - static_cast<double>(effective_ref_len) / static_cast<double>(candidate_len));

    double log_sum = 0.0;
    for (const auto& p : out.precisions) {
        if (p.matched == 0 || p.total == 0) {
            out.score = 0.0;
            return out;
        }
        log_sum += std::log(static_cast<double>(p.matched) / static_cast<double>(p.total));
    }
    const double weight = 1.0 / static_cast<double>(out.precisions.size());
    // Exact 1.0 for a perfect match: every log term is log(1) = 0 and BP is exp(0) = 1.
    out.score = out.brevity_penalty * std::exp(weight * log_sum);
    return out;
}

BleuBreakdown sentence_bleu(std::span<const Token> candidate, std::span<const TokenList> references,
                            std::size_t max_n, bool smoothing) {
    if (max_n == 0) throw ConfigError("max_n must be at least 1");
    if (references.empty()) throw ConfigError("BLEU needs at least one reference");
    for (const auto& reference : references)
        if (reference.empty()) throw ConfigError("BLEU references must be non-empty");

    std::vector<NgramMatch> precisions;
    for (std::size_t k = 1; k <= max_n; ++k) precisions.push_back(clipped_precision(candidate, references, k));
    return bleu_from_counts(std::move(precisions), candidate.size(), closest_ref_length(candidate.size(), references),
                            smoothing);
}

CorpusBleu corpus_bleu(std::span<const BleuPair> pairs, std::size_t max_n) {
    if (pairs.empty()) throw ConfigError("corpus BLEU needs at least one pair");
    if (max_n == 0) throw ConfigError("max_n must be at least 1");

    std::vector<NgramMatch> pooled(max_n);
    std::size_t candidate_len = 0;
    std::size_t ref_len = 0;
    double sentence_sum = 0.0;
    for (const auto& pair : pairs) {
        const BleuBreakdown sentence = sentence_bleu(pair.candidate, pair.references, max_n, false);
        for (std::size_t k = 0; k < max_n; ++k) {
            pooled[k].matched += sentence.precisions[k].matched;
            pooled[k].total += sentence.precisions[k].total;
        }
        candidate_len += sentence.candidate_len;
        ref_len += sentence.effective_ref_len;
        sentence_sum += sentence.score;
    }
    CorpusBleu out;
    out.pooled = bleu_from_counts(std::move(pooled), candidate_len, ref_len, false);
    out.mean_sentence_bleu_x100 = 100.0 * sentence_sum / static_cast<double>(pairs.size());
    return out;
}

}  // namespace bncap
