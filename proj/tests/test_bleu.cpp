#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include <json.hpp>

#include "bncap/bleu.hpp"
#include "bncap/evaluate.hpp"
#include "test_support.hpp"

using namespace bncap;

namespace {

// Brute-force clipped count: for every candidate window, count occurrences by
// scanning, with no maps.
std::size_t count_window(const TokenList& tokens, const TokenList& gram) {
    std::size_t count = 0;
    for (std::size_t s = 0; s + gram.size() <= tokens.size(); ++s)
        if (std::equal(gram.begin(), gram.end(), tokens.begin() + static_cast<std::ptrdiff_t>(s))) ++count;
    return count;
}

NgramMatch brute_clipped(const TokenList& candidate, const std::vector<TokenList>& refs, std::size_t k) {
    NgramMatch match;
    std::vector<TokenList> seen;
    for (std::size_t s = 0; s + k <= candidate.size(); ++s) {
        ++match.total;
        TokenList gram(candidate.begin() + static_cast<std::ptrdiff_t>(s),
                       candidate.begin() + static_cast<std::ptrdiff_t>(s + k));
        if (std::find(seen.begin(), seen.end(), gram) != seen.end()) continue;
        seen.push_back(gram);
        std::size_t ref_max = 0;
        for (const auto& ref : refs) ref_max = std::max(ref_max, count_window(ref, gram));
        match.matched += std::min(count_window(candidate, gram), ref_max);
    }
    return match;
}

TokenList random_sentence(std::mt19937& rng, std::size_t max_len, int alphabet) {
    TokenList out(1 + rng() % max_len);
    for (auto& t : out) t = std::string(1, static_cast<char>('a' + rng() % alphabet));
    return out;
}

}  // namespace

TEST_SUITE("bleu") {

TEST_CASE("ngram_counts") {
    const TokenList aba{"a", "b", "a"};
    CHECK(ngram_counts(aba, 1) == NgramCounts{{{"a"}, 2}, {{"b"}, 1}});
    CHECK(ngram_counts(aba, 2) == NgramCounts{{{"a", "b"}, 1}, {{"b", "a"}, 1}});
    CHECK(ngram_counts(aba, 4).empty());
    CHECK_THROWS_AS(ngram_counts(aba, 0), ConfigError);
}

TEST_CASE("clipped_precision") {
    const TokenList sentence{"x", "y", "z", "x"};
    const std::vector<TokenList> same{sentence};
    for (std::size_t k = 1; k <= 4; ++k) {
        const auto m = clipped_precision(sentence, same, k);
        CHECK(m.matched == m.total);
    }
    const std::vector<TokenList> other{{"p", "q"}};
    CHECK(clipped_precision(sentence, other, 1).matched == 0);

    const TokenList aaa{"a", "a", "a"};
    const std::vector<TokenList> ab{{"a", "b"}};
    const auto clipped = clipped_precision(aaa, ab, 1);
    CHECK(clipped.matched == 1);
    CHECK(clipped.total == 3);
}

TEST_CASE("clipped_precision matches brute force") {
    std::mt19937 rng(21);
    for (int trial = 0; trial < 300; ++trial) {
        const auto candidate = random_sentence(rng, 9, 4);
        std::vector<TokenList> refs;
        for (std::size_t r = 0; r < 1 + rng() % 3; ++r) refs.push_back(random_sentence(rng, 9, 4));
        for (std::size_t k = 1; k <= 4; ++k) {
            const auto fast = clipped_precision(candidate, refs, k);
            const auto slow = brute_clipped(candidate, refs, k);
            CHECK(fast.matched == slow.matched);
            CHECK(fast.total == slow.total);
        }
    }
}

TEST_CASE("sentence_bleu worked examples") {
    const TokenList abcd{"a", "b", "c", "d"};
    const std::vector<TokenList> abcde{{"a", "b", "c", "d", "e"}};
    const auto b = sentence_bleu(abcd, abcde);
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(b.precisions[k].matched == 4 - k);
        CHECK(b.precisions[k].total == 4 - k);
    }
    CHECK(b.brevity_penalty == doctest::Approx(std::exp(1.0 - 5.0 / 4.0)).epsilon(1e-15));
    CHECK(std::abs(b.score - 0.77880078307140487) < 1e-12);
    CHECK(b.candidate_len == 4);
    CHECK(b.effective_ref_len == 5);

    const std::vector<TokenList> self{abcd};
    CHECK(sentence_bleu(abcd, self).score == 1.0);
    const std::vector<TokenList> disjoint{{"w", "x", "y", "z"}};
    CHECK(sentence_bleu(abcd, disjoint).score == 0.0);
}

TEST_CASE("sentence_bleu degenerate and smoothed cases") {
    const std::vector<TokenList> ref{{"a", "b", "c", "d"}};
    const auto empty = sentence_bleu(TokenList{}, ref);
    CHECK(empty.score == 0.0);
    CHECK(empty.brevity_penalty == 0.0);

    // No matching 4-gram: unsmoothed is 0, smoothed is positive.
    const TokenList cand{"a", "b", "c", "x"};
    CHECK(sentence_bleu(cand, ref).score == 0.0);
    const auto smoothed = sentence_bleu(cand, ref, 4, true);
    CHECK(smoothed.precisions[3].matched == 1);
    CHECK(smoothed.precisions[3].total == 2);
    const double expected = std::exp(0.25 * (std::log(3.0 / 4) + std::log(3.0 / 4) + std::log(2.0 / 3) + std::log(1.0 / 2)));
    CHECK(smoothed.score == doctest::Approx(expected).epsilon(1e-14));

    CHECK_THROWS_AS(sentence_bleu(cand, std::vector<TokenList>{}), ConfigError);
    CHECK_THROWS_AS(sentence_bleu(cand, std::vector<TokenList>{{}}), ConfigError);
}

TEST_CASE("closest reference length ties go shorter") {
    const std::vector<TokenList> refs{{"a", "b", "c"}, {"a", "b", "c", "d", "e"}};
    CHECK(closest_ref_length(4, refs) == 3);
    CHECK(closest_ref_length(5, refs) == 5);
    CHECK(closest_ref_length(1, refs) == 3);
}

TEST_CASE("bleu invariants") {
    std::mt19937 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto candidate = random_sentence(rng, 8, 3);
        std::vector<TokenList> refs{random_sentence(rng, 8, 3)};
        const auto score = sentence_bleu(candidate, refs);
        CHECK(score.score >= 0.0);
        CHECK(score.score <= 1.0);

        // Relabeling tokens bijectively leaves the score unchanged.
        const auto relabel = [](TokenList t) {
            for (auto& s : t) s = "tok_" + std::string(1, static_cast<char>('z' - (s[0] - 'a')));
            return t;
        };
        const std::vector<TokenList> relabeled_refs{relabel(refs[0])};
        CHECK(sentence_bleu(relabel(candidate), relabeled_refs).score == score.score);

        // Adding a reference never lowers a matched count.
        auto more = refs;
        more.push_back(random_sentence(rng, 8, 3));
        for (std::size_t k = 1; k <= 4; ++k)
            CHECK(clipped_precision(candidate, more, k).matched >= clipped_precision(candidate, refs, k).matched);

        // Score 1 iff identical (for candidates of length >= 4).
        if (candidate.size() >= 4) CHECK((score.score == 1.0) == (candidate == refs[0]));
        const std::vector<TokenList> self{candidate};
        if (candidate.size() >= 4) CHECK(sentence_bleu(candidate, self).score == 1.0);
    }
}

TEST_CASE("corpus_bleu pooling") {
    const BleuPair perfect{{"a", "b", "c", "d"}, {{"a", "b", "c", "d"}}};
    const std::vector<BleuPair> all_perfect{perfect, perfect};
    const auto c = corpus_bleu(all_perfect);
    CHECK(c.pooled.score == 1.0);
    CHECK(c.mean_sentence_bleu_x100 == 100.0);

    const BleuPair single{{"a", "b", "c", "d"}, {{"a", "b", "c", "d", "e"}}};
    const auto one = corpus_bleu(std::vector<BleuPair>{single});
    const auto direct = sentence_bleu(single.candidate, single.references);
    CHECK(one.pooled.score == direct.score);
    CHECK(one.pooled.brevity_penalty == direct.brevity_penalty);
    for (std::size_t k = 0; k < 4; ++k) CHECK(one.pooled.precisions[k].matched == direct.precisions[k].matched);

    const auto many = corpus_bleu(std::vector<BleuPair>(5, single));
    CHECK(many.pooled.score == doctest::Approx(one.pooled.score).epsilon(1e-15));
    CHECK(many.mean_sentence_bleu_x100 == doctest::Approx(one.mean_sentence_bleu_x100).epsilon(1e-15));

    CHECK_THROWS_AS(corpus_bleu(std::vector<BleuPair>{}), ConfigError);
}

TEST_CASE("corpus_bleu pooled counts match an independent recount") {
    const std::vector<BleuPair> pairs{
        {{"the", "cat", "sat", "on", "the", "mat"}, {{"the", "cat", "is", "on", "the", "mat"}}},
        {{"a", "boat", "on", "the", "river"}, {{"two", "boys", "on", "a", "boat", "in", "the", "river"}}},
        {{"the", "the", "the"}, {{"the", "field", "is", "yellow"}}},
    };
    const auto c = corpus_bleu(pairs);
    std::size_t cand_len = 0, ref_len = 0;
    for (std::size_t k = 1; k <= 4; ++k) {
        NgramMatch pooled;
        for (const auto& p : pairs) {
            const auto m = brute_clipped(p.candidate, p.references, k);
            pooled.matched += m.matched;
            pooled.total += m.total;
        }
        CHECK(c.pooled.precisions[k - 1].matched == pooled.matched);
        CHECK(c.pooled.precisions[k - 1].total == pooled.total);
    }
    for (const auto& p : pairs) {
        cand_len += p.candidate.size();
        ref_len += p.references[0].size();
    }
    CHECK(c.pooled.candidate_len == cand_len);
    CHECK(c.pooled.effective_ref_len == ref_len);
    // Frozen: p = 11/14, 5/11, 1/8, 0/5, so the pooled score is 0.
    CHECK(c.pooled.precisions[0].matched == 11);
    CHECK(c.pooled.precisions[3].matched == 0);
    CHECK(c.pooled.score == 0.0);
}

TEST_CASE("evaluate with a model that always stops immediately") {
    ModelConfig config{.d_img = 2, .d_embed = 3, .hidden = 2, .layers = 2, .bidirectional = true, .vocab_size = 3,
                       .n = 4, .precision = Precision::f64};
    auto params = init_params<double>(config, 0);
    params.W_out.setZero();
    params.b_out << 5.0, 0.0, 0.0;
    const auto vocab = Vocabulary::from_entries({"<unk>", "x", "y"});
    EmbeddingTable embeddings(2);
    embeddings.add({"i1", Eigen::Vector2f(1, 2)});
    embeddings.add({"i2", Eigen::Vector2f(3, 4)});
    const std::vector<RawCaption> captions{{"i1", "x y x y"}, {"i2", "y  y"}};

    const auto report = evaluate(params, vocab, captions, embeddings);
    CHECK(report.corpus_bleu == 0.0);
    CHECK(report.mean_sentence_bleu_x100 == 0.0);
    REQUIRE(report.per_image.size() == 2);
    CHECK(report.per_image[1].reference == "y y");
    CHECK(report.per_image[1].generated.empty());

    const auto doc = nlohmann::json::parse(eval_report_json(report));
    CHECK(doc["corpus_bleu"] == 0.0);
    CHECK(doc["per_image"][0]["id"] == "i1");
    CHECK(doc["per_image"][0]["reference"] == "x y x y");
    CHECK(doc.contains("mean_sentence_bleu_x100"));

    const std::vector<RawCaption> dangling{{"nope", "x"}};
    CHECK_THROWS_AS(evaluate(params, vocab, dangling, embeddings), ReferentialIntegrityError);
}

}
