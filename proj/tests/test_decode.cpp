#include <doctest.h>

#include "bncap/decode.hpp"

using namespace bncap;

namespace {

ModelConfig small_config() {
    return {.d_img = 3, .d_embed = 4, .hidden = 3, .layers = 2, .bidirectional = true, .vocab_size = 4, .n = 5,
            .precision = Precision::f64};
}

Vocabulary small_vocab() { return Vocabulary::from_entries({"<unk>", "a", "b", "c"}); }

}  // namespace

TEST_SUITE("decode") {

TEST_CASE("unk-biased readout gives an empty caption") {
    auto params = init_params<double>(small_config(), 1);
    params.W_out.setZero();
    params.b_out << 1.0, 0.5, 0.5, 0.5;
    const auto caption = greedy_caption<double>(params, small_vocab(), Eigen::Vector3d(0.1, 0.2, 0.3));
    CHECK(caption.tokens.empty());
    CHECK(caption.stopped_by == StopReason::unk_emitted);
}

TEST_CASE("all-zero logits tie toward unk") {
    auto params = init_params<double>(small_config(), 1);
    params.W_out.setZero();
    params.b_out.setZero();
    const auto caption = greedy_caption<double>(params, small_vocab(), Eigen::Vector3d(1, 2, 3));
    CHECK(caption.tokens.empty());
    CHECK(caption.stopped_by == StopReason::unk_emitted);
}

TEST_CASE("a never-unk readout hits the length limit") {
    auto params = init_params<double>(small_config(), 1);
    params.W_out.setZero();
    params.b_out << -1.0, 0.0, 2.0, 2.0;  // ties between b and c go to the lower id
    const auto caption = greedy_caption<double>(params, small_vocab(), Eigen::Vector3d(1, 2, 3));
    CHECK(caption.stopped_by == StopReason::length_limit);
    CHECK(caption.tokens == TokenList(5, "b"));
    CHECK(caption.ids == std::vector<TokenId>(5, 2));
}

TEST_CASE("decoding is deterministic and never emits unk") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto params = init_params<double>(small_config(), seed);
        const Eigen::Vector3d image(0.3 * seed, -0.2, 0.9);
        const auto a = greedy_caption<double>(params, small_vocab(), image);
        const auto b = greedy_caption<double>(params, small_vocab(), image);
        CHECK(a.ids == b.ids);
        CHECK(a.tokens.size() <= 5);
        for (const auto id : a.ids) CHECK(id != kUnkId);
    }
}

TEST_CASE("decode input validation") {
    const auto params = init_params<double>(small_config(), 0);
    CHECK_THROWS_AS(greedy_caption<double>(params, small_vocab(), Eigen::Vector2d(1, 2)), ConfigError);
    CHECK_THROWS_AS(greedy_caption<double>(params, Vocabulary::from_entries({"<unk>", "a"}), Eigen::Vector3d(1, 2, 3)),
                    ConfigError);
}

}
