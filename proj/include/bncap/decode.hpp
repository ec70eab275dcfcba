#pragma once

#include "bncap/model.hpp"
#include "bncap/text.hpp"

namespace bncap {

enum class StopReason { unk_emitted, length_limit };

struct GeneratedCaption {
    TokenList tokens;
    std::vector<TokenId> ids;
    StopReason stopped_by = StopReason::length_limit;
};

/// Greedy generation: start from an all-`<unk>` prefix and repeatedly append the
/// argmax token (lowest id wins ties) until `<unk>` is chosen or n tokens exist.
template <typename Scalar>
GeneratedCaption greedy_caption(const ModelParams<Scalar>& params, const Vocabulary& vocab,
                                const VectorX<Scalar>& image);

}  // namespace bncap
