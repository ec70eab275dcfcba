#include "bncap/decode.hpp"

namespace bncap {

template <typename Scalar>
GeneratedCaption greedy_caption(const ModelParams<Scalar>& params, const Vocabulary& vocab,
                                const VectorX<Scalar>& image) {
    const auto& config = params.config;
    if (vocab.size() != config.vocab_size)
        throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " entries but the model expects " +
                          std::to_string(config.vocab_size));

    SequenceInput<Scalar> input{image, std::vector<TokenId>(config.n, kUnkId)};
    GeneratedCaption caption;
    for (std::uint32_t k = 0; k < config.n; ++k) {
        const VectorX<Scalar> logits = forward(params, input);
        // maxCoeff returns the first maximal index, i.e. the lowest id on ties.
        Eigen::Index best = 0;
        logits.maxCoeff(&best);
        const auto id = static_cast<TokenId>(best);
        if (id == kUnkId) {
            caption.stopped_by = StopReason::unk_emitted;
            return caption;
        }
        input.prefix[k] = id;
        caption.ids.push_back(id);
        caption.tokens.push_back(vocab.token_of(id));
    }
    caption.stopped_by = StopReason::length_limit;
    return caption;
}

template GeneratedCaption greedy_caption<float>(const ModelParams<float>&, const Vocabulary&, const VectorX<float>&);
template GeneratedCaption greedy_caption<double>(const ModelParams<double>&, const Vocabulary&,
                                                 const VectorX<double>&);

}  // namespace bncap
