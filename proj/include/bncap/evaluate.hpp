#pragma once

#include <string>
#include <vector>

#include "bncap/bleu.hpp"
#include "bncap/data.hpp"
#include "bncap/decode.hpp"
#include "bncap/model.hpp"

namespace bncap {

struct ImageEvaluation {
    std::string image_id;
    std::string reference;
    std::string generated;
    double sentence_bleu = 0.0;
};

struct EvalReport {
    double corpus_bleu = 0.0;
    double mean_sentence_bleu_x100 = 0.0;
    std::vector<ImageEvaluation> per_image;
};

/// Greedy-captions every listed image and scores it against its single reference
/// (the full normalized caption). Throws ReferentialIntegrityError for a caption
/// without an embedding.
template <typename Scalar>
EvalReport evaluate(const ModelParams<Scalar>& params, const Vocabulary& vocab, std::span<const RawCaption> captions,
                    const EmbeddingTable& embeddings);

/// File-level wrapper; dispatches on the checkpoint precision. `vocab_path`
/// empty means the checkpoint's sidecar vocabulary.
EvalReport evaluate(const std::string& checkpoint_path, const std::string& vocab_path,
                    const std::string& captions_path, const std::string& embeddings_path);

/// {"corpus_bleu", "mean_sentence_bleu_x100", "per_image": [{"id", "reference", "generated", "sentence_bleu"}]}
std::string eval_report_json(const EvalReport& report);
void write_eval_report(const EvalReport& report, const std::string& path);

}  // namespace bncap
