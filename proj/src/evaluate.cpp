#include "bncap/evaluate.hpp"

#include <fstream>

#include <json.hpp>

#include "bncap/train.hpp"

namespace bncap {

template <typename Scalar>
EvalReport evaluate(const ModelParams<Scalar>& params, const Vocabulary& vocab, std::span<const RawCaption> captions,
                    const EmbeddingTable& embeddings) {
    for (const auto& caption : captions) (void)embeddings.at(caption.image_id);
    if (captions.empty()) throw ConfigError("evaluation needs at least one caption");

    EvalReport report;
    std::vector<BleuPair> pairs;
    pairs.reserve(captions.size());
    for (const auto& caption : captions) {
        TokenList reference = normalize_and_tokenize(caption.text);
        if (reference.empty()) throw FormatError("empty reference caption for image id '" + caption.image_id + "'");
        const VectorX<Scalar> image = embeddings.at(caption.image_id).vector.template cast<Scalar>();
        GeneratedCaption generated = greedy_caption(params, vocab, image);

        BleuPair pair{std::move(generated.tokens), {std::move(reference)}};
        report.per_image.push_back({caption.image_id, join_tokens(pair.references.front()), join_tokens(pair.candidate),
                                    sentence_bleu(pair.candidate, pair.references).score});
        pairs.push_back(std::move(pair));
    }
    const CorpusBleu corpus = corpus_bleu(pairs);
    report.corpus_bleu = corpus.pooled.score;
    report.mean_sentence_bleu_x100 = corpus.mean_sentence_bleu_x100;
    return report;
}

template EvalReport evaluate<float>(const ModelParams<float>&, const Vocabulary&, std::span<const RawCaption>,
                                    const EmbeddingTable&);
template EvalReport evaluate<double>(const ModelParams<double>&, const Vocabulary&, std::span<const RawCaption>,
                                     const EmbeddingTable&);

EvalReport evaluate(const std::string& checkpoint_path, const std::string& vocab_path,
                    const std::string& captions_path, const std::string& embeddings_path) {
    const ModelConfig config = read_checkpoint_config(checkpoint_path);
    const Vocabulary vocab = load_vocabulary(vocab_path.empty() ? default_vocab_path(checkpoint_path) : vocab_path);
    const auto captions = load_captions(captions_path);
    const EmbeddingTable embeddings = load_embeddings(embeddings_path);
    if (embeddings.dim() != config.d_img)
        throw ConfigError("embeddings have dimension " + std::to_string(embeddings.dim()) + ", checkpoint expects " +
                          std::to_string(config.d_img));
    if (config.precision == Precision::f64)
        return evaluate(load_checkpoint<double>(checkpoint_path), vocab, captions, embeddings);
    return evaluate(load_checkpoint<float>(checkpoint_path), vocab, captions, embeddings);
}

std::string eval_report_json(const EvalReport& report) {
    nlohmann::ordered_json doc;
    doc["corpus_bleu"] = report.corpus_bleu;
    doc["mean_sentence_bleu_x100"] = report.mean_sentence_bleu_x100;
    doc["per_image"] = nlohmann::ordered_json::array();
    for (const auto& image : report.per_image) {
        nlohmann::ordered_json entry;
        entry["id"] = image.image_id;
        entry["reference"] = image.reference;
        entry["generated"] = image.generated;
        entry["sentence_bleu"] = image.sentence_bleu;
        doc["per_image"].push_back(std::move(entry));
    }
    return doc.dump(2);
}

void write_eval_report(const EvalReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open eval report for writing: " + path);
    out << eval_report_json(report) << '\n';
    if (!out) throw IoError("failed writing eval report: " + path);
}

}  // namespace bncap
