#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "bncap/errors.hpp"
#include "bncap/random.hpp"
#include "bncap/text.hpp"

namespace bncap {

/// Precomputed image feature vector standing in for a CNN's penultimate layer.
struct ImageEmbedding {
    std::string image_id;
    Eigen::VectorXf vector;
};

/// Embeddings of one CEMB file: fixed dimension, unique ids, file order retained.
class EmbeddingTable {
public:
    explicit EmbeddingTable(std::uint32_t dim = 0) : dim_(dim) {}

    std::uint32_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return records_.size(); }

    /// Throws FormatError on a dimension mismatch or non-finite component,
    /// DuplicateKeyError when the id is already present.
    void add(ImageEmbedding embedding);

    /// nullptr when absent.
    const ImageEmbedding* find(std::string_view image_id) const;

    /// Throws ReferentialIntegrityError when absent.
    const ImageEmbedding& at(std::string_view image_id) const;

    const std::vector<ImageEmbedding>& records() const noexcept { return records_; }

private:
    std::uint32_t dim_;
    std::vector<ImageEmbedding> records_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// CEMB: "CEMB", u32 version=1, u32 count, u32 dim, then per record
/// u32 id_len, id bytes, dim × f32. Little-endian.
void save_embeddings(const EmbeddingTable& table, const std::string& path);
EmbeddingTable load_embeddings(const std::string& path);

/// One line of a caption TSV, caption text kept raw.
struct RawCaption {
    std::string image_id;
    std::string text;

    friend bool operator==(const RawCaption&, const RawCaption&) = default;
};

/// Reads `image_id<TAB>caption` lines. Blank lines are skipped.
/// Throws LineFormatError for a line without a tab or with an empty id,
/// DuplicateKeyError for a repeated id.
std::vector<RawCaption> load_captions(const std::string& path);
void save_captions(std::span<const RawCaption> captions, const std::string& path);

struct CaptionRecord {
    std::string image_id;
    std::vector<TokenId> encoded;  // exactly n ids
};

/// Tokenizes and encodes every caption to length `n`.
std::vector<CaptionRecord> encode_captions(const Vocabulary& vocab, std::span<const RawCaption> captions, std::size_t n);

/// One training row: image, the first `j` caption ids padded with `<unk>` to n, and id j as target.
struct ExpandedSample {
    std::string image_id;
    std::vector<TokenId> prefix;
    TokenId target = kUnkId;

    friend bool operator==(const ExpandedSample&, const ExpandedSample&) = default;
};

/// Produces the n prefix/target rows of one image–caption pair.
std::vector<ExpandedSample> expand_pair(const CaptionRecord& record, std::size_t n);

/// Expands every record; the result has records.size() × n rows in record order.
std::vector<ExpandedSample> expand_all(std::span<const CaptionRecord> records, std::size_t n);

template <typename Record>
struct Split {
    std::vector<Record> train;
    std::vector<Record> test;
};

/// Seeded uniform shuffle, then the first `test_count` records go to test.
template <typename Record>
Split<Record> split_train_test(std::span<const Record> records, std::size_t test_count, std::uint64_t seed) {
    if (test_count > records.size())
        throw ConfigError("test_count " + std::to_string(test_count) + " exceeds record count " +
                          std::to_string(records.size()));
    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    random::Engine rng(seed);
    random::shuffle(std::span<std::size_t>(order), rng);

    Split<Record> split;
    split.test.reserve(test_count);
    split.train.reserve(records.size() - test_count);
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < test_count ? split.test : split.train).push_back(records[order[i]]);
    return split;
}

struct SynthOptions {
    std::size_t num_images = 100;
    std::uint32_t d_img = 16;
    std::size_t vocab_size = 20;
    std::size_t min_caption_len = 4;
    std::size_t max_caption_len = 10;
    std::uint64_t seed = 0;
};

struct SynthDataset {
    EmbeddingTable embeddings;
    std::vector<RawCaption> captions;
};

/// Deterministic toy corpus. Each image's vector comes from a generator keyed by
/// (seed, image_id) and its caption is a fixed function of that vector over the
/// alphabet w0..w{vocab_size-1}.
SynthDataset synth_dataset(const SynthOptions& options);

struct SynthPaths {
    std::filesystem::path embeddings;
    std::filesystem::path captions;
};

/// Writes `embeddings.cemb` and `captions.tsv` into `out_dir`, creating it if needed.
SynthPaths write_synth_dataset(const SynthOptions& options, const std::filesystem::path& out_dir);

}  // namespace bncap
