#include "bncap/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_set>

#include "bncap/binary_io.hpp"

namespace bncap {

namespace {

constexpr char kEmbeddingMagic[4] = {'C', 'E', 'M', 'B'};
constexpr std::uint32_t kEmbeddingVersion = 1;

}  // namespace

void EmbeddingTable::add(ImageEmbedding embedding) {
    if (static_cast<std::uint32_t>(embedding.vector.size()) != dim_)
        throw FormatError("embedding for '" + embedding.image_id + "' has dimension " +
                          std::to_string(embedding.vector.size()) + ", expected " + std::to_string(dim_));
    if (!embedding.vector.allFinite()) throw FormatError("embedding for '" + embedding.image_id + "' is not finite");
    if (!index_.emplace(embedding.image_id, records_.size()).second)
        throw DuplicateKeyError("duplicate image id: " + embedding.image_id);
    records_.push_back(std::move(embedding));
}

const ImageEmbedding* EmbeddingTable::find(std::string_view image_id) const {
    const auto it = index_.find(std::string(image_id));
    return it == index_.end() ? nullptr : &records_[it->second];
}

const ImageEmbedding& EmbeddingTable::at(std::string_view image_id) const {
    if (const auto* found = find(image_id)) return *found;
    throw ReferentialIntegrityError("no embedding for image id '" + std::string(image_id) + "'");
}

void save_embeddings(const EmbeddingTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open embeddings file for writing: " + path);
    using namespace binary_io;
    write_bytes(out, std::string_view(kEmbeddingMagic, 4));
    write_u32(out, kEmbeddingVersion);
    write_u32(out, static_cast<std::uint32_t>(table.size()));
    write_u32(out, table.dim());
    for (const auto& record : table.records()) {
        write_string(out, record.image_id);
        for (Eigen::Index i = 0; i < record.vector.size(); ++i) write_f32(out, record.vector[i]);
    }
    if (!out) throw IoError("failed writing embeddings file: " + path);
}

EmbeddingTable load_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open embeddings file: " + path);
    using namespace binary_io;
    char magic[4];
    read_exact(in, magic, 4, "CEMB magic");
    if (!std::equal(magic, magic + 4, kEmbeddingMagic)) throw FormatError("bad magic in embeddings file: " + path);
    const auto version = read_u32(in, "CEMB version");
    if (version != kEmbeddingVersion)
        throw FormatError("unsupported embeddings file version " + std::to_string(version));
    const auto count = read_u32(in, "CEMB count");
    const auto dim = read_u32(in, "CEMB dim");

    EmbeddingTable table(dim);
    for (std::uint32_t r = 0; r < count; ++r) {
        ImageEmbedding embedding;
        embedding.image_id = read_string(in, "CEMB image id");
        if (embedding.image_id.empty()) throw FormatError("empty image id in embeddings file");
        embedding.vector.resize(dim);
        for (std::uint32_t i = 0; i < dim; ++i) embedding.vector[i] = read_f32(in, "CEMB vector");
        table.add(std::move(embedding));
    }
    if (!at_eof(in)) throw FormatError("trailing bytes after " + std::to_string(count) + " embeddings");
    return table;
}

std::vector<RawCaption> load_captions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open captions file: " + path);
    std::vector<RawCaption> captions;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw LineFormatError(line_no, "missing tab separator");
        RawCaption caption{line.substr(0, tab), line.substr(tab + 1)};
        if (caption.image_id.empty()) throw LineFormatError(line_no, "empty image id");
        if (!seen.insert(caption.image_id).second)
            throw DuplicateKeyError("line " + std::to_string(line_no) + ": duplicate image id '" + caption.image_id + "'");
        captions.push_back(std::move(caption));
    }
    return captions;
}

void save_captions(std::span<const RawCaption> captions, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open captions file for writing: " + path);
    for (const auto& caption : captions) out << caption.image_id << '\t' << caption.text << '\n';
    if (!out) throw IoError("failed writing captions file: " + path);
}

std::vector<CaptionRecord> encode_captions(const Vocabulary& vocab, std::span<const RawCaption> captions, std::size_t n) {
    std::vector<CaptionRecord> records;
    records.reserve(captions.size());
    for (const auto& caption : captions)
        records.push_back({caption.image_id, encode(vocab, normalize_and_tokenize(caption.text), n)});
    return records;
}

std::vector<ExpandedSample> expand_pair(const CaptionRecord& record, std::size_t n) {
    if (record.encoded.size() != n)
        throw ConfigError("encoded caption for '" + record.image_id + "' has length " +
                          std::to_string(record.encoded.size()) + ", expected " + std::to_string(n));
    std::vector<ExpandedSample> samples;
    samples.reserve(n);
    std::vector<TokenId> prefix(n, kUnkId);
    for (std::size_t j = 0; j < n; ++j) {
        samples.push_back({record.image_id, prefix, record.encoded[j]});
        prefix[j] = record.encoded[j];
    }
    return samples;
}

std::vector<ExpandedSample> expand_all(std::span<const CaptionRecord> records, std::size_t n) {
    std::vector<ExpandedSample> samples;
    samples.reserve(records.size() * n);
    for (const auto& record : records) {
        auto rows = expand_pair(record, n);
        std::move(rows.begin(), rows.end(), std::back_inserter(samples));
    }
    return samples;
}

SynthDataset synth_dataset(const SynthOptions& options) {
    if (options.num_images == 0 || options.d_img == 0 || options.vocab_size == 0 || options.min_caption_len == 0 ||
        options.max_caption_len < options.min_caption_len)
        throw ConfigError("synthetic dataset sizes must be positive with min_caption_len <= max_caption_len");

    SynthDataset dataset{EmbeddingTable(options.d_img), {}};
    const std::size_t length_range = options.max_caption_len - options.min_caption_len + 1;
    const auto bin = [](float value, std::size_t bins) {
        const auto b = static_cast<std::size_t>((static_cast<double>(value) + 1.0) * 0.5 * static_cast<double>(bins));
        return std::min(b, bins - 1);
    };

    for (std::size_t i = 0; i < options.num_images; ++i) {
        char id_buf[32];
        std::snprintf(id_buf, sizeof id_buf, "img%05zu", i);
        const std::string image_id = id_buf;

        random::Engine rng(random::mix(options.seed, random::fnv1a(image_id)));
        Eigen::VectorXf vector(options.d_img);
        for (std::uint32_t k = 0; k < options.d_img; ++k)
            vector[k] = static_cast<float>(random::uniform(rng, -1.0, 1.0));

        const std::size_t length = options.min_caption_len + bin(vector[0], length_range);
        std::string text;
        for (std::size_t j = 0; j < length; ++j) {
            const float feature = vector[static_cast<Eigen::Index>((j + 1) % options.d_img)];
            // Distinct positions reading the same feature get shifted words so repeats stay rare.
            const std::size_t word = (bin(feature, options.vocab_size) + j / options.d_img) % options.vocab_size;
            if (j > 0) text.push_back(' ');
            text += "w" + std::to_string(word);
        }
        dataset.embeddings.add({image_id, std::move(vector)});
        dataset.captions.push_back({image_id, std::move(text)});
    }
    return dataset;
}

SynthPaths write_synth_dataset(const SynthOptions& options, const std::filesystem::path& out_dir) {
    const SynthDataset dataset = synth_dataset(options);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
    SynthPaths paths{out_dir / "embeddings.cemb", out_dir / "captions.tsv"};
    save_embeddings(dataset.embeddings, paths.embeddings.string());
    save_captions(dataset.captions, paths.captions.string());
    return paths;
}

}  // namespace bncap
