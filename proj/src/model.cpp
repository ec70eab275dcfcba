#include "bncap/model.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "bncap/binary_io.hpp"
#include "bncap/random.hpp"

namespace bncap {

void ModelConfig::validate() const {
    if (d_img == 0 || d_embed == 0 || hidden == 0 || vocab_size == 0 || n == 0)
        throw ConfigError("model dimensions (d_img, d_embed, hidden, vocab_size, n) must all be positive");
    if (layers != 2) throw ConfigError("the model has exactly 2 stacked LSTM layers, got " + std::to_string(layers));
    if (precision != Precision::f32 && precision != Precision::f64) throw ConfigError("precision must be 32 or 64");
}

namespace {

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    return Scalar(1) / (Scalar(1) + std::exp(-x));
}

/// Applies the gate nonlinearities to pre-activations `z` and advances the cell.
template <typename Scalar, typename Z, typename G, typename C, typename H>
void cell_step(const Z& z, const VectorX<Scalar>& c_prev, G&& gates, C&& c, H&& h) {
    const Eigen::Index n = c_prev.size();
    gates.segment(0, n) = z.segment(0, n).unaryExpr(&sigmoid<Scalar>);
    gates.segment(n, n) = z.segment(n, n).unaryExpr(&sigmoid<Scalar>);
    gates.segment(2 * n, n) = z.segment(2 * n, n).array().tanh().matrix();
    gates.segment(3 * n, n) = z.segment(3 * n, n).unaryExpr(&sigmoid<Scalar>);
    c = (gates.segment(n, n).array() * c_prev.array() + gates.segment(0, n).array() * gates.segment(2 * n, n).array())
            .matrix();
    h = (gates.segment(3 * n, n).array() * c.array().tanh()).matrix();
}

}  // namespace

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::zeros(const ModelConfig& config) {
    config.validate();
    ModelParams p;
    p.config = config;
    p.E = MatrixX<Scalar>::Zero(config.vocab_size, config.d_embed);
    p.W_img = MatrixX<Scalar>::Zero(config.d_embed, config.d_img);
    p.b_img = VectorX<Scalar>::Zero(config.d_embed);
    const Eigen::Index gates = 4 * static_cast<Eigen::Index>(config.hidden);
    for (std::uint32_t layer = 0; layer < config.layers; ++layer) {
        for (std::uint32_t dir = 0; dir < config.directions(); ++dir) {
            p.lstm.push_back({MatrixX<Scalar>::Zero(gates, config.input_dim(layer)),
                              MatrixX<Scalar>::Zero(gates, config.hidden), VectorX<Scalar>::Zero(gates)});
        }
    }
    p.W_out = MatrixX<Scalar>::Zero(config.vocab_size, config.output_dim());
    p.b_out = VectorX<Scalar>::Zero(config.vocab_size);
    return p;
}

template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& config, std::uint64_t seed) {
    auto params = ModelParams<Scalar>::zeros(config);
    random::Engine rng(seed);
    const auto fill = [&](MatrixX<Scalar>& m) {
        // Column-major traversal, matching Eigen storage.
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(random::uniform(rng, -0.08, 0.08));
    };
    fill(params.E);
    fill(params.W_img);
    for (auto& cell : params.lstm) {
        fill(cell.W_x);
        fill(cell.W_h);
        cell.b.segment(config.hidden, config.hidden).setOnes();
    }
    fill(params.W_out);
    return params;
}

template <typename Scalar>
MatrixX<Scalar> embed_sequence(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input) {
    const auto& config = params.config;
    if (input.image.size() != static_cast<Eigen::Index>(config.d_img))
        throw ConfigError("image vector has dimension " + std::to_string(input.image.size()) + ", model expects " +
                          std::to_string(config.d_img));
    if (input.prefix.size() != config.n)
        throw ConfigError("prefix has length " + std::to_string(input.prefix.size()) + ", model expects " +
                          std::to_string(config.n));

    MatrixX<Scalar> sequence(config.d_embed, config.steps());
    sequence.col(0).noalias() = params.W_img * input.image + params.b_img;
    for (std::size_t t = 0; t < input.prefix.size(); ++t) {
        const TokenId id = input.prefix[t];
        if (id >= config.vocab_size)
            throw OutOfRangeError("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                                  std::to_string(config.vocab_size));
        sequence.col(static_cast<Eigen::Index>(t) + 1) = params.E.row(id).transpose();
    }
    return sequence;
}

template <typename Scalar>
LstmState<Scalar> lstm_cell(const VectorX<Scalar>& x, const VectorX<Scalar>& h_prev, const VectorX<Scalar>& c_prev,
                            const LstmWeights<Scalar>& weights) {
    const VectorX<Scalar> z = weights.W_x * x + weights.W_h * h_prev + weights.b;
    VectorX<Scalar> gates(z.size());
    LstmState<Scalar> next{VectorX<Scalar>(h_prev.size()), VectorX<Scalar>(c_prev.size())};
    cell_step<Scalar>(z, c_prev, gates, next.c, next.h);
    return next;
}

template <typename Scalar>
ForwardTrace<Scalar> forward_trace(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input) {
    const auto& config = params.config;
    const Eigen::Index steps = config.steps();
    const Eigen::Index hidden = config.hidden;

    ForwardTrace<Scalar> trace;
    trace.embedded = embed_sequence(params, input);
    trace.cells.reserve(params.lstm.size());

    VectorX<Scalar> z(4 * hidden);
    for (std::uint32_t layer = 0; layer < config.layers; ++layer) {
        const MatrixX<Scalar>& layer_input = layer == 0 ? trace.embedded : trace.layer_outputs.back();
        MatrixX<Scalar> output(config.output_dim(), steps);
        for (std::uint32_t dir = 0; dir < config.directions(); ++dir) {
            const auto& weights = params.cell(layer, dir);
            MatrixX<Scalar> projected = weights.W_x * layer_input;
            projected.colwise() += weights.b;

            DirectionTrace<Scalar> cell{MatrixX<Scalar>(4 * hidden, steps), MatrixX<Scalar>(hidden, steps),
                                        MatrixX<Scalar>(hidden, steps)};
            VectorX<Scalar> h_prev = VectorX<Scalar>::Zero(hidden);
            VectorX<Scalar> c_prev = VectorX<Scalar>::Zero(hidden);
            for (Eigen::Index s = 0; s < steps; ++s) {
                const Eigen::Index t = dir == 0 ? s : steps - 1 - s;
                z.noalias() = weights.W_h * h_prev;
                z += projected.col(t);
                cell_step<Scalar>(z, c_prev, cell.gates.col(t), cell.c.col(t), cell.h.col(t));
                h_prev = cell.h.col(t);
                c_prev = cell.c.col(t);
            }
            output.middleRows(dir * hidden, hidden) = cell.h;
            trace.cells.push_back(std::move(cell));
        }
        trace.layer_outputs.push_back(std::move(output));
    }
    trace.logits.noalias() = params.W_out * trace.layer_outputs.back().col(steps - 1);
    trace.logits += params.b_out;
    return trace;
}

template <typename Scalar>
VectorX<Scalar> forward(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input) {
    return forward_trace(params, input).logits;
}

template <typename Scalar>
LossAndProbs<Scalar> softmax_cross_entropy(const VectorX<Scalar>& logits, TokenId target) {
    if (target >= logits.size())
        throw OutOfRangeError("target id " + std::to_string(target) + " out of range for " +
                              std::to_string(logits.size()) + " logits");
    const Scalar max_logit = logits.maxCoeff();
    const VectorX<Scalar> shifted = logits.array() - max_logit;
    const Scalar log_sum = std::log(shifted.array().exp().sum());
    LossAndProbs<Scalar> out;
    out.probs = (shifted.array() - log_sum).exp().matrix();
    out.loss = log_sum - shifted[target];
    return out;
}

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_config(std::ostream& out, const ModelConfig& config) {
    using namespace binary_io;
    write_u32(out, config.d_img);
    write_u32(out, config.d_embed);
    write_u32(out, config.hidden);
    write_u32(out, config.layers);
    write_u32(out, config.vocab_size);
    write_u32(out, config.n);
    write_u8(out, static_cast<std::uint8_t>(config.precision));
    write_u8(out, config.bidirectional ? 1 : 0);
}

ModelConfig read_header(std::istream& in, const std::string& path) {
    using namespace binary_io;
    char magic[4];
    read_exact(in, magic, 4, "CCKP magic");
    if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw FormatError("bad magic in checkpoint file: " + path);
    const auto version = read_u32(in, "CCKP version");
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    ModelConfig config;
    config.d_img = read_u32(in, "config");
    config.d_embed = read_u32(in, "config");
    config.hidden = read_u32(in, "config");
    config.layers = read_u32(in, "config");
    config.vocab_size = read_u32(in, "config");
    config.n = read_u32(in, "config");
    const auto precision = read_u8(in, "config");
    if (precision != 32 && precision != 64) throw FormatError("invalid precision byte " + std::to_string(precision));
    config.precision = static_cast<Precision>(precision);
    const auto bidirectional = read_u8(in, "config");
    if (bidirectional > 1) throw FormatError("invalid bidirectional byte");
    config.bidirectional = bidirectional == 1;
    try {
        config.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint holds an invalid config: ") + e.what());
    }
    return config;
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const ModelParams<Scalar>& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    using namespace binary_io;
    write_bytes(out, std::string_view(kCheckpointMagic, 4));
    write_u32(out, kCheckpointVersion);
    write_config(out, params.config);
    std::uint32_t count = 0;
    params.for_each_tensor([&](const std::string&, const auto&) { ++count; });
    write_u32(out, count);
    params.for_each_tensor([&](const std::string& name, const auto& tensor) {
        using Tensor = std::decay_t<decltype(tensor)>;
        write_string(out, name);
        if constexpr (Tensor::ColsAtCompileTime == 1) {
            write_u32(out, 1);
            write_u32(out, static_cast<std::uint32_t>(tensor.size()));
        } else {
            write_u32(out, 2);
            write_u32(out, static_cast<std::uint32_t>(tensor.rows()));
            write_u32(out, static_cast<std::uint32_t>(tensor.cols()));
        }
        for (Eigen::Index i = 0; i < tensor.rows(); ++i)
            for (Eigen::Index j = 0; j < tensor.cols(); ++j) write_f32(out, static_cast<float>(tensor(i, j)));
    });
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

ModelConfig read_checkpoint_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    return read_header(in, path);
}

template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    using namespace binary_io;
    const ModelConfig config = read_header(in, path);
    if (config.precision != precision_of<Scalar>())
        throw ConfigError("checkpoint precision is " + std::to_string(static_cast<int>(config.precision)) +
                          "-bit, requested " + std::to_string(static_cast<int>(precision_of<Scalar>())) + "-bit");

    struct RawTensor {
        std::vector<std::uint32_t> dims;
        std::vector<float> values;
    };
    std::map<std::string, RawTensor> tensors;
    const auto count = read_u32(in, "tensor count");
    for (std::uint32_t k = 0; k < count; ++k) {
        std::string name = read_string(in, "tensor name");
        RawTensor raw;
        const auto rank = read_u32(in, "tensor rank");
        if (rank < 1 || rank > 2) throw FormatError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
        std::size_t total = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            raw.dims.push_back(read_u32(in, "tensor dims"));
            total *= raw.dims.back();
        }
        if (total > (std::size_t{1} << 32)) throw FormatError("tensor '" + name + "' is implausibly large");
        raw.values.resize(total);
        for (auto& v : raw.values) v = read_f32(in, "tensor payload");
        if (!tensors.emplace(name, std::move(raw)).second) throw DuplicateKeyError("duplicate tensor '" + name + "'");
    }
    if (!at_eof(in)) throw FormatError("trailing bytes in checkpoint: " + path);

    auto params = ModelParams<Scalar>::zeros(config);
    std::size_t matched = 0;
    params.for_each_tensor([&](const std::string& name, auto& tensor) {
        using Tensor = std::decay_t<decltype(tensor)>;
        const auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
        const RawTensor& raw = it->second;
        std::vector<std::uint32_t> expected;
        if constexpr (Tensor::ColsAtCompileTime == 1)
            expected = {static_cast<std::uint32_t>(tensor.size())};
        else
            expected = {static_cast<std::uint32_t>(tensor.rows()), static_cast<std::uint32_t>(tensor.cols())};
        if (raw.dims != expected) throw FormatError("tensor '" + name + "' has the wrong shape for the stored config");
        std::size_t k = 0;
        for (Eigen::Index i = 0; i < tensor.rows(); ++i)
            for (Eigen::Index j = 0; j < tensor.cols(); ++j) {
                const float v = raw.values[k++];
                if (!std::isfinite(v)) throw FormatError("tensor '" + name + "' holds a non-finite value");
                tensor(i, j) = static_cast<Scalar>(v);
            }
        ++matched;
    });
    if (matched != tensors.size()) throw FormatError("checkpoint holds unexpected extra tensors");
    return params;
}

#define BNCAP_INSTANTIATE_MODEL(Scalar)                                                                            \
    template struct ModelParams<Scalar>;                                                                           \
    template ModelParams<Scalar> init_params<Scalar>(const ModelConfig&, std::uint64_t);                           \
    template MatrixX<Scalar> embed_sequence<Scalar>(const ModelParams<Scalar>&, const SequenceInput<Scalar>&);     \
    template LstmState<Scalar> lstm_cell<Scalar>(const VectorX<Scalar>&, const VectorX<Scalar>&,                   \
                                                 const VectorX<Scalar>&, const LstmWeights<Scalar>&);              \
    template ForwardTrace<Scalar> forward_trace<Scalar>(const ModelParams<Scalar>&, const SequenceInput<Scalar>&); \
    template VectorX<Scalar> forward<Scalar>(const ModelParams<Scalar>&, const SequenceInput<Scalar>&);            \
    template LossAndProbs<Scalar> softmax_cross_entropy<Scalar>(const VectorX<Scalar>&, TokenId);                  \
    template void save_checkpoint<Scalar>(const ModelParams<Scalar>&, const std::string&);                         \
    template ModelParams<Scalar> load_checkpoint<Scalar>(const std::string&);

BNCAP_INSTANTIATE_MODEL(float)
BNCAP_INSTANTIATE_MODEL(double)

// Extended precision is used only as a finite-difference reference.
template struct ModelParams<long double>;
template MatrixX<long double> embed_sequence<long double>(const ModelParams<long double>&,
                                                          const SequenceInput<long double>&);
template ForwardTrace<long double> forward_trace<long double>(const ModelParams<long double>&,
                                                              const SequenceInput<long double>&);
template VectorX<long double> forward<long double>(const ModelParams<long double>&, const SequenceInput<long double>&);
template LossAndProbs<long double> softmax_cross_entropy<long double>(const VectorX<long double>&, TokenId);

#undef BNCAP_INSTANTIATE_MODEL

}  // namespace bncap
