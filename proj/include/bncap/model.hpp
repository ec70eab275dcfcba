#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "bncap/errors.hpp"
#include "bncap/text.hpp"

namespace bncap {

enum class Precision : std::uint8_t { f32 = 32, f64 = 64 };

template <typename Scalar>
constexpr Precision precision_of() {
    static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>,
                  "only 32- and 64-bit models are storable");
    return std::is_same_v<Scalar, float> ? Precision::f32 : Precision::f64;
}

/// Network shape. The image is projected to `d_embed` and prepended to the
/// `n` prefix word embeddings, giving an (n+1)-step sequence for the stacked LSTM.
struct ModelConfig {
    std::uint32_t d_img = 0;
    std::uint32_t d_embed = 512;
    std::uint32_t hidden = 256;  // per direction
    std::uint32_t layers = 2;
    bool bidirectional = true;
    std::uint32_t vocab_size = 0;
    std::uint32_t n = 10;
    Precision precision = Precision::f32;

    std::uint32_t directions() const noexcept { return bidirectional ? 2 : 1; }
    std::uint32_t output_dim() const noexcept { return hidden * directions(); }
    std::uint32_t input_dim(std::uint32_t layer) const noexcept { return layer == 0 ? d_embed : output_dim(); }
    std::uint32_t steps() const noexcept { return n + 1; }

    /// Throws ConfigError unless every dimension is positive and layers == 2.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// One direction of one LSTM layer. Gate rows are blocked (input, forget, candidate, output).
template <typename Scalar>
struct LstmWeights {
    MatrixX<Scalar> W_x;  // 4h × input_dim
    MatrixX<Scalar> W_h;  // 4h × h
    VectorX<Scalar> b;    // 4h
};

template <typename Scalar>
struct ModelParams {
    ModelConfig config;
    MatrixX<Scalar> E;      // V × d_embed
    MatrixX<Scalar> W_img;  // d_embed × d_img
    VectorX<Scalar> b_img;
    std::vector<LstmWeights<Scalar>> lstm;  // layer-major, then direction
    MatrixX<Scalar> W_out;  // V × output_dim
    VectorX<Scalar> b_out;

    /// All tensors shaped for `config` and filled with zeros.
    static ModelParams zeros(const ModelConfig& config);

    LstmWeights<Scalar>& cell(std::uint32_t layer, std::uint32_t dir) { return lstm[layer * config.directions() + dir]; }
    const LstmWeights<Scalar>& cell(std::uint32_t layer, std::uint32_t dir) const {
        return lstm[layer * config.directions() + dir];
    }

    /// Visits every tensor in checkpoint order as f(name, tensor).
    template <typename F>
    void for_each_tensor(F&& f) {
        visit(*this, f);
    }
    template <typename F>
    void for_each_tensor(F&& f) const {
        visit(*this, f);
    }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        for_each_tensor([&](const std::string&, const auto& t) { total += static_cast<std::size_t>(t.size()); });
        return total;
    }

private:
    template <typename Self, typename F>
    static void visit(Self& self, F& f) {
        f(std::string("E"), self.E);
        f(std::string("W_img"), self.W_img);
        f(std::string("b_img"), self.b_img);
        const char* dir_names[2] = {"fwd", "bwd"};
        for (std::uint32_t layer = 0; layer < self.config.layers; ++layer) {
            for (std::uint32_t dir = 0; dir < self.config.directions(); ++dir) {
                auto& w = self.cell(layer, dir);
                const std::string prefix = "lstm" + std::to_string(layer + 1) + "." + dir_names[dir] + ".";
                f(prefix + "W_x", w.W_x);
                f(prefix + "W_h", w.W_h);
                f(prefix + "b", w.b);
            }
        }
        f(std::string("W_out"), self.W_out);
        f(std::string("b_out"), self.b_out);
    }
};

/// Same layout as the parameters, one entry per trainable component.
template <typename Scalar>
using Gradients = ModelParams<Scalar>;

/// Uniform weights on [-0.08, 0.08], zero biases except forget-gate biases of 1.
template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& config, std::uint64_t seed);

/// The two model inputs: an image feature vector and an n-id prefix.
template <typename Scalar>
struct SequenceInput {
    VectorX<Scalar> image;
    std::vector<TokenId> prefix;
};

/// Column 0 is the projected image, column t (1..n) the embedding of prefix[t-1].
/// Throws OutOfRangeError for bad ids and ConfigError for shape mismatches.
template <typename Scalar>
MatrixX<Scalar> embed_sequence(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input);

template <typename Scalar>
struct LstmState {
    VectorX<Scalar> h;
    VectorX<Scalar> c;
};

template <typename Scalar>
LstmState<Scalar> lstm_cell(const VectorX<Scalar>& x, const VectorX<Scalar>& h_prev, const VectorX<Scalar>& c_prev,
                            const LstmWeights<Scalar>& weights);

/// Activations of one direction of one layer, indexed by sequence position
/// (not processing order).
template <typename Scalar>
struct DirectionTrace {
    MatrixX<Scalar> gates;  // 4h × T, post-activation i, f, g, o
    MatrixX<Scalar> c;      // h × T
    MatrixX<Scalar> h;      // h × T
};

/// Everything the backward pass needs from one forward evaluation.
template <typename Scalar>
struct ForwardTrace {
    MatrixX<Scalar> embedded;                     // d_embed × T
    std::vector<MatrixX<Scalar>> layer_outputs;   // output_dim × T per layer
    std::vector<DirectionTrace<Scalar>> cells;    // same indexing as ModelParams::lstm
    VectorX<Scalar> logits;                       // V
};

template <typename Scalar>
ForwardTrace<Scalar> forward_trace(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input);

/// V logits read out from the last time step of the top layer.
template <typename Scalar>
VectorX<Scalar> forward(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input);

template <typename Scalar>
struct LossAndProbs {
    Scalar loss;
    VectorX<Scalar> probs;
};

/// Max-shifted softmax and −ln p[target]. Throws OutOfRangeError for a bad target.
template <typename Scalar>
LossAndProbs<Scalar> softmax_cross_entropy(const VectorX<Scalar>& logits, TokenId target);

/// CCKP checkpoint: "CCKP", u32 version=1, config (d_img, d_embed, hidden, layers,
/// vocab_size, n as u32; precision bits and bidirectional as u8), u32 tensor count,
/// then named row-major f32 tensors. Doubles are narrowed to float.
template <typename Scalar>
void save_checkpoint(const ModelParams<Scalar>& params, const std::string& path);

/// Reads only the header.
ModelConfig read_checkpoint_config(const std::string& path);

/// Throws ConfigError if the stored precision differs from Scalar.
template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const std::string& path);

}  // namespace bncap
