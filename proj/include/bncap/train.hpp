#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bncap/data.hpp"
#include "bncap/model.hpp"

namespace bncap {

/// Exact gradient of the cross-entropy loss for one (input, target) pair.
/// `grads` is resized to the parameter shapes and overwritten. Returns the loss.
template <typename Scalar>
Scalar backward(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input, TokenId target,
                Gradients<Scalar>& grads);

template <typename Scalar>
struct LossAndGradients {
    Scalar loss;
    Gradients<Scalar> grads;
};

template <typename Scalar>
LossAndGradients<Scalar> backward(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input,
                                  TokenId target);

struct GradCheckOptions {
    double eps = 1e-5;
    /// 0 checks every component; otherwise a seeded subset of this many.
    std::size_t max_components = 0;
    std::uint64_t subset_seed = 0;
    /// Runs on the analytic gradient before comparison. Exists so the checker itself can be tested.
    std::function<void(Gradients<double>&)> analytic_hook;
};

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t components_checked = 0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    /// Flat (tensor order, column-major) indices compared when a subset was sampled.
    std::vector<std::size_t> subset;
};

/// Compares analytic gradients with central differences,
/// |a − n| / max(1e-8, |a| + |n|), and reports the maximum.
/// Only double precision is accepted; eps must be positive.
template <typename Scalar>
GradCheckResult grad_check(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input, TokenId target,
                           const GradCheckOptions& options = {});

/// params ← params − learning_rate · grads.
template <typename Scalar>
void sgd_step(ModelParams<Scalar>& params, const Gradients<Scalar>& grads, Scalar learning_rate);

/// Squared L2 norm over every gradient component.
template <typename Scalar>
Scalar squared_norm(const Gradients<Scalar>& grads);

struct TrainConfig {
    double learning_rate = 0.1;
    std::uint32_t epochs = 50;
    std::uint32_t batch_size = 16;
    std::uint64_t shuffle_seed = 0;
    std::uint64_t init_seed = 0;
    /// Print a progress line every this many epochs; 0 disables.
    std::uint32_t log_every = 0;
    /// Rescale the batch gradient to this L2 norm when exceeded; 0 disables.
    double max_grad_norm = 0.0;
    std::size_t min_count = 1;
    /// Worker threads for per-sample backward passes. Results do not depend on it.
    std::uint32_t threads = 1;

    void validate() const;
};

struct EpochStats {
    std::uint32_t epoch = 0;
    double mean_loss = 0.0;
    std::size_t samples = 0;
    double seconds = 0.0;
};

struct TrainingReport {
    std::size_t samples_per_epoch = 0;
    std::vector<EpochStats> epochs;
};

/// One JSON object per epoch: {"epoch", "mean_loss", "samples", "seconds"}.
void write_training_report(const TrainingReport& report, const std::string& path);

/// In-memory SGD loop over already-expanded samples. Each epoch shuffles the
/// sample order, then steps on the mean gradient of each minibatch.
template <typename Scalar>
TrainingReport fit(ModelParams<Scalar>& params, std::span<const ExpandedSample> samples,
                   const EmbeddingTable& embeddings, const TrainConfig& config,
                   const std::function<void(const EpochStats&)>& on_epoch = {});

struct TrainPaths {
    std::string captions;
    std::string embeddings;
    std::string checkpoint_out;
    std::string vocab_out;   // empty → checkpoint_out + ".vocab"
    std::string report_out;  // empty → no report file
};

struct TrainOutcome {
    ModelConfig model;  // with vocab_size and d_img filled in from the data
    Vocabulary vocab;
    TrainingReport report;
};

/// File-level pipeline: load, build the vocabulary, encode, expand, check
/// that every caption has an embedding, fit, and write checkpoint, vocabulary
/// and report. `model.vocab_size` and `model.d_img` are taken from the data.
TrainOutcome train(const TrainPaths& paths, ModelConfig model, const TrainConfig& config,
                   const std::function<void(const EpochStats&)>& on_epoch = {});

/// Sidecar vocabulary path used when none is given explicitly.
std::string default_vocab_path(const std::string& checkpoint_path);

}  // namespace bncap
