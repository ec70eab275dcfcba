#include "bncap/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "bncap/random.hpp"

namespace bncap {

namespace {

template <typename Scalar>
struct NamedSpan {
    std::string name;
    std::span<Scalar> values;
};

/// Flat views over every tensor, in checkpoint order. Storage is column-major.
template <typename Params>
auto tensor_spans(Params& params) {
    using Scalar = std::remove_const_t<typename std::remove_reference_t<decltype(params.E)>::Scalar>;
    using Element = std::conditional_t<std::is_const_v<Params>, const Scalar, Scalar>;
    std::vector<NamedSpan<Element>> spans;
    params.for_each_tensor([&](const std::string& name, auto& tensor) {
        spans.push_back({name, std::span<Element>(tensor.data(), static_cast<std::size_t>(tensor.size()))});
    });
    return spans;
}

template <typename Scalar>
void set_zero_like(Gradients<Scalar>& grads, const ModelConfig& config) {
    if (!(grads.config == config) || grads.lstm.empty()) {
        grads = Gradients<Scalar>::zeros(config);
        return;
    }
    grads.for_each_tensor([](const std::string&, auto& t) { t.setZero(); });
}

template <typename Scalar>
void add_into(Gradients<Scalar>& acc, const Gradients<Scalar>& g) {
    auto dst = tensor_spans(acc);
    const auto src = tensor_spans(g);
    for (std::size_t k = 0; k < dst.size(); ++k)
        for (std::size_t i = 0; i < dst[k].values.size(); ++i) dst[k].values[i] += src[k].values[i];
}

template <typename Scalar>
void scale(Gradients<Scalar>& g, Scalar factor) {
    g.for_each_tensor([&](const std::string&, auto& t) { t *= factor; });
}

template <typename Scalar>
Scalar sample_loss(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input, TokenId target) {
    return softmax_cross_entropy(forward(params, input), target).loss;
}

}  // namespace

template <typename Scalar>
Scalar backward(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input, TokenId target,
                Gradients<Scalar>& grads) {
    const auto& config = params.config;
    const ForwardTrace<Scalar> trace = forward_trace(params, input);
    const LossAndProbs<Scalar> out = softmax_cross_entropy(trace.logits, target);
    set_zero_like(grads, config);

    const Eigen::Index steps = config.steps();
    const Eigen::Index hidden = config.hidden;

    VectorX<Scalar> d_logits = out.probs;
    d_logits[target] -= Scalar(1);
    const auto h_last = trace.layer_outputs.back().col(steps - 1);
    grads.W_out.noalias() = d_logits * h_last.transpose();
    grads.b_out = d_logits;

    // Gradient w.r.t. each layer's per-step output; only the last step feeds the readout.
    MatrixX<Scalar> d_output = MatrixX<Scalar>::Zero(config.output_dim(), steps);
    d_output.col(steps - 1).noalias() = params.W_out.transpose() * d_logits;

    VectorX<Scalar> d_h_rec(hidden), d_c_rec(hidden), d_h(hidden), d_c(hidden), tanh_c(hidden);
    for (std::uint32_t layer = config.layers; layer-- > 0;) {
        const MatrixX<Scalar>& layer_input = layer == 0 ? trace.embedded : trace.layer_outputs[layer - 1];
        MatrixX<Scalar> d_input = MatrixX<Scalar>::Zero(config.input_dim(layer), steps);
        for (std::uint32_t dir = 0; dir < config.directions(); ++dir) {
            const auto& weights = params.cell(layer, dir);
            auto& g = grads.cell(layer, dir);
            const auto& cell = trace.cells[layer * config.directions() + dir];

            MatrixX<Scalar> d_z(4 * hidden, steps);
            MatrixX<Scalar> h_prev = MatrixX<Scalar>::Zero(hidden, steps);
            d_h_rec.setZero();
            d_c_rec.setZero();
            // Reverse of processing order: left-to-right cells unwind from the end, right-to-left from the start.
            for (Eigen::Index s = steps; s-- > 0;) {
                const Eigen::Index t = dir == 0 ? s : steps - 1 - s;
                const bool has_prev = s > 0;
                const Eigen::Index prev = dir == 0 ? t - 1 : t + 1;

                const auto gates = cell.gates.col(t);
                const auto i = gates.segment(0, hidden).array();
                const auto f = gates.segment(hidden, hidden).array();
                const auto cand = gates.segment(2 * hidden, hidden).array();
                const auto o = gates.segment(3 * hidden, hidden).array();
                tanh_c = cell.c.col(t).array().tanh().matrix();

                d_h = d_output.col(t).segment(dir * hidden, hidden) + d_h_rec;
                d_c = (d_c_rec.array() + d_h.array() * o * (Scalar(1) - tanh_c.array().square())).matrix();

                auto dz = d_z.col(t);
                dz.segment(0, hidden) = (d_c.array() * cand * i * (Scalar(1) - i)).matrix();
                if (has_prev) {
                    dz.segment(hidden, hidden) = (d_c.array() * cell.c.col(prev).array() * f * (Scalar(1) - f)).matrix();
                    h_prev.col(t) = cell.h.col(prev);
                } else {
                    dz.segment(hidden, hidden).setZero();
                }
                dz.segment(2 * hidden, hidden) = (d_c.array() * i * (Scalar(1) - cand.square())).matrix();
                dz.segment(3 * hidden, hidden) = (d_h.array() * tanh_c.array() * o * (Scalar(1) - o)).matrix();

                d_c_rec = (d_c.array() * f).matrix();
                d_h_rec.noalias() = weights.W_h.transpose() * dz;
            }
            g.W_x.noalias() = d_z * layer_input.transpose();
            g.W_h.noalias() = d_z * h_prev.transpose();
            g.b = d_z.rowwise().sum();
            d_input.noalias() += weights.W_x.transpose() * d_z;
        }
        d_output = std::move(d_input);
    }

    // d_output now holds the gradient of the embedded input sequence.
    grads.W_img.noalias() = d_output.col(0) * input.image.transpose();
    grads.b_img = d_output.col(0);
    for (std::size_t t = 0; t < input.prefix.size(); ++t)
        grads.E.row(input.prefix[t]) += d_output.col(static_cast<Eigen::Index>(t) + 1).transpose();
    return out.loss;
}

template <typename Scalar>
LossAndGradients<Scalar> backward(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input,
                                  TokenId target) {
    LossAndGradients<Scalar> result{Scalar(0), Gradients<Scalar>::zeros(params.config)};
    result.loss = backward(params, input, target, result.grads);
    return result;
}

template <typename Scalar>
GradCheckResult grad_check(const ModelParams<Scalar>& params, const SequenceInput<Scalar>& input, TokenId target,
                           const GradCheckOptions& options) {
    if constexpr (!std::is_same_v<Scalar, double>) {
        throw ConfigError("gradient checking requires 64-bit precision");
    } else {
        if (!(options.eps > 0.0) || !std::isfinite(options.eps)) throw ConfigError("grad_check eps must be positive");

        auto analytic = backward(params, input, target).grads;
        if (options.analytic_hook) options.analytic_hook(analytic);

        // Perturbed losses are evaluated in extended precision so that the central
        // difference is not swamped by double rounding on near-zero components.
        using Wide = long double;
        ModelParams<Wide> work;
        work.config = params.config;
        work.E = params.E.template cast<Wide>();
        work.W_img = params.W_img.template cast<Wide>();
        work.b_img = params.b_img.template cast<Wide>();
        for (const auto& cell : params.lstm)
            work.lstm.push_back({cell.W_x.template cast<Wide>(), cell.W_h.template cast<Wide>(), cell.b.template cast<Wide>()});
        work.W_out = params.W_out.template cast<Wide>();
        work.b_out = params.b_out.template cast<Wide>();
        const SequenceInput<Wide> wide_input{input.image.template cast<Wide>(), input.prefix};
        auto work_spans = tensor_spans(work);
        const auto grad_spans = tensor_spans(std::as_const(analytic));

        struct Component {
            std::size_t tensor;
            std::size_t index;
        };
        std::vector<Component> all;
        for (std::size_t k = 0; k < work_spans.size(); ++k)
            for (std::size_t i = 0; i < work_spans[k].values.size(); ++i) all.push_back({k, i});

        GradCheckResult result;
        std::vector<std::size_t> picks(all.size());
        for (std::size_t i = 0; i < picks.size(); ++i) picks[i] = i;
        if (options.max_components > 0 && options.max_components < all.size()) {
            random::Engine rng(options.subset_seed);
            random::shuffle(std::span<std::size_t>(picks), rng);
            picks.resize(options.max_components);
            std::sort(picks.begin(), picks.end());
            result.subset = picks;
        }

        for (const std::size_t flat : picks) {
            const auto [k, i] = all[flat];
            Wide& theta = work_spans[k].values[i];
            const Wide saved = theta;
            const Wide eps = options.eps;
            theta = saved + eps;
            const Wide plus = sample_loss(work, wide_input, target);
            theta = saved - eps;
            const Wide minus = sample_loss(work, wide_input, target);
            theta = saved;

            const double numerical = static_cast<double>((plus - minus) / (2 * eps));
            const double a = grad_spans[k].values[i];
            const double rel = std::abs(a - numerical) / std::max(1e-8, std::abs(a) + std::abs(numerical));
            ++result.components_checked;
            if (rel > result.max_relative_error || !std::isfinite(rel)) {
                result.max_relative_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
                result.worst_tensor = work_spans[k].name;
                result.worst_index = i;
            }
        }
        return result;
    }
}

template <typename Scalar>
void sgd_step(ModelParams<Scalar>& params, const Gradients<Scalar>& grads, Scalar learning_rate) {
    auto dst = tensor_spans(params);
    const auto src = tensor_spans(grads);
    if (dst.size() != src.size()) throw ConfigError("gradient layout does not match parameters");
    for (std::size_t k = 0; k < dst.size(); ++k) {
        if (dst[k].values.size() != src[k].values.size())
            throw ConfigError("gradient shape mismatch for tensor '" + dst[k].name + "'");
        for (std::size_t i = 0; i < dst[k].values.size(); ++i) dst[k].values[i] -= learning_rate * src[k].values[i];
    }
}

template <typename Scalar>
Scalar squared_norm(const Gradients<Scalar>& grads) {
    Scalar total = 0;
    grads.for_each_tensor([&](const std::string&, const auto& t) { total += t.squaredNorm(); });
    return total;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (min_count == 0) throw ConfigError("min_count must be at least 1");
    if (max_grad_norm < 0.0) throw ConfigError("max_grad_norm must be non-negative");
    if (threads == 0) throw ConfigError("threads must be positive");
}

void write_training_report(const TrainingReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open report for writing: " + path);
    for (const auto& e : report.epochs) {
        nlohmann::ordered_json line;
        line["epoch"] = e.epoch;
        line["mean_loss"] = e.mean_loss;
        line["samples"] = e.samples;
        line["seconds"] = e.seconds;
        out << line.dump() << '\n';
    }
    if (!out) throw IoError("failed writing report: " + path);
}

template <typename Scalar>
TrainingReport fit(ModelParams<Scalar>& params, std::span<const ExpandedSample> samples,
                   const EmbeddingTable& embeddings, const TrainConfig& config,
                   const std::function<void(const EpochStats&)>& on_epoch) {
    config.validate();
    std::vector<VectorX<Scalar>> images;
    std::vector<std::size_t> image_of(samples.size());
    {
        std::unordered_map<std::string, std::size_t> slot;
        for (std::size_t s = 0; s < samples.size(); ++s) {
            const auto [it, inserted] = slot.emplace(samples[s].image_id, images.size());
            if (inserted) images.push_back(embeddings.at(samples[s].image_id).vector.template cast<Scalar>());
            image_of[s] = it->second;
        }
    }

    TrainingReport report;
    report.samples_per_epoch = samples.size();
    if (samples.empty()) return report;

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    random::Engine rng(config.shuffle_seed);

    const std::size_t workers = std::min<std::size_t>(config.threads, config.batch_size);
    std::vector<Gradients<Scalar>> slots(workers == 1 ? 1 : config.batch_size);
    std::vector<Scalar> slot_loss(slots.size());
    auto accumulated = Gradients<Scalar>::zeros(params.config);

    const auto run_sample = [&](std::size_t sample_index, std::size_t slot) {
        const ExpandedSample& sample = samples[sample_index];
        const SequenceInput<Scalar> input{images[image_of[sample_index]], sample.prefix};
        slot_loss[slot] = backward(params, input, sample.target, slots[slot]);
    };

    for (std::uint32_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        random::shuffle(std::span<std::size_t>(order), rng);
        double loss_sum = 0.0;

        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            set_zero_like(accumulated, params.config);
            if (workers == 1) {
                for (std::size_t k = begin; k < end; ++k) {
                    run_sample(order[k], 0);
                    add_into(accumulated, slots[0]);
                    loss_sum += static_cast<double>(slot_loss[0]);
                }
            } else {
                {
                    std::vector<std::jthread> pool;
                    for (std::size_t w = 0; w < workers; ++w)
                        pool.emplace_back([&, w] {
                            for (std::size_t k = begin + w; k < end; k += workers) run_sample(order[k], k - begin);
                        });
                }
                // Combine in sample order so the result is independent of scheduling.
                for (std::size_t k = begin; k < end; ++k) {
                    add_into(accumulated, slots[k - begin]);
                    loss_sum += static_cast<double>(slot_loss[k - begin]);
                }
            }
            scale(accumulated, Scalar(1) / static_cast<Scalar>(end - begin));
            if (config.max_grad_norm > 0.0) {
                const double norm = std::sqrt(static_cast<double>(squared_norm(accumulated)));
                if (norm > config.max_grad_norm) scale(accumulated, static_cast<Scalar>(config.max_grad_norm / norm));
            }
            sgd_step(params, accumulated, static_cast<Scalar>(config.learning_rate));
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.samples = samples.size();
        stats.mean_loss = loss_sum / static_cast<double>(samples.size());
        stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        report.epochs.push_back(stats);
        if (on_epoch) on_epoch(stats);
    }
    return report;
}

std::string default_vocab_path(const std::string& checkpoint_path) { return checkpoint_path + ".vocab"; }

namespace {

template <typename Scalar>
TrainingReport train_and_save(const ModelConfig& model, const TrainConfig& config,
                              std::span<const ExpandedSample> samples, const EmbeddingTable& embeddings,
                              const std::string& checkpoint_out,
                              const std::function<void(const EpochStats&)>& on_epoch) {
    auto params = init_params<Scalar>(model, config.init_seed);
    TrainingReport report = fit(params, samples, embeddings, config, on_epoch);
    save_checkpoint(params, checkpoint_out);
    return report;
}

}  // namespace

TrainOutcome train(const TrainPaths& paths, ModelConfig model, const TrainConfig& config,
                   const std::function<void(const EpochStats&)>& on_epoch) {
    config.validate();
    const auto captions = load_captions(paths.captions);
    const EmbeddingTable embeddings = load_embeddings(paths.embeddings);
    for (const auto& caption : captions)
        if (embeddings.find(caption.image_id) == nullptr)
            throw ReferentialIntegrityError("caption image id '" + caption.image_id + "' has no embedding");

    std::vector<TokenList> corpus;
    corpus.reserve(captions.size());
    for (const auto& caption : captions) corpus.push_back(normalize_and_tokenize(caption.text));
    Vocabulary vocab = build_vocabulary(corpus, config.min_count);

    model.vocab_size = static_cast<std::uint32_t>(vocab.size());
    model.d_img = embeddings.dim();
    model.validate();

    std::vector<CaptionRecord> records;
    records.reserve(captions.size());
    for (std::size_t i = 0; i < captions.size(); ++i)
        records.push_back({captions[i].image_id, encode(vocab, corpus[i], model.n)});
    const auto samples = expand_all(records, model.n);

    TrainOutcome outcome{model, std::move(vocab), {}};
    outcome.report = model.precision == Precision::f64
                         ? train_and_save<double>(model, config, samples, embeddings, paths.checkpoint_out, on_epoch)
                         : train_and_save<float>(model, config, samples, embeddings, paths.checkpoint_out, on_epoch);
    save_vocabulary(outcome.vocab, paths.vocab_out.empty() ? default_vocab_path(paths.checkpoint_out) : paths.vocab_out);
    if (!paths.report_out.empty()) write_training_report(outcome.report, paths.report_out);
    return outcome;
}

#define BNCAP_INSTANTIATE_TRAIN(Scalar)                                                                            \
    template Scalar backward<Scalar>(const ModelParams<Scalar>&, const SequenceInput<Scalar>&, TokenId,             \
                                     Gradients<Scalar>&);                                                          \
    template LossAndGradients<Scalar> backward<Scalar>(const ModelParams<Scalar>&, const SequenceInput<Scalar>&,    \
                                                       TokenId);                                                   \
    template GradCheckResult grad_check<Scalar>(const ModelParams<Scalar>&, const SequenceInput<Scalar>&, TokenId,  \
                                                const GradCheckOptions&);                                          \
    template void sgd_step<Scalar>(ModelParams<Scalar>&, const Gradients<Scalar>&, Scalar);                        \
    template Scalar squared_norm<Scalar>(const Gradients<Scalar>&);                                                \
    template TrainingReport fit<Scalar>(ModelParams<Scalar>&, std::span<const ExpandedSample>,                     \
                                        const EmbeddingTable&, const TrainConfig&,                                 \
                                        const std::function<void(const EpochStats&)>&);

BNCAP_INSTANTIATE_TRAIN(float)
BNCAP_INSTANTIATE_TRAIN(double)

#undef BNCAP_INSTANTIATE_TRAIN

}  // namespace bncap
