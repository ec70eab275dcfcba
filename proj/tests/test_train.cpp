#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "bncap/train.hpp"
#include "test_support.hpp"

using namespace bncap;

namespace {

ModelConfig reference_config() {
    return {.d_img = 5, .d_embed = 6, .hidden = 4, .layers = 2, .bidirectional = true, .vocab_size = 12, .n = 4,
            .precision = Precision::f64};
}

SequenceInput<double> probe_input(const ModelConfig& config, std::vector<TokenId> prefix, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    SequenceInput<double> input{Eigen::VectorXd(config.d_img), std::move(prefix)};
    for (auto& x : input.image) x = dist(rng);
    return input;
}

template <typename Scalar>
std::vector<Scalar> flatten(const ModelParams<Scalar>& p) {
    std::vector<Scalar> out;
    p.for_each_tensor([&](const std::string&, const auto& t) { out.insert(out.end(), t.data(), t.data() + t.size()); });
    return out;
}

template <typename Scalar>
bool bit_identical(const ModelParams<Scalar>& a, const ModelParams<Scalar>& b) {
    const auto fa = flatten(a), fb = flatten(b);
    return fa.size() == fb.size() && std::memcmp(fa.data(), fb.data(), fa.size() * sizeof(Scalar)) == 0;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("backward loss and readout gradient") {
    const auto config = reference_config();
    const auto params = init_params<double>(config, 3);
    const auto input = probe_input(config, {3, 5, 0, 0}, 1);
    const TokenId target = 7;

    const auto [loss, grads] = backward(params, input, target);
    const auto trace = forward_trace(params, input);
    const auto ce = softmax_cross_entropy(trace.logits, target);
    CHECK(loss == ce.loss);

    const Eigen::VectorXd h_last = trace.layer_outputs.back().col(config.n);
    for (Eigen::Index j = 0; j < grads.W_out.rows(); ++j) {
        const double coeff = ce.probs[j] - (j == target ? 1.0 : 0.0);
        CHECK(grads.W_out.row(j).transpose().isApprox(coeff * h_last, 1e-14));
        CHECK(grads.b_out[j] == doctest::Approx(coeff).epsilon(1e-14));
    }
}

TEST_CASE("embedding rows not in the prefix get no gradient") {
    const auto config = reference_config();
    const auto params = init_params<double>(config, 4);
    SUBCASE("with padding") {
        const auto grads = backward(params, probe_input(config, {3, 5, 0, 0}, 2), 1).grads;
        for (Eigen::Index r = 0; r < grads.E.rows(); ++r) {
            const bool used = r == 0 || r == 3 || r == 5;
            CHECK(grads.E.row(r).isZero(0) == !used);
        }
    }
    SUBCASE("without padding") {
        const auto grads = backward(params, probe_input(config, {2, 2, 9, 4}, 2), 1).grads;
        for (Eigen::Index r = 0; r < grads.E.rows(); ++r) {
            const bool used = r == 2 || r == 9 || r == 4;
            CHECK(grads.E.row(r).isZero(0) == !used);
        }
    }
}

TEST_CASE("grad_check on the reference model") {
    const auto config = reference_config();
    for (unsigned seed : {0u, 1u, 2u}) {
        const auto params = init_params<double>(config, seed);
        const auto input = probe_input(config, {1, 11, 6, 0}, seed + 10);
        const auto result = grad_check(params, input, 6, {});
        CHECK(result.components_checked == params.parameter_count());
        CHECK(result.max_relative_error < 1e-4);
    }
}

TEST_CASE("grad_check unidirectional and full-length prefix") {
    auto config = reference_config();
    config.bidirectional = false;
    const auto params = init_params<double>(config, 5);
    CHECK(grad_check(params, probe_input(config, {1, 2, 3, 4}, 3), 0, {}).max_relative_error < 1e-4);
}

TEST_CASE("grad_check subset sampling is recorded and seeded") {
    const auto config = reference_config();
    const auto params = init_params<double>(config, 0);
    const auto input = probe_input(config, {1, 0, 0, 0}, 4);
    GradCheckOptions options;
    options.max_components = 100;
    options.subset_seed = 9;
    const auto a = grad_check(params, input, 2, options);
    const auto b = grad_check(params, input, 2, options);
    CHECK(a.components_checked == 100);
    CHECK(a.subset.size() == 100);
    CHECK(a.subset == b.subset);
    CHECK(a.max_relative_error < 1e-4);
}

TEST_CASE("grad_check detects a corrupted gradient") {
    const auto config = reference_config();
    const auto params = init_params<double>(config, 0);
    GradCheckOptions options;
    options.analytic_hook = [](Gradients<double>& g) { g.cell(1, 0).b[2] += 1e-3; };
    const auto result = grad_check(params, probe_input(config, {1, 0, 0, 0}, 4), 2, options);
    CHECK(result.max_relative_error > 1e-4);
    CHECK(result.worst_tensor == "lstm2.fwd.b");
    CHECK(result.worst_index == 2);
}

TEST_CASE("grad_check contract errors") {
    const auto config = reference_config();
    const auto params = init_params<double>(config, 0);
    const auto input = probe_input(config, {1, 0, 0, 0}, 4);
    CHECK_THROWS_AS(grad_check(params, input, 2, GradCheckOptions{.eps = 0.0}), ConfigError);

    auto config32 = config;
    config32.precision = Precision::f32;
    const auto params32 = init_params<float>(config32, 0);
    const SequenceInput<float> input32{input.image.cast<float>(), input.prefix};
    CHECK_THROWS_AS(grad_check(params32, input32, 2, {}), ConfigError);
}

TEST_CASE("zero learning rate step leaves grad_check unchanged") {
    const auto config = reference_config();
    auto params = init_params<double>(config, 6);
    const auto input = probe_input(config, {4, 4, 0, 0}, 8);
    const auto before = grad_check(params, input, 3, {});
    const auto grads = backward(params, input, 3).grads;
    const auto copy = params;
    sgd_step(params, grads, 0.0);
    CHECK(bit_identical(params, copy));
    const auto after = grad_check(params, input, 3, {});
    CHECK(before.max_relative_error == after.max_relative_error);
}

TEST_CASE("sgd_step arithmetic") {
    ModelConfig config{.d_img = 1, .d_embed = 1, .hidden = 1, .layers = 2, .bidirectional = false, .vocab_size = 1,
                       .n = 1, .precision = Precision::f64};
    auto params = ModelParams<double>::zeros(config);
    auto grads = ModelParams<double>::zeros(config);
    params.b_out[0] = 1.0;
    grads.b_out[0] = 2.0;
    sgd_step(params, grads, 0.1);
    CHECK(params.b_out[0] == doctest::Approx(0.8).epsilon(1e-15));

    const auto copy = params;
    sgd_step(params, Gradients<double>::zeros(config), 0.5);
    CHECK(bit_identical(params, copy));
}

TEST_CASE("sgd_step descends a convex quadratic") {
    // L(θ) = Σ (θ − 3)², ∇L = 2(θ − 3)
    const auto config = reference_config();
    auto params = init_params<double>(config, 2);
    const auto loss = [](const ModelParams<double>& p) {
        double total = 0;
        for (double v : flatten(p)) total += (v - 3) * (v - 3);
        return total;
    };
    auto grads = params;
    grads.for_each_tensor([](const std::string&, auto& t) { t = (2.0 * (t.array() - 3.0)).matrix(); });
    const double before = loss(params);
    sgd_step(params, grads, 0.01);
    CHECK(loss(params) < before);
    CHECK(loss(params) == doctest::Approx(before * 0.98 * 0.98).epsilon(1e-10));
}

TEST_CASE("fit is reproducible and thread independent") {
    SynthOptions synth{.num_images = 6, .d_img = 5, .vocab_size = 8, .min_caption_len = 2, .max_caption_len = 4, .seed = 3};
    const auto dataset = synth_dataset(synth);
    std::vector<TokenList> corpus;
    for (const auto& c : dataset.captions) corpus.push_back(normalize_and_tokenize(c.text));
    const auto vocab = build_vocabulary(corpus);
    ModelConfig model{.d_img = 5, .d_embed = 6, .hidden = 5, .layers = 2, .bidirectional = true,
                      .vocab_size = static_cast<std::uint32_t>(vocab.size()), .n = 4, .precision = Precision::f32};
    const auto samples = expand_all(encode_captions(vocab, dataset.captions, model.n), model.n);

    TrainConfig config{.learning_rate = 0.2, .epochs = 3, .batch_size = 4, .shuffle_seed = 5};
    auto a = init_params<float>(model, 1);
    auto b = a;
    auto c = a;
    const auto ra = fit(a, samples, dataset.embeddings, config);
    fit(b, samples, dataset.embeddings, config);
    config.threads = 3;
    const auto rc = fit(c, samples, dataset.embeddings, config);
    CHECK(bit_identical(a, b));
    CHECK(bit_identical(a, c));
    REQUIRE(ra.epochs.size() == 3);
    CHECK(ra.samples_per_epoch == samples.size());
    for (std::size_t e = 0; e < 3; ++e) CHECK(ra.epochs[e].mean_loss == rc.epochs[e].mean_loss);

    config.epochs = 0;
    auto d = init_params<float>(model, 1);
    const auto untouched = d;
    CHECK(fit(d, samples, dataset.embeddings, config).epochs.empty());
    CHECK(bit_identical(d, untouched));
}

TEST_CASE("fit with gradient clipping stays finite") {
    SynthOptions synth{.num_images = 4, .d_img = 3, .vocab_size = 5, .min_caption_len = 2, .max_caption_len = 3, .seed = 1};
    const auto dataset = synth_dataset(synth);
    std::vector<TokenList> corpus;
    for (const auto& c : dataset.captions) corpus.push_back(normalize_and_tokenize(c.text));
    const auto vocab = build_vocabulary(corpus);
    ModelConfig model{.d_img = 3, .d_embed = 4, .hidden = 3, .layers = 2, .bidirectional = true,
                      .vocab_size = static_cast<std::uint32_t>(vocab.size()), .n = 3, .precision = Precision::f64};
    const auto samples = expand_all(encode_captions(vocab, dataset.captions, model.n), model.n);
    auto params = init_params<double>(model, 0);
    const TrainConfig config{.learning_rate = 5.0, .epochs = 5, .batch_size = 2, .max_grad_norm = 0.5};
    fit(params, samples, dataset.embeddings, config);
    for (double v : flatten(params)) REQUIRE(std::isfinite(v));
}

TEST_CASE("train config validation") {
    CHECK_THROWS_AS(TrainConfig{.learning_rate = 0.0}.validate(), ConfigError);
    CHECK_THROWS_AS(TrainConfig{.batch_size = 0}.validate(), ConfigError);
    CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("train rejects captions without embeddings before training") {
    testing::TempDir dir;
    const auto paths = write_synth_dataset(SynthOptions{.num_images = 3, .d_img = 4, .seed = 2}, dir.path());
    testing::write_text(dir.file("extra.tsv"), testing::read_bytes(paths.captions.string()) + "ghost\tw1 w2\n");
    TrainPaths train_paths{dir.file("extra.tsv"), paths.embeddings.string(), dir.file("m.cckp"), "", ""};
    try {
        train(train_paths, ModelConfig{.d_embed = 4, .hidden = 3}, TrainConfig{.epochs = 1});
        FAIL("expected ReferentialIntegrityError");
    } catch (const ReferentialIntegrityError& e) {
        CHECK(std::string(e.what()).find("ghost") != std::string::npos);
    }
    CHECK_FALSE(std::filesystem::exists(dir.file("m.cckp")));
}

TEST_CASE("train writes checkpoint, vocabulary and report") {
    testing::TempDir dir;
    const auto paths = write_synth_dataset(SynthOptions{.num_images = 4, .d_img = 4, .seed = 2}, dir.path());
    TrainPaths train_paths{paths.captions.string(), paths.embeddings.string(), dir.file("m.cckp"), "",
                           dir.file("r.jsonl")};
    const auto outcome = train(train_paths, ModelConfig{.d_embed = 4, .hidden = 3, .n = 6},
                               TrainConfig{.epochs = 2, .batch_size = 8});
    CHECK(outcome.model.d_img == 4);
    CHECK(outcome.model.vocab_size == outcome.vocab.size());
    CHECK(outcome.report.samples_per_epoch == 24);
    CHECK(read_checkpoint_config(dir.file("m.cckp")) == outcome.model);
    CHECK(load_vocabulary(dir.file("m.cckp.vocab")) == outcome.vocab);

    const std::string report = testing::read_bytes(dir.file("r.jsonl"));
    CHECK(std::count(report.begin(), report.end(), '\n') == 2);
    CHECK(report.rfind("{\"epoch\":1,\"mean_loss\":", 0) == 0);
    CHECK(report.find("\"samples\":24,\"seconds\":") != std::string::npos);
}

}
