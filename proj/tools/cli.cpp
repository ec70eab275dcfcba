#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "bncap/data.hpp"
#include "bncap/decode.hpp"
#include "bncap/evaluate.hpp"
#include "bncap/model.hpp"
#include "bncap/random.hpp"
#include "bncap/text.hpp"
#include "bncap/train.hpp"

namespace bncap::cli {

namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat `key = value` lines; `#` starts a comment line.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open config file: " + path);
    std::vector<std::pair<std::string, std::string>> entries;
    std::string line;
    std::size_t line_no = 0;
    const auto trim = [](std::string s) {
        const auto first = s.find_first_not_of(" \t\r");
        if (first == std::string::npos) return std::string();
        const auto last = s.find_last_not_of(" \t\r");
        return s.substr(first, last - first + 1);
    };
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty() || line.front() == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw UsageError(path + ":" + std::to_string(line_no) + ": empty key");
        entries.emplace_back(std::move(key), std::move(value));
    }
    return entries;
}

/// Fills options not given on the command line from the config file.
void apply_config_file(CLI::App& sub, const std::string& path) {
    if (path.empty()) return;
    for (const auto& [key, value] : read_config_file(path)) {
        std::string flag = key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        CLI::Option* option = sub.get_option_no_throw("--" + flag);
        if (option == nullptr || flag == "config")
            throw UsageError("unknown key '" + key + "' in config file " + path);
        if (option->count() > 0) continue;
        try {
            option->add_result(value);
            option->run_callback();
        } catch (const CLI::Error& e) {
            throw UsageError("bad value for '" + key + "' in config file: " + e.what());
        }
    }
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw UsageError(std::string("missing required option ") + flag);
}

void require_input(const std::string& path) {
    if (!fs::is_regular_file(path)) throw IoError("input file does not exist: " + path);
}

void require_output(const std::string& path) {
    const fs::path parent = fs::absolute(fs::path(path)).parent_path();
    if (!fs::is_directory(parent)) throw IoError("output directory does not exist: " + parent.string());
}

std::vector<std::string> split_ids(const std::string& spec) {
    std::vector<std::string> ids;
    if (!spec.empty() && spec.front() == '@') {
        std::ifstream in(spec.substr(1), std::ios::binary);
        if (!in) throw IoError("cannot open id list: " + spec.substr(1));
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) ids.push_back(line);
        }
        return ids;
    }
    std::stringstream stream(spec);
    std::string id;
    while (std::getline(stream, id, ','))
        if (!id.empty()) ids.push_back(id);
    return ids;
}

Precision to_precision(int bits) { return bits == 64 ? Precision::f64 : Precision::f32; }

// --- synth ---------------------------------------------------------------

struct SynthArgs {
    std::string out_dir;
    SynthOptions options;
};

void add_synth(CLI::App& app, SynthArgs& args) {
    auto* sub = app.add_subcommand("synth", "Write a deterministic synthetic embeddings/captions pair");
    sub->add_option("--out-dir", args.out_dir, "Directory for embeddings.cemb and captions.tsv")->required();
    sub->add_option("--images", args.options.num_images, "Number of images")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--dim", args.options.d_img, "Image embedding dimension")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--vocab", args.options.vocab_size, "Synthetic alphabet size")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--min-len", args.options.min_caption_len, "Shortest caption")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--max-len", args.options.max_caption_len, "Longest caption")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--seed", args.options.seed, "Generator seed")->capture_default_str();
}

int run_synth(const SynthArgs& args, std::ostream& out) {
    if (args.options.max_caption_len < args.options.min_caption_len) throw UsageError("--max-len must be >= --min-len");
    const SynthPaths paths = write_synth_dataset(args.options, args.out_dir);
    out << "wrote " << paths.embeddings.string() << "\n"
        << "wrote " << paths.captions.string() << "\n";
    return 0;
}

// --- split ---------------------------------------------------------------

struct SplitArgs {
    std::string captions;
    std::size_t test_count = 0;
    std::uint64_t seed = 0;
    std::string train_out;
    std::string test_out;
};

void add_split(CLI::App& app, SplitArgs& args) {
    auto* sub = app.add_subcommand("split", "Shuffle a caption file into train and test files");
    sub->add_option("--captions", args.captions, "Caption TSV")->required();
    sub->add_option("--test-count", args.test_count, "Number of test records")->required();
    sub->add_option("--seed", args.seed, "Shuffle seed")->capture_default_str();
    sub->add_option("--train-out", args.train_out, "Train caption TSV to write")->required();
    sub->add_option("--test-out", args.test_out, "Test caption TSV to write")->required();
}

int run_split(const SplitArgs& args, std::ostream& out) {
    require_input(args.captions);
    require_output(args.train_out);
    require_output(args.test_out);
    const auto captions = load_captions(args.captions);
    const auto split = split_train_test<RawCaption>(captions, args.test_count, args.seed);
    save_captions(split.train, args.train_out);
    save_captions(split.test, args.test_out);
    out << "train " << split.train.size() << "\ttest " << split.test.size() << "\n";
    return 0;
}

// --- train ---------------------------------------------------------------

struct TrainArgs {
    std::string config_path;
    TrainPaths paths;
    ModelConfig model;
    int precision = 32;
    TrainConfig train;
};

void add_train(CLI::App& app, TrainArgs& args) {
    auto* sub = app.add_subcommand("train", "Train a caption model with SGD and write a checkpoint");
    sub->add_option("--config", args.config_path, "Flat key = value file; flags override it");
    sub->add_option("--captions", args.paths.captions, "Training caption TSV");
    sub->add_option("--embeddings", args.paths.embeddings, "CEMB embeddings file");
    sub->add_option("--checkpoint-out", args.paths.checkpoint_out, "Checkpoint to write");
    sub->add_option("--vocab-out", args.paths.vocab_out, "Vocabulary to write (default: <checkpoint>.vocab)");
    sub->add_option("--report-out", args.paths.report_out, "JSON-lines training report to write");

    sub->add_option("--d-embed", args.model.d_embed, "Shared embedding width")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--hidden", args.model.hidden, "LSTM hidden size per direction")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--n", args.model.n, "Maximum caption tokens")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--bidirectional", args.model.bidirectional, "Bidirectional LSTM layers")->capture_default_str();
    sub->add_option("--precision", args.precision, "Floating point bits")->capture_default_str()->check(CLI::IsMember({32, 64}));

    sub->add_option("--learning-rate", args.train.learning_rate, "SGD step size")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--epochs", args.train.epochs, "Passes over the expanded samples")->capture_default_str();
    sub->add_option("--batch-size", args.train.batch_size, "Samples per SGD step")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--shuffle-seed", args.train.shuffle_seed, "Sample order seed")->capture_default_str();
    sub->add_option("--init-seed", args.train.init_seed, "Weight initialization seed")->capture_default_str();
    sub->add_option("--log-every", args.train.log_every, "Log every k epochs (0: quiet)")->capture_default_str();
    sub->add_option("--max-grad-norm", args.train.max_grad_norm, "Clip batch gradient norm (0: off)")->capture_default_str();
    sub->add_option("--min-count", args.train.min_count, "Vocabulary frequency threshold")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--threads", args.train.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
}

int run_train(TrainArgs& args, std::ostream& out, std::ostream& err) {
    require(args.paths.captions, "--captions");
    require(args.paths.embeddings, "--embeddings");
    require(args.paths.checkpoint_out, "--checkpoint-out");
    require_input(args.paths.captions);
    require_input(args.paths.embeddings);
    require_output(args.paths.checkpoint_out);
    if (!args.paths.vocab_out.empty()) require_output(args.paths.vocab_out);
    if (!args.paths.report_out.empty()) require_output(args.paths.report_out);

    args.model.precision = to_precision(args.precision);
    const std::uint32_t log_every = args.train.log_every;
    const TrainOutcome outcome = train(args.paths, args.model, args.train, [&](const EpochStats& stats) {
        if (log_every > 0 && (stats.epoch % log_every == 0 || stats.epoch == 1))
            err << "epoch " << stats.epoch << "\tmean_loss " << stats.mean_loss << "\t" << stats.seconds << "s\n";
    });
    out << "vocabulary " << outcome.vocab.size() << "\tsamples/epoch " << outcome.report.samples_per_epoch;
    if (!outcome.report.epochs.empty()) out << "\tfinal mean_loss " << outcome.report.epochs.back().mean_loss;
    out << "\n";
    return 0;
}

// --- caption -------------------------------------------------------------

struct CaptionArgs {
    std::string checkpoint;
    std::string vocab;
    std::string embeddings;
    std::string ids;
    std::string out;
};

void add_caption(CLI::App& app, CaptionArgs& args) {
    auto* sub = app.add_subcommand("caption", "Greedy-caption images from a checkpoint");
    sub->add_option("--checkpoint", args.checkpoint, "CCKP checkpoint")->required();
    sub->add_option("--vocab", args.vocab, "Vocabulary file (default: <checkpoint>.vocab)");
    sub->add_option("--embeddings", args.embeddings, "CEMB embeddings file")->required();
    sub->add_option("--ids", args.ids, "Comma-separated image ids or @file (default: every image)");
    sub->add_option("--out", args.out, "Output TSV (default: stdout)");
}

template <typename Scalar>
void caption_images(const std::string& checkpoint, const Vocabulary& vocab, const EmbeddingTable& embeddings,
                    const std::vector<std::string>& ids, std::ostream& out) {
    const auto params = load_checkpoint<Scalar>(checkpoint);
    for (const auto& id : ids) {
        const VectorX<Scalar> image = embeddings.at(id).vector.template cast<Scalar>();
        const GeneratedCaption caption = greedy_caption(params, vocab, image);
        out << id << '\t' << join_tokens(caption.tokens) << '\n';
    }
}

int run_caption(const CaptionArgs& args, std::ostream& out) {
    const std::string vocab_path = args.vocab.empty() ? default_vocab_path(args.checkpoint) : args.vocab;
    require_input(args.checkpoint);
    require_input(vocab_path);
    require_input(args.embeddings);
    if (!args.out.empty()) require_output(args.out);

    const ModelConfig config = read_checkpoint_config(args.checkpoint);
    const Vocabulary vocab = load_vocabulary(vocab_path);
    const EmbeddingTable embeddings = load_embeddings(args.embeddings);
    if (embeddings.dim() != config.d_img)
        throw ConfigError("embeddings have dimension " + std::to_string(embeddings.dim()) + ", checkpoint expects " +
                          std::to_string(config.d_img));

    std::vector<std::string> ids;
    if (args.ids.empty()) {
        for (const auto& record : embeddings.records()) ids.push_back(record.image_id);
    } else {
        ids = split_ids(args.ids);
    }
    for (const auto& id : ids) (void)embeddings.at(id);

    std::ostringstream buffer;
    if (config.precision == Precision::f64)
        caption_images<double>(args.checkpoint, vocab, embeddings, ids, buffer);
    else
        caption_images<float>(args.checkpoint, vocab, embeddings, ids, buffer);

    if (args.out.empty()) {
        out << buffer.str();
    } else {
        std::ofstream file(args.out, std::ios::binary);
        if (!(file << buffer.str())) throw IoError("failed writing " + args.out);
    }
    return 0;
}

// --- eval ----------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string vocab;
    std::string captions;
    std::string embeddings;
    std::string out;
};

void add_eval(CLI::App& app, EvalArgs& args) {
    auto* sub = app.add_subcommand("eval", "Caption a test set and score it with BLEU");
    sub->add_option("--checkpoint", args.checkpoint, "CCKP checkpoint")->required();
    sub->add_option("--vocab", args.vocab, "Vocabulary file (default: <checkpoint>.vocab)");
    sub->add_option("--captions", args.captions, "Reference caption TSV")->required();
    sub->add_option("--embeddings", args.embeddings, "CEMB embeddings file")->required();
    sub->add_option("--out", args.out, "JSON report to write")->required();
}

int run_eval(const EvalArgs& args, std::ostream& out) {
    const std::string vocab_path = args.vocab.empty() ? default_vocab_path(args.checkpoint) : args.vocab;
    require_input(args.checkpoint);
    require_input(vocab_path);
    require_input(args.captions);
    require_input(args.embeddings);
    require_output(args.out);
    const EvalReport report = evaluate(args.checkpoint, vocab_path, args.captions, args.embeddings);
    write_eval_report(report, args.out);
    out << "images " << report.per_image.size() << "\tcorpus_bleu " << report.corpus_bleu
        << "\tmean_sentence_bleu_x100 " << report.mean_sentence_bleu_x100 << "\n";
    return 0;
}

// --- gradcheck -----------------------------------------------------------

struct GradCheckArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    int precision = 64;
    ModelConfig model{.d_img = 5, .d_embed = 6, .hidden = 4, .layers = 2, .bidirectional = true,
                      .vocab_size = 12, .n = 4, .precision = Precision::f64};
    double eps = 1e-5;
    std::size_t max_components = 0;
    bool corrupt = false;
};

void add_gradcheck(CLI::App& app, GradCheckArgs& args) {
    auto* sub = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients on a tiny model");
    sub->add_option("--config", args.config_path, "Flat key = value file; flags override it");
    sub->add_option("--seed", args.seed, "Seed for weights and the probe sample")->capture_default_str();
    sub->add_option("--precision", args.precision, "Floating point bits (only 64 is accepted)")->capture_default_str();
    sub->add_option("--vocab-size", args.model.vocab_size, "Vocabulary size")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--d-img", args.model.d_img, "Image dimension")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--d-embed", args.model.d_embed, "Embedding width")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--hidden", args.model.hidden, "Hidden size per direction")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--n", args.model.n, "Caption length")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--bidirectional", args.model.bidirectional, "Bidirectional layers")->capture_default_str();
    sub->add_option("--eps", args.eps, "Central difference step")->capture_default_str();
    sub->add_option("--max-components", args.max_components, "Check a seeded subset (0: all)")->capture_default_str();
    // Test hook: perturbs one analytic component so the detector can be exercised.
    sub->add_flag("--corrupt-gradient", args.corrupt)->group("");
}

int run_gradcheck(const GradCheckArgs& args, std::ostream& out) {
    if (args.precision != 64)
        throw ConfigError("gradient checking needs 64-bit arithmetic; " + std::to_string(args.precision) +
                          "-bit finite differences are too coarse for a 1e-4 relative error bar");
    ModelConfig model = args.model;
    model.precision = Precision::f64;
    const auto params = init_params<double>(model, args.seed);

    random::Engine rng(random::mix(args.seed, 1));
    SequenceInput<double> input{VectorX<double>(model.d_img), std::vector<TokenId>(model.n, kUnkId)};
    for (Eigen::Index i = 0; i < input.image.size(); ++i) input.image[i] = random::uniform(rng, -1.0, 1.0);
    const std::size_t real = 1 + random::below(rng, model.n);
    for (std::size_t t = 0; t < real && t < model.n; ++t)
        input.prefix[t] = static_cast<TokenId>(random::below(rng, model.vocab_size));
    const auto target = static_cast<TokenId>(random::below(rng, model.vocab_size));

    GradCheckOptions options;
    options.eps = args.eps;
    options.max_components = args.max_components;
    options.subset_seed = args.seed;
    if (args.corrupt) options.analytic_hook = [](Gradients<double>& g) { g.W_out(0, 0) += 1e-2; };

    const GradCheckResult result = grad_check(params, input, target, options);
    out << "components " << result.components_checked << "\tmax_relative_error " << result.max_relative_error
        << "\tworst " << result.worst_tensor << "[" << result.worst_index << "]\n";
    return result.max_relative_error < 1e-4 ? 0 : 1;
}

// --- stats ---------------------------------------------------------------

void add_stats(CLI::App& app, std::string& captions) {
    auto* sub = app.add_subcommand("stats", "Count unique and total tokens in a caption file");
    sub->add_option("--captions", captions, "Caption TSV")->required();
}

int run_stats(const std::string& captions_path, std::ostream& out) {
    require_input(captions_path);
    const auto captions = load_captions(captions_path);
    std::vector<TokenList> corpus;
    for (const auto& caption : captions) corpus.push_back(normalize_and_tokenize(caption.text));
    const CorpusStats stats = corpus_stats(corpus);
    out << "captions\t" << captions.size() << "\n"
        << "unique_tokens\t" << stats.unique_tokens << "\n"
        << "total_tokens\t" << stats.total_tokens << "\n";
    for (const auto& [length, count] : stats.length_histogram) out << "length " << length << "\t" << count << "\n";
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app("Image caption pipeline: synthetic data, training, captioning and BLEU evaluation", "bncap");
    app.require_subcommand(1);

    SynthArgs synth;
    SplitArgs split;
    TrainArgs train_args;
    CaptionArgs caption;
    EvalArgs eval;
    GradCheckArgs gradcheck;
    std::string stats_captions;
    add_synth(app, synth);
    add_split(app, split);
    add_train(app, train_args);
    add_caption(app, caption);
    add_eval(app, eval);
    add_gradcheck(app, gradcheck);
    add_stats(app, stats_captions);

    // CLI11 wants argv order reversed when given a vector.
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    try {
        if (app.got_subcommand("synth")) return run_synth(synth, out);
        if (app.got_subcommand("split")) return run_split(split, out);
        if (app.got_subcommand("train")) {
            apply_config_file(*app.get_subcommand("train"), train_args.config_path);
            return run_train(train_args, out, err);
        }
        if (app.got_subcommand("caption")) return run_caption(caption, out);
        if (app.got_subcommand("eval")) return run_eval(eval, out);
        if (app.got_subcommand("gradcheck")) {
            apply_config_file(*app.get_subcommand("gradcheck"), gradcheck.config_path);
            return run_gradcheck(gradcheck, out);
        }
        if (app.got_subcommand("stats")) return run_stats(stats_captions, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace bncap::cli
