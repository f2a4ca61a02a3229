// Command-line front end. Every report subcommand writes a CSV plus a JSON
// run manifest next to it (<csv>.manifest.json unless --manifest is given).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <fmt/format.h>
#include <json.hpp>

#include "latentlab/attack.hpp"
#include "latentlab/dataset.hpp"
#include "latentlab/harness.hpp"
#include "latentlab/nn.hpp"
#include "latentlab/parallel.hpp"
#include "latentlab/train.hpp"
#include "latentlab/version.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace latentlab;

namespace {

constexpr int kOk = 0;
constexpr int kOperational = 1;
constexpr int kUsage = 2;

/// Raised for flag combinations CLI11 cannot check on its own.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataOptions {
    std::string dataset = "textures";
    std::string idx_images;
    std::string idx_labels;
    std::size_t count = 0;  // 0: subcommand default
    std::uint64_t data_seed = 1;
    std::string split = "attack";
};

struct AttackOptions {
    double eps = 8.0 / 255.0;
    std::size_t iters = 100;
    std::size_t beta_grid = 10;
    bool multi_target = false;
    std::string layer = "auto";
    double nu = 0.75;
    double temperature = 1.0;
    double alpha0 = 2.0 / 255.0;
    double mim_decay = 1.0;
    bool no_latent = false;
    bool no_surrogate = false;
    bool no_schedule = false;
    int tactics = -1;
    bool random_start = false;
    bool literal_mu0 = false;
    std::string margin_grad = "detached";
};

struct Common {
    std::uint64_t seed = 0;
    std::string out;
    std::string manifest;
    std::string weights;
};

void add_common(CLI::App* app, Common& c, bool needs_weights, bool needs_out = true) {
    app->add_option("--seed", c.seed, "Root seed for every random stream")->capture_default_str();
    auto* out = app->add_option("--out", c.out, "CSV report path");
    if (needs_out) out->required();
    app->add_option("--manifest", c.manifest, "Run manifest path (default <out>.manifest.json)");
    if (needs_weights) app->add_option("--weights", c.weights, "LFT1 weight file")->required();
}

void add_data(CLI::App* app, DataOptions& d, const std::string& default_split) {
    d.split = default_split;
    app->add_option("--dataset", d.dataset, "textures, blobs, rings or idx")
        ->check(CLI::IsMember({"textures", "blobs", "rings", "idx"}))
        ->capture_default_str();
    app->add_option("--idx-images", d.idx_images, "IDX image file (with --dataset idx)");
    app->add_option("--idx-labels", d.idx_labels, "IDX label file (with --dataset idx)");
    app->add_option("--count", d.count, "Number of synthetic samples")->check(CLI::PositiveNumber);
    app->add_option("--data-seed", d.data_seed, "Seed of the synthetic generator")->capture_default_str();
    app->add_option("--split", d.split, "train or attack (selects the synthetic stream)")
        ->check(CLI::IsMember({"train", "attack"}))
        ->capture_default_str();
}

void add_attack(CLI::App* app, AttackOptions& a) {
    app->add_option("--eps", a.eps, "L-infinity radius in pixel units")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    app->add_option("--iters", a.iters, "Iterations per run")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--beta-grid", a.beta_grid, "Number of beta values searched (middle-out)")
        ->check(CLI::Range(1, 10))
        ->capture_default_str();
    app->add_flag("--multi-target", a.multi_target, "Enumerate every other class as a target");
    app->add_option("--layer", a.layer, "Latent layer index, or 'auto' to run the layer selection")
        ->capture_default_str();
    app->add_option("--nu", a.nu, "Momentum weight")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    app->add_option("--temperature", a.temperature, "Softmax temperature")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--alpha0", a.alpha0, "Constant step when the schedule is off")->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_option("--mim-decay", a.mim_decay, "MIM gradient decay")->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_flag("--no-latent", a.no_latent, "Disable the latent-feature tactic");
    app->add_flag("--no-surrogate", a.no_surrogate, "Use raw SCE instead of the margin-scaled loss");
    app->add_flag("--no-schedule", a.no_schedule, "Constant alpha0 step and no momentum");
    app->add_option("--tactics", a.tactics, "Tactic bitmask (1 latent, 2 surrogate, 4 schedule, 8 multi-target)")
        ->check(CLI::Range(0, 15));
    app->add_flag("--random-start", a.random_start, "Start from a uniform point in the eps-ball");
    app->add_flag("--literal-mu0", a.literal_mu0, "Initialise the momentum buffer at 0 instead of x0");
    app->add_option("--margin-grad", a.margin_grad, "detached or through")
        ->check(CLI::IsMember({"detached", "through"}))
        ->capture_default_str();
}

std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& flag) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const long v = std::stol(item, &used);
            if (used != item.size() || v <= 0) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw UsageError(flag + ": '" + item + "' is not a positive integer");
        }
    }
    if (out.empty()) throw UsageError(flag + ": empty list");
    return out;
}

std::vector<double> parse_doubles(const std::string& text, const std::string& flag) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw UsageError(flag + ": '" + item + "' is not a number");
        }
    }
    if (out.empty()) throw UsageError(flag + ": empty list");
    return out;
}

std::vector<std::string> parse_names(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

Dataset load_data(const DataOptions& d, const InputShape& input, std::size_t classes, std::size_t default_count) {
    Dataset data;
    if (d.dataset == "idx") {
        if (d.idx_images.empty() || d.idx_labels.empty()) {
            throw UsageError("--dataset idx needs --idx-images and --idx-labels");
        }
        data = load_idx(d.idx_images, d.idx_labels, classes);
        if (d.count != 0 && d.count < data.size()) data = data.slice(0, d.count);
    } else {
        const std::uint64_t seed = Rng::stream(d.data_seed, d.split).bits();
        data = synth_dataset(parse_synth_kind(d.dataset), d.count ? d.count : default_count, classes, input, seed);
    }
    data.split = d.split;
    if (data.input_shape() != input) throw ShapeMismatch("dataset images do not match the model input");
    return data;
}

AttackConfig attack_config(const AttackOptions& a, std::uint64_t seed) {
    AttackConfig c;
    c.eps = a.eps;
    c.iters = a.iters;
    c.nu = a.nu;
    c.temperature = a.temperature;
    c.beta_grid = AttackConfig::middle_out_betas(a.beta_grid);
    c.alpha0 = a.alpha0;
    c.mim_decay = a.mim_decay;
    c.random_start = a.random_start;
    c.literal_mu0 = a.literal_mu0;
    c.seed = seed;
    c.margin = a.margin_grad == "through" ? MarginGradient::Through : MarginGradient::Detached;
    if (a.tactics >= 0) {
        c.tactics = Tactics::from_mask(static_cast<unsigned>(a.tactics));
    } else {
        c.tactics.latent = !a.no_latent;
        c.tactics.surrogate = !a.no_surrogate;
        c.tactics.schedule = !a.no_schedule;
        c.tactics.multi_target = a.multi_target;
    }
    return c;
}

/// Resolves --layer; "auto" runs the layer selection on `data`.
std::size_t resolve_layer(const AttackOptions& a, const ModelBundle& bundle, const Dataset& data,
                          const AttackConfig& config, json& manifest) {
    const std::size_t depth = bundle.model.depth();
    if (a.layer != "auto") {
        std::size_t layer = 0;
        try {
            layer = std::stoul(a.layer);
        } catch (const std::exception&) {
            throw UsageError("--layer: '" + a.layer + "' is neither an index nor 'auto'");
        }
        if (layer == 0 || layer >= depth) {
            throw UsageError("--layer: must lie in [1, " + std::to_string(depth - 1) + "]");
        }
        manifest["layer"] = layer;
        return layer;
    }
    if (!config.tactics.latent) return 0;
    if (bundle.heads.empty()) throw MissingHead("the weight file carries no logits heads (run train-heads)");
    const LayerSelectionReport sel = select_layer(bundle.model, bundle.heads, data, config);
    manifest["layer"] = sel.selected;
    manifest["layer_selection"] = json::array();
    for (const auto& s : sel.layers) manifest["layer_selection"].push_back({{"layer", s.layer}, {"accuracy", s.accuracy}});
    return sel.selected;
}

json config_json(const AttackConfig& c) {
    return {{"eps", c.eps},
            {"iters", c.iters},
            {"nu", c.nu},
            {"temperature", c.temperature},
            {"beta_grid", c.beta_grid},
            {"layer", c.layer},
            {"tactics_mask", c.tactics.mask()},
            {"tactics", c.tactics.label()},
            {"random_start", c.random_start},
            {"seed", c.seed},
            {"alpha0", c.alpha0},
            {"mim_decay", c.mim_decay},
            {"margin_gradient", c.margin == MarginGradient::Through ? "through" : "detached"},
            {"literal_mu0", c.literal_mu0}};
}

std::string checksum_hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

class Run {
public:
    Run(std::string subcommand, const CLI::App* app, int argc, char** argv)
        : start_(std::chrono::steady_clock::now()) {
        manifest_["tool"] = "latentlab";
        manifest_["subcommand"] = std::move(subcommand);
        manifest_["argv"] = std::vector<std::string>(argv, argv + argc);
        json options = json::object();
        for (const CLI::Option* opt : app->get_options()) {
            if (opt->get_name().empty() || opt->get_name() == "--help") continue;
            const auto& r = opt->results();
            if (opt->get_expected_max() == 0) {
                options[opt->get_name()] = opt->count() > 0;
            } else if (!r.empty()) {
                options[opt->get_name()] = r.size() == 1 ? json(r.front()) : json(r);
            } else {
                options[opt->get_name()] = opt->get_default_str();
            }
        }
        manifest_["options"] = options;
        manifest_["versions"] = {{"latentlab", kVersion},
                                 {"compiler", __VERSION__},
                                 {"eigen", fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION,
                                                       EIGEN_MINOR_VERSION)},
                                 {"fmt", FMT_VERSION},
                                 {"weight_file_format", kWeightFileVersion}};
        manifest_["threads"] = thread_count();
    }

    json& manifest() { return manifest_; }

    void output(const CsvTable& table, const fs::path& path) {
        table.write(path);
        manifest_["outputs"].push_back(path.string());
    }

    void finish(const Common& c) {
        manifest_["runtime_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        const fs::path path = c.manifest.empty() ? fs::path(c.out + ".manifest.json") : fs::path(c.manifest);
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write manifest " + path.string());
        out << manifest_.dump(2) << '\n';
    }

private:
    json manifest_;
    std::chrono::steady_clock::time_point start_;
};

ModelBundle load_bundle(const Common& c, Run& run) {
    ModelBundle b = load_weights(c.weights);
    run.manifest()["weights"] = {{"path", c.weights},
                                 {"parameter_checksum", checksum_hex(parameter_checksum(b.model))},
                                 {"head_checksum", checksum_hex(head_checksum(b.heads))}};
    return b;
}

void record_data(Run& run, const DataOptions& d, const Dataset& data) {
    run.manifest()["data"] = {{"dataset", d.dataset},  {"split", d.split},     {"count", data.size()},
                              {"data_seed", d.data_seed}, {"classes", data.num_classes},
                              {"idx_images", d.idx_images}, {"idx_labels", d.idx_labels}};
}

void print_report(const RobustnessReport& r) {
    fmt::print("clean accuracy {:.2f}% over {} images\n", r.clean_accuracy, r.images);
    for (const auto& row : r.rows) {
        fmt::print("  {:<18} {:6.2f}%  gradient passes {} (max {} / budget {})\n", row.attack, row.accuracy,
                   row.gradient_passes, row.max_gradient_passes, row.budget);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Latent-feature adversarial attack laboratory"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    Common common;
    DataOptions data_opts;
    AttackOptions attack_opts;
    std::function<void(Run&)> action;
    std::string chosen;

    // train-model ------------------------------------------------------------
    auto* train = app.add_subcommand("train-model", "Build and train a residual network");
    std::string weights_out, widths = "8,16,32";
    std::size_t blocks = 3, classes = 10, image_size = 12, channels = 3;
    TrainConfig tc;
    tc.epochs = 6;
    tc.adversarial = AdversarialSettings{};
    std::size_t warmup = 4;
    std::string decay = "";
    bool natural = false, latent_heads = false, affine = false;
    {
        add_common(train, common, false);
        add_data(train, data_opts, "train");
        train->add_option("--weights-out", weights_out, "Output LFT1 file")->required();
        train->add_option("--blocks", blocks, "Residual blocks")->check(CLI::PositiveNumber)->capture_default_str();
        train->add_option("--widths", widths, "Comma-separated block widths")->capture_default_str();
        train->add_option("--classes", classes, "Number of classes")->check(CLI::Range(2, 1000))->capture_default_str();
        train->add_option("--image-size", image_size, "Synthetic image side")->check(CLI::Range(4, 256))->capture_default_str();
        train->add_option("--channels", channels, "Synthetic image channels")->check(CLI::Range(1, 16))->capture_default_str();
        train->add_flag("--affine", affine, "Frozen per-channel affine after each convolution");
        train->add_option("--epochs", tc.epochs, "Training epochs")->capture_default_str();
        train->add_option("--warmup-epochs", warmup, "Natural epochs before adversarial training")->capture_default_str();
        train->add_option("--batch", tc.batch_size, "Batch size")->check(CLI::PositiveNumber)->capture_default_str();
        train->add_option("--lr", tc.learning_rate, "Initial learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
        train->add_option("--lr-decay-epochs", decay, "Comma-separated epochs where the rate is multiplied by --lr-decay (default: two thirds in)");
        train->add_option("--lr-decay", tc.decay_factor, "Rate decay factor")->check(CLI::PositiveNumber)->capture_default_str();
        train->add_option("--momentum", tc.momentum, "SGD momentum")->check(CLI::Range(0.0, 0.999))->capture_default_str();
        train->add_option("--weight-decay", tc.weight_decay, "L2 weight decay")->check(CLI::NonNegativeNumber)->capture_default_str();
        train->add_flag("--natural", natural, "Plain training without adversarial examples");
        train->add_option("--adv-steps", tc.adversarial->steps, "PGD steps per training batch")->check(CLI::PositiveNumber)->capture_default_str();
        train->add_option("--eps", tc.adversarial->eps, "Training attack radius")->check(CLI::Range(0.0, 1.0))->capture_default_str();
        train->add_option("--adv-step", tc.adversarial->step, "Training attack step")->check(CLI::NonNegativeNumber)->capture_default_str();
        train->add_flag("--latent-heads", latent_heads, "Train logits heads jointly on adversarial examples");
        train->callback([&] {
            chosen = "train-model";
            action = [&](Run& run) {
                const auto w = parse_sizes(widths, "--widths");
                if (w.size() != blocks) throw UsageError("--widths: need one width per block");
                if (!decay.empty()) {
                    tc.decay_epochs = parse_sizes(decay, "--lr-decay-epochs");
                } else if (tc.epochs >= 3) {
                    tc.decay_epochs = {tc.epochs * 2 / 3};
                }
                if (natural && latent_heads) throw UsageError("--latent-heads needs adversarial training");
                tc.seed = common.seed;
                tc.latent_heads_on = latent_heads;
                const InputShape input{channels, image_size, image_size};
                const Dataset data = load_data(data_opts, input, classes, 10000);
                record_data(run, data_opts, data);
                ModelGraph model = build_resnet_small(blocks, w, classes, input, common.seed, affine);
                CsvTable table;
                table.header = {"phase", "epoch", "learning_rate", "loss"};
                auto log = [&](const std::string& phase, const TrainStats& s, const TrainConfig& cfg) {
                    table.rows.push_back({phase, "0", "", fixed(s.initial_loss, 6)});
                    for (std::size_t e = 0; e < s.epoch_loss.size(); ++e) {
                        table.rows.push_back({phase, std::to_string(e + 1), fixed(cfg.rate_at(e), 6), fixed(s.epoch_loss[e], 6)});
                    }
                };
                HeadSet heads;
                if (natural || warmup > 0) {
                    TrainConfig wc = tc;
                    wc.adversarial.reset();
                    if (!natural) {
                        wc.epochs = warmup;
                        wc.decay_epochs.clear();
                    }
                    log("natural", train_natural(model, data, wc), wc);
                }
                if (!natural) log("adversarial", train_adversarial(model, heads, data, tc), tc);
                save_weights(weights_out, model, heads);
                const double acc = evaluate(model, data);
                run.manifest()["model"] = {{"blocks", blocks}, {"widths", w}, {"classes", classes},
                                           {"input", {channels, image_size, image_size}},
                                           {"parameters", model.parameter_count()},
                                           {"parameter_checksum", checksum_hex(parameter_checksum(model))},
                                           {"latent_heads", latent_heads}, {"natural", natural},
                                           {"warmup_epochs", natural ? 0 : warmup}, {"weights_out", weights_out},
                                           {"train_accuracy", acc}};
                run.output(table, common.out);
                fmt::print("trained {} parameters, training accuracy {:.2f}%\n", model.parameter_count(), 100 * acc);
            };
        });
    }

    // train-heads ------------------------------------------------------------
    auto* heads_cmd = app.add_subcommand("train-heads", "Fit logits heads on a frozen backbone");
    TrainConfig hc;
    hc.learning_rate = 0.1;
    hc.weight_decay = 0.0;
    {
        add_common(heads_cmd, common, true);
        add_data(heads_cmd, data_opts, "train");
        heads_cmd->add_option("--weights-out", weights_out, "Output LFT1 file (default: overwrite --weights)");
        heads_cmd->add_option("--lr", hc.learning_rate, "Learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
        heads_cmd->add_option("--batch", hc.batch_size, "Batch size")->check(CLI::PositiveNumber)->capture_default_str();
        heads_cmd->add_option("--max-epochs", hc.max_epochs, "Epoch cap")->capture_default_str();
        heads_cmd->add_option("--tolerance", hc.tolerance, "Convergence threshold on loss improvement")->capture_default_str();
        heads_cmd->add_option("--patience", hc.patience, "Epochs below threshold before stopping")->capture_default_str();
        heads_cmd->callback([&] {
            chosen = "train-heads";
            action = [&](Run& run) {
                ModelBundle b = load_bundle(common, run);
                const Dataset data = load_data(data_opts, b.model.input_shape(), b.model.num_classes(), 10000);
                record_data(run, data_opts, data);
                hc.seed = common.seed;
                std::vector<HeadTrainResult> results;
                b.heads = train_heads(b.model, data, hc, &results);
                save_weights(weights_out.empty() ? common.weights : weights_out, b.model, b.heads);
                CsvTable table;
                table.header = {"layer", "initial_loss", "final_loss", "epochs", "accuracy"};
                for (const auto& r : results) {
                    table.rows.push_back({std::to_string(r.layer), fixed(r.stats.initial_loss, 6),
                                          fixed(r.stats.epoch_loss.empty() ? r.stats.initial_loss : r.stats.epoch_loss.back(), 6),
                                          std::to_string(r.stats.epochs_run()), fixed(100 * r.accuracy, 2)});
                    fmt::print("head {}: accuracy {:.2f}% after {} epochs\n", r.layer, 100 * r.accuracy, r.stats.epochs_run());
                }
                run.manifest()["head_checksum"] = checksum_hex(head_checksum(b.heads));
                run.output(table, common.out);
            };
        });
    }

    // select-layer -----------------------------------------------------------
    auto* select = app.add_subcommand("select-layer", "Greedy latent layer selection");
    {
        add_common(select, common, true);
        add_data(select, data_opts, "attack");
        add_attack(select, attack_opts);
        select->callback([&] {
            chosen = "select-layer";
            action = [&](Run& run) {
                const ModelBundle b = load_bundle(common, run);
                const Dataset data = load_data(data_opts, b.model.input_shape(), b.model.num_classes(), 200);
                record_data(run, data_opts, data);
                const AttackConfig config = attack_config(attack_opts, common.seed);
                run.manifest()["attack"] = config_json(config);
                const LayerSelectionReport rep = select_layer(b.model, b.heads, data, config);
                CsvTable table;
                table.header = {"layer", "accuracy", "successes", "mean_first_success", "selected"};
                for (const auto& s : rep.layers) {
                    table.rows.push_back({std::to_string(s.layer), fixed(100 * s.accuracy, 2), std::to_string(s.successes),
                                          s.mean_first_success ? fixed(*s.mean_first_success, 2) : "",
                                          s.layer == rep.selected ? "1" : "0"});
                }
                run.manifest()["selected_layer"] = rep.selected;
                run.output(table, common.out);
                fmt::print("selected layer {}\n", rep.selected);
            };
        });
    }

    // attack -----------------------------------------------------------------
    auto* attack_cmd = app.add_subcommand("attack", "Attack every image and report per-image results");
    std::string method = "lafeat";
    {
        add_common(attack_cmd, common, true);
        add_data(attack_cmd, data_opts, "attack");
        add_attack(attack_cmd, attack_opts);
        attack_cmd->add_option("--method", method, "lafeat, pgd, fgsm, bim or mim")
            ->check(CLI::IsMember({"lafeat", "pgd", "fgsm", "bim", "mim"}))
            ->capture_default_str();
        attack_cmd->callback([&] {
            chosen = "attack";
            action = [&](Run& run) {
                const ModelBundle b = load_bundle(common, run);
                const Dataset data = load_data(data_opts, b.model.input_shape(), b.model.num_classes(), 200);
                record_data(run, data_opts, data);
                AttackSpec spec{method, parse_attack_kind(method), attack_config(attack_opts, common.seed)};
                if (spec.kind == AttackKind::Lafeat) {
                    spec.config.layer = resolve_layer(attack_opts, b, data, spec.config, run.manifest());
                }
                run.manifest()["attack"] = config_json(spec.config);
                run.manifest()["budget_per_image"] = attack_budget(spec, b.model.num_classes());
                const auto results = attack_dataset(b.model, b.heads, data, spec);
                CsvTable table;
                table.header = {"image", "label", "clean_correct", "predicted", "survived", "first_success",
                                "gradient_passes", "check_passes"};
                std::size_t survivors = 0;
                for (std::size_t i = 0; i < results.size(); ++i) {
                    const auto& r = results[i];
                    survivors += r.survived ? 1 : 0;
                    table.rows.push_back({std::to_string(i), std::to_string(data.labels[i]), r.clean_correct ? "1" : "0",
                                          std::to_string(r.predicted), r.survived ? "1" : "0",
                                          r.first_success ? std::to_string(*r.first_success) : "",
                                          std::to_string(r.gradient_passes), std::to_string(r.check_passes)});
                }
                run.output(table, common.out);
                fmt::print("accuracy under {}: {:.2f}%\n", method, 100.0 * survivors / data.size());
            };
        });
    }

    // benchmark --------------------------------------------------------------
    auto* bench = app.add_subcommand("benchmark", "Accuracy under a list of attacks");
    std::string attack_list = "fgsm,bim,mim,pgd,lafeat-nolatent,lafeat";
    std::string lf_weights;
    {
        add_common(bench, common, true);
        add_data(bench, data_opts, "attack");
        add_attack(bench, attack_opts);
        bench->add_option("--attacks", attack_list,
                          "Comma-separated: fgsm, bim, mim, pgd, lafeat, lafeat-nolatent")
            ->capture_default_str();
        bench->add_option("--lf-weights", lf_weights,
                          "Second model trained with latent heads; emits the defense x attack grid instead");
        bench->callback([&] {
            chosen = "benchmark";
            action = [&](Run& run) {
                const ModelBundle b = load_bundle(common, run);
                const Dataset data = load_data(data_opts, b.model.input_shape(), b.model.num_classes(), 200);
                record_data(run, data_opts, data);
                AttackConfig lafeat = attack_config(attack_opts, common.seed);
                AttackConfig baseline = lafeat;
                baseline.random_start = attack_opts.random_start;

                if (!lf_weights.empty()) {
                    const ModelBundle lf = load_weights(lf_weights);
                    if (lf.model.input_shape() != b.model.input_shape() || lf.model.num_classes() != b.model.num_classes()) {
                        throw UsageError("--lf-weights: model shape differs from --weights");
                    }
                    run.manifest()["lf_weights"] = {{"path", lf_weights},
                                                    {"parameter_checksum", checksum_hex(parameter_checksum(lf.model))}};
                    AttackConfig probe = lafeat;
                    probe.tactics.latent = true;
                    const std::size_t layer_a = resolve_layer(attack_opts, b, data, probe, run.manifest());
                    const std::size_t layer_b = resolve_layer(attack_opts, lf, data, probe, run.manifest());
                    const auto grid = latent_training_grid({{"-LF", &b.model, &b.heads, layer_a},
                                                            {"+LF", &lf.model, &lf.heads, layer_b}},
                                                           data, baseline, lafeat);
                    run.manifest()["attack"] = config_json(lafeat);
                    run.manifest()["layers"] = {layer_a, layer_b};
                    run.output(grid_table(grid), common.out);
                    for (const auto& r : grid) {
                        fmt::print("{}: clean {:.2f} pgd {:.2f} without-latent {:.2f} with-latent {:.2f}\n", r.defense,
                                   r.clean, r.pgd, r.without_latent, r.with_latent);
                    }
                    return;
                }

                std::vector<AttackSpec> specs;
                for (const auto& name : parse_names(attack_list)) {
                    if (name == "lafeat" || name == "lafeat-nolatent") {
                        AttackSpec s{name, AttackKind::Lafeat, lafeat};
                        if (name == "lafeat-nolatent") s.config.tactics.latent = false;
                        specs.push_back(s);
                    } else {
                        AttackKind kind;
                        try {
                            kind = parse_attack_kind(name);
                        } catch (const InvalidConfig&) {
                            throw UsageError("--attacks: unknown attack '" + name + "'");
                        }
                        if (kind == AttackKind::Lafeat) throw UsageError("--attacks: unknown attack '" + name + "'");
                        specs.push_back({name, kind, baseline});
                    }
                }
                const bool any_latent = std::any_of(specs.begin(), specs.end(), [](const AttackSpec& s) {
                    return s.kind == AttackKind::Lafeat && s.config.tactics.latent;
                });
                if (any_latent) {
                    const std::size_t layer = resolve_layer(attack_opts, b, data, lafeat, run.manifest());
                    for (auto& s : specs) s.config.layer = layer;
                }
                const RobustnessReport rep = run_benchmark(b.model, b.heads, data, specs);
                json rows = json::array();
                for (const auto& r : rep.rows) rows.push_back({{"attack", r.attack}, {"config", config_json(r.spec.config)}});
                run.manifest()["attacks"] = rows;
                run.manifest()["report_runtime_seconds"] = rep.runtime_seconds;
                run.output(report_table(rep), common.out);
                print_report(rep);
            };
        });
    }

    // curves -----------------------------------------------------------------
    auto* curves_cmd = app.add_subcommand("curves", "Survival curves over iterations");
    std::string methods = "pgd,lafeat";
    std::size_t max_iters = 0;
    {
        add_common(curves_cmd, common, true);
        add_data(curves_cmd, data_opts, "attack");
        add_attack(curves_cmd, attack_opts);
        curves_cmd->add_option("--methods", methods, "Comma-separated: pgd, bim, mim, lafeat, lafeat-nolatent")
            ->capture_default_str();
        curves_cmd->add_option("--max-iters", max_iters, "Curve length (default iters x beta grid)");
        curves_cmd->callback([&] {
            chosen = "curves";
            action = [&](Run& run) {
                const ModelBundle b = load_bundle(common, run);
                const Dataset data = load_data(data_opts, b.model.input_shape(), b.model.num_classes(), 200);
                record_data(run, data_opts, data);
                AttackConfig lafeat = attack_config(attack_opts, common.seed);
                const std::size_t length = max_iters ? max_iters : lafeat.iters * lafeat.beta_grid.size();
                std::vector<AttackSpec> specs;
                for (const auto& name : parse_names(methods)) {
                    if (name == "lafeat" || name == "lafeat-nolatent") {
                        AttackSpec s{name, AttackKind::Lafeat, lafeat};
                        if (name == "lafeat-nolatent") s.config.tactics.latent = false;
                        specs.push_back(s);
                    } else if (name == "pgd" || name == "bim" || name == "mim") {
                        AttackSpec s{name, parse_attack_kind(name), lafeat};
                        s.config.iters = length;
                        specs.push_back(s);
                    } else {
                        throw UsageError("--methods: unknown method '" + name + "'");
                    }
                }
                if (std::any_of(specs.begin(), specs.end(),
                                [](const AttackSpec& s) { return s.kind == AttackKind::Lafeat && s.config.tactics.latent; })) {
                    const std::size_t layer = resolve_layer(attack_opts, b, data, lafeat, run.manifest());
                    for (auto& s : specs) s.config.layer = layer;
                }
                json rows = json::array();
                for (const auto& s : specs) rows.push_back({{"method", s.name}, {"config", config_json(s.config)}});
                run.manifest()["methods"] = rows;
                run.output(curve_table(convergence_curves(b.model, b.heads, data, specs, length)), common.out);
            };
        });
    }

    // beta-sweep -------------------------------------------------------------
    auto* sweep = app.add_subcommand("beta-sweep", "Accuracy under attack for fixed beta values");
    std::string betas = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1";
    {
        add_common(sweep, common, true);
        add_data(sweep, data_opts, "attack");
        add_attack(sweep, attack_opts);
        sweep->add_option("--betas", betas, "Comma-separated beta values (weight of the output logits)")
            ->capture_default_str();
        sweep->callback([&] {
            chosen = "beta-sweep";
            action = [&](Run& run) {
                const auto grid = parse_doubles(betas, "--betas");
                for (double v : grid) {
                    if (!(v >= 0.0 && v <= 1.0)) throw UsageError("--betas: values must lie in [0,1]");
                }
                const ModelBundle b = load_bundle(common, run);
                const Dataset data = load_data(data_opts, b.model.input_shape(), b.model.num_classes(), 200);
                record_data(run, data_opts, data);
                AttackConfig config = attack_config(attack_opts, common.seed);
                config.tactics.latent = true;
                config.layer = resolve_layer(attack_opts, b, data, config, run.manifest());
                run.manifest()["attack"] = config_json(config);
                const auto rows = beta_sweep(b.model, b.heads, data, grid, config);
                run.output(beta_table(rows), common.out);
                for (const auto& r : rows) fmt::print("beta {:.2f}: {:.2f}%\n", r.beta, r.accuracy);
            };
        });
    }

    // ablate -----------------------------------------------------------------
    auto* ablate = app.add_subcommand("ablate", "All 16 tactic subsets");
    std::string edges_out;
    {
        add_common(ablate, common, true);
        add_data(ablate, data_opts, "attack");
        add_attack(ablate, attack_opts);
        ablate->add_option("--edges-out", edges_out, "Edge CSV (default <out stem>_edges.csv)");
        ablate->callback([&] {
            chosen = "ablate";
            action = [&](Run& run) {
                const ModelBundle b = load_bundle(common, run);
                const Dataset data = load_data(data_opts, b.model.input_shape(), b.model.num_classes(), 200);
                record_data(run, data_opts, data);
                AttackConfig config = attack_config(attack_opts, common.seed);
                AttackConfig probe = config;
                probe.tactics.latent = true;
                probe.tactics.multi_target = false;
                config.layer = resolve_layer(attack_opts, b, data, probe, run.manifest());
                run.manifest()["attack"] = config_json(config);
                const LatticeReport rep = ablation_lattice(b.model, b.heads, data, config);
                fs::path edges = edges_out;
                if (edges.empty()) {
                    const fs::path out(common.out);
                    edges = out.parent_path() / (out.stem().string() + "_edges.csv");
                }
                run.output(lattice_table(rep), common.out);
                run.output(lattice_edge_table(rep), edges);
                run.manifest()["latent_strongest"] = {{"nodes", rep.latent_strongest},
                                                      {"candidates", rep.latent_candidates},
                                                      {"from_empty", rep.latent_strongest_from_empty}};
                for (const auto& r : rep.rows) fmt::print("{:>2} {:<5} {:6.2f}%\n", r.tactics.mask(), r.tactics.label(), r.accuracy);
                if (!rep.latent_strongest_from_empty) {
                    fmt::print(stderr, "note: adding the latent tactic to the empty set is not the strongest single addition\n");
                }
            };
        });
    }

    // activations ------------------------------------------------------------
    auto* act = app.add_subcommand("activations", "Top-k channel activations, natural vs adversarial");
    std::size_t top_k = 32;
    {
        add_common(act, common, true);
        add_data(act, data_opts, "attack");
        add_attack(act, attack_opts);
        act->add_option("--top-k", top_k, "Channels per layer")->check(CLI::PositiveNumber)->capture_default_str();
        act->callback([&] {
            chosen = "activations";
            action = [&](Run& run) {
                const ModelBundle b = load_bundle(common, run);
                const Dataset data = load_data(data_opts, b.model.input_shape(), b.model.num_classes(), 200);
                record_data(run, data_opts, data);
                AttackSpec spec{"lafeat", AttackKind::Lafeat, attack_config(attack_opts, common.seed)};
                spec.config.layer = resolve_layer(attack_opts, b, data, spec.config, run.manifest());
                run.manifest()["attack"] = config_json(spec.config);
                const auto results = attack_dataset(b.model, b.heads, data, spec, true);
                std::vector<float> adv;
                adv.reserve(data.images.size());
                for (const auto& r : results) adv.insert(adv.end(), r.adversarial.data().begin(), r.adversarial.data().end());
                const ActivationDump dump =
                    activation_dump(b.model, data.images, Tensor(data.images.shape(), std::move(adv)), top_k);
                for (const auto& w : dump.warnings) fmt::print(stderr, "warning: {}\n", w);
                run.manifest()["mean_abs_gap"] = dump.mean_abs_gap;
                run.output(activation_table(dump), common.out);
                for (std::size_t l = 0; l < dump.mean_abs_gap.size(); ++l) {
                    fmt::print("layer {}: mean |gap| {:.6f}\n", l + 1, dump.mean_abs_gap[l]);
                }
            };
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    const CLI::App* sub = app.get_subcommands().front();
    try {
        Run run(chosen, sub, argc, argv);
        run.manifest()["seed"] = common.seed;
        action(run);
        run.finish(common);
        return kOk;
    } catch (const UsageError& e) {
        fmt::print(stderr, "usage error: {}\nRun with --help for more information.\n", e.what());
        return kUsage;
    } catch (const InvalidConfig& e) {
        fmt::print(stderr, "usage error: {}\n", e.what());
        return kUsage;
    } catch (const Error& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return kOperational;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return kOperational;
    }
}
