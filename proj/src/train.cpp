#include "latentlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "latentlab/parallel.hpp"
#include "latentlab/rng.hpp"

namespace latentlab {

void TrainConfig::validate() const {
    if (batch_size == 0) throw InvalidConfig("batch size must be positive");
    if (!(learning_rate >= 0.0)) throw InvalidConfig("learning rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidConfig("momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw InvalidConfig("weight decay must be >= 0");
    if (!(decay_factor > 0.0)) throw InvalidConfig("decay factor must be positive");
    if (adversarial) {
        if (adversarial->steps < 1) throw InvalidConfig("adversarial training needs at least one attack step");
        if (!(adversarial->eps >= 0.0) || !(adversarial->step >= 0.0)) {
            throw InvalidConfig("adversarial eps and step must be >= 0");
        }
    }
    for (double w : head_loss_weights) {
        if (!(w >= 0.0)) throw InvalidConfig("head loss weights must be >= 0");
    }
}

double TrainConfig::rate_at(std::size_t epoch) const {
    double rate = learning_rate;
    for (std::size_t e : decay_epochs) {
        if (epoch >= e) rate *= decay_factor;
    }
    return rate;
}

namespace {

/// SGD with momentum; weight decay only on weight matrices and kernels.
class Sgd {
public:
    Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
        : params_(std::move(params)), momentum_(momentum), decay_(weight_decay) {
        velocity_.reserve(params_.size());
        for (const auto& p : params_) velocity_.emplace_back(p.size(), 0.0f);
    }

    const std::vector<Tensor>& params() const { return params_; }

    void step(const std::vector<Tensor>& grads, double rate) {
        const auto m = static_cast<float>(momentum_);
        const auto lr = static_cast<float>(rate);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            const float wd = params_[k].rank() >= 2 ? static_cast<float>(decay_) : 0.0f;
            auto p = params_[k].mutable_data();
            const auto g = grads[k].data();
            auto& v = velocity_[k];
            for (std::size_t j = 0; j < p.size(); ++j) {
                v[j] = m * v[j] + g[j] + wd * p[j];
                p[j] -= lr * v[j];
            }
        }
    }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> velocity_;
    double momentum_;
    double decay_;
};

std::vector<std::size_t> batch_index(const std::vector<std::size_t>& order, std::size_t begin, std::size_t size) {
    const std::size_t end = std::min(order.size(), begin + size);
    return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

std::vector<std::size_t> labels_at(const Dataset& data, const std::vector<std::size_t>& index) {
    std::vector<std::size_t> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) out[i] = data.labels[index[i]];
    return out;
}

void check_data(const Dataset& data, const ModelGraph& model) {
    if (data.empty()) throw EmptyDataset("training set is empty");
    if (data.input_shape() != model.input_shape()) throw ShapeMismatch("dataset images do not match the model input");
    for (std::size_t l : data.labels) {
        if (l >= model.num_classes()) throw InvalidConfig("label " + std::to_string(l) + " >= class count");
    }
}

void check_ball(const Tensor& x, const Tensor& x_adv, double eps) {
    const auto a = x.data();
    const auto b = x_adv.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (b[i] < 0.0f || b[i] > 1.0f || std::abs(static_cast<double>(b[i]) - a[i]) > eps + 1e-6) {
            throw std::logic_error("training attack left the eps-ball");
        }
    }
}

/// Mean clean SCE of the output over up to `limit` images.
double mean_loss(const ModelGraph& model, const Dataset& data, std::size_t limit) {
    const std::size_t n = std::min(limit, data.size());
    double total = 0.0;
    for (std::size_t begin = 0; begin < n; begin += 256) {
        std::vector<std::size_t> index(std::min<std::size_t>(256, n - begin));
        std::iota(index.begin(), index.end(), begin);
        const auto labels = labels_at(data, index);
        total += sum(softmax_cross_entropy(logits(model, data.batch(index)), std::span<const std::size_t>(labels))).item();
    }
    return total / static_cast<double>(n);
}

TrainStats fit(ModelGraph& model, HeadSet* heads, const Dataset& data, const TrainConfig& config) {
    config.validate();
    check_data(data, model);

    std::vector<Tensor> params = model.parameters();
    const std::size_t backbone_params = params.size();
    if (heads) {
        std::sort(heads->begin(), heads->end(), [](const auto& a, const auto& b) { return a.layer < b.layer; });
        for (auto& h : *heads) {
            params.push_back(h.weight);
            params.push_back(h.bias);
        }
    }
    const std::size_t terms = 1 + (heads ? heads->size() : 0);
    std::vector<double> weights = config.head_loss_weights;
    if (weights.empty()) weights.assign(terms, 1.0 / static_cast<double>(terms));
    if (weights.size() != terms) throw InvalidConfig("need one loss weight per output/head term");

    Sgd sgd(params, config.momentum, config.weight_decay);
    TrainStats stats;
    stats.initial_loss = mean_loss(model, data, 1024);

    std::vector<std::size_t> order(data.size());
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle = Rng::stream(config.seed, "epoch-order", epoch);
        shuffle.shuffle(order.begin(), order.end());
        const double rate = config.rate_at(epoch);

        double loss_sum = 0.0;
        std::size_t batch_no = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size, ++batch_no) {
            const auto index = batch_index(order, begin, config.batch_size);
            const auto labels = labels_at(data, index);
            const std::span<const std::size_t> lab(labels);
            Tensor x = data.batch(index);
            if (config.adversarial) {
                const auto& adv = *config.adversarial;
                Rng rng = Rng::stream(config.seed ^ epoch, "train-attack", batch_no);
                Tensor x_adv = pgd_batch(model, x, lab, adv.eps, adv.steps, adv.step, adv.random_start, rng);
                if (batch_no == 0) check_ball(x, x_adv, adv.eps);
                x = x_adv;
            }

            Tape tape;
            std::vector<Tensor> leaves;
            leaves.reserve(params.size());
            for (const auto& p : params) leaves.push_back(tape.leaf(p));
            const ForwardTaps f =
                forward_with_taps(model, x, std::span<const Tensor>(leaves.data(), backbone_params));
            Tensor loss = mean(softmax_cross_entropy(f.logits, lab));
            if (terms > 1) {
                loss = scale(loss, static_cast<float>(weights[0]));
                for (std::size_t h = 0; h < heads->size(); ++h) {
                    const Tensor& w = leaves[backbone_params + 2 * h];
                    const Tensor& b = leaves[backbone_params + 2 * h + 1];
                    const Tensor z = head_logits(w, b, f.tap((*heads)[h].layer));
                    loss = add(loss, scale(mean(softmax_cross_entropy(z, lab)), static_cast<float>(weights[h + 1])));
                }
            }
            const GradientMap<float> grads = tape.backward(loss);
            std::vector<Tensor> g;
            g.reserve(leaves.size());
            for (const auto& leaf : leaves) g.push_back(grads.of(leaf));
            sgd.step(g, rate);
            loss_sum += loss.item() * static_cast<double>(index.size());
        }
        stats.epoch_loss.push_back(loss_sum / static_cast<double>(data.size()));
    }
    return stats;
}

}  // namespace

TrainStats train_natural(ModelGraph& model, const Dataset& data, const TrainConfig& config) {
    TrainConfig c = config;
    c.adversarial.reset();
    return fit(model, nullptr, data, c);
}

TrainStats train_adversarial(ModelGraph& model, HeadSet& heads, const Dataset& data, const TrainConfig& config) {
    if (!config.adversarial) throw InvalidConfig("adversarial training needs attack settings");
    if (config.latent_heads_on) {
        if (model.depth() < 2) throw NoIntermediateLayers("latent heads need at least two layers");
        if (heads.empty()) heads = make_heads(model);
        return fit(model, &heads, data, config);
    }
    return fit(model, nullptr, data, config);
}

HeadSet train_heads(const ModelGraph& model, const Dataset& data, const TrainConfig& config,
                    std::vector<HeadTrainResult>* results) {
    config.validate();
    check_data(data, model);
    if (model.depth() < 2) throw NoIntermediateLayers("model has no intermediate layers");
    const std::size_t n = data.size();
    const std::size_t taps = model.depth() - 1;

    // Pooled features per tap, [n, C_l].
    std::vector<std::vector<float>> features(taps);
    for (std::size_t begin = 0; begin < n; begin += 256) {
        std::vector<std::size_t> index(std::min<std::size_t>(256, n - begin));
        std::iota(index.begin(), index.end(), begin);
        const ForwardTaps f = forward_with_taps(model, data.batch(index));
        for (std::size_t l = 0; l < taps; ++l) {
            const Tensor pooled = global_avg_pool(f.taps[l]);
            features[l].insert(features[l].end(), pooled.data().begin(), pooled.data().end());
        }
    }

    HeadSet heads = make_heads(model);
    if (results) results->clear();
    std::vector<std::size_t> order(n);
    for (std::size_t l = 1; l <= taps; ++l) {
        LogitsHead& head = heads[l - 1];
        const std::size_t C = head.weight.dim(0);
        const Tensor all(Shape{n, C}, features[l - 1]);
        Sgd sgd({head.weight, head.bias}, config.momentum, config.weight_decay);

        auto batch_loss = [&](const std::vector<std::size_t>& index, Tape* tape, GradientMap<float>* grads) {
            std::vector<float> rows(index.size() * C);
            for (std::size_t r = 0; r < index.size(); ++r) {
                std::copy_n(features[l - 1].begin() + static_cast<std::ptrdiff_t>(index[r] * C), C,
                            rows.begin() + static_cast<std::ptrdiff_t>(r * C));
            }
            const Tensor fb(Shape{index.size(), C}, std::move(rows));
            const auto labels = labels_at(data, index);
            const Tensor w = tape ? tape->leaf(head.weight) : head.weight;
            const Tensor b = tape ? tape->leaf(head.bias) : head.bias;
            const Tensor loss = mean(softmax_cross_entropy(add(matmul(fb, w), b), std::span<const std::size_t>(labels)));
            if (tape) {
                *grads = tape->backward(loss);
                return std::pair{loss.item(), std::vector<Tensor>{grads->of(w), grads->of(b)}};
            }
            return std::pair{loss.item(), std::vector<Tensor>{}};
        };

        HeadTrainResult result;
        result.layer = l;
        {
            std::vector<std::size_t> everything(n);
            std::iota(everything.begin(), everything.end(), 0);
            result.stats.initial_loss = batch_loss(everything, nullptr, nullptr).first;
        }
        double previous = result.stats.initial_loss;
        std::size_t streak = 0;
        for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
            std::iota(order.begin(), order.end(), 0);
            Rng shuffle = Rng::stream(config.seed ^ l, "head-order", epoch);
            shuffle.shuffle(order.begin(), order.end());
            double loss_sum = 0.0;
            for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
                const auto index = batch_index(order, begin, config.batch_size);
                Tape tape;
                GradientMap<float> grads;
                auto [loss, g] = batch_loss(index, &tape, &grads);
                sgd.step(g, config.rate_at(epoch));
                loss_sum += loss * static_cast<double>(index.size());
            }
            const double epoch_loss = loss_sum / static_cast<double>(n);
            result.stats.epoch_loss.push_back(epoch_loss);
            streak = previous - epoch_loss < config.tolerance ? streak + 1 : 0;
            previous = epoch_loss;
            if (streak >= config.patience) break;
        }

        const auto pred = argmax_rows(add(matmul(all, head.weight), head.bias));
        std::size_t correct = 0;
        for (std::size_t i = 0; i < n; ++i) correct += pred[i] == data.labels[i] ? 1 : 0;
        result.accuracy = static_cast<double>(correct) / static_cast<double>(n);
        if (results) results->push_back(std::move(result));
    }
    return heads;
}

LayerSelectionReport select_layer(const ModelGraph& model, const HeadSet& heads, const Dataset& attack_set,
                                  const AttackConfig& base) {
    if (model.depth() < 2) throw NoIntermediateLayers("model has no intermediate layers");
    if (attack_set.empty()) throw EmptyDataset("attack set is empty");
    const std::size_t n = attack_set.size();
    const auto clean = predict(model, attack_set);

    LayerSelectionReport report;
    std::size_t clean_correct = 0;
    for (std::size_t i = 0; i < n; ++i) clean_correct += clean[i] == attack_set.labels[i] ? 1 : 0;
    report.clean_accuracy = static_cast<double>(clean_correct) / static_cast<double>(n);

    double best = INFINITY;
    for (std::size_t l = 1; l < model.depth(); ++l) {
        AttackConfig c = base;
        c.layer = l;
        c.tactics.latent = true;
        c.tactics.multi_target = false;
        c.beta_grid = {0.5};
        std::vector<AttackOutcome> outcomes(n);
        parallel_for(n, [&](std::size_t i) {
            if (clean[i] != attack_set.labels[i]) return;
            outcomes[i] = attack_image(model, heads, attack_set.image(i), attack_set.labels[i], c, i);
        });
        LayerScore score;
        score.layer = l;
        std::size_t survived = 0;
        double first_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (clean[i] != attack_set.labels[i]) continue;
            if (outcomes[i].success) {
                ++score.successes;
                first_sum += static_cast<double>(*outcomes[i].first_success);
            } else {
                ++survived;
            }
        }
        score.accuracy = static_cast<double>(survived) / static_cast<double>(n);
        if (score.successes > 0) score.mean_first_success = first_sum / static_cast<double>(score.successes);
        if (score.accuracy <= best) {
            best = score.accuracy;
            report.selected = l;
        }
        report.layers.push_back(score);
    }
    return report;
}

}  // namespace latentlab
