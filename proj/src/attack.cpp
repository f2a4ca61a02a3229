#include "latentlab/attack.hpp"

#include <algorithm>
#include <cmath>

namespace latentlab {

namespace {

float sgn(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

/// v + alpha * sign(g), the raw (unprojected) sign step.
Tensor sign_step(const Tensor& v, const Tensor& g, double alpha) {
    const float a = static_cast<float>(alpha);
    Tensor out(v.shape());
    auto o = out.mutable_data();
    const auto vd = v.data();
    const auto gd = g.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = vd[i] + a * sgn(gd[i]);
    return out;
}

void check_image(const Tensor& x) {
    if (x.rank() != 4 || x.dim(0) != 1) throw ShapeMismatch("attacks take one image [1,C,H,W], got " + shape_str(x.shape()));
}

std::size_t argmax(std::span<const float> z) {
    return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

/// Forward-only evaluation of the final iterate.
void finish_trace(AttackTrace& trace, const ModelGraph& model, const Tensor& x_final, std::size_t label,
                  std::size_t index, bool record) {
    const Tensor z = logits(model, x_final);
    ++trace.check_passes;
    const double sigma = margin_value(z.data(), label);
    trace.margins.push_back(sigma);
    if (sigma <= 0.0 && !trace.first_success) trace.first_success = index;
    trace.predicted = argmax(z.data());
    trace.final = x_final;
    if (record) trace.iterates.push_back(x_final);
}

struct Gradient {
    Tensor grad;
    double margin = 0.0;
    double loss = 0.0;
    std::size_t predicted = 0;
};

/// Raw SCE gradient with respect to the image, plus the margin at it.
Gradient sce_gradient(const ModelGraph& model, const Tensor& x_hat, std::size_t label, bool skip_if_broken) {
    Tape tape;
    const Tensor xl = tape.leaf(x_hat);
    const ForwardTaps f = forward_with_taps(model, xl);
    Gradient out;
    out.margin = margin_value(f.logits.data(), label);
    out.predicted = argmax(f.logits.data());
    if (skip_if_broken && out.margin <= 0.0) return out;
    const std::size_t labels[1] = {label};
    const Tensor loss = sce(f.logits, std::span<const std::size_t>(labels));
    out.loss = loss.item();
    out.grad = tape.backward(loss).of(xl);
    return out;
}

enum class Direction { Sign, Momentum };

AttackTrace sign_iteration(const ModelGraph& model, const Tensor& x, std::size_t label, const AttackConfig& c,
                           Tensor x_hat, Direction direction) {
    AttackTrace trace;
    std::vector<double> momentum;
    if (direction == Direction::Momentum) momentum.assign(x.size(), 0.0);
    for (std::size_t i = 0; i < c.iters; ++i) {
        if (c.record_iterates) trace.iterates.push_back(x_hat);
        const Gradient g = sce_gradient(model, x_hat, label, c.stop_on_success);
        ++trace.gradient_passes;
        trace.margins.push_back(g.margin);
        if (g.margin <= 0.0 && !trace.first_success) {
            trace.first_success = i;
            if (c.stop_on_success) {
                trace.predicted = g.predicted;
                trace.final = x_hat;
                return trace;
            }
        }
        trace.losses.push_back(g.loss);
        trace.betas.push_back(1.0);
        Tensor dir = g.grad;
        if (direction == Direction::Momentum) {
            const auto gd = g.grad.data();
            double l1 = 0.0;
            for (float v : gd) l1 += std::abs(static_cast<double>(v));
            dir = Tensor(g.grad.shape());
            auto dd = dir.mutable_data();
            for (std::size_t j = 0; j < gd.size(); ++j) {
                momentum[j] = c.mim_decay * momentum[j] + (l1 > 0.0 ? gd[j] / l1 : 0.0);
                dd[j] = static_cast<float>(momentum[j] > 0.0 ? 1.0 : (momentum[j] < 0.0 ? -1.0 : 0.0));
            }
        }
        x_hat = project(x, sign_step(x_hat, dir, c.alpha0), c.eps);
    }
    finish_trace(trace, model, x_hat, label, c.iters, c.record_iterates);
    return trace;
}

}  // namespace

// ---------------------------------------------------------------------------

unsigned Tactics::mask() const {
    return (latent ? 1u : 0u) | (surrogate ? 2u : 0u) | (schedule ? 4u : 0u) | (multi_target ? 8u : 0u);
}

Tactics Tactics::from_mask(unsigned m) {
    if (m > 15) throw InvalidConfig("tactic mask must be in [0, 15]");
    return Tactics{(m & 1u) != 0, (m & 2u) != 0, (m & 4u) != 0, (m & 8u) != 0};
}

std::string Tactics::label() const {
    std::string s;
    if (latent) s += 'l';
    if (surrogate) s += 's';
    if (schedule) s += 'a';
    if (multi_target) s += 'm';
    return s.empty() ? "-" : s;
}

std::vector<double> AttackConfig::middle_out_betas(std::size_t count) {
    static constexpr double kOrder[10] = {0.5, 0.4, 0.6, 0.3, 0.7, 0.2, 0.8, 0.1, 0.9, 0.0};
    if (count == 0 || count > 10) throw InvalidConfig("beta grid size must be in [1, 10]");
    return {kOrder, kOrder + count};
}

void AttackConfig::validate() const {
    if (!(eps >= 0.0)) throw InvalidConfig("eps must be >= 0");
    if (iters < 1) throw InvalidConfig("iterations must be >= 1");
    if (!(nu >= 0.0 && nu <= 1.0)) throw InvalidConfig("nu must lie in [0,1]");
    if (!(temperature > 0.0)) throw InvalidConfig("temperature must be > 0");
    if (beta_grid.empty()) throw InvalidConfig("beta grid is empty");
    for (double b : beta_grid) {
        if (!(b >= 0.0 && b <= 1.0)) throw InvalidConfig("beta values must lie in [0,1]");
    }
    if (!(alpha0 >= 0.0)) throw InvalidConfig("alpha0 must be >= 0");
    if (!(mim_decay >= 0.0)) throw InvalidConfig("MIM decay must be >= 0");
}

Tensor project(const Tensor& x, const Tensor& v, double eps) {
    if (x.shape() != v.shape()) throw ShapeMismatch("project: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    Tensor out(v.shape());
    auto o = out.mutable_data();
    const auto xd = x.data();
    const auto vd = v.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const float lo = static_cast<float>(std::max(0.0, static_cast<double>(xd[i]) - eps));
        const float hi = static_cast<float>(std::min(1.0, static_cast<double>(xd[i]) + eps));
        o[i] = std::clamp(vd[i], lo, hi);
    }
    return out;
}

Tensor random_start(const Tensor& x, double eps, Rng& rng) {
    if (eps < 0.0) throw InvalidConfig("eps must be >= 0");
    if (eps == 0.0) return x.clone();
    Tensor v(x.shape());
    auto vd = v.mutable_data();
    const auto xd = x.data();
    for (std::size_t i = 0; i < vd.size(); ++i) vd[i] = static_cast<float>(xd[i] + rng.uniform(-eps, eps));
    return project(x, v, eps);
}

Rng start_stream(std::uint64_t seed, std::uint64_t image, std::uint64_t run) {
    return Rng::stream(seed ^ image, "start", run);
}

double step_size(std::size_t i, std::size_t iters, double eps, bool schedule_on, double alpha0) {
    if (!schedule_on) return alpha0;
    return 2.0 * eps * (1.0 - static_cast<double>(i) / static_cast<double>(iters));
}

AttackTrace pgd(const ModelGraph& model, const Tensor& x, std::size_t label, const AttackConfig& config,
                std::uint64_t image_index) {
    config.validate();
    check_image(x);
    Tensor x0 = x;
    if (config.random_start) {
        Rng rng = start_stream(config.seed, image_index, 0);
        x0 = random_start(x, config.eps, rng);
    }
    return sign_iteration(model, x, label, config, x0, Direction::Sign);
}

AttackTrace fgsm(const ModelGraph& model, const Tensor& x, std::size_t label, const AttackConfig& config) {
    config.validate();
    check_image(x);
    AttackTrace trace;
    if (config.record_iterates) trace.iterates.push_back(x);
    const Gradient g = sce_gradient(model, x, label, false);
    ++trace.gradient_passes;
    trace.margins.push_back(g.margin);
    trace.losses.push_back(g.loss);
    trace.betas.push_back(1.0);
    if (g.margin <= 0.0) trace.first_success = 0;
    const Tensor x1 = project(x, sign_step(x, g.grad, config.eps), config.eps);
    finish_trace(trace, model, x1, label, 1, config.record_iterates);
    return trace;
}

AttackTrace bim(const ModelGraph& model, const Tensor& x, std::size_t label, const AttackConfig& config) {
    AttackConfig c = config;
    c.random_start = false;
    return pgd(model, x, label, c);
}

AttackTrace mim(const ModelGraph& model, const Tensor& x, std::size_t label, const AttackConfig& config) {
    config.validate();
    check_image(x);
    return sign_iteration(model, x, label, config, x, Direction::Momentum);
}

Tensor pgd_batch(const ModelGraph& model, const Tensor& x, std::span<const std::size_t> labels, double eps,
                 std::size_t steps, double alpha, bool random_init, Rng& rng) {
    Tensor x_hat = random_init ? random_start(x, eps, rng) : x;
    for (std::size_t s = 0; s < steps; ++s) {
        Tape tape;
        const Tensor xl = tape.leaf(x_hat);
        const Tensor loss = sce(forward_with_taps(model, xl).logits, labels);
        const Tensor g = tape.backward(loss).of(xl);
        x_hat = project(x, sign_step(x_hat, g, alpha), eps);
    }
    return x_hat;
}

LafeatStepResult lafeat_step(LafeatState& state, const ModelGraph& model, const LogitsHead* head,
                             const Tensor& x, std::size_t label, const AttackConfig& c, double beta,
                             std::optional<std::size_t> target) {
    LafeatStepResult r;
    Tape tape;
    const Tensor xl = tape.leaf(state.x_hat);
    const ForwardTaps f = forward_with_taps(model, xl);
    r.margin_out = margin_value(f.logits.data(), label);
    r.predicted = argmax(f.logits.data());
    if (r.margin_out <= 0.0) {
        r.stopped = true;
        return r;
    }

    Tensor z_latent;
    r.beta = 1.0;
    if (c.tactics.latent && head != nullptr && beta < 1.0) {
        z_latent = head_logits(*head, f.tap(head->layer));
        r.margin_latent = margin_value(z_latent.data(), label);
        // A head that already misclassifies would pull the wrong way.
        if (r.margin_latent > 0.0) r.beta = beta;
    }

    CombinedLossOptions opts;
    opts.beta = r.beta;
    opts.temperature = c.temperature;
    opts.form = c.tactics.surrogate ? LossForm::Surrogate : LossForm::Raw;
    opts.margin = c.margin;
    opts.target = target;
    const std::size_t labels[1] = {label};
    const Tensor loss = latent_combined(f.logits, z_latent, std::span<const std::size_t>(labels), opts);
    r.loss = loss.item();
    const Tensor g = tape.backward(loss).of(xl);

    const double alpha = step_size(state.iteration, c.iters, c.eps, c.tactics.schedule, c.alpha0);
    const double nu = c.tactics.schedule ? c.nu : 1.0;
    Tensor mu_next = project(x, sign_step(state.mu, g, alpha), c.eps);
    Tensor x_next;
    if (nu == 1.0) {
        x_next = mu_next;
    } else {
        Tensor v(x.shape());
        auto vd = v.mutable_data();
        const auto cur = state.x_hat.data();
        const auto prev = state.x_prev.data();
        const auto mu = mu_next.data();
        const float n = static_cast<float>(nu);
        for (std::size_t j = 0; j < vd.size(); ++j) {
            vd[j] = cur[j] + n * (mu[j] - cur[j]) + (1.0f - n) * (cur[j] - prev[j]);
        }
        x_next = project(x, v, c.eps);
    }
    state.x_prev = state.x_hat;
    state.x_hat = x_next;
    state.mu = mu_next;
    ++state.iteration;
    return r;
}

AttackTrace lafeat_attack(const ModelGraph& model, const LogitsHead* head, const Tensor& x, std::size_t label,
                          const AttackConfig& config, double beta, std::optional<std::size_t> target,
                          std::uint64_t image_index, std::uint64_t run) {
    config.validate();
    check_image(x);
    if (!(beta >= 0.0 && beta <= 1.0)) throw InvalidConfig("beta must lie in [0,1]");
    if (config.tactics.latent && beta < 1.0 && head == nullptr) throw MissingHead("latent attack without a head");

    LafeatState state;
    state.x_hat = x;
    if (config.random_start) {
        Rng rng = start_stream(config.seed, image_index, run);
        state.x_hat = random_start(x, config.eps, rng);
    }
    state.x_prev = state.x_hat;
    state.mu = config.literal_mu0 ? Tensor(x.shape(), 0.0f) : state.x_hat;

    AttackTrace trace;
    for (std::size_t i = 0; i < config.iters; ++i) {
        if (config.record_iterates) trace.iterates.push_back(state.x_hat);
        const Tensor current = state.x_hat;
        const LafeatStepResult r = lafeat_step(state, model, head, x, label, config, beta, target);
        ++trace.gradient_passes;
        trace.margins.push_back(r.margin_out);
        if (r.stopped) {
            trace.first_success = i;
            trace.final = current;
            trace.predicted = r.predicted;
            return trace;
        }
        trace.losses.push_back(r.loss);
        trace.betas.push_back(r.beta);
    }
    finish_trace(trace, model, state.x_hat, label, config.iters, config.record_iterates);
    return trace;
}

AttackOutcome attack_image(const ModelGraph& model, const HeadSet& heads, const Tensor& x, std::size_t label,
                           const AttackConfig& config, std::uint64_t image_index) {
    config.validate();
    check_image(x);
    const std::vector<double> betas = config.tactics.latent ? config.beta_grid : std::vector<double>{1.0};
    const LogitsHead* head = nullptr;
    if (config.tactics.latent) {
        head = find_head(heads, config.layer);
        const bool needs_head = std::any_of(betas.begin(), betas.end(), [](double b) { return b < 1.0; });
        if (!head && needs_head) throw MissingHead("no logits head for layer " + std::to_string(config.layer));
    }

    AttackOutcome out;
    std::size_t spent = 0;
    auto run = [&](double beta, std::optional<std::size_t> target) {
        const AttackTrace t = lafeat_attack(model, head, x, label, config, beta, target, image_index, out.runs++);
        out.gradient_passes += t.gradient_passes;
        out.check_passes += t.check_passes;
        out.adversarial = t.final;
        out.predicted = t.predicted;
        if (t.predicted != label) {
            out.success = true;
            out.first_success = spent + t.first_success.value_or(config.iters);
            out.beta = beta;
            out.target = target;
            return true;
        }
        spent += t.gradient_passes;
        return false;
    };

    for (double beta : betas) {
        if (run(beta, std::nullopt)) return out;
    }
    if (config.tactics.multi_target) {
        for (std::size_t k = 0; k < model.num_classes(); ++k) {
            if (k == label) continue;
            for (double beta : betas) {
                if (run(beta, k)) return out;
            }
        }
    }
    return out;
}

std::size_t worst_case_passes(const AttackConfig& config, std::size_t num_classes) {
    const std::size_t b = config.tactics.latent ? config.beta_grid.size() : 1;
    const std::size_t k = config.tactics.multi_target ? num_classes : 1;
    return config.iters * b * k;
}

}  // namespace latentlab
