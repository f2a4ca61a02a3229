#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "latentlab/loss.hpp"
#include "latentlab/nn.hpp"
#include "latentlab/rng.hpp"

namespace latentlab {

// Images are single-image tensors [1,C,H,W] with values in [0,1].

/// The four attack tactics. `schedule` covers the step-size schedule together
/// with the momentum update: off means constant alpha0 and nu = 1, which is
/// what turns the iteration back into plain PGD.
struct Tactics {
    bool latent = true;
    bool surrogate = true;
    bool schedule = true;
    bool multi_target = false;

    /// Bit 0 latent, 1 surrogate, 2 schedule, 3 multi_target.
    unsigned mask() const;
    static Tactics from_mask(unsigned mask);
    /// Short label such as "ls" or "-" for the empty set.
    std::string label() const;
};

struct AttackConfig {
    double eps = 8.0 / 255.0;
    std::size_t iters = 100;
    double nu = 0.75;
    double temperature = 1.0;
    std::vector<double> beta_grid = middle_out_betas(10);
    std::size_t layer = 0;  // latent layer l; 0 means "not chosen"
    Tactics tactics;
    bool random_start = false;
    std::uint64_t seed = 0;
    double alpha0 = 2.0 / 255.0;
    double mim_decay = 1.0;
    // Through makes z / sigma keep a unit top-two gap whatever z is, so the
    // gradient cannot see the margin shrink (for K = 2 the loss is constant).
    MarginGradient margin = MarginGradient::Detached;
    bool literal_mu0 = false;      // mu_0 = 0 instead of x_0
    bool stop_on_success = true;
    bool record_iterates = false;

    /// Throws InvalidConfig when an invariant is violated.
    void validate() const;

    /// 0.5, 0.4, 0.6, 0.3, 0.7, 0.2, 0.8, 0.1, 0.9, 0.0 truncated to `count`.
    static std::vector<double> middle_out_betas(std::size_t count);
};

struct AttackTrace {
    std::vector<double> margins;  // sigma_o at every evaluated iterate
    std::vector<double> losses;
    std::vector<double> betas;    // beta_i actually used
    std::optional<std::size_t> first_success;  // iterate index within this run
    std::size_t gradient_passes = 0;  // forward+backward passes inside the loop
    std::size_t check_passes = 0;     // forward-only passes judging the final iterate
    Tensor final;
    std::size_t predicted = 0;        // argmax of the original model at `final`
    std::vector<Tensor> iterates;     // every x_i when record_iterates is set

    std::size_t forward_passes() const { return gradient_passes + check_passes; }
};

/// Elementwise clamp of v to [max(0, x - eps), min(1, x + eps)].
Tensor project(const Tensor& x, const Tensor& v, double eps);

/// project(x, x + u), u iid uniform on [-eps, eps].
Tensor random_start(const Tensor& x, double eps, Rng& rng);

/// Stream used for the random start of run `run` on image `image`.
Rng start_stream(std::uint64_t seed, std::uint64_t image, std::uint64_t run);

/// 2 eps (1 - i / I) with the schedule, alpha0 without.
double step_size(std::size_t i, std::size_t iters, double eps, bool schedule_on, double alpha0);

/// PGD on raw SCE with constant step config.alpha0.
AttackTrace pgd(const ModelGraph& model, const Tensor& x, std::size_t label, const AttackConfig& config,
                std::uint64_t image_index = 0);

/// Single step of size eps along the gradient sign.
AttackTrace fgsm(const ModelGraph& model, const Tensor& x, std::size_t label, const AttackConfig& config);

/// PGD without random start.
AttackTrace bim(const ModelGraph& model, const Tensor& x, std::size_t label, const AttackConfig& config);

/// BIM whose direction is the sign of g_{i+1} = m g_i + grad / ||grad||_1.
AttackTrace mim(const ModelGraph& model, const Tensor& x, std::size_t label, const AttackConfig& config);

/// Batched PGD used inside adversarial training: fixed step count, no early
/// stop, random start from `rng`, raw SCE on the output logits.
Tensor pgd_batch(const ModelGraph& model, const Tensor& x, std::span<const std::size_t> labels, double eps,
                 std::size_t steps, double alpha, bool random_init, Rng& rng);

struct LafeatState {
    Tensor x_hat;   // x_i
    Tensor x_prev;  // x_{i-1}
    Tensor mu;      // mu_i
    std::size_t iteration = 0;
};

struct LafeatStepResult {
    double margin_out = 0.0;  // sigma_o at x_i
    double margin_latent = 0.0;
    double beta = 1.0;        // beta_i
    double loss = 0.0;
    std::size_t predicted = 0;  // argmax at x_i
    bool stopped = false;     // sigma_o <= 0: state left untouched
};

/// One iteration of the latent-feature attack. `head` may be null when the
/// latent tactic is off.
LafeatStepResult lafeat_step(LafeatState& state, const ModelGraph& model, const LogitsHead* head,
                             const Tensor& x, std::size_t label, const AttackConfig& config, double beta,
                             std::optional<std::size_t> target = std::nullopt);

/// Full iteration for a fixed beta (and optional target class).
AttackTrace lafeat_attack(const ModelGraph& model, const LogitsHead* head, const Tensor& x, std::size_t label,
                          const AttackConfig& config, double beta,
                          std::optional<std::size_t> target = std::nullopt, std::uint64_t image_index = 0,
                          std::uint64_t run = 0);

struct AttackOutcome {
    bool success = false;
    Tensor adversarial;  // best iterate (the successful one, else the last run's)
    std::size_t predicted = 0;
    std::size_t gradient_passes = 0;
    std::size_t check_passes = 0;
    std::size_t runs = 0;
    /// Gradient iterations spent before the successful iterate, summed over
    /// runs; 0 for inputs misclassified from the start.
    std::optional<std::size_t> first_success;
    std::optional<double> beta;
    std::optional<std::size_t> target;

    std::size_t forward_passes() const { return gradient_passes + check_passes; }
};

/// beta search (middle-out) then, if enabled and still unbroken, every target
/// class with every beta. Success is always argmax of the original model.
AttackOutcome attack_image(const ModelGraph& model, const HeadSet& heads, const Tensor& x, std::size_t label,
                           const AttackConfig& config, std::uint64_t image_index = 0);

/// Upper bound I * B * K on gradient passes for a config.
std::size_t worst_case_passes(const AttackConfig& config, std::size_t num_classes);

}  // namespace latentlab
