#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "latentlab/attack.hpp"
#include "latentlab/dataset.hpp"
#include "latentlab/nn.hpp"

namespace latentlab {

struct AdversarialSettings {
    double eps = 8.0 / 255.0;
    std::size_t steps = 7;
    double step = 2.0 / 255.0;
    bool random_start = true;
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    double learning_rate = 0.05;
    std::vector<std::size_t> decay_epochs;  // multiply the rate by decay_factor at each
    double decay_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::uint64_t seed = 0;
    std::optional<AdversarialSettings> adversarial;
    bool latent_heads_on = false;
    /// Loss weights for {output, head 1, ..., head N-1}; empty means equal.
    std::vector<double> head_loss_weights;

    // Head training ("until convergence").
    std::size_t max_epochs = 60;
    double tolerance = 1e-4;
    std::size_t patience = 3;

    void validate() const;
    double rate_at(std::size_t epoch) const;
};

struct TrainStats {
    double initial_loss = 0.0;
    std::vector<double> epoch_loss;
    std::size_t epochs_run() const { return epoch_loss.size(); }
};

/// SGD with momentum on mean SCE. Updates `model` in place.
TrainStats train_natural(ModelGraph& model, const Dataset& data, const TrainConfig& config);

/// PGD-k adversarial training: every batch is replaced by PGD examples
/// against the current weights before the update. With latent_heads_on,
/// `heads` are trained jointly and the loss mixes output and head SCE.
TrainStats train_adversarial(ModelGraph& model, HeadSet& heads, const Dataset& data, const TrainConfig& config);

struct HeadTrainResult {
    std::size_t layer = 0;
    TrainStats stats;
    double accuracy = 0.0;  // head accuracy on the training data
};

/// Fits a logits head on every intermediate tap with the backbone frozen.
/// Pooled features are computed once, so the backbone is only read.
HeadSet train_heads(const ModelGraph& model, const Dataset& data, const TrainConfig& config,
                    std::vector<HeadTrainResult>* results = nullptr);

struct LayerScore {
    std::size_t layer = 0;
    double accuracy = 0.0;
    std::optional<double> mean_first_success;
    std::size_t successes = 0;
};

struct LayerSelectionReport {
    std::vector<LayerScore> layers;
    std::size_t selected = 0;
    double clean_accuracy = 0.0;
};

/// Runs the latent attack at beta = 0.5 with each candidate layer and picks
/// the one leaving the lowest accuracy (ties go to the deeper layer).
LayerSelectionReport select_layer(const ModelGraph& model, const HeadSet& heads, const Dataset& attack_set,
                                  const AttackConfig& base);

}  // namespace latentlab
