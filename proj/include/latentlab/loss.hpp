#pragma once

#include <optional>
#include <span>
#include <vector>

#include "latentlab/nn.hpp"
#include "latentlab/tensor.hpp"

namespace latentlab {

// Logits are [B,K] (a rank-1 [K] vector is treated as one row). Ground truth
// is either a one-hot tensor of the same shape or one label index per row.
// Scalar losses are summed over rows.

/// Whether the margin sigma in z / (t * sigma) is differentiated through
/// (default) or held constant.
enum class MarginGradient { Through, Detached };

/// Label of a one-hot row vector; throws NotOneHot for anything else.
template <class T>
std::vector<std::size_t> labels_from_one_hot(const BasicTensor<T>& y);

template <class T>
BasicTensor<T> one_hot(std::size_t label, std::size_t num_classes);

template <class T>
BasicTensor<T> sce(const BasicTensor<T>& z, std::span<const std::size_t> labels);
template <class T>
BasicTensor<T> sce(const BasicTensor<T>& z, const BasicTensor<T>& y);

/// Difference of logits per row: z[y] minus the largest logit of any other
/// class. The true class is excluded from the max rather than zeroed, so the
/// result is correct when every other logit is negative.
template <class T>
BasicTensor<T> dl_margin(const BasicTensor<T>& z, std::span<const std::size_t> labels);
template <class T>
BasicTensor<T> dl_margin(const BasicTensor<T>& z, const BasicTensor<T>& y);

/// Plain-number margin of a single row.
double margin_value(std::span<const float> z, std::size_t label);

/// sce(z / (t * sigma), y). Invariant under positive rescaling of z.
template <class T>
BasicTensor<T> surrogate(const BasicTensor<T>& z, std::span<const std::size_t> labels, double t = 1.0,
                         MarginGradient mode = MarginGradient::Through);
template <class T>
BasicTensor<T> surrogate(const BasicTensor<T>& z, const BasicTensor<T>& y, double t = 1.0,
                         MarginGradient mode = MarginGradient::Through);

/// -sce(z / (t * sigma), onehot(target)); sigma is still the true-class margin.
template <class T>
BasicTensor<T> surrogate_targeted(const BasicTensor<T>& z, std::span<const std::size_t> labels,
                                  std::span<const std::size_t> targets, double t = 1.0,
                                  MarginGradient mode = MarginGradient::Through);
template <class T>
BasicTensor<T> surrogate_targeted(const BasicTensor<T>& z, const BasicTensor<T>& y, std::size_t target,
                                  double t = 1.0, MarginGradient mode = MarginGradient::Through);

/// Form of the two-source attack loss.
enum class LossForm {
    Surrogate,  // each source divided by its own margin
    Raw,        // plain interpolation of logits, then SCE
};

struct CombinedLossOptions {
    double beta = 1.0;         // weight of the output logits
    double temperature = 1.0;
    LossForm form = LossForm::Surrogate;
    MarginGradient margin = MarginGradient::Through;
    std::optional<std::size_t> target;  // targeted variant when set
};

/// z = beta * z_o / sigma_o + (1 - beta) * z_l / sigma_l, loss = sce(z / t, y)
/// (or -sce(z / t, target)). With beta == 1 the latent logits are never
/// touched and may be empty.
template <class T>
BasicTensor<T> latent_combined(const BasicTensor<T>& z_out, const BasicTensor<T>& z_latent,
                               std::span<const std::size_t> labels, const CombinedLossOptions& options);

/// lambda^(1..N), each in [0,1], summing to 1 within 1e-9.
class LatentWeights {
public:
    explicit LatentWeights(std::vector<double> weights);
    /// beta * onehot(N) + (1 - beta) * onehot(layer).
    static LatentWeights pair(std::size_t depth, std::size_t layer, double beta);
    static LatentWeights one_hot(std::size_t depth, std::size_t layer);

    std::size_t depth() const { return weights_.size(); }
    /// lambda^(l), 1-based.
    double operator()(std::size_t layer) const { return weights_.at(layer - 1); }

private:
    std::vector<double> weights_;
};

/// sum_l lambda^(l) h^(l)(z^(l)), with h^(N) the identity on the output logits.
Tensor latent_weighted_logits(const ForwardTaps& forward, const HeadSet& heads, const LatentWeights& lambda);

}  // namespace latentlab
