#include "latentlab/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace latentlab {

namespace {

constexpr double kDegenerate = 1e-12;

template <class T>
BasicTensor<T> as_rows(const BasicTensor<T>& z) {
    if (z.rank() == 1) return reshape(z, Shape{1, z.dim(0)});
    if (z.rank() != 2) throw ShapeMismatch("logits must be [K] or [B,K], got " + shape_str(z.shape()));
    return z;
}

template <class T>
BasicTensor<T> margin_rows(const BasicTensor<T>& rows, std::span<const std::size_t> labels, MarginGradient mode) {
    BasicTensor<T> sigma = sub(gather_rows(rows, labels), masked_row_max(rows, labels));
    for (T s : sigma.data()) {
        if (std::abs(static_cast<double>(s)) < kDegenerate) {
            throw DegenerateMargin("logit margin is zero");
        }
    }
    return mode == MarginGradient::Detached ? sigma.detach() : sigma;
}

template <class T>
BasicTensor<T> normalised(const BasicTensor<T>& rows, std::span<const std::size_t> labels, double t,
                          MarginGradient mode) {
    BasicTensor<T> sigma = margin_rows(rows, labels, mode);
    return div_rows(rows, scale(sigma, static_cast<T>(t)));
}

}  // namespace

template <class T>
std::vector<std::size_t> labels_from_one_hot(const BasicTensor<T>& y) {
    const BasicTensor<T> rows = y.rank() == 1 ? reshape(y.detach(), Shape{1, y.dim(0)}) : y;
    if (rows.rank() != 2) throw NotOneHot("one-hot labels must be [K] or [B,K]");
    const std::size_t n = rows.dim(0), k = rows.dim(1);
    std::vector<std::size_t> labels(n);
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t ones = 0;
        for (std::size_t j = 0; j < k; ++j) {
            const T v = rows.data()[r * k + j];
            if (v == T(1)) {
                ++ones;
                labels[r] = j;
            } else if (v != T(0)) {
                throw NotOneHot("entry other than 0 or 1");
            }
        }
        if (ones != 1) throw NotOneHot("row " + std::to_string(r) + " has " + std::to_string(ones) + " ones");
    }
    return labels;
}

template <class T>
BasicTensor<T> one_hot(std::size_t label, std::size_t num_classes) {
    if (label >= num_classes) throw NotOneHot("label outside the class range");
    BasicTensor<T> y({num_classes});
    y.mutable_data()[label] = T(1);
    return y;
}

template <class T>
BasicTensor<T> sce(const BasicTensor<T>& z, std::span<const std::size_t> labels) {
    return sum(softmax_cross_entropy(as_rows(z), labels));
}

template <class T>
BasicTensor<T> sce(const BasicTensor<T>& z, const BasicTensor<T>& y) {
    if (z.shape() != y.shape()) throw NotOneHot("label shape differs from logits");
    const auto labels = labels_from_one_hot(y);
    return sce(z, std::span<const std::size_t>(labels));
}

template <class T>
BasicTensor<T> dl_margin(const BasicTensor<T>& z, std::span<const std::size_t> labels) {
    const BasicTensor<T> rows = as_rows(z);
    if (rows.dim(1) < 2) throw ShapeMismatch("margin needs at least two classes");
    return sub(gather_rows(rows, labels), masked_row_max(rows, labels));
}

template <class T>
BasicTensor<T> dl_margin(const BasicTensor<T>& z, const BasicTensor<T>& y) {
    if (z.shape() != y.shape()) throw NotOneHot("label shape differs from logits");
    const auto labels = labels_from_one_hot(y);
    return dl_margin(z, std::span<const std::size_t>(labels));
}

double margin_value(std::span<const float> z, std::size_t label) {
    if (z.size() < 2 || label >= z.size()) throw ShapeMismatch("margin needs at least two classes");
    double best = -INFINITY;
    for (std::size_t j = 0; j < z.size(); ++j) {
        if (j != label) best = std::max(best, static_cast<double>(z[j]));
    }
    return static_cast<double>(z[label]) - best;
}

template <class T>
BasicTensor<T> surrogate(const BasicTensor<T>& z, std::span<const std::size_t> labels, double t,
                         MarginGradient mode) {
    const BasicTensor<T> rows = as_rows(z);
    return sce(normalised(rows, labels, t, mode), labels);
}

template <class T>
BasicTensor<T> surrogate(const BasicTensor<T>& z, const BasicTensor<T>& y, double t, MarginGradient mode) {
    if (z.shape() != y.shape()) throw NotOneHot("label shape differs from logits");
    const auto labels = labels_from_one_hot(y);
    return surrogate(z, std::span<const std::size_t>(labels), t, mode);
}

template <class T>
BasicTensor<T> surrogate_targeted(const BasicTensor<T>& z, std::span<const std::size_t> labels,
                                  std::span<const std::size_t> targets, double t, MarginGradient mode) {
    if (targets.size() != labels.size()) throw ShapeMismatch("one target per row required");
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (targets[r] == labels[r]) throw TargetIsTruth("target class equals the true class");
    }
    const BasicTensor<T> rows = as_rows(z);
    return scale(sce(normalised(rows, labels, t, mode), targets), T(-1));
}

template <class T>
BasicTensor<T> surrogate_targeted(const BasicTensor<T>& z, const BasicTensor<T>& y, std::size_t target,
                                  double t, MarginGradient mode) {
    if (z.shape() != y.shape()) throw NotOneHot("label shape differs from logits");
    const auto labels = labels_from_one_hot(y);
    const std::vector<std::size_t> targets(labels.size(), target);
    return surrogate_targeted(z, std::span<const std::size_t>(labels), std::span<const std::size_t>(targets), t,
                              mode);
}

template <class T>
BasicTensor<T> latent_combined(const BasicTensor<T>& z_out, const BasicTensor<T>& z_latent,
                               std::span<const std::size_t> labels, const CombinedLossOptions& o) {
    if (o.beta < 0.0 || o.beta > 1.0) throw InvalidConfig("beta must lie in [0,1]");
    const BasicTensor<T> out_rows = as_rows(z_out);
    const bool surrogate_form = o.form == LossForm::Surrogate;

    BasicTensor<T> z = surrogate_form ? normalised(out_rows, labels, 1.0, o.margin) : out_rows;
    if (o.beta < 1.0) {
        const BasicTensor<T> lat_rows = as_rows(z_latent);
        if (lat_rows.shape() != out_rows.shape()) {
            throw ShapeMismatch("latent logits " + shape_str(lat_rows.shape()) + " vs output " +
                                shape_str(out_rows.shape()));
        }
        BasicTensor<T> zl = surrogate_form ? normalised(lat_rows, labels, 1.0, o.margin) : lat_rows;
        z = add(scale(z, static_cast<T>(o.beta)), scale(zl, static_cast<T>(1.0 - o.beta)));
    }
    if (o.temperature != 1.0) z = scale(z, static_cast<T>(1.0 / o.temperature));

    if (!o.target) return sce(z, labels);
    std::vector<std::size_t> targets(labels.size(), *o.target);
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (targets[r] == labels[r]) throw TargetIsTruth("target class equals the true class");
    }
    return scale(sce(z, std::span<const std::size_t>(targets)), T(-1));
}

// ---------------------------------------------------------------------------

LatentWeights::LatentWeights(std::vector<double> weights) : weights_(std::move(weights)) {
    if (weights_.empty()) throw InvalidWeights("no layer weights");
    for (double w : weights_) {
        if (!(w >= 0.0 && w <= 1.0)) throw InvalidWeights("layer weight outside [0,1]");
    }
    const double total = std::accumulate(weights_.begin(), weights_.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-9) throw InvalidWeights("layer weights must sum to 1");
}

LatentWeights LatentWeights::pair(std::size_t depth, std::size_t layer, double beta) {
    if (layer == 0 || layer > depth) throw InvalidWeights("layer outside [1, N]");
    std::vector<double> w(depth, 0.0);
    w[depth - 1] += beta;
    w[layer - 1] += 1.0 - beta;
    return LatentWeights(std::move(w));
}

LatentWeights LatentWeights::one_hot(std::size_t depth, std::size_t layer) {
    return pair(depth, layer, 0.0);
}

Tensor latent_weighted_logits(const ForwardTaps& forward, const HeadSet& heads, const LatentWeights& lambda) {
    const std::size_t depth = forward.taps.size() + 1;
    if (lambda.depth() != depth) {
        throw InvalidWeights(std::to_string(lambda.depth()) + " weights for " + std::to_string(depth) + " layers");
    }
    std::optional<Tensor> acc;
    for (std::size_t l = 1; l <= depth; ++l) {
        const double w = lambda(l);
        if (w == 0.0) continue;
        Tensor h;
        if (l == depth) {
            h = forward.logits;
        } else {
            const LogitsHead* head = find_head(heads, l);
            if (!head) throw MissingHead("no logits head for layer " + std::to_string(l));
            h = head_logits(*head, forward.tap(l));
        }
        Tensor term = w == 1.0 ? h : scale(h, static_cast<float>(w));
        acc = acc ? add(*acc, term) : term;
    }
    return *acc;
}

#define LATENTLAB_INSTANTIATE(T)                                                                      \
    template std::vector<std::size_t> labels_from_one_hot(const BasicTensor<T>&);                     \
    template BasicTensor<T> one_hot<T>(std::size_t, std::size_t);                                     \
    template BasicTensor<T> sce(const BasicTensor<T>&, std::span<const std::size_t>);                 \
    template BasicTensor<T> sce(const BasicTensor<T>&, const BasicTensor<T>&);                        \
    template BasicTensor<T> dl_margin(const BasicTensor<T>&, std::span<const std::size_t>);           \
    template BasicTensor<T> dl_margin(const BasicTensor<T>&, const BasicTensor<T>&);                  \
    template BasicTensor<T> surrogate(const BasicTensor<T>&, std::span<const std::size_t>, double,    \
                                      MarginGradient);                                                \
    template BasicTensor<T> surrogate(const BasicTensor<T>&, const BasicTensor<T>&, double,           \
                                      MarginGradient);                                                \
    template BasicTensor<T> surrogate_targeted(const BasicTensor<T>&, std::span<const std::size_t>,   \
                                               std::span<const std::size_t>, double, MarginGradient); \
    template BasicTensor<T> surrogate_targeted(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                               std::size_t, double, MarginGradient);                  \
    template BasicTensor<T> latent_combined(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                            std::span<const std::size_t>, const CombinedLossOptions&);

LATENTLAB_INSTANTIATE(float)
LATENTLAB_INSTANTIATE(double)

#undef LATENTLAB_INSTANTIATE

}  // namespace latentlab
