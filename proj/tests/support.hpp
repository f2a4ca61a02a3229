#pragma once
// Shared helpers for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "latentlab/dataset.hpp"
#include "latentlab/nn.hpp"
#include "latentlab/rng.hpp"
#include "latentlab/tensor.hpp"

namespace latentlab::testing {

inline Tensor64 normal_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& e : v) e = scale * rng.normal();
    return Tensor64(shape, std::move(v));
}

inline Tensor uniform_image(const InputShape& in, Rng& rng) {
    std::vector<float> v(in.numel());
    for (auto& e : v) e = static_cast<float>(rng.uniform());
    return Tensor(in.batch(1), std::move(v));
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// gradient is (near) zero from turning O(h^2) truncation noise into a large
/// ratio.
inline double relative_error(double a, double b, double floor = 1e-3) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

using ScalarFn = std::function<Tensor64(const std::vector<Tensor64>&)>;

/// Largest relative error between the tape gradient and central differences
/// over every coordinate of every input.
inline double gradient_check(const ScalarFn& fn, const std::vector<Tensor64>& inputs, double h = 1e-3) {
    Tape64 tape;
    std::vector<Tensor64> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in.clone()));
    const auto grads = tape.backward(fn(leaves));
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto one = [&](const Tensor64& xk) {
            std::vector<Tensor64> args = inputs;
            args[k] = xk;
            return fn(args).item();
        };
        const Tensor64 fd = finite_diff_gradient<double>(one, inputs[k].clone(), h);
        const Tensor64 g = grads.of(leaves[k]);
        for (std::size_t i = 0; i < fd.size(); ++i) worst = std::max(worst, relative_error(g[i], fd[i]));
    }
    return worst;
}

/// Weighted sum with fixed random weights, so every output coordinate gets a
/// distinct upstream gradient.
inline Tensor64 probe(const Tensor64& out, const Tensor64& weights) { return sum(mul(out, weights)); }

/// Tiny residual model used by the attack and harness suites.
inline ModelGraph tiny_model(std::uint64_t seed, std::size_t classes = 3, InputShape in = {1, 6, 6}) {
    const std::vector<std::size_t> widths{2, 3};
    return build_resnet_small(2, widths, classes, in, seed);
}

/// Input on which `model` is correct with a strictly positive margin; scans
/// random images until one is found.
inline std::pair<Tensor, std::size_t> correctly_classified(const ModelGraph& model, Rng& rng) {
    for (;;) {
        Tensor x = uniform_image(model.input_shape(), rng);
        const Tensor z = logits(model, x);
        const std::size_t y = argmax_rows(z)[0];
        std::vector<float> row(z.data().begin(), z.data().end());
        std::sort(row.begin(), row.end());
        if (row[row.size() - 1] - row[row.size() - 2] > 1e-4f) return {x, y};
    }
}

}  // namespace latentlab::testing
