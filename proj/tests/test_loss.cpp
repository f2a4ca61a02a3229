#include <doctest.h>

#include <cmath>

#include "latentlab/loss.hpp"
#include "support.hpp"

using namespace latentlab;
using namespace latentlab::testing;

namespace {

Tensor64 vec(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor64({n}, std::move(v));
}

/// Scalar reference: -log softmax(z)[y] summed in long double.
double scalar_sce(const std::vector<double>& z, std::size_t y) {
    long double s = 0;
    for (double v : z) s += std::exp(static_cast<long double>(v) - z[y]);
    return static_cast<double>(std::log(s));
}

double scalar_margin(const std::vector<double>& z, std::size_t y) {
    double best = -INFINITY;
    for (std::size_t j = 0; j < z.size(); ++j) {
        if (j != y) best = std::max(best, z[j]);
    }
    return z[y] - best;
}

const std::vector<std::size_t> kLabel0{0};

}  // namespace

TEST_SUITE("loss") {

TEST_CASE("sce of equal logits is ln 2") {
    CHECK(sce(vec({0, 0}), one_hot<double>(0, 2)).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("sce of a confident prediction") {
    // ln(1 + 2e^-10)
    const double expected = std::log1p(2.0 * std::exp(-10.0));
    const double got = sce(vec({10, 0, 0}), one_hot<double>(0, 3)).item();
    CHECK(got == doctest::Approx(expected).epsilon(1e-9));
    CHECK(got == doctest::Approx(9.08e-5).epsilon(1e-3));
}

TEST_CASE("sce does not overflow on large logits") {
    const float v = sce(Tensor({2}, {1000.0f, 0.0f}), one_hot<float>(0, 2)).item();
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("one-hot validation") {
    CHECK_THROWS_AS(sce(vec({0, 0}), vec({0.5, 0.5})), NotOneHot);
    CHECK_THROWS_AS(sce(vec({0, 0}), vec({1, 1})), NotOneHot);
    CHECK_THROWS_AS(sce(vec({0, 0, 0}), vec({1, 0})), NotOneHot);
    CHECK_THROWS_AS(one_hot<double>(3, 3), NotOneHot);
}

TEST_CASE("difference of logits margin") {
    CHECK(dl_margin(vec({2, 1, 0}), one_hot<double>(0, 3)).item() == 1.0);
    CHECK(dl_margin(vec({0, 0}), one_hot<double>(1, 2)).item() == 0.0);
    // The literal z_y - max((1 - y) * z) would give -1 here.
    CHECK(dl_margin(vec({-1, -3, -2}), one_hot<double>(0, 3)).item() == 1.0);
}

TEST_CASE("margin sign matches misclassification") {
    Rng rng(5);
    for (int i = 0; i < 500; ++i) {
        const std::size_t K = 2 + rng.below(5);
        std::vector<double> z(K);
        for (auto& v : z) v = std::round(rng.normal() * 2.0);  // ties are common
        const std::size_t y = rng.below(K);
        const double s = dl_margin(Tensor64({K}, z), std::span<const std::size_t>(&y, 1)).item();
        const std::size_t top = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
        const bool tie = std::count(z.begin(), z.end(), z[top]) > 1;
        CHECK((s <= 0) == (top != y || tie));
    }
}

TEST_CASE("surrogate on a two-class example") {
    CHECK(surrogate(vec({2, 1}), one_hot<double>(0, 2)).item() == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-12));
    CHECK(surrogate(vec({2, 1}), one_hot<double>(0, 2)).item() == doctest::Approx(0.313262).epsilon(1e-6));
    CHECK_THROWS_AS(surrogate(vec({1, 1}), one_hot<double>(0, 2)), DegenerateMargin);
}

TEST_CASE("surrogate is invariant to positive rescaling") {
    Rng rng(9);
    for (int i = 0; i < 200; ++i) {
        const Tensor64 z = normal_tensor({5}, rng, 3.0);
        const std::size_t y = rng.below(5);
        const std::span<const std::size_t> ys(&y, 1);
        if (std::abs(dl_margin(z, ys).item()) < 1e-3) continue;
        const double base = surrogate(z, ys).item();
        CHECK(std::abs(surrogate(scale(z, 3.0), ys).item() - base) <= 1e-6);
        const std::size_t target = (y + 1) % 5;
        const std::span<const std::size_t> ts(&target, 1);
        CHECK(std::abs(surrogate_targeted(scale(z, 5.0), ys, ts).item() - surrogate_targeted(z, ys, ts).item()) <= 1e-6);
    }
}

TEST_CASE("targeted surrogate") {
    const double v = surrogate_targeted(vec({2, 1}), one_hot<double>(0, 2), 1).item();
    CHECK(v == doctest::Approx(-std::log1p(std::exp(1.0))).epsilon(1e-12));
    CHECK(v == doctest::Approx(-1.313262).epsilon(1e-6));
    CHECK_THROWS_AS(surrogate_targeted(vec({2, 1}), one_hot<double>(0, 2), 0), TargetIsTruth);
}

TEST_CASE("surrogate gradient stays finite for huge logits") {
    Rng rng(21);
    for (int i = 0; i < 50; ++i) {
        Tape tape;
        const Tensor z = tape.leaf(normal_tensor({6}, rng, 1e4).cast<float>());
        const std::size_t y = rng.below(6);
        const std::span<const std::size_t> ys(&y, 1);
        if (std::abs(dl_margin(z.detach(), ys).item()) <= 1e-12) continue;
        for (auto mode : {MarginGradient::Through, MarginGradient::Detached}) {
            Tape t2;
            const Tensor zz = t2.leaf(z.detach().clone());
            const Tensor g = t2.backward(surrogate(zz, ys, 1.0, mode)).of(zz);
            for (float v : g.data()) CHECK(std::isfinite(v));
        }
    }
}

TEST_CASE("surrogate gradient through sigma matches finite differences") {
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        const Tensor64 z = normal_tensor({4}, rng, 2.0);
        const std::size_t y = rng.below(4);
        const std::span<const std::size_t> ys(&y, 1);
        if (std::abs(dl_margin(z, ys).item()) < 0.2) continue;
        std::vector<double> sorted(z.data().begin(), z.data().end());
        std::sort(sorted.begin(), sorted.end());
        if (sorted[3] - sorted[2] < 0.01 || sorted[2] - sorted[1] < 0.01) continue;
        CHECK(gradient_check([&](const auto& in) { return surrogate(in[0], ys); }, {z}) <= 1e-4);
    }
}

TEST_CASE("combined loss reductions and the worked example") {
    CombinedLossOptions o;
    o.beta = 0.5;
    const std::span<const std::size_t> y0(kLabel0);
    const Tensor64 zo = vec({2, 1}), zl = vec({3, 1});
    CHECK(latent_combined(zo, zl, y0, o).item() == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-12));
    // The combined logits are [1.75, 0.75]; the same loss from sce directly.
    CHECK(latent_combined(zo, zl, y0, o).item() == doctest::Approx(scalar_sce({1.75, 0.75}, 0)).epsilon(1e-12));

    o.beta = 1.0;
    CHECK(latent_combined(zo, Tensor64(), y0, o).item() == surrogate(zo, y0).item());
    o.beta = 0.0;
    CHECK(latent_combined(zo, zl, y0, o).item() == doctest::Approx(surrogate(zl, y0).item()).epsilon(1e-15));

    o.beta = 0.5;
    CHECK_THROWS_AS(latent_combined(zo, vec({1, 1}), y0, o), DegenerateMargin);
    CHECK_THROWS_AS(latent_combined(vec({1, 1}), zl, y0, o), DegenerateMargin);

    o.target = 1;
    CHECK(latent_combined(zo, zl, y0, o).item() == doctest::Approx(-scalar_sce({1.75, 0.75}, 1)).epsilon(1e-12));
}

TEST_CASE("combined loss with beta 1 agrees with surrogate on random logits") {
    Rng rng(31);
    for (int i = 0; i < 300; ++i) {
        const Tensor z = normal_tensor({7}, rng, 4.0).cast<float>();
        const std::size_t y = rng.below(7);
        const std::span<const std::size_t> ys(&y, 1);
        if (std::abs(dl_margin(z, ys).item()) < 1e-3) continue;
        CombinedLossOptions o;
        CHECK(std::abs(latent_combined(z, Tensor(), ys, o).item() - surrogate(z, ys).item()) <= 1e-7);
    }
}

TEST_CASE("raw form interpolates logits before sce") {
    CombinedLossOptions o;
    o.beta = 0.25;
    o.form = LossForm::Raw;
    o.temperature = 2.0;
    const std::span<const std::size_t> y0(kLabel0);
    const double expected = scalar_sce({(0.25 * 2 + 0.75 * 3) / 2.0, (0.25 * 1 + 0.75 * 1) / 2.0}, 0);
    CHECK(latent_combined(vec({2, 1}), vec({3, 1}), y0, o).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("margin oracle agrees on random rows") {
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        std::vector<float> z(6);
        std::vector<double> zd(6);
        for (std::size_t j = 0; j < 6; ++j) zd[j] = z[j] = static_cast<float>(rng.normal());
        const std::size_t y = rng.below(6);
        CHECK(margin_value(z, y) == doctest::Approx(scalar_margin(zd, y)).epsilon(1e-12));
    }
}

TEST_CASE("latent weights validation") {
    CHECK_THROWS_AS(LatentWeights({0.5, 0.6}), InvalidWeights);
    CHECK_THROWS_AS(LatentWeights({-0.1, 1.1}), InvalidWeights);
    CHECK_NOTHROW(LatentWeights({0.25, 0.25, 0.5}));
    const LatentWeights p = LatentWeights::pair(4, 2, 0.3);
    CHECK(p(4) == 0.3);
    CHECK(p(2) == doctest::Approx(0.7));
    CHECK(p(1) == 0.0);
}

TEST_CASE("latent weighted logits") {
    Rng rng(12);
    const ModelGraph model = tiny_model(3, 4);
    HeadSet heads = make_heads(model);
    for (auto& h : heads) {
        for (auto& v : h.weight.mutable_data()) v = static_cast<float>(rng.normal());
        for (auto& v : h.bias.mutable_data()) v = static_cast<float>(rng.normal());
    }
    const Tensor x = uniform_image(model.input_shape(), rng);
    const ForwardTaps f = forward_with_taps(model, x);
    const std::size_t N = model.depth();

    CHECK(bit_equal(latent_weighted_logits(f, heads, LatentWeights::one_hot(N, N)), f.logits));
    CHECK(bit_equal(latent_weighted_logits(f, heads, LatentWeights::one_hot(N, 1)), head_logits(heads[0], f.tap(1))));

    std::vector<double> lambda(N, 0.0);
    lambda[0] = lambda[1] = 0.5;
    const Tensor mixed = latent_weighted_logits(f, heads, LatentWeights(lambda));
    const Tensor a = head_logits(heads[0], f.tap(1)), b = head_logits(heads[1], f.tap(2));
    for (std::size_t k = 0; k < mixed.size(); ++k) {
        CHECK(mixed[k] == doctest::Approx(0.5 * a[k] + 0.5 * b[k]).epsilon(1e-6));
    }
    CHECK_THROWS_AS(latent_weighted_logits(f, HeadSet{}, LatentWeights::one_hot(N, 1)), MissingHead);
}

}  // TEST_SUITE
