// Acceptance runner: one PASS/FAIL line per criterion AC1..AC10.
//
//   acceptance [--only AC1,AC4] [--expect-fail AC3] [--cli path/to/latentlab] [--workdir dir]
//
// Exit status is 0 when the set of failing criteria equals --expect-fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "latentlab/harness.hpp"
#include "latentlab/loss.hpp"
#include "latentlab/train.hpp"
#include "support.hpp"

using namespace latentlab;
using namespace latentlab::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

double median(std::vector<double> v) {
    if (v.empty()) return NAN;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::size_t survivors(const std::vector<ImageResult>& results) {
    return static_cast<std::size_t>(
        std::count_if(results.begin(), results.end(), [](const ImageResult& r) { return r.survived; }));
}

// ---------------------------------------------------------------------------
// AC1: gradient check on fuzzed conv nets

struct FuzzConv {
    std::size_t stride = 1, padding = 0;
    bool residual = false;
};

struct FuzzNet {
    std::vector<FuzzConv> convs;
    std::vector<std::size_t> label;
    std::vector<Tensor64> params;  // x, (w, b) per conv, fc weight, fc bias

    /// Loss and the sign pattern of every ReLU input.
    double loss(const std::vector<Tensor64>& p, std::vector<bool>* signs, Tensor64* taped = nullptr) const {
        Tensor64 h = p[0];
        for (std::size_t i = 0; i < convs.size(); ++i) {
            const Tensor64 pre = conv2d(h, p[1 + 2 * i], p[2 + 2 * i], {convs[i].stride, convs[i].padding});
            if (signs) {
                for (double v : pre.data()) signs->push_back(v > 0);
            }
            Tensor64 a = relu(pre);
            if (convs[i].residual) a = add(a, h);
            h = a;
        }
        const std::size_t k = 1 + 2 * convs.size();
        const Tensor64 z = add(matmul(global_avg_pool(h), p[k]), p[k + 1]);
        const Tensor64 l = sum(softmax_cross_entropy(z, std::span<const std::size_t>(label)));
        if (taped) *taped = l;
        return l.item();
    }
};

FuzzNet fuzz_net(Rng& rng) {
    FuzzNet net;
    std::size_t c = 1 + rng.below(4), hw = 4 + rng.below(5);
    net.params.push_back(normal_tensor({1, c, hw, hw}, rng));
    const std::size_t layers = 1 + rng.below(3);
    for (std::size_t i = 0; i < layers; ++i) {
        FuzzConv conv;
        const std::size_t o = 1 + rng.below(4);
        const std::size_t kernel = rng.below(2) ? 3 : 1;
        conv.padding = kernel / 2;
        conv.stride = hw >= 4 && rng.below(3) == 0 ? 2 : 1;
        conv.residual = o == c && conv.stride == 1 && rng.below(2);
        const double scale = 1.0 / std::sqrt(static_cast<double>(c * kernel * kernel));
        net.params.push_back(normal_tensor({o, c, kernel, kernel}, rng, scale));
        net.params.push_back(normal_tensor({o}, rng, 0.1));
        net.convs.push_back(conv);
        hw = (hw + 2 * conv.padding - kernel) / conv.stride + 1;
        c = o;
    }
    const std::size_t K = 2 + rng.below(3);
    net.params.push_back(normal_tensor({c, K}, rng));
    net.params.push_back(normal_tensor({K}, rng, 0.1));
    net.label = {rng.below(K)};
    return net;
}

Outcome ac1() {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(101);
    const double h = 1e-3, tol = 1e-4;
    double worst = 0.0;
    std::size_t coords = 0, skipped = 0, failures = 0;
    for (int n = 0; n < 100; ++n) {
        const FuzzNet net = fuzz_net(rng);
        Tape64 tape;
        std::vector<Tensor64> leaves;
        for (const auto& p : net.params) leaves.push_back(tape.leaf(p.clone()));
        Tensor64 out;
        std::vector<bool> base;
        net.loss(leaves, &base, &out);
        const auto grads = tape.backward(out);
        for (std::size_t k = 0; k < net.params.size(); ++k) {
            const Tensor64 g = grads.of(leaves[k]);
            for (std::size_t i = 0; i < net.params[k].size(); ++i) {
                auto shifted = [&](double delta, std::vector<bool>* signs) {
                    std::vector<Tensor64> p = net.params;
                    p[k] = p[k].clone();
                    p[k].mutable_data()[i] += delta;
                    return net.loss(p, signs);
                };
                std::vector<bool> plus_signs, minus_signs;
                const double plus = shifted(h, &plus_signs), minus = shifted(-h, &minus_signs);
                ++coords;
                // A probe that flips a ReLU measures a different linear piece.
                if (plus_signs != base || minus_signs != base) {
                    ++skipped;
                    continue;
                }
                const double err = relative_error(g[i], (plus - minus) / (2 * h));
                worst = std::max(worst, err);
                failures += err > tol ? 1 : 0;
            }
        }
    }
    const double secs = seconds_since(start);
    return {failures == 0 && secs < 60.0,
            fmt::format("100 nets, {} coordinates ({} straddling a ReLU kink skipped), max relative error {:.2e}, "
                        "{} above 1e-4, {:.1f} s",
                        coords, skipped, worst, failures, secs)};
}

// ---------------------------------------------------------------------------
// AC2: ball and range invariant under fuzzing

void randomise_heads(HeadSet& heads, Rng& rng) {
    for (auto& h : heads) {
        for (auto& v : h.weight.mutable_data()) v = static_cast<float>(rng.normal());
        for (auto& v : h.bias.mutable_data()) v = static_cast<float>(rng.normal());
    }
}

struct Violations {
    std::size_t checked = 0, count = 0;
    double worst = 0.0;

    void check(const Tensor& x, const Tensor& v, double eps) {
        ++checked;
        bool bad = v.shape() != x.shape();
        for (std::size_t i = 0; !bad && i < v.size(); ++i) {
            const double d = std::abs(static_cast<double>(v[i]) - static_cast<double>(x[i]));
            worst = std::max(worst, d - eps);
            bad = d > eps + 1e-6 || v[i] < 0.0f || v[i] > 1.0f;
        }
        count += bad ? 1 : 0;
    }
};

Outcome ac2() {
    Rng rng(202);
    std::vector<ModelGraph> models;
    std::vector<HeadSet> heads;
    for (std::uint64_t s = 0; s < 10; ++s) {
        models.push_back(tiny_model(s, 3 + s % 3));
        heads.push_back(make_heads(models.back()));
        randomise_heads(heads.back(), rng);
    }
    Violations v;
    std::map<std::string, int> per_method;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t which = rng.below(models.size());
        const ModelGraph& m = models[which];
        const std::size_t K = m.num_classes();
        const Tensor x = uniform_image(m.input_shape(), rng);
        const std::size_t y = rng.below(K);
        AttackConfig c;
        c.eps = rng.uniform(0.0, 16.0 / 255.0);
        c.iters = 1 + rng.below(15);
        c.record_iterates = true;
        c.random_start = rng.below(2) == 1;
        c.seed = rng.bits();
        c.alpha0 = rng.uniform(0.0, 0.1);
        c.tactics = Tactics::from_mask(static_cast<unsigned>(rng.below(16)));
        c.layer = 1 + rng.below(m.depth() - 1);
        c.beta_grid = AttackConfig::middle_out_betas(1 + rng.below(3));
        c.stop_on_success = rng.below(2) == 1;
        std::vector<Tensor> outputs;
        const char* name = "";
        switch (rng.below(6)) {
            case 0: name = "fgsm"; outputs = fgsm(m, x, y, c).iterates; break;
            case 1: name = "bim"; outputs = bim(m, x, y, c).iterates; break;
            case 2: name = "mim"; outputs = mim(m, x, y, c).iterates; break;
            case 3: name = "pgd"; outputs = pgd(m, x, y, c, trial).iterates; break;
            case 4: {
                name = "lafeat";
                std::optional<std::size_t> target;
                if (rng.below(2)) target = (y + 1 + rng.below(K - 1)) % K;
                const LogitsHead* head = c.tactics.latent ? find_head(heads[which], c.layer) : nullptr;
                const AttackTrace t = lafeat_attack(m, head, x, y, c, rng.uniform(), target, trial);
                outputs = t.iterates;
                outputs.push_back(t.final);
                break;
            }
            default: {
                name = "lafeat-search";
                c.record_iterates = false;
                outputs.push_back(attack_image(m, heads[which], x, y, c, trial).adversarial);
                break;
            }
        }
        ++per_method[name];
        for (const Tensor& it : outputs) v.check(x, it, c.eps);
    }
    // Training-time inner attack.
    for (int trial = 0; trial < 20; ++trial) {
        const ModelGraph& m = models[rng.below(models.size())];
        const Tensor xb(m.input_shape().batch(4), [&] {
            std::vector<float> p(4 * m.input_shape().numel());
            for (auto& e : p) e = static_cast<float>(rng.uniform());
            return p;
        }());
        const std::vector<std::size_t> labels{0, 1, 2, 0};
        const double eps = rng.uniform(0.0, 16.0 / 255.0);
        const Tensor adv = pgd_batch(m, xb, labels, eps, 3, 2.0 / 255.0, true, rng);
        v.check(xb, adv, eps);
    }
    std::string methods;
    for (const auto& [k, n] : per_method) methods += fmt::format("{} {}, ", k, n);
    return {v.count == 0, fmt::format("1000 attacks ({}plus 20 training batches), {} iterates checked, {} violations, "
                                      "max excess over eps {:.2e}",
                                      methods, v.checked, v.count, std::max(0.0, v.worst))};
}

// ---------------------------------------------------------------------------
// AC3: surrogate scale invariance and the float32 underflow claim

/// conv 1x1 (3 -> 4 channels) then a 10-way logits layer, with the logits
/// layer scaled so the top-two gap at `x` equals `gap`.
ModelGraph gap_model(Rng& rng, const Tensor& x, double gap) {
    auto random = [&](Shape s) {
        std::vector<float> v(shape_numel(s));
        for (auto& e : v) e = static_cast<float>(rng.normal());
        return Tensor(s, std::move(v));
    };
    BlockSpec conv{BlockKind::Conv, 3, 4, 1, 1, false};
    BlockSpec out{BlockKind::Logits, 4, 10, 1, 1, false};
    ModelGraph m({3, 2, 2}, 10, {Block{conv, {random({4, 3, 1, 1}), random({4})}}, Block{out, {random({4, 10}), random({10})}}});
    std::vector<float> z(10);
    const Tensor base = logits(m, x);
    std::copy(base.data().begin(), base.data().end(), z.begin());
    std::sort(z.begin(), z.end());
    const double factor = gap / (static_cast<double>(z[9]) - z[8]);
    for (auto* t : {&m.blocks()[1].params[0], &m.blocks()[1].params[1]}) {
        Tensor p = *t;
        for (auto& e : p.mutable_data()) e = static_cast<float>(e * factor);
    }
    return m;
}

std::pair<double, double> input_gradients(const ModelGraph& m, const Tensor& x, std::size_t y) {
    const std::span<const std::size_t> ys(&y, 1);
    double raw = 0.0, sur = 0.0;
    {
        Tape tape;
        const Tensor leaf = tape.leaf(x.clone());
        const Tensor g = tape.backward(sum(softmax_cross_entropy(forward_with_taps(m, leaf).logits, ys))).of(leaf);
        for (float v : g.data()) raw = std::max(raw, static_cast<double>(std::abs(v)));
    }
    {
        Tape tape;
        const Tensor leaf = tape.leaf(x.clone());
        const Tensor g = tape.backward(surrogate(forward_with_taps(m, leaf).logits, ys, 1.0, MarginGradient::Detached)).of(leaf);
        for (float v : g.data()) sur = std::max(sur, static_cast<double>(std::abs(v)));
    }
    return {raw, sur};
}

Outcome ac3() {
    Rng rng(303);
    std::size_t draws = 0, violations = 0;
    double worst = 0.0;
    while (draws < 1000) {
        const std::size_t K = 2 + rng.below(9);
        const Tensor64 z = normal_tensor({K}, rng, std::pow(10.0, rng.uniform(-2.0, 2.0)));
        const std::size_t y = rng.below(K);
        const std::span<const std::size_t> ys(&y, 1);
        if (std::abs(dl_margin(z, ys).item()) <= 1e-3) continue;
        ++draws;
        const double base = surrogate(z, ys).item();
        for (double c : {0.1, 1.0, 10.0, 1000.0}) {
            const double d = std::abs(surrogate(scale(z, c), ys).item() - base);
            worst = std::max(worst, d);
            violations += d > 1e-6 ? 1 : 0;
        }
    }
    const bool invariance = violations == 0;

    const Tensor x = uniform_image({3, 2, 2}, rng);
    const ModelGraph m = gap_model(rng, x, 40.0);
    const Tensor z = logits(m, x);
    const std::size_t y = argmax_rows(z)[0];
    const auto [raw, sur] = input_gradients(m, x, y);
    const bool underflow = raw == 0.0 && sur > 0.0;

    // Where the raw gradient does vanish: every non-top probability must
    // round to zero in float32, i.e. exp(-gap) below the smallest denormal.
    double vanishes_at = NAN;
    for (double gap = 40.0; gap <= 200.0; gap += 1.0) {
        Rng r2(303);
        const Tensor x2 = uniform_image({3, 2, 2}, r2);
        const ModelGraph m2 = gap_model(r2, x2, gap);
        if (input_gradients(m2, x2, argmax_rows(logits(m2, x2))[0]).first == 0.0) {
            vanishes_at = gap;
            break;
        }
    }
    return {invariance && underflow,
            fmt::format("scale invariance: 1000 draws x 4 scales, max |diff| {:.2e}, {} violations; "
                        "float32 gap 40: raw SCE input-gradient max-abs {:.3e} ({}), surrogate {:.3e}; "
                        "raw gradient first exactly zero at gap {}",
                        worst, violations, raw, raw == 0.0 ? "zero" : "NOT zero", sur, vanishes_at)};
}

// ---------------------------------------------------------------------------
// AC4: reduction identities

Outcome ac4() {
    Rng rng(404);
    double fgsm_diff = 0.0;
    std::size_t bim_mismatch = 0, lafeat_mismatch = 0, compared_steps = 0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        const ModelGraph m = tiny_model(400 + s, 3 + s % 4);
        const auto [x, y] = correctly_classified(m, rng);
        AttackConfig c;
        c.eps = rng.uniform(1.0 / 255.0, 16.0 / 255.0);
        c.iters = 1;
        c.alpha0 = c.eps;
        c.record_iterates = true;
        fgsm_diff = std::max(fgsm_diff, static_cast<double>(max_abs_diff(fgsm(m, x, y, c).final, pgd(m, x, y, c).final)));

        c.iters = 10 + rng.below(30);
        c.alpha0 = 2.0 / 255.0;
        c.stop_on_success = rng.below(2) == 1;
        const AttackTrace b = bim(m, x, y, c), p = pgd(m, x, y, c);
        bim_mismatch += b.iterates.size() != p.iterates.size() ? 1 : 0;
        for (std::size_t i = 0; i < std::min(b.iterates.size(), p.iterates.size()); ++i) {
            ++compared_steps;
            bim_mismatch += bit_equal(b.iterates[i], p.iterates[i]) ? 0 : 1;
        }

        // The latent iteration always returns at the first adversarial
        // iterate, so PGD runs in its early-stopping mode here.
        c.tactics = Tactics::from_mask(0);
        c.stop_on_success = true;
        c.random_start = true;
        c.seed = rng.bits();
        const AttackTrace pr = pgd(m, x, y, c, s);
        const AttackTrace l = lafeat_attack(m, nullptr, x, y, c, 1.0, std::nullopt, s, 0);
        lafeat_mismatch += l.iterates.size() != pr.iterates.size() ? 1 : 0;
        for (std::size_t i = 0; i < std::min(l.iterates.size(), pr.iterates.size()); ++i) {
            ++compared_steps;
            lafeat_mismatch += bit_equal(l.iterates[i], pr.iterates[i]) ? 0 : 1;
        }
        lafeat_mismatch += bit_equal(l.final, pr.final) ? 0 : 1;
    }
    return {fgsm_diff <= 1e-7 && bim_mismatch == 0 && lafeat_mismatch == 0,
            fmt::format("50 models: FGSM vs PGD(I=1, alpha=eps) max diff {:.1e}; BIM vs PGD {} mismatches; "
                        "empty-tactic LAFEAT vs PGD (random start, shared seeds) {} mismatches; {} iterates compared",
                        fgsm_diff, bim_mismatch, lafeat_mismatch, compared_steps)};
}

// ---------------------------------------------------------------------------
// AC5: budgets

Outcome ac5() {
    AttackConfig mt6;
    mt6.iters = 100;
    mt6.beta_grid = AttackConfig::middle_out_betas(6);
    mt6.tactics.multi_target = true;
    AttackConfig mt10 = mt6;
    mt10.iters = 1000;
    mt10.beta_grid = AttackConfig::middle_out_betas(10);
    const std::size_t b6 = worst_case_passes(mt6, 10), b10 = worst_case_passes(mt10, 10);

    const ModelGraph m = tiny_model(505, 10);
    HeadSet heads = make_heads(m);
    Rng rng(505);
    randomise_heads(heads, rng);
    bool counts_match = true, within = true;
    std::string runs;
    for (AttackConfig c : {mt6, mt10}) {
        c.layer = 1;
        c.eps = 0.0;  // unbreakable, so every run goes the distance
        const auto [x, y] = correctly_classified(m, rng);
        const std::uint64_t before = images_forwarded();
        const AttackOutcome o = attack_image(m, heads, x, y, c);
        const std::uint64_t instrumented = images_forwarded() - before;
        const std::size_t budget = worst_case_passes(c, 10);
        counts_match = counts_match && instrumented == o.forward_passes();
        within = within && o.gradient_passes <= budget;
        runs += fmt::format("MT({},{}) unbroken: {} gradient + {} check passes, instrumented {}; ", c.iters,
                            c.beta_grid.size(), o.gradient_passes, o.check_passes, instrumented);
    }
    // Breakable images on a batch: reported totals vs the instrumented counter.
    const Dataset d = synth_dataset(SynthKind::Textures, 20, 10, m.input_shape(), 5);
    AttackConfig c = mt6;
    c.layer = 1;
    c.iters = 20;
    const std::uint64_t before = images_forwarded();
    const auto results = attack_dataset(m, heads, d, {"mt", AttackKind::Lafeat, c});
    std::uint64_t reported = d.size();  // clean predictions
    for (const auto& r : results) reported += r.gradient_passes + r.check_passes;
    const std::uint64_t instrumented = images_forwarded() - before;
    counts_match = counts_match && reported == instrumented;
    return {b6 == 6000 && b10 == 100000 && counts_match && within,
            fmt::format("worst case MT(100,6) {} and MT(1000,10) {} gradient passes per image on K=10; {}dataset run: "
                        "reported {} vs instrumented {}",
                        b6, b10, runs, reported, instrumented)};
}

// ---------------------------------------------------------------------------
// Desk-scale models shared by AC6, AC7, AC8 and AC10

const InputShape kDeskInput{3, 12, 12};
constexpr std::size_t kDeskClasses = 10;

struct DeskRun {
    ModelGraph model;
    HeadSet heads;  // attacker heads, trained on the frozen backbone
    Dataset attack_set;
    std::size_t layer = 0;
    std::uint64_t checksum_before_heads = 0, checksum_after_heads = 0;
    double clean_train = 0.0, seconds = 0.0;
};

const DeskRun& desk(std::uint64_t seed, bool latent_heads) {
    static std::map<std::pair<std::uint64_t, bool>, DeskRun> cache;
    const auto key = std::make_pair(seed, latent_heads);
    if (auto it = cache.find(key); it != cache.end()) return it->second;

    const auto start = std::chrono::steady_clock::now();
    DeskRun run;
    const Dataset train = synth_dataset(SynthKind::Textures, 10000, kDeskClasses, kDeskInput,
                                        Rng::stream(seed, "train").bits());
    run.attack_set = synth_dataset(SynthKind::Textures, 500, kDeskClasses, kDeskInput,
                                   Rng::stream(seed, "attack").bits());
    run.attack_set.split = "attack";
    const std::vector<std::size_t> widths{8, 16, 32};
    run.model = build_resnet_small(3, widths, kDeskClasses, kDeskInput, seed);

    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 64;
    tc.learning_rate = 0.05;
    tc.seed = seed;
    train_natural(run.model, train, tc);  // warm-up
    tc.epochs = 6;
    tc.decay_epochs = {4};
    tc.adversarial = AdversarialSettings{};
    tc.latent_heads_on = latent_heads;
    HeadSet defense_heads;
    train_adversarial(run.model, defense_heads, train, tc);
    run.clean_train = evaluate(run.model, train);

    TrainConfig hc;
    hc.learning_rate = 0.1;
    hc.weight_decay = 0.0;
    hc.seed = seed;
    run.checksum_before_heads = parameter_checksum(run.model);
    run.heads = train_heads(run.model, train, hc);
    run.checksum_after_heads = parameter_checksum(run.model);

    AttackConfig sc;
    run.layer = select_layer(run.model, run.heads, run.attack_set.slice(0, 200), sc).selected;
    run.seconds = seconds_since(start);
    return cache.emplace(key, std::move(run)).first->second;
}

AttackConfig pgd100() {
    AttackConfig c;
    c.iters = 100;
    c.alpha0 = 2.0 / 255.0;
    return c;
}

AttackConfig lafeat100(std::size_t layer) {
    AttackConfig c;
    c.iters = 100;
    c.beta_grid = AttackConfig::middle_out_betas(10);
    c.layer = layer;
    return c;
}

// ---------------------------------------------------------------------------
// AC6: desk-scale end to end

Outcome ac6() {
    int held = 0;
    std::string lines;
    for (std::uint64_t seed : {0, 1, 2}) {
        const DeskRun& r = desk(seed, false);
        const auto start = std::chrono::steady_clock::now();
        const auto p = attack_dataset(r.model, r.heads, r.attack_set, {"pgd", AttackKind::Pgd, pgd100()});
        const auto l = attack_dataset(r.model, r.heads, r.attack_set, {"lafeat", AttackKind::Lafeat, lafeat100(r.layer)});
        const double n = static_cast<double>(r.attack_set.size());
        const double clean = 100.0 * evaluate(r.model, r.attack_set);
        const double acc_p = 100.0 * survivors(p) / n, acc_l = 100.0 * survivors(l) / n;
        std::vector<double> first_p, first_l;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (p[i].clean_correct && !p[i].survived && !l[i].survived) {
                first_p.push_back(static_cast<double>(*p[i].first_success));
                first_l.push_back(static_cast<double>(*l[i].first_success));
            }
        }
        const double med_p = median(first_p), med_l = median(first_l);
        const bool ok = acc_l <= acc_p + 0.2 && !first_p.empty() && med_l <= med_p;
        held += ok ? 1 : 0;
        lines += fmt::format("[seed {}: train {:.1f}% ({:.0f} s), clean {:.1f}%, layer {}, PGD-100 {:.1f}%, "
                             "LAFEAT {:.1f}%, median first success {} vs {} over {} images, {:.0f} s: {}] ",
                             seed, 100 * r.clean_train, r.seconds, clean, r.layer, acc_p, acc_l, med_l, med_p,
                             first_p.size(), seconds_since(start), ok ? "holds" : "fails");
    }
    return {held >= 2, fmt::format("{}/3 seeds hold: {}", held, lines)};
}

// ---------------------------------------------------------------------------
// AC7: frozen backbone

Outcome ac7() {
    std::size_t equal = 0, total = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const ModelGraph m = tiny_model(700 + s, 3);
        const Dataset d = synth_dataset(SynthKind::Blobs, 64, 3, m.input_shape(), s);
        TrainConfig hc;
        hc.max_epochs = 5;
        const auto before = parameter_checksum(m);
        train_heads(m, d, hc);
        equal += parameter_checksum(m) == before ? 1 : 0;
        ++total;
    }
    const DeskRun& r = desk(0, false);
    equal += r.checksum_before_heads == r.checksum_after_heads ? 1 : 0;
    ++total;
    return {equal == total, fmt::format("{}/{} backbones bit-identical after train_heads (desk model checksum {:016x})",
                                        equal, total, r.checksum_after_heads)};
}

// ---------------------------------------------------------------------------
// AC8: +-LF grid

Outcome ac8() {
    const DeskRun& minus = desk(0, false);
    const DeskRun& plus = desk(0, true);
    const Dataset data = minus.attack_set.slice(0, 200);
    const std::vector<DefenseModel> defenses{{"-LF", &minus.model, &minus.heads, minus.layer},
                                             {"+LF", &plus.model, &plus.heads, plus.layer}};
    const auto grid = latent_training_grid(defenses, data, pgd100(), lafeat100(0));
    bool ok = grid.size() == 2;
    std::string cells;
    for (const auto& g : grid) {
        ok = ok && g.pgd <= g.clean && g.without_latent <= g.clean && g.with_latent <= g.clean;
        cells += fmt::format("[{}: clean {:.1f}, PGD-100 {:.1f}, -LF attack {:.1f}, +LF attack {:.1f}] ", g.defense,
                             g.clean, g.pgd, g.without_latent, g.with_latent);
    }
    const bool distinct = parameter_checksum(minus.model) != parameter_checksum(plus.model);
    bool same_arch = minus.model.blocks().size() == plus.model.blocks().size();
    for (std::size_t i = 0; same_arch && i < minus.model.blocks().size(); ++i) {
        same_arch = minus.model.blocks()[i].spec == plus.model.blocks()[i].spec;
    }
    return {ok && distinct && same_arch,
            fmt::format("2x4 grid on 200 images, every attacked accuracy <= clean: {}; {}; checksums differ: {}, "
                        "same architecture: {}",
                        ok ? "yes" : "no", cells, distinct ? "yes" : "no", same_arch ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// AC9: CLI determinism

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome ac9(const std::string& cli, const std::filesystem::path& workdir) {
    if (cli.empty()) return {false, "no --cli binary given"};
    const std::vector<std::pair<std::string, std::string>> steps{
        {"train-model", "--out train.csv --weights-out m.lft --count 300 --image-size 8 --widths 4,8,8 --epochs 2 "
                        "--warmup-epochs 3 --adv-steps 2"},
        {"train-heads", "--out heads.csv --weights m.lft --count 300 --max-epochs 5"},
        {"select-layer", "--out select.csv --weights m.lft --count 20 --iters 5"},
        {"attack", "--out attack.csv --weights m.lft --count 20 --iters 5 --beta-grid 3 --multi-target --random-start"},
        {"benchmark", "--out bench.csv --weights m.lft --count 20 --iters 5 --beta-grid 2 --random-start"},
        {"curves", "--out curves.csv --weights m.lft --count 20 --max-iters 5 --beta-grid 2"},
        {"beta-sweep", "--out beta.csv --weights m.lft --count 20 --iters 5 --betas 0,0.5,1"},
        {"ablate", "--out lattice.csv --weights m.lft --count 10 --iters 4 --beta-grid 2"},
        {"activations", "--out act.csv --weights m.lft --count 10 --iters 4 --top-k 4"},
    };
    std::vector<std::filesystem::path> dirs{workdir / "ac9_a", workdir / "ac9_b"};
    for (const auto& dir : dirs) {
        std::filesystem::remove_all(dir);
        std::filesystem::create_directories(dir);
        for (const auto& [cmd, args] : steps) {
            const std::string line = fmt::format("cd '{}' && '{}' {} --seed 7 --dataset blobs {} > {}.log 2>&1", dir.string(), cli, cmd,
                                                 args, cmd);
            if (std::system(line.c_str()) != 0) return {false, fmt::format("`{} {}` failed in {}", cmd, args, dir.string())};
        }
    }
    std::size_t compared = 0;
    std::vector<std::string> differing;
    for (const auto& entry : std::filesystem::directory_iterator(dirs[0])) {
        const auto ext = entry.path().extension();
        if (ext != ".csv" && ext != ".lft") continue;
        ++compared;
        if (read_file(entry.path()) != read_file(dirs[1] / entry.path().filename())) {
            differing.push_back(entry.path().filename().string());
        }
    }
    std::string list;
    for (const auto& d : differing) list += d + " ";
    return {compared >= 11 && differing.empty(),
            fmt::format("9 subcommands run twice with --seed 7: {} CSV/weight files compared, {} differ {}", compared,
                        differing.size(), list)};
}

// ---------------------------------------------------------------------------
// AC10: ablation lattice

Outcome ac10() {
    const DeskRun& r = desk(0, false);
    const Dataset data = r.attack_set.slice(0, 100);
    AttackConfig base = lafeat100(r.layer);
    base.beta_grid = AttackConfig::middle_out_betas(2);
    const auto start = std::chrono::steady_clock::now();
    const LatticeReport lattice = ablation_lattice(r.model, r.heads, data, base);
    AttackConfig p = base;
    p.random_start = false;
    const auto pgd_results = attack_dataset(r.model, r.heads, data, {"pgd", AttackKind::Pgd, p});
    const double pgd_acc = 100.0 * survivors(pgd_results) / static_cast<double>(data.size());
    std::set<unsigned> masks;
    for (const auto& row : lattice.rows) masks.insert(row.tactics.mask());
    const bool complete = lattice.rows.size() == 16 && masks.size() == 16;
    const bool empty_equal = lattice.rows[0].survivors == survivors(pgd_results);
    const bool edges = lattice.edges.size() == 32 && !lattice_edge_table(lattice).rows.empty();
    double largest_other = 0.0, latent_delta = 0.0;
    for (const auto& e : lattice.edges) {
        if (e.from != 0) continue;
        if (e.tactic == 'l') latent_delta = e.delta;
        else largest_other = std::max(largest_other, std::abs(e.delta));
    }
    return {complete && empty_equal && edges,
            fmt::format("16 subsets on 100 images (I=100, B=2), {:.0f} s; empty subset {:.1f}% vs PGD-100 {:.1f}%; "
                        "{} edges; latent from the empty set {:+.1f} pp vs largest other single addition {:.1f} pp{}; "
                        "latent strongest at {}/{} nodes",
                        seconds_since(start), lattice.rows[0].accuracy, pgd_acc, lattice.edges.size(), latent_delta,
                        largest_other, lattice.latent_strongest_from_empty ? "" : " (FLAGGED: latent not strongest)",
                        lattice.latent_strongest, lattice.latent_candidates)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app("latentlab acceptance criteria");
    std::vector<std::string> only, expect_fail;
    std::string cli;
    std::string workdir = (std::filesystem::temp_directory_path() / "latentlab_acceptance").string();
    app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
    app.add_option("--expect-fail", expect_fail, "Criteria known to fail")->delimiter(',');
    app.add_option("--cli", cli, "Path to the latentlab binary (AC9)");
    app.add_option("--workdir", workdir, "Scratch directory");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4}, {"AC5", ac5}, {"AC6", ac6}, {"AC7", ac7},
        {"AC8", ac8}, {"AC9", [&] { return ac9(cli, workdir); }}, {"AC10", ac10},
    };
    std::set<std::string> failed;
    for (const auto& [name, fn] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        if (!o.pass) failed.insert(name);
        fmt::print("{} {} {}\n", name, o.pass ? "PASS" : "FAIL", o.detail);
        std::fflush(stdout);
    }
    std::set<std::string> expected;
    for (const auto& e : expect_fail) {
        if (only.empty() || std::find(only.begin(), only.end(), e) != only.end()) expected.insert(e);
    }
    if (failed != expected) {
        fmt::print("failing criteria differ from the expected set\n");
        return 1;
    }
    return 0;
}
