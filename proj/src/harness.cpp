#include "latentlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "latentlab/parallel.hpp"

namespace latentlab {

AttackKind parse_attack_kind(const std::string& name) {
    if (name == "fgsm") return AttackKind::Fgsm;
    if (name == "bim") return AttackKind::Bim;
    if (name == "mim") return AttackKind::Mim;
    if (name == "pgd") return AttackKind::Pgd;
    if (name == "lafeat") return AttackKind::Lafeat;
    throw InvalidConfig("unknown attack '" + name + "' (fgsm, bim, mim, pgd, lafeat)");
}

std::string attack_kind_name(AttackKind kind) {
    switch (kind) {
        case AttackKind::Fgsm: return "fgsm";
        case AttackKind::Bim: return "bim";
        case AttackKind::Mim: return "mim";
        case AttackKind::Pgd: return "pgd";
        case AttackKind::Lafeat: return "lafeat";
    }
    return "?";
}

std::size_t attack_budget(const AttackSpec& spec, std::size_t num_classes) {
    switch (spec.kind) {
        case AttackKind::Fgsm: return 1;
        case AttackKind::Lafeat: return worst_case_passes(spec.config, num_classes);
        default: return spec.config.iters;
    }
}

namespace {

ImageResult from_trace(const AttackTrace& t, std::size_t label) {
    ImageResult r;
    r.clean_correct = true;
    r.predicted = t.predicted;
    r.survived = t.predicted == label;
    r.gradient_passes = t.gradient_passes;
    r.check_passes = t.check_passes;
    if (!r.survived) r.first_success = t.first_success.value_or(t.gradient_passes);
    r.adversarial = t.final;
    return r;
}

double percent(std::size_t part, std::size_t whole) {
    return whole == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(whole);
}

std::size_t count_survivors(const std::vector<ImageResult>& results) {
    return static_cast<std::size_t>(
        std::count_if(results.begin(), results.end(), [](const ImageResult& r) { return r.survived; }));
}

}  // namespace

std::vector<ImageResult> attack_dataset(const ModelGraph& model, const HeadSet& heads, const Dataset& data,
                                        const AttackSpec& spec, bool keep_adversarial) {
    if (data.empty()) throw EmptyDataset("attack set is empty");
    spec.config.validate();
    const auto clean = predict(model, data);
    std::vector<ImageResult> results(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        const std::size_t label = data.labels[i];
        ImageResult& r = results[i];
        if (clean[i] != label) {
            r.predicted = clean[i];
            r.first_success = 0;
            if (keep_adversarial) r.adversarial = data.image(i);
            return;
        }
        const Tensor x = data.image(i);
        switch (spec.kind) {
            case AttackKind::Fgsm: r = from_trace(fgsm(model, x, label, spec.config), label); break;
            case AttackKind::Bim: r = from_trace(bim(model, x, label, spec.config), label); break;
            case AttackKind::Mim: r = from_trace(mim(model, x, label, spec.config), label); break;
            case AttackKind::Pgd: r = from_trace(pgd(model, x, label, spec.config, i), label); break;
            case AttackKind::Lafeat: {
                const AttackOutcome o = attack_image(model, heads, x, label, spec.config, i);
                r.clean_correct = true;
                r.predicted = o.predicted;
                r.survived = !o.success;
                r.gradient_passes = o.gradient_passes;
                r.check_passes = o.check_passes;
                r.first_success = o.first_success;
                r.adversarial = o.adversarial;
                break;
            }
        }
        if (!keep_adversarial) r.adversarial = Tensor();
    });
    return results;
}

RobustnessReport run_benchmark(const ModelGraph& model, const HeadSet& heads, const Dataset& data,
                               const std::vector<AttackSpec>& attacks, const std::string& reference) {
    if (data.empty()) throw EmptyDataset("attack set is empty");
    const auto start = std::chrono::steady_clock::now();
    RobustnessReport report;
    report.images = data.size();
    const auto clean = predict(model, data);
    report.clean_passes = data.size();
    for (std::size_t i = 0; i < clean.size(); ++i) report.clean_correct += clean[i] == data.labels[i] ? 1 : 0;
    report.clean_accuracy = percent(report.clean_correct, report.images);

    for (const auto& spec : attacks) {
        const auto results = attack_dataset(model, heads, data, spec);
        report.clean_passes += data.size();  // attack_dataset re-derives the clean predictions
        ReportRow row;
        row.attack = spec.name;
        row.spec = spec;
        row.survivors = count_survivors(results);
        row.accuracy = percent(row.survivors, report.images);
        for (const auto& r : results) {
            row.gradient_passes += r.gradient_passes;
            row.check_passes += r.check_passes;
            row.max_gradient_passes = std::max(row.max_gradient_passes, r.gradient_passes);
        }
        row.budget = attack_budget(spec, model.num_classes());
        report.rows.push_back(std::move(row));
    }
    const auto ref = std::find_if(report.rows.begin(), report.rows.end(),
                                  [&](const ReportRow& r) { return r.attack == reference; });
    if (ref != report.rows.end()) {
        const double base = ref->accuracy;
        for (auto& row : report.rows) row.delta = row.accuracy - base;
    }
    report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

CurveSet convergence_curves(const ModelGraph& model, const HeadSet& heads, const Dataset& data,
                            const std::vector<AttackSpec>& methods, std::size_t max_iterations) {
    CurveSet curves;
    curves.max_iterations = max_iterations;
    for (const auto& spec : methods) {
        const auto results = attack_dataset(model, heads, data, spec);
        std::vector<std::size_t> broken_at(max_iterations + 2, 0);
        for (const auto& r : results) {
            if (r.first_success && *r.first_success <= max_iterations) ++broken_at[*r.first_success];
        }
        std::vector<double> column(max_iterations + 1);
        std::size_t broken = 0;
        for (std::size_t j = 0; j <= max_iterations; ++j) {
            broken += broken_at[j];
            column[j] = percent(data.size() - broken, data.size());
        }
        curves.methods.push_back(spec.name);
        curves.survival.push_back(std::move(column));
    }
    return curves;
}

std::vector<BetaRow> beta_sweep(const ModelGraph& model, const HeadSet& heads, const Dataset& data,
                                const std::vector<double>& betas, const AttackConfig& base) {
    std::vector<BetaRow> rows;
    for (double beta : betas) {
        AttackSpec spec{"lafeat", AttackKind::Lafeat, base};
        spec.config.beta_grid = {beta};
        spec.config.tactics.latent = true;
        spec.config.tactics.multi_target = false;
        const auto results = attack_dataset(model, heads, data, spec);
        BetaRow row;
        row.beta = beta;
        row.survivors = count_survivors(results);
        row.accuracy = percent(row.survivors, data.size());
        rows.push_back(row);
    }
    return rows;
}

LatticeReport ablation_lattice(const ModelGraph& model, const HeadSet& heads, const Dataset& data,
                               const AttackConfig& base) {
    LatticeReport report;
    for (unsigned mask = 0; mask < 16; ++mask) {
        AttackSpec spec{"lafeat", AttackKind::Lafeat, base};
        spec.config.tactics = Tactics::from_mask(mask);
        const auto results = attack_dataset(model, heads, data, spec);
        LatticeRow row;
        row.tactics = spec.config.tactics;
        row.survivors = count_survivors(results);
        row.accuracy = percent(row.survivors, data.size());
        for (const auto& r : results) row.gradient_passes += r.gradient_passes;
        report.rows.push_back(row);
    }
    static constexpr char kNames[4] = {'l', 's', 'a', 'm'};
    for (unsigned mask = 0; mask < 16; ++mask) {
        double strongest_other = -1.0;
        std::optional<double> latent_gap;
        for (unsigned bit = 0; bit < 4; ++bit) {
            if (mask & (1u << bit)) continue;
            const unsigned to = mask | (1u << bit);
            const double delta = report.rows[to].accuracy - report.rows[mask].accuracy;
            report.edges.push_back({mask, to, kNames[bit], delta});
            if (bit == 0) {
                latent_gap = std::abs(delta);
            } else {
                strongest_other = std::max(strongest_other, std::abs(delta));
            }
        }
        if (latent_gap) {
            ++report.latent_candidates;
            const bool strongest = *latent_gap >= strongest_other;
            if (strongest) ++report.latent_strongest;
            if (mask == 0) report.latent_strongest_from_empty = strongest;
        }
    }
    return report;
}

ActivationDump activation_dump(const ModelGraph& model, const Tensor& natural, const Tensor& adversarial,
                               std::size_t top_k) {
    if (natural.shape() != adversarial.shape()) {
        throw ShapeMismatch("natural " + shape_str(natural.shape()) + " vs adversarial " +
                            shape_str(adversarial.shape()));
    }
    const ForwardTaps a = forward_with_taps(model, natural);
    const ForwardTaps b = forward_with_taps(model, adversarial);
    ActivationDump dump;
    auto channel_means = [](const Tensor& tap) {
        const Tensor pooled = global_avg_pool(tap);  // [B,C]
        const std::size_t n = pooled.dim(0), c = pooled.dim(1);
        std::vector<double> m(c, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < c; ++j) m[j] += pooled.data()[r * c + j];
        }
        for (auto& v : m) v /= static_cast<double>(n);
        return m;
    };
    for (std::size_t l = 1; l <= a.taps.size(); ++l) {
        const auto nat = channel_means(a.tap(l));
        const auto adv = channel_means(b.tap(l));
        std::size_t k = top_k;
        if (k > nat.size()) {
            dump.warnings.push_back(fmt::format("layer {} has {} channels; top-k {} clamped", l, nat.size(), top_k));
            k = nat.size();
        }
        std::vector<std::size_t> order(nat.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return nat[x] > nat[y]; });
        double gap = 0.0;
        for (std::size_t r = 0; r < k; ++r) {
            const std::size_t ch = order[r];
            dump.rows.push_back({l, r + 1, ch, nat[ch], adv[ch]});
            gap += std::abs(nat[ch] - adv[ch]);
        }
        dump.mean_abs_gap.push_back(k == 0 ? 0.0 : gap / static_cast<double>(k));
    }
    return dump;
}

std::vector<GridRow> latent_training_grid(const std::vector<DefenseModel>& defenses, const Dataset& data,
                                          const AttackConfig& pgd_config, const AttackConfig& lafeat_config) {
    std::vector<GridRow> rows;
    for (const auto& d : defenses) {
        GridRow row;
        row.defense = d.label;
        row.clean = 100.0 * evaluate(*d.model, data);
        const HeadSet none;
        const HeadSet& heads = d.heads ? *d.heads : none;

        const AttackSpec pgd_spec{"pgd", AttackKind::Pgd, pgd_config};
        row.pgd = percent(count_survivors(attack_dataset(*d.model, heads, data, pgd_spec)), data.size());

        AttackSpec plain{"lafeat", AttackKind::Lafeat, lafeat_config};
        plain.config.tactics.latent = false;
        row.without_latent = percent(count_survivors(attack_dataset(*d.model, heads, data, plain)), data.size());

        AttackSpec latent{"lafeat", AttackKind::Lafeat, lafeat_config};
        latent.config.tactics.latent = true;
        latent.config.layer = d.layer;
        row.with_latent = percent(count_survivors(attack_dataset(*d.model, heads, data, latent)), data.size());
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------

std::string fixed(double value, int digits) {
    std::string s = fmt::format("{:.{}f}", value, digits);
    if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
    return s;
}

std::string CsvTable::str() const {
    std::string out;
    auto line = [&out](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out += ',';
            out += cells[i];
        }
        out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
}

void CsvTable::write(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    const std::string s = str();
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!out) throw IoError("short write to " + path.string());
}

namespace {
std::string str(std::size_t v) { return std::to_string(v); }
}  // namespace

CsvTable report_table(const RobustnessReport& report) {
    CsvTable t;
    t.header = {"attack", "method", "iterations", "beta_grid", "tactics", "eps", "images", "clean_accuracy",
                "survivors", "accuracy", "delta", "gradient_passes", "check_passes", "max_gradient_passes",
                "budget_per_image"};
    for (const auto& r : report.rows) {
        const auto& c = r.spec.config;
        const bool lafeat = r.spec.kind == AttackKind::Lafeat;
        t.rows.push_back({r.attack, attack_kind_name(r.spec.kind), str(c.iters),
                          lafeat && c.tactics.latent ? str(c.beta_grid.size()) : "1",
                          lafeat ? c.tactics.label() : "-", fixed(c.eps, 6), str(report.images),
                          fixed(report.clean_accuracy, 2), str(r.survivors), fixed(r.accuracy, 2),
                          r.delta ? fixed(*r.delta, 2) : "", str(r.gradient_passes), str(r.check_passes),
                          str(r.max_gradient_passes), str(r.budget)});
    }
    return t;
}

CsvTable curve_table(const CurveSet& curves) {
    CsvTable t;
    t.header.push_back("iteration");
    for (const auto& m : curves.methods) t.header.push_back(m);
    for (std::size_t j = 0; j <= curves.max_iterations; ++j) {
        std::vector<std::string> row{str(j)};
        for (const auto& col : curves.survival) row.push_back(fixed(col[j], 2));
        t.rows.push_back(std::move(row));
    }
    return t;
}

CsvTable beta_table(const std::vector<BetaRow>& rows) {
    CsvTable t;
    // The second column is the same setting under the opposite naming
    // convention (weight on the latent logits).
    t.header = {"beta_output_weight", "beta_latent_weight", "survivors", "accuracy"};
    for (const auto& r : rows) {
        t.rows.push_back({fixed(r.beta, 2), fixed(1.0 - r.beta, 2), str(r.survivors), fixed(r.accuracy, 2)});
    }
    return t;
}

CsvTable lattice_table(const LatticeReport& report) {
    CsvTable t;
    t.header = {"mask", "tactics", "latent", "surrogate", "schedule", "multi_target", "survivors", "accuracy",
                "gradient_passes"};
    for (const auto& r : report.rows) {
        const auto& k = r.tactics;
        t.rows.push_back({str(k.mask()), k.label(), str(k.latent), str(k.surrogate), str(k.schedule),
                          str(k.multi_target), str(r.survivors), fixed(r.accuracy, 2), str(r.gradient_passes)});
    }
    return t;
}

CsvTable lattice_edge_table(const LatticeReport& report) {
    CsvTable t;
    t.header = {"from_mask", "from", "to_mask", "to", "tactic", "delta"};
    for (const auto& e : report.edges) {
        t.rows.push_back({str(e.from), Tactics::from_mask(e.from).label(), str(e.to),
                          Tactics::from_mask(e.to).label(), std::string(1, e.tactic), fixed(e.delta, 2)});
    }
    return t;
}

CsvTable activation_table(const ActivationDump& dump) {
    CsvTable t;
    t.header = {"layer", "rank", "channel", "natural_mean", "adversarial_mean"};
    for (const auto& r : dump.rows) {
        t.rows.push_back({str(r.layer), str(r.rank), str(r.channel), fixed(r.natural, 6), fixed(r.adversarial, 6)});
    }
    return t;
}

CsvTable grid_table(const std::vector<GridRow>& rows) {
    CsvTable t;
    t.header = {"defense", "clean", "pgd", "attack_without_latent", "attack_with_latent"};
    for (const auto& r : rows) {
        t.rows.push_back({r.defense, fixed(r.clean, 2), fixed(r.pgd, 2), fixed(r.without_latent, 2),
                          fixed(r.with_latent, 2)});
    }
    return t;
}

}  // namespace latentlab
