#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "latentlab/attack.hpp"
#include "latentlab/dataset.hpp"
#include "latentlab/nn.hpp"

namespace latentlab {

enum class AttackKind { Fgsm, Bim, Mim, Pgd, Lafeat };

AttackKind parse_attack_kind(const std::string& name);
std::string attack_kind_name(AttackKind kind);

struct AttackSpec {
    std::string name;
    AttackKind kind = AttackKind::Pgd;
    AttackConfig config;
};

/// Outcome of one attack on one image.
struct ImageResult {
    bool clean_correct = false;
    bool survived = false;  // clean-correct and still correct after the attack
    std::size_t predicted = 0;
    std::size_t gradient_passes = 0;
    std::size_t check_passes = 0;
    /// Iterations used before the first adversarial iterate; 0 for images
    /// the model already gets wrong.
    std::optional<std::size_t> first_success;
    Tensor adversarial;
};

/// Gradient-pass bound for one image under `spec`.
std::size_t attack_budget(const AttackSpec& spec, std::size_t num_classes);

/// Runs `spec` on every image (in parallel, results by index). Images the
/// model already misclassifies are not attacked.
std::vector<ImageResult> attack_dataset(const ModelGraph& model, const HeadSet& heads, const Dataset& data,
                                        const AttackSpec& spec, bool keep_adversarial = false);

struct ReportRow {
    std::string attack;
    AttackSpec spec;
    std::size_t survivors = 0;
    double accuracy = 0.0;  // percent
    std::optional<double> delta;  // percentage points vs the reference row
    std::size_t gradient_passes = 0;
    std::size_t check_passes = 0;
    std::size_t max_gradient_passes = 0;  // per image
    std::size_t budget = 0;               // per-image bound
};

struct RobustnessReport {
    std::size_t images = 0;
    std::size_t clean_correct = 0;
    double clean_accuracy = 0.0;  // percent
    std::size_t clean_passes = 0;
    std::vector<ReportRow> rows;
    double runtime_seconds = 0.0;
};

/// Accuracy under every attack in `attacks`; delta is measured against the
/// row named `reference` when present.
RobustnessReport run_benchmark(const ModelGraph& model, const HeadSet& heads, const Dataset& data,
                               const std::vector<AttackSpec>& attacks, const std::string& reference = "pgd");

struct CurveSet {
    std::vector<std::string> methods;
    /// survival[m][j]: percent of images not yet broken after j iterations.
    std::vector<std::vector<double>> survival;
    std::size_t max_iterations = 0;
};

CurveSet convergence_curves(const ModelGraph& model, const HeadSet& heads, const Dataset& data,
                            const std::vector<AttackSpec>& methods, std::size_t max_iterations);

struct BetaRow {
    double beta = 0.0;  // weight of the output logits
    std::size_t survivors = 0;
    double accuracy = 0.0;
};

/// Fixed-beta latent attack (no search, untargeted) for every beta.
std::vector<BetaRow> beta_sweep(const ModelGraph& model, const HeadSet& heads, const Dataset& data,
                                const std::vector<double>& betas, const AttackConfig& base);

struct LatticeRow {
    Tactics tactics;
    std::size_t survivors = 0;
    double accuracy = 0.0;
    std::size_t gradient_passes = 0;
};

struct LatticeEdge {
    unsigned from = 0;
    unsigned to = 0;
    char tactic = '?';
    double delta = 0.0;  // accuracy(to) - accuracy(from), percentage points
};

struct LatticeReport {
    std::vector<LatticeRow> rows;  // indexed by tactic mask
    std::vector<LatticeEdge> edges;
    /// Nodes where adding the latent tactic moves accuracy the most among
    /// the tactics still available, out of the nodes that lack it.
    std::size_t latent_strongest = 0;
    std::size_t latent_candidates = 0;
    bool latent_strongest_from_empty = false;
};

LatticeReport ablation_lattice(const ModelGraph& model, const HeadSet& heads, const Dataset& data,
                               const AttackConfig& base);

struct ActivationRow {
    std::size_t layer = 0;
    std::size_t rank = 0;
    std::size_t channel = 0;
    double natural = 0.0;
    double adversarial = 0.0;
};

struct ActivationDump {
    std::vector<ActivationRow> rows;
    std::vector<double> mean_abs_gap;  // per layer, over the ranked channels
    std::vector<std::string> warnings;
};

/// Per tap, channels ranked by mean activation over the natural inputs; the
/// top_k channels' means for both input sets.
ActivationDump activation_dump(const ModelGraph& model, const Tensor& natural, const Tensor& adversarial,
                               std::size_t top_k);

struct DefenseModel {
    std::string label;
    const ModelGraph* model = nullptr;
    const HeadSet* heads = nullptr;  // attacker heads
    std::size_t layer = 0;           // attacker's latent layer
};

struct GridRow {
    std::string defense;
    double clean = 0.0;
    double pgd = 0.0;
    double without_latent = 0.0;
    double with_latent = 0.0;
};

/// Defense x {clean, PGD, attack without latent features, attack with them}.
std::vector<GridRow> latent_training_grid(const std::vector<DefenseModel>& defenses, const Dataset& data,
                                          const AttackConfig& pgd_config, const AttackConfig& lafeat_config);

// ---------------------------------------------------------------------------
// Output

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::string str() const;
    void write(const std::filesystem::path& path) const;
};

std::string fixed(double value, int digits = 4);

CsvTable report_table(const RobustnessReport& report);
CsvTable curve_table(const CurveSet& curves);
CsvTable beta_table(const std::vector<BetaRow>& rows);
CsvTable lattice_table(const LatticeReport& report);
CsvTable lattice_edge_table(const LatticeReport& report);
CsvTable activation_table(const ActivationDump& dump);
CsvTable grid_table(const std::vector<GridRow>& rows);

}  // namespace latentlab
