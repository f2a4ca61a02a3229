#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "latentlab/nn.hpp"

namespace latentlab {

struct Dataset {
    Tensor images;                    // [n,C,H,W], values in [0,1]
    std::vector<std::size_t> labels;  // n entries in [0, num_classes)
    std::size_t num_classes = 0;
    std::string split = "train";

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
    InputShape input_shape() const;

    /// Image i as [1,C,H,W].
    Tensor image(std::size_t i) const;
    /// Images at `index`, stacked.
    Tensor batch(std::span<const std::size_t> index) const;
    /// Contiguous slice [begin, begin + count).
    Dataset slice(std::size_t begin, std::size_t count) const;

    /// Throws DimensionMismatch / InvalidConfig when an invariant is broken.
    void validate() const;
};

/// IDX files: big-endian magic 0x00000803 (n,H,W) or 0x00000804 (n,C,H,W)
/// for unsigned-byte images, 0x00000801 for labels. Pixels are scaled by
/// 1/255. `num_classes` 0 means one more than the largest label.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t num_classes = 0);

enum class SynthKind { Blobs, Rings, Textures };

SynthKind parse_synth_kind(const std::string& name);
std::string synth_kind_name(SynthKind kind);

/// Procedural images with class-dependent structure; labels cycle through
/// the classes in a shuffled order so every class is (near) equally common.
///   blobs:    a coloured Gaussian spot at a class-specific position
///   rings:    an annulus whose radius depends on the class
///   textures: an oriented sinusoidal grating with class-specific frequency,
///             orientation and tint, random phase and contrast, plus noise
Dataset synth_dataset(SynthKind kind, std::size_t count, std::size_t num_classes, InputShape input,
                      std::uint64_t seed);

/// argmax of the model for every image, computed in batches.
std::vector<std::size_t> predict(const ModelGraph& model, const Dataset& data);

/// Fraction of images classified correctly.
double evaluate(const ModelGraph& model, const Dataset& data);

}  // namespace latentlab
