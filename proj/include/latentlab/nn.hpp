#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "latentlab/tensor.hpp"

namespace latentlab {

struct InputShape {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t numel() const { return channels * height * width; }
    /// Shape of a batch of `batch` images.
    Shape batch(std::size_t batch = 1) const { return {batch, channels, height, width}; }
    bool operator==(const InputShape&) const = default;
};

enum class BlockKind : std::uint8_t {
    Residual = 1,  // conv3x3(stride) -> relu -> conv3x3 -> + shortcut -> relu
    Conv = 2,      // convKxK(stride, same padding) -> relu
    Logits = 3,    // global average pool -> fully connected
};

/// Architecture record of one layer f^(l). For Logits, out_channels is K.
struct BlockSpec {
    BlockKind kind = BlockKind::Conv;
    std::uint32_t in_channels = 0;
    std::uint32_t out_channels = 0;
    std::uint32_t kernel = 3;
    std::uint32_t stride = 1;
    bool affine = false;  // frozen batch-norm (per-channel scale/shift) after each conv

    bool has_projection() const {
        return kind == BlockKind::Residual && (in_channels != out_channels || stride != 1);
    }
    bool operator==(const BlockSpec&) const = default;
};

/// Parameter shapes of a block, in storage order:
///   Conv:     weight, bias, [scale, shift]
///   Residual: w1, b1, [scale1, shift1], w2, b2, [scale2, shift2], [projection]
///   Logits:   weight [C,K], bias [K]
std::vector<Shape> block_parameter_shapes(const BlockSpec& spec);

struct Block {
    BlockSpec spec;
    std::vector<Tensor> params;
};

/// f = f^(N) o ... o f^(1); the last layer is always the logits layer.
class ModelGraph {
public:
    ModelGraph() = default;
    ModelGraph(InputShape input, std::size_t num_classes, std::vector<Block> blocks);

    const InputShape& input_shape() const noexcept { return input_; }
    std::size_t num_classes() const noexcept { return num_classes_; }
    /// N, the number of layers including the logits layer.
    std::size_t depth() const noexcept { return blocks_.size(); }
    const std::vector<Block>& blocks() const noexcept { return blocks_; }

    /// Every parameter, flattened in block order. Tensors share storage with
    /// the model, so writes through mutable_data() update it in place.
    std::vector<Tensor> parameters() const;
    std::size_t parameter_count() const;

    /// Shape [C,H,W] of z^(l) for a single image, l in [1, N].
    InputShape layer_output_shape(std::size_t layer) const;

    /// Deep copy (parameters get their own storage).
    ModelGraph clone() const;

private:
    InputShape input_;
    std::size_t num_classes_ = 0;
    std::vector<Block> blocks_;
};

struct ForwardTaps {
    Tensor logits;              // [B,K]
    std::vector<Tensor> taps;   // z^(1) .. z^(N-1)

    /// z^(l), 1-based as in f^(l).
    const Tensor& tap(std::size_t layer) const;
};

/// Runs the model and exposes every intermediate activation. When `params`
/// is non-empty it replaces the model's own parameters (same order as
/// ModelGraph::parameters()); training passes taped leaves this way.
ForwardTaps forward_with_taps(const ModelGraph& model, const Tensor& x,
                              std::span<const Tensor> params = {});

/// f^(l) applied to `z`, 1-based.
Tensor apply_block(const ModelGraph& model, std::size_t layer, const Tensor& z,
                   std::span<const Tensor> params = {});

Tensor logits(const ModelGraph& model, const Tensor& x);

/// Process-wide count of images pushed through forward_with_taps. Attack
/// budget tests compare reported pass counts against deltas of this.
std::uint64_t images_forwarded();

/// argmax per row of [B,K] logits, ties resolved to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

/// h^(l)(z) = global_avg_pool(z) . weight + bias.
struct LogitsHead {
    std::size_t layer = 0;
    Tensor weight;  // [C^(l), K]
    Tensor bias;    // [K]
};

using HeadSet = std::vector<LogitsHead>;

Tensor head_logits(const LogitsHead& head, const Tensor& tap);
/// Variant taking substitute (possibly taped) weight and bias.
Tensor head_logits(const Tensor& weight, const Tensor& bias, const Tensor& tap);

/// Zero-initialised heads for every intermediate layer 1..N-1.
HeadSet make_heads(const ModelGraph& model);
const LogitsHead* find_head(const HeadSet& heads, std::size_t layer);

/// 64-bit FNV-1a over the little-endian bytes of every backbone parameter.
std::uint64_t parameter_checksum(const ModelGraph& model);
std::uint64_t head_checksum(const HeadSet& heads);

/// Residual network with `blocks` residual blocks of the given widths (the
/// first at stride 1, the rest at stride 2) followed by a logits layer.
///
/// Initialisation is fan-in-scaled uniform: conv kernels draw from
/// U(-sqrt(6/fan_in), sqrt(6/fan_in)), the logits layer from
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases start at zero and frozen
/// affine layers (if any) at identity.
ModelGraph build_resnet_small(std::size_t blocks, std::span<const std::size_t> widths,
                              std::size_t num_classes, InputShape input, std::uint64_t seed,
                              bool affine = false);

// ---------------------------------------------------------------------------
// Weight files

inline constexpr std::uint32_t kWeightFileVersion = 1;

struct ModelBundle {
    ModelGraph model;
    HeadSet heads;
};

/// Writes the "LFT1" binary format: header, architecture descriptor,
/// little-endian float32 parameters, heads keyed by layer, trailing FNV-1a
/// checksum of every preceding byte.
void save_weights(const std::filesystem::path& path, const ModelGraph& model, const HeadSet& heads = {});
ModelBundle load_weights(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_weights(const ModelGraph& model, const HeadSet& heads);
ModelBundle decode_weights(std::span<const std::uint8_t> bytes);

}  // namespace latentlab
