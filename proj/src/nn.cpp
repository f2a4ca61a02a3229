#include "latentlab/nn.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>

#include "latentlab/rng.hpp"

namespace latentlab {

namespace {

InputShape block_output(const BlockSpec& spec, const InputShape& in) {
    if (spec.kind == BlockKind::Logits) return {spec.out_channels, 1, 1};
    const std::size_t pad = spec.kind == BlockKind::Residual ? 1 : spec.kernel / 2;
    const std::size_t k = spec.kind == BlockKind::Residual ? 3 : spec.kernel;
    if (in.height + 2 * pad < k || in.width + 2 * pad < k) {
        throw InvalidArchitecture("layer input too small for its kernel");
    }
    return {spec.out_channels, (in.height + 2 * pad - k) / spec.stride + 1,
            (in.width + 2 * pad - k) / spec.stride + 1};
}

Tensor maybe_affine(const Tensor& h, bool affine, std::span<const Tensor> p, std::size_t& i) {
    if (!affine) return h;
    Tensor out = affine_channel(h, p[i], p[i + 1]);
    i += 2;
    return out;
}

Tensor run_block(const BlockSpec& spec, const Tensor& x, std::span<const Tensor> p) {
    static const Tensor kNoBias;
    std::size_t i = 0;
    switch (spec.kind) {
        case BlockKind::Conv: {
            Tensor h = conv2d(x, p[0], p[1], {spec.stride, spec.kernel / 2});
            i = 2;
            return relu(maybe_affine(h, spec.affine, p, i));
        }
        case BlockKind::Residual: {
            Tensor h = conv2d(x, p[0], p[1], {spec.stride, 1});
            i = 2;
            h = relu(maybe_affine(h, spec.affine, p, i));
            h = conv2d(h, p[i], p[i + 1], {1, 1});
            i += 2;
            h = maybe_affine(h, spec.affine, p, i);
            const Tensor shortcut =
                spec.has_projection() ? conv2d(x, p[i], kNoBias, {spec.stride, 0}) : x;
            return relu(add(h, shortcut));
        }
        case BlockKind::Logits:
            return head_logits(p[0], p[1], x);
    }
    throw InvalidArchitecture("unknown block kind");
}

std::span<const Tensor> block_params(const ModelGraph& model, std::size_t index,
                                     std::span<const Tensor> override_params) {
    const auto& block = model.blocks()[index];
    if (override_params.empty()) return block.params;
    std::size_t offset = 0;
    for (std::size_t b = 0; b < index; ++b) offset += model.blocks()[b].params.size();
    return override_params.subspan(offset, block.params.size());
}

void check_input(const ModelGraph& model, const Tensor& x) {
    const auto& in = model.input_shape();
    if (x.rank() != 4 || x.dim(1) != in.channels || x.dim(2) != in.height || x.dim(3) != in.width) {
        throw ShapeMismatch("model expects [B," + std::to_string(in.channels) + "," +
                            std::to_string(in.height) + "," + std::to_string(in.width) + "], got " +
                            shape_str(x.shape()));
    }
}

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
}

void fnv_tensor(std::uint64_t& h, const Tensor& t) {
    static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
    fnv_bytes(h, t.data().data(), t.size() * sizeof(float));
}

}  // namespace

std::vector<Shape> block_parameter_shapes(const BlockSpec& spec) {
    const std::size_t in = spec.in_channels, out = spec.out_channels;
    std::vector<Shape> shapes;
    switch (spec.kind) {
        case BlockKind::Conv:
            shapes = {{out, in, spec.kernel, spec.kernel}, {out}};
            if (spec.affine) shapes.insert(shapes.end(), {{out}, {out}});
            break;
        case BlockKind::Residual:
            shapes = {{out, in, 3, 3}, {out}};
            if (spec.affine) shapes.insert(shapes.end(), {{out}, {out}});
            shapes.insert(shapes.end(), {{out, out, 3, 3}, {out}});
            if (spec.affine) shapes.insert(shapes.end(), {{out}, {out}});
            if (spec.has_projection()) shapes.push_back({out, in, 1, 1});
            break;
        case BlockKind::Logits:
            shapes = {{in, out}, {out}};
            break;
    }
    return shapes;
}

// ---------------------------------------------------------------------------
// ModelGraph

ModelGraph::ModelGraph(InputShape input, std::size_t num_classes, std::vector<Block> blocks)
    : input_(input), num_classes_(num_classes), blocks_(std::move(blocks)) {
    if (input_.numel() == 0) throw InvalidArchitecture("empty input shape");
    if (num_classes_ < 2) throw InvalidArchitecture("need at least two classes");
    if (blocks_.empty() || blocks_.back().spec.kind != BlockKind::Logits) {
        throw InvalidArchitecture("the last layer must be the logits layer");
    }
    if (blocks_.back().spec.out_channels != num_classes_) {
        throw InvalidArchitecture("logits layer width differs from the class count");
    }
    InputShape shape = input_;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const auto& spec = blocks_[b].spec;
        if (spec.kind == BlockKind::Logits && b + 1 != blocks_.size()) {
            throw InvalidArchitecture("logits layer must come last");
        }
        if (spec.in_channels != shape.channels || spec.out_channels == 0) {
            throw InvalidArchitecture("layer " + std::to_string(b + 1) + " expects " +
                                      std::to_string(spec.in_channels) + " channels, receives " +
                                      std::to_string(shape.channels));
        }
        if (spec.stride != 1 && spec.stride != 2) throw InvalidArchitecture("stride must be 1 or 2");
        if (spec.kind == BlockKind::Conv && (spec.kernel == 0 || spec.kernel % 2 == 0)) {
            throw InvalidArchitecture("conv kernel must be odd");
        }
        const auto shapes = block_parameter_shapes(spec);
        if (shapes.size() != blocks_[b].params.size()) {
            throw InvalidArchitecture("layer " + std::to_string(b + 1) + " has the wrong parameter count");
        }
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            if (blocks_[b].params[i].shape() != shapes[i]) {
                throw InvalidArchitecture("layer " + std::to_string(b + 1) + " parameter " +
                                          std::to_string(i) + " has shape " +
                                          shape_str(blocks_[b].params[i].shape()) + ", expected " +
                                          shape_str(shapes[i]));
            }
        }
        shape = block_output(spec, shape);
        if (shape.height == 0 || shape.width == 0) throw InvalidArchitecture("spatial extent collapsed");
    }
}

std::vector<Tensor> ModelGraph::parameters() const {
    std::vector<Tensor> out;
    for (const auto& b : blocks_) out.insert(out.end(), b.params.begin(), b.params.end());
    return out;
}

std::size_t ModelGraph::parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) {
        for (const auto& p : b.params) n += p.size();
    }
    return n;
}

InputShape ModelGraph::layer_output_shape(std::size_t layer) const {
    if (layer == 0 || layer > blocks_.size()) {
        throw ShapeMismatch("layer " + std::to_string(layer) + " outside [1, " +
                            std::to_string(blocks_.size()) + "]");
    }
    InputShape shape = input_;
    for (std::size_t b = 0; b < layer; ++b) shape = block_output(blocks_[b].spec, shape);
    return shape;
}

ModelGraph ModelGraph::clone() const {
    std::vector<Block> blocks;
    for (const auto& b : blocks_) {
        Block copy{b.spec, {}};
        for (const auto& p : b.params) copy.params.push_back(p.clone());
        blocks.push_back(std::move(copy));
    }
    return ModelGraph(input_, num_classes_, std::move(blocks));
}

// ---------------------------------------------------------------------------
// Forward

const Tensor& ForwardTaps::tap(std::size_t layer) const {
    if (layer == 0 || layer > taps.size()) {
        throw ShapeMismatch("no tap for layer " + std::to_string(layer));
    }
    return taps[layer - 1];
}

namespace {
std::atomic<std::uint64_t> g_images_forwarded{0};
}  // namespace

std::uint64_t images_forwarded() { return g_images_forwarded.load(std::memory_order_relaxed); }

ForwardTaps forward_with_taps(const ModelGraph& model, const Tensor& x, std::span<const Tensor> params) {
    check_input(model, x);
    g_images_forwarded.fetch_add(x.dim(0), std::memory_order_relaxed);
    ForwardTaps out;
    out.taps.reserve(model.depth() - 1);
    Tensor z = x;
    for (std::size_t b = 0; b < model.depth(); ++b) {
        z = run_block(model.blocks()[b].spec, z, block_params(model, b, params));
        if (b + 1 < model.depth()) out.taps.push_back(z);
    }
    out.logits = z;
    return out;
}

Tensor apply_block(const ModelGraph& model, std::size_t layer, const Tensor& z,
                   std::span<const Tensor> params) {
    if (layer == 0 || layer > model.depth()) {
        throw ShapeMismatch("layer " + std::to_string(layer) + " does not exist");
    }
    return run_block(model.blocks()[layer - 1].spec, z, block_params(model, layer - 1, params));
}

Tensor logits(const ModelGraph& model, const Tensor& x) {
    return forward_with_taps(model, x).logits;
}

std::vector<std::size_t> argmax_rows(const Tensor& z) {
    if (z.rank() != 2) throw ShapeMismatch("argmax_rows expects [B,K]");
    const std::size_t rows = z.dim(0), k = z.dim(1);
    std::vector<std::size_t> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* row = z.data().data() + r * k;
        out[r] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Heads

Tensor head_logits(const Tensor& weight, const Tensor& bias, const Tensor& tap) {
    if (tap.rank() != 4) throw ShapeMismatch("head expects a [B,C,H,W] tap, got " + shape_str(tap.shape()));
    if (weight.rank() != 2 || weight.dim(0) != tap.dim(1)) {
        throw ShapeMismatch("head weight " + shape_str(weight.shape()) + " does not match tap " +
                            shape_str(tap.shape()));
    }
    return add(matmul(global_avg_pool(tap), weight), bias);
}

Tensor head_logits(const LogitsHead& head, const Tensor& tap) {
    return head_logits(head.weight, head.bias, tap);
}

HeadSet make_heads(const ModelGraph& model) {
    HeadSet heads;
    for (std::size_t l = 1; l < model.depth(); ++l) {
        const std::size_t c = model.layer_output_shape(l).channels;
        heads.push_back({l, Tensor({c, model.num_classes()}), Tensor({model.num_classes()})});
    }
    return heads;
}

const LogitsHead* find_head(const HeadSet& heads, std::size_t layer) {
    for (const auto& h : heads) {
        if (h.layer == layer) return &h;
    }
    return nullptr;
}

std::uint64_t parameter_checksum(const ModelGraph& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& b : model.blocks()) {
        for (const auto& p : b.params) fnv_tensor(h, p);
    }
    return h;
}

std::uint64_t head_checksum(const HeadSet& heads) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& head : heads) {
        const auto layer = static_cast<std::uint32_t>(head.layer);
        fnv_bytes(h, &layer, sizeof layer);
        fnv_tensor(h, head.weight);
        fnv_tensor(h, head.bias);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Construction

ModelGraph build_resnet_small(std::size_t blocks, std::span<const std::size_t> widths,
                              std::size_t num_classes, InputShape input, std::uint64_t seed, bool affine) {
    if (blocks < 2) throw InvalidArchitecture("need at least two residual blocks");
    if (widths.size() != blocks) {
        throw InvalidArchitecture(std::to_string(blocks) + " blocks but " + std::to_string(widths.size()) +
                                  " widths");
    }
    if (std::any_of(widths.begin(), widths.end(), [](std::size_t w) { return w == 0; })) {
        throw InvalidArchitecture("zero-width block");
    }
    Rng rng = Rng::stream(seed, "init");
    const auto uniform_fill = [&rng](Tensor& t, double bound) {
        for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-bound, bound));
    };

    std::vector<Block> layers;
    std::size_t in = input.channels;
    for (std::size_t b = 0; b < blocks; ++b) {
        BlockSpec spec{BlockKind::Residual, static_cast<std::uint32_t>(in),
                       static_cast<std::uint32_t>(widths[b]), 3, b == 0 ? 1u : 2u, affine};
        Block block{spec, {}};
        for (const auto& shape : block_parameter_shapes(spec)) {
            Tensor p(shape);
            if (shape.size() == 4) {
                uniform_fill(p, std::sqrt(6.0 / static_cast<double>(shape[1] * shape[2] * shape[3])));
            }
            block.params.push_back(std::move(p));
        }
        if (affine) {
            // scale tensors follow each conv weight/bias pair
            std::fill(block.params[2].mutable_data().begin(), block.params[2].mutable_data().end(), 1.0f);
            std::fill(block.params[6].mutable_data().begin(), block.params[6].mutable_data().end(), 1.0f);
        }
        layers.push_back(std::move(block));
        in = widths[b];
    }
    BlockSpec logits_spec{BlockKind::Logits, static_cast<std::uint32_t>(in),
                          static_cast<std::uint32_t>(num_classes), 1, 1, false};
    Block logits_block{logits_spec, {Tensor({in, num_classes}), Tensor({num_classes})}};
    uniform_fill(logits_block.params[0], 1.0 / std::sqrt(static_cast<double>(in)));
    layers.push_back(std::move(logits_block));
    return ModelGraph(input, num_classes, std::move(layers));
}

}  // namespace latentlab
