#include "latentlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "latentlab/rng.hpp"

namespace latentlab {

InputShape Dataset::input_shape() const {
    if (images.rank() != 4) return {};
    return {images.dim(1), images.dim(2), images.dim(3)};
}

Tensor Dataset::image(std::size_t i) const {
    const std::size_t index[1] = {i};
    return batch(index);
}

Tensor Dataset::batch(std::span<const std::size_t> index) const {
    const std::size_t per = input_shape().numel();
    Shape shape = images.shape();
    shape[0] = index.size();
    std::vector<float> values(index.size() * per);
    const auto src = images.data();
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= size()) throw ShapeMismatch("image index out of range");
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(index[r] * per), per, values.begin() + static_cast<std::ptrdiff_t>(r * per));
    }
    return Tensor(std::move(shape), std::move(values));
}

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
    if (begin + count > size()) throw ShapeMismatch("slice beyond the dataset");
    std::vector<std::size_t> index(count);
    std::iota(index.begin(), index.end(), begin);
    Dataset out;
    out.images = batch(index);
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
    out.num_classes = num_classes;
    out.split = split;
    return out;
}

void Dataset::validate() const {
    if (images.rank() != 4) throw DimensionMismatch("images must be [n,C,H,W]");
    if (images.dim(0) != labels.size()) {
        throw DimensionMismatch(std::to_string(images.dim(0)) + " images but " + std::to_string(labels.size()) +
                                " labels");
    }
    for (float v : images.data()) {
        if (!(v >= 0.0f && v <= 1.0f)) throw InvalidConfig("pixel outside [0,1]");
    }
    for (std::size_t l : labels) {
        if (l >= num_classes) throw DimensionMismatch("label " + std::to_string(l) + " >= class count");
    }
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const std::string& what) {
    if (at + 4 > b.size()) throw TruncatedFile(what + ": header cut short");
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t num_classes) {
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);

    const std::uint32_t img_magic = be32(img, 0, images_path.string());
    if (img_magic != 0x00000803 && img_magic != 0x00000804) {
        throw BadMagic(images_path.string() + ": image magic " + std::to_string(img_magic));
    }
    const std::uint32_t lab_magic = be32(lab, 0, labels_path.string());
    if (lab_magic != 0x00000801) throw BadMagic(labels_path.string() + ": label magic " + std::to_string(lab_magic));

    const std::size_t ndims = img_magic & 0xff;
    std::vector<std::size_t> dims(ndims);
    for (std::size_t d = 0; d < ndims; ++d) dims[d] = be32(img, 4 + 4 * d, images_path.string());
    const std::size_t n = dims[0];
    const std::size_t c = ndims == 4 ? dims[1] : 1;
    const std::size_t h = dims[ndims - 2];
    const std::size_t w = dims[ndims - 1];
    const std::size_t header = 4 + 4 * ndims;
    const std::size_t need = n * c * h * w;
    if (img.size() < header + need) throw TruncatedFile(images_path.string() + ": pixel data cut short");

    const std::size_t label_count = be32(lab, 4, labels_path.string());
    if (label_count != n) {
        throw DimensionMismatch(std::to_string(n) + " images but " + std::to_string(label_count) + " labels");
    }
    if (lab.size() < 8 + label_count) throw TruncatedFile(labels_path.string() + ": label data cut short");

    Dataset out;
    std::vector<float> pixels(need);
    for (std::size_t i = 0; i < need; ++i) pixels[i] = static_cast<float>(img[header + i]) / 255.0f;
    out.images = Tensor({n, c, h, w}, std::move(pixels));
    out.labels.resize(n);
    std::size_t largest = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out.labels[i] = lab[8 + i];
        largest = std::max(largest, out.labels[i]);
    }
    out.num_classes = num_classes != 0 ? num_classes : largest + 1;
    out.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

SynthKind parse_synth_kind(const std::string& name) {
    if (name == "blobs") return SynthKind::Blobs;
    if (name == "rings") return SynthKind::Rings;
    if (name == "textures") return SynthKind::Textures;
    throw InvalidConfig("unknown synthetic dataset '" + name + "' (blobs, rings, textures)");
}

std::string synth_kind_name(SynthKind kind) {
    switch (kind) {
        case SynthKind::Blobs: return "blobs";
        case SynthKind::Rings: return "rings";
        case SynthKind::Textures: return "textures";
    }
    return "?";
}

namespace {

/// Per-class RGB tint on the colour wheel, scaled to unit max.
std::vector<double> tint(std::size_t k, std::size_t classes, std::size_t channels) {
    std::vector<double> t(channels, 1.0);
    if (channels < 3) return t;
    const double hue = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(classes);
    for (std::size_t ch = 0; ch < 3; ++ch) {
        t[ch] = 0.6 + 0.4 * std::cos(hue - 2.0 * M_PI * static_cast<double>(ch) / 3.0);
    }
    return t;
}

void draw(SynthKind kind, std::size_t k, std::size_t classes, InputShape s, Rng& rng, float* out) {
    const double H = static_cast<double>(s.height), W = static_cast<double>(s.width);
    const auto colour = tint(k, classes, s.channels);
    const double frac = classes > 1 ? static_cast<double>(k) / static_cast<double>(classes) : 0.0;
    std::vector<double> plane(s.height * s.width);

    double base = 0.0, noise = 0.0;
    switch (kind) {
        case SynthKind::Blobs: {
            const double angle = 2.0 * M_PI * frac;
            const double cy = H / 2 + 0.3 * H * std::sin(angle) + 0.04 * H * rng.normal();
            const double cx = W / 2 + 0.3 * W * std::cos(angle) + 0.04 * W * rng.normal();
            const double sigma = 0.18 * std::min(H, W);
            for (std::size_t y = 0; y < s.height; ++y) {
                for (std::size_t x = 0; x < s.width; ++x) {
                    const double dy = y - cy, dx = x - cx;
                    plane[y * s.width + x] = 0.65 * std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
                }
            }
            base = 0.2;
            noise = 0.03;
            break;
        }
        case SynthKind::Rings: {
            const double radius = (0.12 + 0.3 * frac) * std::min(H, W);
            const double cy = H / 2 - 0.5 + 0.5 * rng.normal(), cx = W / 2 - 0.5 + 0.5 * rng.normal();
            for (std::size_t y = 0; y < s.height; ++y) {
                for (std::size_t x = 0; x < s.width; ++x) {
                    const double r = std::hypot(y - cy, x - cx);
                    plane[y * s.width + x] = 0.6 * std::exp(-(r - radius) * (r - radius) / 1.0);
                }
            }
            base = 0.2;
            noise = 0.03;
            break;
        }
        case SynthKind::Textures: {
            const std::size_t orientations = (classes + 1) / 2;
            const double theta = M_PI * static_cast<double>(k % orientations) / static_cast<double>(orientations) +
                                 0.12 * rng.normal();
            const double cycles = (k < orientations ? 1.5 : 2.75) + 0.15 * rng.normal();
            const double phase = rng.uniform(0.0, 2.0 * M_PI);
            const double contrast = rng.uniform(0.06, 0.3);
            const double fy = std::sin(theta) * cycles / H, fx = std::cos(theta) * cycles / W;
            for (std::size_t y = 0; y < s.height; ++y) {
                for (std::size_t x = 0; x < s.width; ++x) {
                    plane[y * s.width + x] = contrast * std::sin(2.0 * M_PI * (fy * y + fx * x) + phase);
                }
            }
            base = 0.5 + rng.uniform(-0.1, 0.1);
            noise = 0.04;
            break;
        }
    }
    for (std::size_t ch = 0; ch < s.channels; ++ch) {
        for (std::size_t p = 0; p < plane.size(); ++p) {
            const double v = base + colour[ch] * plane[p] + noise * rng.normal();
            out[ch * plane.size() + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
}

}  // namespace

Dataset synth_dataset(SynthKind kind, std::size_t count, std::size_t num_classes, InputShape input,
                      std::uint64_t seed) {
    if (count == 0) throw EmptyDataset("synthetic dataset needs count > 0");
    if (num_classes < 2) throw InvalidConfig("need at least two classes");
    if (input.numel() == 0) throw InvalidConfig("empty input shape");
    Dataset out;
    out.num_classes = num_classes;
    out.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) out.labels[i] = i % num_classes;
    Rng order = Rng::stream(seed, "synth-order");
    order.shuffle(out.labels.begin(), out.labels.end());

    const std::size_t per = input.numel();
    std::vector<float> pixels(count * per);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = Rng::stream(seed, synth_kind_name(kind), i);
        draw(kind, out.labels[i], num_classes, input, rng, pixels.data() + i * per);
    }
    out.images = Tensor(input.batch(count), std::move(pixels));
    return out;
}

std::vector<std::size_t> predict(const ModelGraph& model, const Dataset& data) {
    constexpr std::size_t kChunk = 256;
    std::vector<std::size_t> out;
    out.reserve(data.size());
    for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
        const std::size_t n = std::min(kChunk, data.size() - begin);
        std::vector<std::size_t> index(n);
        std::iota(index.begin(), index.end(), begin);
        const auto pred = argmax_rows(logits(model, data.batch(index)));
        out.insert(out.end(), pred.begin(), pred.end());
    }
    return out;
}

double evaluate(const ModelGraph& model, const Dataset& data) {
    if (data.empty()) throw EmptyDataset("cannot evaluate on an empty dataset");
    const auto pred = predict(model, data);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace latentlab
