#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "latentlab/nn.hpp"

namespace latentlab {

namespace {

constexpr char kMagic[4] = {'L', 'F', 'T', '1'};
constexpr std::size_t kMaxRank = 8;

static_assert(std::endian::native == std::endian::little, "little-endian host assumed");

std::uint64_t fnv1a_bytes(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Writer {
public:
    template <class U>
    void put(U v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(U));
    }
    void put_u32(std::size_t v) { put(static_cast<std::uint32_t>(v)); }
    void put_floats(const Tensor& t) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(t.data().data());
        bytes.insert(bytes.end(), p, p + t.size() * sizeof(float));
    }

    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <class U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    std::uint32_t u32(const char* what) { return get<std::uint32_t>(what); }

    Tensor floats(Shape shape, const char* what) {
        const std::size_t n = shape_numel(shape);
        if (n > remaining() / sizeof(float)) throw CorruptFile(std::string("truncated ") + what);
        std::vector<float> values(n);
        std::memcpy(values.data(), bytes_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
        return Tensor(std::move(shape), std::move(values));
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (remaining() < n) throw CorruptFile(std::string("truncated ") + what);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_weights(const ModelGraph& model, const HeadSet& heads) {
    Writer w;
    for (char c : kMagic) w.put(c);
    w.put_u32(kWeightFileVersion);
    const auto& in = model.input_shape();
    w.put_u32(in.channels);
    w.put_u32(in.height);
    w.put_u32(in.width);
    w.put_u32(model.num_classes());

    w.put_u32(model.depth());
    for (const auto& b : model.blocks()) {
        w.put(static_cast<std::uint8_t>(b.spec.kind));
        w.put(static_cast<std::uint8_t>(b.spec.affine ? 1 : 0));
        w.put(std::uint16_t{0});
        w.put(b.spec.in_channels);
        w.put(b.spec.out_channels);
        w.put(b.spec.kernel);
        w.put(b.spec.stride);
    }

    const auto params = model.parameters();
    w.put_u32(params.size());
    for (const auto& p : params) {
        w.put_u32(p.rank());
        for (std::size_t d : p.shape()) w.put_u32(d);
        w.put_floats(p);
    }

    w.put_u32(heads.size());
    for (const auto& h : heads) {
        w.put_u32(h.layer);
        w.put_u32(h.weight.dim(0));
        w.put_u32(h.weight.dim(1));
        w.put_floats(h.weight);
        w.put_floats(h.bias);
    }

    w.put(fnv1a_bytes(w.bytes));
    return std::move(w.bytes);
}

ModelBundle decode_weights(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    for (char c : kMagic) {
        if (r.get<char>("magic") != c) throw CorruptFile("bad magic (expected LFT1)");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kWeightFileVersion) {
        throw VersionMismatch("file version " + std::to_string(version) + ", reader supports " +
                              std::to_string(kWeightFileVersion));
    }
    InputShape input;
    input.channels = r.u32("header");
    input.height = r.u32("header");
    input.width = r.u32("header");
    const std::size_t num_classes = r.u32("header");

    const std::uint32_t depth = r.u32("architecture");
    if (depth > r.remaining()) throw CorruptFile("implausible layer count");
    std::vector<Block> blocks(depth);
    for (auto& b : blocks) {
        const auto kind = r.get<std::uint8_t>("architecture");
        if (kind < 1 || kind > 3) throw CorruptFile("unknown layer kind " + std::to_string(kind));
        b.spec.kind = static_cast<BlockKind>(kind);
        b.spec.affine = r.get<std::uint8_t>("architecture") != 0;
        r.get<std::uint16_t>("architecture");
        b.spec.in_channels = r.u32("architecture");
        b.spec.out_channels = r.u32("architecture");
        b.spec.kernel = r.u32("architecture");
        b.spec.stride = r.u32("architecture");
    }

    const std::uint32_t param_count = r.u32("parameters");
    std::size_t expected = 0;
    for (const auto& b : blocks) expected += block_parameter_shapes(b.spec).size();
    if (param_count != expected) throw CorruptFile("parameter count disagrees with the architecture");
    for (auto& b : blocks) {
        for (const auto& want : block_parameter_shapes(b.spec)) {
            const std::uint32_t rank = r.u32("parameter shape");
            if (rank > kMaxRank) throw CorruptFile("implausible parameter rank");
            Shape shape(rank);
            for (auto& d : shape) d = r.u32("parameter shape");
            if (shape != want) {
                throw CorruptFile("parameter shape " + shape_str(shape) + " disagrees with architecture " +
                                  shape_str(want));
            }
            b.params.push_back(r.floats(std::move(shape), "parameters"));
        }
    }

    HeadSet heads;
    const std::uint32_t head_count = r.u32("heads");
    if (head_count > r.remaining()) throw CorruptFile("implausible head count");
    for (std::uint32_t i = 0; i < head_count; ++i) {
        LogitsHead h;
        h.layer = r.u32("head");
        const std::size_t c = r.u32("head");
        const std::size_t k = r.u32("head");
        if (k != num_classes) throw CorruptFile("head width disagrees with the class count");
        h.weight = r.floats({c, k}, "head weights");
        h.bias = r.floats({k}, "head bias");
        heads.push_back(std::move(h));
    }

    const std::size_t payload_end = r.position();
    const auto stored = r.get<std::uint64_t>("checksum");
    if (r.remaining() != 0) throw CorruptFile("trailing bytes after checksum");
    if (stored != fnv1a_bytes(bytes.first(payload_end))) throw ChecksumMismatch("content checksum mismatch");

    ModelBundle bundle;
    try {
        bundle.model = ModelGraph(input, num_classes, std::move(blocks));
    } catch (const InvalidArchitecture& e) {
        throw CorruptFile(std::string("invalid architecture: ") + e.what());
    }
    for (const auto& h : heads) {
        if (h.layer == 0 || h.layer >= bundle.model.depth() ||
            h.weight.dim(0) != bundle.model.layer_output_shape(h.layer).channels) {
            throw CorruptFile("head for layer " + std::to_string(h.layer) + " does not fit the model");
        }
    }
    bundle.heads = std::move(heads);
    return bundle;
}

void save_weights(const std::filesystem::path& path, const ModelGraph& model, const HeadSet& heads) {
    const auto bytes = encode_weights(model, heads);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

ModelBundle load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptFile("cannot read weight file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_weights(bytes);
}

}  // namespace latentlab
