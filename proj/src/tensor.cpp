#include "latentlab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cstring>
#include <cmath>
#include <numeric>
#include <sstream>

namespace latentlab {

using detail::BackwardFn;
using detail::GradSink;
using detail::npos;

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// BasicTensor

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(std::make_shared<Buffer<T>>(shape_numel(shape_), fill)) {}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values)
    : BasicTensor(std::move(shape), Buffer<T>(values.begin(), values.end())) {}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, Buffer<T> values)
    : shape_(std::move(shape)), data_(std::make_shared<Buffer<T>>(std::move(values))) {
    if (shape_numel(shape_) != data_->size()) {
        throw ShapeMismatch("shape " + shape_str(shape_) + " holds " +
                            std::to_string(shape_numel(shape_)) + " values, got " +
                            std::to_string(data_->size()));
    }
}

template <class T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeMismatch("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
}

template <class T>
T BasicTensor<T>::item() const {
    if (size() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
}

template <class T>
bool BasicTensor<T>::requires_grad() const noexcept {
    return core_ && generation_ == core_->generation;
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return from_storage(shape_, data_);
}

template <class T>
BasicTensor<T> BasicTensor<T>::clone() const {
    return BasicTensor(shape_, *data_);
}

template <class T>
BasicTensor<T> BasicTensor<T>::from_storage(Shape shape, std::shared_ptr<Buffer<T>> data) {
    BasicTensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

template <class T>
BasicTensor<T> BasicTensor<T>::recorded(Shape shape, std::shared_ptr<Buffer<T>> data,
                                        std::shared_ptr<detail::TapeCore<T>> core, std::size_t node) {
    BasicTensor t = from_storage(std::move(shape), std::move(data));
    t.generation_ = core->generation;
    t.core_ = std::move(core);
    t.node_ = node;
    return t;
}

// ---------------------------------------------------------------------------
// Tape

namespace {

template <class T>
class VectorSink final : public GradSink<T> {
public:
    VectorSink(const detail::Node<T>& node, std::vector<Buffer<T>>& grads,
               const std::vector<detail::Node<T>>& nodes)
        : node_(node), grads_(grads), nodes_(nodes) {}

    bool wants(std::size_t slot) const override {
        return slot < node_.parents.size() && node_.parents[slot] != npos;
    }

    std::span<T> grad(std::size_t slot) override {
        const std::size_t p = node_.parents[slot];
        auto& g = grads_[p];
        if (g.empty()) g.assign(shape_numel(nodes_[p].shape), T(0));
        return {g.data(), g.size()};
    }

private:
    const detail::Node<T>& node_;
    std::vector<Buffer<T>>& grads_;
    const std::vector<detail::Node<T>>& nodes_;
};

}  // namespace

template <class T>
BasicTensor<T> BasicTape<T>::leaf(const BasicTensor<T>& value) {
    detail::Node<T> node;
    node.shape = value.shape();
    core_->nodes.push_back(std::move(node));
    auto storage = std::const_pointer_cast<Buffer<T>>(value.storage());
    return BasicTensor<T>::recorded(value.shape(), std::move(storage), core_, core_->nodes.size() - 1);
}

template <class T>
GradientMap<T> BasicTape<T>::backward(const BasicTensor<T>& loss) const {
    if (loss.tape_core() != core_ || loss.generation() != core_->generation) {
        throw DetachedTape("loss is not recorded on the active tape");
    }
    if (loss.size() != 1) throw NotScalarLoss("loss has shape " + shape_str(loss.shape()));

    const auto& nodes = core_->nodes;
    std::vector<Buffer<T>> grads(nodes.size());
    grads[loss.node()] = {T(1)};
    for (std::size_t n = loss.node() + 1; n-- > 0;) {
        if (grads[n].empty() || !nodes[n].backward) continue;
        VectorSink<T> sink(nodes[n], grads, nodes);
        nodes[n].backward({grads[n].data(), grads[n].size()}, sink);
        Buffer<T>().swap(grads[n]);
    }
    return GradientMap<T>(core_, core_->generation, std::move(grads));
}

template <class T>
void BasicTape<T>::clear() {
    core_->nodes.clear();
    ++core_->generation;
}

template <class T>
BasicTensor<T> GradientMap<T>::of(const BasicTensor<T>& leaf) const {
    if (!core_ || leaf.tape_core() != core_ || leaf.generation() != generation_) {
        throw DetachedTape("tensor is not a leaf of this backward pass");
    }
    const auto& g = grads_[leaf.node()];
    if (g.empty()) return BasicTensor<T>(leaf.shape(), T(0));
    return BasicTensor<T>(leaf.shape(), g);
}

// ---------------------------------------------------------------------------
// Recording helpers

namespace {

template <class T>
void check_finite(const char* op, const Buffer<T>& values) {
    for (T v : values) {
        if (!std::isfinite(v)) throw NonFiniteResult(std::string(op) + " produced a non-finite value");
    }
}

template <class T>
BasicTensor<T> finish(const char* op, Shape shape, Buffer<T> values,
                      std::initializer_list<const BasicTensor<T>*> operands, BackwardFn<T> backward) {
    check_finite(op, values);
    auto data = std::make_shared<Buffer<T>>(std::move(values));
    std::shared_ptr<detail::TapeCore<T>> core;
    for (const auto* o : operands) {
        if (o->tape_core() && !o->requires_grad()) {
            throw DetachedTape(std::string(op) + ": operand belongs to a cleared tape");
        }
        if (!o->requires_grad()) continue;
        if (core && core != o->tape_core()) {
            throw DetachedTape(std::string(op) + ": operands recorded on different tapes");
        }
        core = o->tape_core();
    }
    if (!core) return BasicTensor<T>::from_storage(std::move(shape), std::move(data));

    detail::Node<T> node;
    node.shape = shape;
    for (const auto* o : operands) node.parents.push_back(o->requires_grad() ? o->node() : npos);
    node.backward = std::move(backward);
    core->nodes.push_back(std::move(node));
    const std::size_t id = core->nodes.size() - 1;
    return BasicTensor<T>::recorded(std::move(shape), std::move(data), std::move(core), id);
}

template <class T>
using Storage = std::shared_ptr<const Buffer<T>>;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

bool is_suffix(const Shape& full, const Shape& tail) {
    if (tail.size() > full.size()) return false;
    return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

template <class T>
void require_rank(const char* op, const BasicTensor<T>& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                            shape_str(t.shape()));
    }
}

template <class T>
void require_labels(const char* op, const BasicTensor<T>& z, std::span<const std::size_t> labels) {
    require_rank(op, z, 2);
    if (labels.size() != z.dim(0)) {
        throw ShapeMismatch(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(z.dim(0)) + " rows");
    }
    for (std::size_t l : labels) {
        if (l >= z.dim(1)) throw ShapeMismatch(std::string(op) + ": label out of range");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const bool same = a.shape() == b.shape();
    if (!same && !is_suffix(a.shape(), b.shape())) {
        throw ShapeMismatch("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const auto av = a.data();
    const auto bv = b.data();
    const std::size_t period = b.size();
    Buffer<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % period];
    return finish<T>("add", a.shape(), std::move(out), {&a, &b},
                     [period](std::span<const T> g, GradSink<T>& s) {
                         if (s.wants(0)) {
                             auto ga = s.grad(0);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         }
                         if (s.wants(1)) {
                             auto gb = s.grad(1);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i % period] += g[i];
                         }
                     });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatch("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const auto av = a.data();
    const auto bv = b.data();
    Buffer<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return finish<T>("sub", a.shape(), std::move(out), {&a, &b},
                     [](std::span<const T> g, GradSink<T>& s) {
                         if (s.wants(0)) {
                             auto ga = s.grad(0);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         }
                         if (s.wants(1)) {
                             auto gb = s.grad(1);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                         }
                     });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const bool same = a.shape() == b.shape();
    if (!same && !is_suffix(a.shape(), b.shape())) {
        throw ShapeMismatch("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const auto av = a.data();
    const auto bv = b.data();
    const std::size_t period = b.size();
    Buffer<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i % period];
    Storage<T> as = a.storage(), bs = b.storage();
    return finish<T>("mul", a.shape(), std::move(out), {&a, &b},
                     [as, bs, period](std::span<const T> g, GradSink<T>& s) {
                         const auto& x = *as;
                         const auto& y = *bs;
                         if (s.wants(0)) {
                             auto ga = s.grad(0);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i % period];
                         }
                         if (s.wants(1)) {
                             auto gb = s.grad(1);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i % period] += g[i] * x[i];
                         }
                     });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
    const auto av = a.data();
    Buffer<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
    return finish<T>("scale", a.shape(), std::move(out), {&a},
                     [factor](std::span<const T> g, GradSink<T>& s) {
                         auto ga = s.grad(0);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                     });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    const auto xv = x.data();
    Buffer<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    Storage<T> xs = x.storage();
    return finish<T>("relu", x.shape(), std::move(out), {&x},
                     [xs](std::span<const T> g, GradSink<T>& s) {
                         auto gx = s.grad(0);
                         const auto& v = *xs;
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             if (v[i] > T(0)) gx[i] += g[i];
                         }
                     });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Buffer<T> out(m * n);
    const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
    MutMap<T>(out.data(), ei(m), ei(n)).noalias() =
        ConstMap<T>(a.data().data(), ei(m), ei(k)) * ConstMap<T>(b.data().data(), ei(k), ei(n));
    Storage<T> as = a.storage(), bs = b.storage();
    return finish<T>("matmul", {m, n}, std::move(out), {&a, &b},
                     [as, bs, m, k, n, ei](std::span<const T> g, GradSink<T>& s) {
                         ConstMap<T> G(g.data(), ei(m), ei(n));
                         if (s.wants(0)) {
                             MutMap<T>(s.grad(0).data(), ei(m), ei(k)).noalias() +=
                                 G * ConstMap<T>(bs->data(), ei(k), ei(n)).transpose();
                         }
                         if (s.wants(1)) {
                             MutMap<T>(s.grad(1).data(), ei(k), ei(n)).noalias() +=
                                 ConstMap<T>(as->data(), ei(m), ei(k)).transpose() * G;
                         }
                     });
}

namespace {

struct ConvGeometry {
    std::size_t channels, height, width, kernel_h, kernel_w, stride, padding, out_h, out_w;

    std::size_t patch() const { return channels * kernel_h * kernel_w; }
    std::size_t pixels() const { return out_h * out_w; }
    bool is_pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && padding == 0; }
};

// cols [C*kh*kw, Ho*Wo]
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    const std::size_t hw = g.pixels();
    for (std::size_t c = 0; c < g.channels; ++c) {
        const T* plane = x + c * g.height * g.width;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * hw;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.padding);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                                      ? T(0)
                                      : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_accumulate(const T* cols, const ConvGeometry& g, T* dx) {
    const std::size_t hw = g.pixels();
    for (std::size_t c = 0; c < g.channels; ++c) {
        T* plane = dx + c * g.height * g.width;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * hw;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    T* dst = plane + static_cast<std::size_t>(iy) * g.width;
                    const T* src = row + oy * g.out_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        dst[static_cast<std::size_t>(ix)] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Conv2dOptions options) {
    require_rank("conv2d", x, 4);
    require_rank("conv2d", weight, 4);
    if (options.stride != 1 && options.stride != 2) {
        throw ShapeMismatch("conv2d: stride must be 1 or 2");
    }
    const std::size_t batch = x.dim(0), out_ch = weight.dim(0);
    ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), options.stride,
                   options.padding, 0, 0};
    if (weight.dim(1) != g.channels) {
        throw ShapeMismatch("conv2d: input " + shape_str(x.shape()) + " vs weight " +
                            shape_str(weight.shape()));
    }
    if (g.height + 2 * g.padding < g.kernel_h || g.width + 2 * g.padding < g.kernel_w) {
        throw ShapeMismatch("conv2d: kernel larger than padded input");
    }
    const bool has_bias = !bias.empty();
    if (has_bias && bias.shape() != Shape{out_ch}) {
        throw ShapeMismatch("conv2d: bias " + shape_str(bias.shape()) + " for " +
                            std::to_string(out_ch) + " channels");
    }
    g.out_h = (g.height + 2 * g.padding - g.kernel_h) / g.stride + 1;
    g.out_w = (g.width + 2 * g.padding - g.kernel_w) / g.stride + 1;

    const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
    const std::size_t in_stride = g.channels * g.height * g.width;
    const std::size_t out_stride = out_ch * g.pixels();
    Buffer<T> out(batch * out_stride);
    Buffer<T> cols(g.is_pointwise() ? 0 : g.patch() * g.pixels());
    ConstMap<T> W(weight.data().data(), ei(out_ch), ei(g.patch()));
    for (std::size_t b = 0; b < batch; ++b) {
        const T* xb = x.data().data() + b * in_stride;
        const T* src = xb;
        if (!g.is_pointwise()) {
            im2col(xb, g, cols.data());
            src = cols.data();
        }
        MutMap<T> Y(out.data() + b * out_stride, ei(out_ch), ei(g.pixels()));
        Y.noalias() = W * ConstMap<T>(src, ei(g.patch()), ei(g.pixels()));
        if (has_bias) {
            for (std::size_t o = 0; o < out_ch; ++o) Y.row(ei(o)).array() += bias.data()[o];
        }
    }

    Storage<T> xs = x.storage(), ws = weight.storage();
    return finish<T>(
        "conv2d", {batch, out_ch, g.out_h, g.out_w}, std::move(out), {&x, &weight, &bias},
        [xs, ws, g, batch, out_ch, in_stride, out_stride, ei](std::span<const T> grad, GradSink<T>& s) {
            const bool want_x = s.wants(0), want_w = s.wants(1), want_b = s.wants(2);
            ConstMap<T> W(ws->data(), ei(out_ch), ei(g.patch()));
            Buffer<T> cols(g.patch() * g.pixels());
            std::span<T> gw = want_w ? s.grad(1) : std::span<T>{};
            std::span<T> gb = want_b ? s.grad(2) : std::span<T>{};
            std::span<T> gx = want_x ? s.grad(0) : std::span<T>{};
            for (std::size_t b = 0; b < batch; ++b) {
                ConstMap<T> G(grad.data() + b * out_stride, ei(out_ch), ei(g.pixels()));
                if (want_b) {
                    for (std::size_t o = 0; o < out_ch; ++o) gb[o] += G.row(ei(o)).sum();
                }
                if (want_w) {
                    const T* src = xs->data() + b * in_stride;
                    if (!g.is_pointwise()) {
                        im2col(src, g, cols.data());
                        src = cols.data();
                    }
                    MutMap<T>(gw.data(), ei(out_ch), ei(g.patch())).noalias() +=
                        G * ConstMap<T>(src, ei(g.patch()), ei(g.pixels())).transpose();
                }
                if (want_x) {
                    T* dxb = gx.data() + b * in_stride;
                    if (g.is_pointwise()) {
                        MutMap<T>(dxb, ei(g.patch()), ei(g.pixels())).noalias() += W.transpose() * G;
                    } else {
                        MutMap<T>(cols.data(), ei(g.patch()), ei(g.pixels())).noalias() = W.transpose() * G;
                        col2im_accumulate(cols.data(), g, dxb);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
    require_rank("global_avg_pool", x, 4);
    const std::size_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (hw == 0) throw ShapeMismatch("global_avg_pool: empty spatial extent");
    const auto xv = x.data();
    Buffer<T> out(batch * ch);
    for (std::size_t i = 0; i < batch * ch; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < hw; ++j) acc += xv[i * hw + j];
        out[i] = acc / static_cast<T>(hw);
    }
    return finish<T>("global_avg_pool", {batch, ch}, std::move(out), {&x},
                     [hw](std::span<const T> g, GradSink<T>& s) {
                         auto gx = s.grad(0);
                         const T inv = T(1) / static_cast<T>(hw);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += g[i] * inv;
                         }
                     });
}

template <class T>
BasicTensor<T> affine_channel(const BasicTensor<T>& x, const BasicTensor<T>& scale_c,
                              const BasicTensor<T>& shift_c) {
    require_rank("affine_channel", x, 4);
    const std::size_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (scale_c.shape() != Shape{ch} || shift_c.shape() != Shape{ch}) {
        throw ShapeMismatch("affine_channel: per-channel parameters must have shape [" +
                            std::to_string(ch) + "]");
    }
    const auto xv = x.data();
    const auto sv = scale_c.data();
    const auto tv = shift_c.data();
    Buffer<T> out(x.size());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t base = (b * ch + c) * hw;
            for (std::size_t j = 0; j < hw; ++j) out[base + j] = xv[base + j] * sv[c] + tv[c];
        }
    }
    Storage<T> xs = x.storage(), ss = scale_c.storage();
    return finish<T>("affine_channel", x.shape(), std::move(out), {&x, &scale_c, &shift_c},
                     [xs, ss, batch, ch, hw](std::span<const T> g, GradSink<T>& s) {
                         const auto& xv2 = *xs;
                         const auto& sv2 = *ss;
                         std::span<T> gx = s.wants(0) ? s.grad(0) : std::span<T>{};
                         std::span<T> gs = s.wants(1) ? s.grad(1) : std::span<T>{};
                         std::span<T> gt = s.wants(2) ? s.grad(2) : std::span<T>{};
                         for (std::size_t b = 0; b < batch; ++b) {
                             for (std::size_t c = 0; c < ch; ++c) {
                                 const std::size_t base = (b * ch + c) * hw;
                                 for (std::size_t j = 0; j < hw; ++j) {
                                     const T gv = g[base + j];
                                     if (!gx.empty()) gx[base + j] += gv * sv2[c];
                                     if (!gs.empty()) gs[c] += gv * xv2[base + j];
                                     if (!gt.empty()) gt[c] += gv;
                                 }
                             }
                         }
                     });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw ShapeMismatch("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    Buffer<T> out(x.data().begin(), x.data().end());
    return finish<T>("reshape", std::move(shape), std::move(out), {&x},
                     [](std::span<const T> g, GradSink<T>& s) {
                         auto gx = s.grad(0);
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

template <class T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
    if (x.rank() < 1) throw ShapeMismatch("flatten: scalar input");
    const std::size_t batch = x.dim(0);
    return reshape(x, Shape{batch, batch == 0 ? 0 : x.size() / batch});
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    return finish<T>("sum", Shape{}, Buffer<T>{acc}, {&x},
                     [](std::span<const T> g, GradSink<T>& s) {
                         auto gx = s.grad(0);
                         for (auto& v : gx) v += g[0];
                     });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    if (x.empty()) throw ShapeMismatch("mean: empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Classification heads

template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& z, std::span<const std::size_t> labels) {
    require_labels("softmax_cross_entropy", z, labels);
    const std::size_t rows = z.dim(0), k = z.dim(1);
    const auto zv = z.data();
    Buffer<T> out(rows);
    Buffer<T> lse(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = zv.data() + r * k;
        const T m = *std::max_element(row, row + k);
        T acc = 0;
        for (std::size_t j = 0; j < k; ++j) acc += std::exp(row[j] - m);
        lse[r] = m + std::log(acc);
        out[r] = lse[r] - row[labels[r]];
    }
    Storage<T> zs = z.storage();
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    return finish<T>("softmax_cross_entropy", {rows}, std::move(out), {&z},
                     [zs, lab = std::move(lab), lse = std::move(lse), k](std::span<const T> g,
                                                                         GradSink<T>& s) {
                         auto gz = s.grad(0);
                         const auto& v = *zs;
                         for (std::size_t r = 0; r < lab.size(); ++r) {
                             for (std::size_t j = 0; j < k; ++j) {
                                 const T p = std::exp(v[r * k + j] - lse[r]);
                                 gz[r * k + j] += g[r] * (p - (j == lab[r] ? T(1) : T(0)));
                             }
                         }
                     });
}

template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& z, std::span<const std::size_t> index) {
    require_labels("gather_rows", z, index);
    const std::size_t rows = z.dim(0), k = z.dim(1);
    Buffer<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) out[r] = z.data()[r * k + index[r]];
    std::vector<std::size_t> idx(index.begin(), index.end());
    return finish<T>("gather_rows", {rows}, std::move(out), {&z},
                     [idx = std::move(idx), k](std::span<const T> g, GradSink<T>& s) {
                         auto gz = s.grad(0);
                         for (std::size_t r = 0; r < idx.size(); ++r) gz[r * k + idx[r]] += g[r];
                     });
}

template <class T>
BasicTensor<T> masked_row_max(const BasicTensor<T>& z, std::span<const std::size_t> exclude) {
    require_labels("masked_row_max", z, exclude);
    const std::size_t rows = z.dim(0), k = z.dim(1);
    if (k < 2) throw ShapeMismatch("masked_row_max: need at least two columns");
    Buffer<T> out(rows);
    std::vector<std::size_t> arg(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = z.data().data() + r * k;
        std::size_t best = exclude[r] == 0 ? 1 : 0;
        for (std::size_t j = best + 1; j < k; ++j) {
            if (j != exclude[r] && row[j] > row[best]) best = j;
        }
        arg[r] = best;
        out[r] = row[best];
    }
    return finish<T>("masked_row_max", {rows}, std::move(out), {&z},
                     [arg = std::move(arg), k](std::span<const T> g, GradSink<T>& s) {
                         auto gz = s.grad(0);
                         for (std::size_t r = 0; r < arg.size(); ++r) gz[r * k + arg[r]] += g[r];
                     });
}

template <class T>
BasicTensor<T> div_rows(const BasicTensor<T>& z, const BasicTensor<T>& d) {
    require_rank("div_rows", z, 2);
    const std::size_t rows = z.dim(0), k = z.dim(1);
    if (d.size() != rows) {
        throw ShapeMismatch("div_rows: " + shape_str(z.shape()) + " / " + shape_str(d.shape()));
    }
    Buffer<T> out(z.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = z.data()[r * k + j] / d.data()[r];
    }
    Storage<T> zs = z.storage(), ds = d.storage();
    return finish<T>("div_rows", z.shape(), std::move(out), {&z, &d},
                     [zs, ds, rows, k](std::span<const T> g, GradSink<T>& s) {
                         const auto& zv = *zs;
                         const auto& dv = *ds;
                         if (s.wants(0)) {
                             auto gz = s.grad(0);
                             for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t j = 0; j < k; ++j) gz[r * k + j] += g[r * k + j] / dv[r];
                             }
                         }
                         if (s.wants(1)) {
                             auto gd = s.grad(1);
                             for (std::size_t r = 0; r < rows; ++r) {
                                 T acc = 0;
                                 for (std::size_t j = 0; j < k; ++j) acc += g[r * k + j] * zv[r * k + j];
                                 gd[r] -= acc / (dv[r] * dv[r]);
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> finite_diff_gradient(const std::function<T(const BasicTensor<T>&)>& fn,
                                    const BasicTensor<T>& x, T h) {
    BasicTensor<T> probe = x.clone();
    auto pv = probe.mutable_data();
    Buffer<T> out(x.size());
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const T orig = pv[i];
        pv[i] = orig + h;
        const T up = fn(probe);
        pv[i] = orig - h;
        const T down = fn(probe);
        pv[i] = orig;
        out[i] = (up - down) / (T(2) * h);
    }
    return BasicTensor<T>(x.shape(), std::move(out));
}

template <class T>
bool bit_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

template <class T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatch("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// ---------------------------------------------------------------------------

#define LATENTLAB_INSTANTIATE(T)                                                                    \
    template class BasicTensor<T>;                                                                  \
    template class BasicTape<T>;                                                                    \
    template class GradientMap<T>;                                                                  \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                      \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                      \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                      \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                        \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                   \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                   const BasicTensor<T>&, Conv2dOptions);                           \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                            \
    template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                 \
    template BasicTensor<T> affine_channel(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                           const BasicTensor<T>&);                                  \
    template BasicTensor<T> flatten(const BasicTensor<T>&);                                         \
    template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                  \
    template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const std::size_t>); \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                             \
    template BasicTensor<T> mean(const BasicTensor<T>&);                                            \
    template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const std::size_t>);       \
    template BasicTensor<T> masked_row_max(const BasicTensor<T>&, std::span<const std::size_t>);    \
    template BasicTensor<T> div_rows(const BasicTensor<T>&, const BasicTensor<T>&);                 \
    template BasicTensor<T> finite_diff_gradient(const std::function<T(const BasicTensor<T>&)>&,    \
                                                 const BasicTensor<T>&, T);                         \
    template bool bit_equal(const BasicTensor<T>&, const BasicTensor<T>&);                          \
    template T max_abs_diff(const BasicTensor<T>&, const BasicTensor<T>&);

LATENTLAB_INSTANTIATE(float)
LATENTLAB_INSTANTIATE(double)

#undef LATENTLAB_INSTANTIATE

}  // namespace latentlab
