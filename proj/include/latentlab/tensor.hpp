#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// A tensor created through BasicTape::leaf(), or produced by a primitive with
// at least one taped operand, is recorded on that tape. Everything else is a
// plain value and costs nothing beyond the arithmetic. Storage is shared on
// copy (like a handle); use clone() for an independent buffer.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "latentlab/errors.hpp"

namespace latentlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
class BasicTape;
template <class T>
class BasicTensor;

namespace detail {

/// Hands out gradient buffers for the operands of one node during backward.
template <class T>
class GradSink {
public:
    virtual ~GradSink() = default;
    /// True when operand `slot` is on the tape and needs a gradient.
    virtual bool wants(std::size_t slot) const = 0;
    /// Zero-initialised accumulator for operand `slot`; only valid if wants(slot).
    virtual std::span<T> grad(std::size_t slot) = 0;
};

template <class T>
using BackwardFn = std::function<void(std::span<const T> grad_out, GradSink<T>& sink)>;

template <class T>
struct Node {
    Shape shape;
    std::vector<std::size_t> parents;  // one entry per operand; npos if untaped
    BackwardFn<T> backward;            // empty for leaves
};

template <class T>
struct TapeCore {
    std::vector<Node<T>> nodes;
    std::uint64_t generation = 1;
};

/// 64-byte aligned allocator for tensor storage. Eigen's vectorised kernels
/// choose their code path from the runtime address of each buffer, so with
/// plain heap alignment the rounding of a result could depend on allocation
/// history.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

inline constexpr std::size_t npos = static_cast<std::size_t>(-1);

}  // namespace detail

template <class T>
using Buffer = std::vector<T, detail::AlignedAllocator<T>>;

template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() : data_(std::make_shared<Buffer<T>>()) { shape_ = {0}; }
    explicit BasicTensor(Shape shape, T fill = T(0));
    BasicTensor(Shape shape, std::vector<T> values);
    BasicTensor(Shape shape, Buffer<T> values);
    BasicTensor(Shape shape, std::initializer_list<T> values)
        : BasicTensor(std::move(shape), Buffer<T>(values)) {}

    static BasicTensor scalar(T value) { return BasicTensor(Shape{}, Buffer<T>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_->size(); }
    bool empty() const noexcept { return data_->empty(); }

    std::span<const T> data() const noexcept { return {data_->data(), data_->size()}; }
    /// Mutable view of the shared storage. Mutating a tensor that is recorded
    /// on a live tape invalidates that tape's backward pass.
    std::span<T> mutable_data() noexcept { return {data_->data(), data_->size()}; }

    T operator[](std::size_t i) const { return (*data_)[i]; }
    T item() const;

    bool requires_grad() const noexcept;
    BasicTensor detach() const;
    BasicTensor clone() const;

    template <class U>
    BasicTensor<U> cast() const {
        std::vector<U> out(size());
        for (std::size_t i = 0; i < size(); ++i) out[i] = static_cast<U>((*data_)[i]);
        return BasicTensor<U>(shape_, std::move(out));
    }

    // Tape linkage (used by primitives).
    const std::shared_ptr<detail::TapeCore<T>>& tape_core() const noexcept { return core_; }
    std::size_t node() const noexcept { return node_; }
    std::uint64_t generation() const noexcept { return generation_; }
    std::shared_ptr<const Buffer<T>> storage() const noexcept { return data_; }

    static BasicTensor from_storage(Shape shape, std::shared_ptr<Buffer<T>> data);
    static BasicTensor recorded(Shape shape, std::shared_ptr<Buffer<T>> data,
                                std::shared_ptr<detail::TapeCore<T>> core, std::size_t node);

private:
    Shape shape_;
    std::shared_ptr<Buffer<T>> data_;
    std::shared_ptr<detail::TapeCore<T>> core_;
    std::size_t node_ = 0;
    std::uint64_t generation_ = 0;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Gradients produced by one backward pass, keyed by leaf tensor.
template <class T>
class GradientMap {
public:
    GradientMap() = default;
    GradientMap(std::shared_ptr<detail::TapeCore<T>> core, std::uint64_t generation,
                std::vector<Buffer<T>> grads)
        : core_(std::move(core)), generation_(generation), grads_(std::move(grads)) {}

    /// Gradient for `leaf`; an all-zero tensor of the leaf's shape when the
    /// leaf has no path to the loss.
    BasicTensor<T> of(const BasicTensor<T>& leaf) const;

private:
    std::shared_ptr<detail::TapeCore<T>> core_;
    std::uint64_t generation_ = 0;
    std::vector<Buffer<T>> grads_;
};

template <class T>
class BasicTape {
public:
    BasicTape() : core_(std::make_shared<detail::TapeCore<T>>()) {}

    /// Registers `value` as a differentiable leaf. Storage is shared.
    BasicTensor<T> leaf(const BasicTensor<T>& value);

    /// Reverse sweep from a scalar loss recorded on this tape.
    GradientMap<T> backward(const BasicTensor<T>& loss) const;

    /// Drops every recorded node; tensors recorded so far become detached.
    void clear();

    std::size_t size() const noexcept { return core_->nodes.size(); }

private:
    std::shared_ptr<detail::TapeCore<T>> core_;
};

using Tape = BasicTape<float>;
using Tape64 = BasicTape<double>;

// ---------------------------------------------------------------------------
// Primitives. Each records a backward rule when any operand is taped, and
// raises NonFiniteResult if its forward value contains inf or NaN.

/// Elementwise sum. `b` may also match the trailing dimensions of `a`, in
/// which case it is broadcast over the leading ones (bias addition).
template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// Elementwise product, with the same broadcasting rule as add().
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
/// [M,K] x [K,N] -> [M,N].
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

struct Conv2dOptions {
    std::size_t stride = 1;   // 1 or 2
    std::size_t padding = 0;  // zero padding on every side
};

/// x [B,C,H,W], weight [O,C,kh,kw], bias [O] or empty -> [B,O,Ho,Wo].
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, Conv2dOptions options = {});
template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x);
/// [B,C,H,W] -> [B,C].
template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);
/// Frozen batch-norm: x[b,c,h,w] * scale[c] + shift[c].
template <class T>
BasicTensor<T> affine_channel(const BasicTensor<T>& x, const BasicTensor<T>& scale,
                              const BasicTensor<T>& shift);
/// [B, ...] -> [B, prod(...)].
template <class T>
BasicTensor<T> flatten(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
/// Per-row softmax cross-entropy: z [B,K], one label per row -> [B].
/// Uses the max-shifted log-sum-exp.
template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& z, std::span<const std::size_t> labels);
template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x);
/// z [B,K] -> [B], picking z[b, index[b]].
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& z, std::span<const std::size_t> index);
/// z [B,K] -> [B], max over columns other than exclude[b]. The gradient
/// flows to the first maximiser.
template <class T>
BasicTensor<T> masked_row_max(const BasicTensor<T>& z, std::span<const std::size_t> exclude);
/// z [B,K] / s [B] row-wise.
template <class T>
BasicTensor<T> div_rows(const BasicTensor<T>& z, const BasicTensor<T>& s);

// ---------------------------------------------------------------------------

/// Central-difference estimate of d fn / d x, same shape as x.
template <class T>
BasicTensor<T> finite_diff_gradient(const std::function<T(const BasicTensor<T>&)>& fn,
                                    const BasicTensor<T>& x, T h);

template <class T>
bool bit_equal(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b);

}  // namespace latentlab
