#pragma once

#include <array>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "surgecast/random.hpp"

namespace surgecast {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned allocator. Vectorized reductions split their work at
/// aligned addresses, so buffer alignment must not depend on heap state for
/// results to be reproducible.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

template <std::floating_point T>
struct TensorNode {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool consumed = false;  // a backward pass has already run through this node
    std::vector<std::shared_ptr<TensorNode>> parents;
    /// Adds this node's gradient into its parents' gradients.
    std::function<void(TensorNode&)> backward;

    Buffer<T>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

/// Dense row-major tensor and handle to its node in the autodiff graph.
/// Copies share the node.
template <std::floating_point T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    std::size_t rank() const { return node().shape.size(); }
    /// Dimension `axis`, counted from the back when negative.
    std::size_t dim(int axis) const;
    std::size_t numel() const { return node().data.size(); }

    // Spans borrow the node; a temporary tensor may own the last reference.
    std::span<const T> data() const& { return node().data; }
    std::span<const T> data() const&& = delete;
    std::span<T> mutable_data() & { return node().data; }
    std::span<T> mutable_data() && = delete;
    std::vector<T> to_vector() const { return {node().data.begin(), node().data.end()}; }
    T item() const;

    bool requires_grad() const { return node().requires_grad; }
    bool has_grad() const { return !node().grad.empty(); }
    /// Gradient after backward; zeros when nothing reached this tensor.
    std::span<const T> grad() const&;
    std::span<const T> grad() const&& = delete;
    void zero_grad();

    /// Reverse-mode pass from this scalar. Running it twice over the same graph
    /// without reset_graph() is an error.
    void backward();
    /// Allows another backward over this graph. Intermediate gradients are
    /// cleared; leaf gradients keep accumulating.
    void reset_graph();

    /// Same values, cut from the graph.
    Tensor detach() const;

    TensorNode<T>& node() const {
        if (!node_) throw GraphError("use of an undefined tensor");
        return *node_;
    }
    const std::shared_ptr<TensorNode<T>>& node_ptr() const noexcept { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

// Operations. Each returns a new graph node; gradients accumulate additively
// into every input that requires them.

/// a and b of equal shape, or b's shape a suffix of a's (b repeats over the
/// leading dimensions of a).
template <std::floating_point T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <std::floating_point T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
/// Elementwise product of equal shapes.
template <std::floating_point T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <std::floating_point T> Tensor<T> scale(const Tensor<T>& x, T factor);

/// [m x k]·[k x n]; [..., m x k]·[..., k x n] with equal leading dimensions;
/// or [..., m x k]·[k x n] with the right operand shared across the batch.
template <std::floating_point T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x [..., k]·weight [k x n] + bias [n].
template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
/// Swaps the last two axes.
template <std::floating_point T> Tensor<T> transpose(const Tensor<T>& x);
template <std::floating_point T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// [B x a x d] and [B x b x d] -> [B x (a+b) x d].
template <std::floating_point T> Tensor<T> concat_time(const Tensor<T>& a, const Tensor<T>& b);
/// [B x L x d] -> [B x len x d] starting at `start`.
template <std::floating_point T> Tensor<T> slice_time(const Tensor<T>& x, std::size_t start, std::size_t len);
/// [...] -> [batch x ...], each copy sharing gradient with the input.
template <std::floating_point T> Tensor<T> expand_batch(const Tensor<T>& x, std::size_t batch);
/// [B x L x d] -> [B x d].
template <std::floating_point T> Tensor<T> mean_time(const Tensor<T>& x);
template <std::floating_point T> Tensor<T> sum(const Tensor<T>& x);
template <std::floating_point T> Tensor<T> mean(const Tensor<T>& x);

/// [B x L x (H*dh)] -> [(B*H) x L x dh].
template <std::floating_point T> Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);
/// Inverse of split_heads.
template <std::floating_point T> Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads);

/// Max-subtracted softmax along the last axis.
template <std::floating_point T> Tensor<T> softmax(const Tensor<T>& x);
/// Sets entries above the diagonal of each trailing [L x L] block to -inf.
template <std::floating_point T> Tensor<T> causal_mask(const Tensor<T>& x);
template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps = T(1e-5));

template <std::floating_point T> Tensor<T> silu(const Tensor<T>& x);
/// tanh approximation used by GPT-2.
template <std::floating_point T> Tensor<T> gelu(const Tensor<T>& x);
template <std::floating_point T> Tensor<T> relu(const Tensor<T>& x);

/// Same-padded cross-correlation over time. x [B x L x Cin], kernel
/// [K x Cin x Cout] with K odd, bias [Cout].
template <std::floating_point T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias);

/// Inverted dropout. Identity when p == 0 or not training; otherwise the mask
/// comes from `rng`, so a seeded stream reproduces it. Drop probability is
/// resolved to 1/65536.
template <std::floating_point T> Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training);

/// Mean over the batch of w[y] * -log softmax(logits)[y]. logits [B x 2].
template <std::floating_point T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, std::span<const int> labels, std::array<T, 2> class_weights = {T(1), T(1)});

}  // namespace surgecast
