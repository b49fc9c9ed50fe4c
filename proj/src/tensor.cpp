#include "surgecast/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

namespace surgecast {

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? " x " : "") << shape[i];
    out << ']';
    return out.str();
}

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

template <typename T>
using Node = TensorNode<T>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Mat = Eigen::Map<RowMat<T>>;

template <typename T>
using CMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using Vec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
using CVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
Tensor<T> make_result(Shape shape,
                      Buffer<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    for (const auto* in : inputs) {
        if (in->requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
        for (const auto* in : inputs) node->parents.push_back(in->node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

// Gradient buffer of parent i, or nullptr when it does not take gradients.
template <typename T>
T* parent_grad(Node<T>& self, std::size_t i) {
    auto& p = *self.parents[i];
    return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

// The message is only built on failure.
#define REQUIRE_SHAPE(cond, msg)        \
    do {                                \
        if (!(cond)) throw ShapeError(msg); \
    } while (false)

Shape leading(const Shape& s, std::size_t drop) { return Shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(drop)); }

}  // namespace

// ---------------------------------------------------------------- Tensor

template <std::floating_point T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <std::floating_point T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    const std::size_t n = shape_size(shape);
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data.assign(n, value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <std::floating_point T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (values.size() != shape_size(shape)) {
        throw ShapeError("tensor of shape " + shape_string(shape) + " cannot hold " +
                         std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data.assign(values.begin(), values.end());
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <std::floating_point T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

template <std::floating_point T>
std::size_t Tensor<T>::dim(int axis) const {
    const auto r = static_cast<int>(rank());
    const int a = axis < 0 ? r + axis : axis;
    if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
    return shape()[static_cast<std::size_t>(a)];
}

template <std::floating_point T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node().data[0];
}

template <std::floating_point T>
std::span<const T> Tensor<T>::grad() const& {
    auto& n = node();
    if (n.grad.empty()) n.grad.assign(n.data.size(), T(0));
    return n.grad;
}

template <std::floating_point T>
void Tensor<T>::zero_grad() {
    auto& n = node();
    std::fill(n.grad.begin(), n.grad.end(), T(0));
}

namespace {

// Nodes reachable from root that take gradients, parents before children.
template <typename T>
std::vector<Node<T>*> topological_order(Node<T>& root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root, 0}};
    seen.insert(&root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace

template <std::floating_point T>
void Tensor<T>::backward() {
    auto& root = node();
    if (root.data.size() != 1) throw GraphError("backward() needs a scalar, got " + shape_string(root.shape));
    if (!root.requires_grad) throw GraphError("backward() on a tensor that does not require gradients");

    const auto order = topological_order(root);
    for (auto* n : order) {
        if (n->consumed) throw GraphError("backward() already ran over this graph; call reset_graph() first");
    }
    root.grad_buffer()[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->backward) continue;
        if (!n->grad.empty()) n->backward(*n);
        n->consumed = true;
    }
}

template <std::floating_point T>
void Tensor<T>::reset_graph() {
    auto& root = node();
    if (!root.requires_grad) return;
    for (auto* n : topological_order(root)) {
        if (!n->backward) continue;
        n->consumed = false;
        n->grad.clear();
    }
}

template <std::floating_point T>
Tensor<T> Tensor<T>::detach() const {
    return from(shape(), to_vector(), false);
}

// ---------------------------------------------------------------- elementwise

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    REQUIRE_SHAPE(bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin()),
               "add: shape " + shape_string(bs) + " does not match the trailing axes of " + shape_string(as));
    const std::size_t inner = b.numel();
    const std::size_t outer = a.numel() / std::max<std::size_t>(inner, 1);
    Buffer<T> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t o = 0; o < outer; ++o) {
        T* row = out.data() + (o * inner);
        for (std::size_t i = 0; i < inner; ++i) row[i] += bd[i];
    }
    return make_result<T>(as, std::move(out), {&a, &b}, [outer, inner](Node<T>& self) {
        const T* g = self.grad.data();
        if (T* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < outer * inner; ++i) ga[i] += g[i];
        }
        if (T* gb = parent_grad(self, 1)) {
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t i = 0; i < inner; ++i) gb[i] += g[(o * inner) + i];
            }
        }
    });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, scale(b, T(-1)));
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    REQUIRE_SHAPE(a.shape() == b.shape(), "mul: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    const auto ad = a.data();
    const auto bd = b.data();
    Buffer<T> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        const T* g = self.grad.data();
        if (T* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (T* gb = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < av.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    Buffer<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= factor;
    return make_result<T>(x.shape(), std::move(out), {&x}, [factor](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += factor * self.grad[i];
    });
}

namespace {

template <typename T>
using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;

template <typename T>
using MapArr = Eigen::Map<Arr<T>>;

template <typename T>
using CMapArr = Eigen::Map<const Arr<T>>;

// Pointwise activation from vectorized value and derivative expressions.
template <typename T, typename F, typename DF>
Tensor<T> pointwise(const Tensor<T>& x, F f, DF df) {
    Buffer<T> out(x.numel());
    MapArr<T>(out.data(), out.size()) = f(CMapArr<T>(x.data().data(), x.numel()));
    return make_result<T>(x.shape(), std::move(out), {&x}, [df](Node<T>& self) {
        const auto n = self.grad.size();
        MapArr<T>(parent_grad(self, 0), n) +=
            CMapArr<T>(self.grad.data(), n) * df(CMapArr<T>(self.parents[0]->data.data(), n));
    });
}

}  // namespace

template <std::floating_point T>
Tensor<T> silu(const Tensor<T>& x) {
    return pointwise(
        x, [](const auto& v) -> Arr<T> { return v / (T(1) + (-v).exp()); },
        [](const auto& v) -> Arr<T> {
            const Arr<T> s = T(1) / (T(1) + (-v).exp());
            return s * (T(1) + v * (T(1) - s));
        });
}

template <class T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2 / pi)
template <class T>
constexpr T kGeluA = T(0.044715);

template <std::floating_point T>
Tensor<T> gelu(const Tensor<T>& x) {
    return pointwise(
        x, [](const auto& v) -> Arr<T> { return T(0.5) * v * (T(1) + (kGeluC<T> * (v + kGeluA<T> * v.cube())).tanh()); },
        [](const auto& v) -> Arr<T> {
            const Arr<T> t = (kGeluC<T> * (v + kGeluA<T> * v.cube())).tanh();
            return T(0.5) * (T(1) + t) +
                   T(0.5) * v * (T(1) - t.square()) * kGeluC<T> * (T(1) + T(3) * kGeluA<T> * v.square());
        });
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& x) {
    return pointwise(
        x, [](const auto& v) -> Arr<T> { return v.max(T(0)); },
        [](const auto& v) -> Arr<T> { return (v > T(0)).template cast<T>(); });
}

// ---------------------------------------------------------------- linear algebra

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    REQUIRE_SHAPE(as.size() >= 2 && bs.size() >= 2, "matmul: operands need rank >= 2");
    const std::size_t m = as[as.size() - 2];
    const std::size_t k = as.back();
    const std::size_t n = bs.back();
    REQUIRE_SHAPE(bs[bs.size() - 2] == k,
               "matmul: inner dimensions of " + shape_string(as) + " and " + shape_string(bs) + " differ");
    Shape out_shape = as;
    out_shape.back() = n;

    if (bs.size() == 2) {
        // Right operand shared by every leading index: one tall GEMM.
        const std::size_t rows = a.numel() / std::max<std::size_t>(k, 1);
        Buffer<T> out(rows * n);
        Mat<T>(out.data(), rows, n).noalias() = CMat<T>(a.data().data(), rows, k) * CMat<T>(b.data().data(), k, n);
        return make_result<T>(out_shape, std::move(out), {&a, &b}, [rows, k, n](Node<T>& self) {
            CMat<T> g(self.grad.data(), rows, n);
            if (T* ga = parent_grad(self, 0)) {
                Mat<T>(ga, rows, k).noalias() += g * CMat<T>(self.parents[1]->data.data(), k, n).transpose();
            }
            if (T* gb = parent_grad(self, 1)) {
                Mat<T>(gb, k, n).noalias() += CMat<T>(self.parents[0]->data.data(), rows, k).transpose() * g;
            }
        });
    }

    REQUIRE_SHAPE(bs.size() == as.size() && std::equal(as.begin(), as.end() - 2, bs.begin()),
               "matmul: batch dimensions of " + shape_string(as) + " and " + shape_string(bs) + " differ");
    const std::size_t batch = shape_size(leading(as, 2));
    Buffer<T> out(batch * m * n);
    const T* ad = a.data().data();
    const T* bd = b.data().data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(batch); ++i) {
        const auto bi = static_cast<std::size_t>(i);
        Mat<T>(out.data() + (bi * m * n), m, n).noalias() =
            CMat<T>(ad + (bi * m * k), m, k) * CMat<T>(bd + (bi * k * n), k, n);
    }
    return make_result<T>(out_shape, std::move(out), {&a, &b}, [batch, m, k, n](Node<T>& self) {
        T* ga = parent_grad(self, 0);
        T* gb = parent_grad(self, 1);
        const T* av = self.parents[0]->data.data();
        const T* bv = self.parents[1]->data.data();
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(batch); ++i) {
            const auto bi = static_cast<std::size_t>(i);
            CMat<T> g(self.grad.data() + (bi * m * n), m, n);
            if (ga) Mat<T>(ga + (bi * m * k), m, k).noalias() += g * CMat<T>(bv + (bi * k * n), k, n).transpose();
            if (gb) Mat<T>(gb + (bi * k * n), k, n).noalias() += CMat<T>(av + (bi * m * k), m, k).transpose() * g;
        }
    });
}

template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    REQUIRE_SHAPE(x.rank() >= 1 && weight.rank() == 2 && x.dim(-1) == weight.dim(0) &&
                      bias.shape() == Shape{weight.dim(1)},
                  "linear: " + shape_string(x.shape()) + " with weight " + shape_string(weight.shape()) +
                      " and bias " + shape_string(bias.shape()));
    const std::size_t k = weight.dim(0);
    const std::size_t n = weight.dim(1);
    const std::size_t rows = x.numel() / k;
    Shape out_shape = x.shape();
    out_shape.back() = n;
    Buffer<T> out(rows * n);
    Mat<T> o(out.data(), rows, n);
    o.noalias() = CMat<T>(x.data().data(), rows, k) * CMat<T>(weight.data().data(), k, n);
    o.rowwise() += CVec<T>(bias.data().data(), n).transpose();
    return make_result<T>(std::move(out_shape), std::move(out), {&x, &weight, &bias}, [rows, k, n](Node<T>& self) {
        CMat<T> g(self.grad.data(), rows, n);
        if (T* gx = parent_grad(self, 0)) {
            Mat<T>(gx, rows, k).noalias() += g * CMat<T>(self.parents[1]->data.data(), k, n).transpose();
        }
        if (T* gw = parent_grad(self, 1)) {
            Mat<T>(gw, k, n).noalias() += CMat<T>(self.parents[0]->data.data(), rows, k).transpose() * g;
        }
        if (T* gb = parent_grad(self, 2)) Vec<T>(gb, n) += g.colwise().sum().transpose();
    });
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& x) {
    const auto& s = x.shape();
    REQUIRE_SHAPE(s.size() >= 2, "transpose: rank must be at least 2");
    const std::size_t r = s[s.size() - 2];
    const std::size_t c = s.back();
    const std::size_t batch = x.numel() / std::max<std::size_t>(r * c, 1);
    Shape out_shape = s;
    std::swap(out_shape[s.size() - 2], out_shape.back());
    Buffer<T> out(x.numel());
    const T* xd = x.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        Mat<T>(out.data() + (b * r * c), c, r) = CMat<T>(xd + (b * r * c), r, c).transpose();
    }
    return make_result<T>(out_shape, std::move(out), {&x}, [batch, r, c](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        for (std::size_t b = 0; b < batch; ++b) {
            Mat<T>(gx + (b * r * c), r, c) += CMat<T>(self.grad.data() + (b * r * c), c, r).transpose();
        }
    });
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    REQUIRE_SHAPE(shape_size(shape) == x.numel(),
               "reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
    return make_result<T>(std::move(shape), Buffer<T>(x.data().begin(), x.data().end()), {&x}, [](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------- time / batch axes

template <std::floating_point T>
Tensor<T> concat_time(const Tensor<T>& a, const Tensor<T>& b) {
    REQUIRE_SHAPE(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
               "concat_time: " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    const std::size_t batch = a.dim(0);
    const std::size_t la = a.dim(1);
    const std::size_t lb = b.dim(1);
    const std::size_t d = a.dim(2);
    Buffer<T> out(batch * (la + lb) * d);
    for (std::size_t i = 0; i < batch; ++i) {
        std::copy_n(a.data().data() + (i * la * d), la * d, out.data() + (i * (la + lb) * d));
        std::copy_n(b.data().data() + (i * lb * d), lb * d, out.data() + (i * (la + lb) * d) + (la * d));
    }
    return make_result<T>({batch, la + lb, d}, std::move(out), {&a, &b}, [batch, la, lb, d](Node<T>& self) {
        T* ga = parent_grad(self, 0);
        T* gb = parent_grad(self, 1);
        for (std::size_t i = 0; i < batch; ++i) {
            const T* g = self.grad.data() + (i * (la + lb) * d);
            if (ga) {
                for (std::size_t j = 0; j < la * d; ++j) ga[(i * la * d) + j] += g[j];
            }
            if (gb) {
                for (std::size_t j = 0; j < lb * d; ++j) gb[(i * lb * d) + j] += g[(la * d) + j];
            }
        }
    });
}

template <std::floating_point T>
Tensor<T> slice_time(const Tensor<T>& x, std::size_t start, std::size_t len) {
    REQUIRE_SHAPE(x.rank() == 3 && start + len <= x.dim(1),
               "slice_time: [" + std::to_string(start) + ", " + std::to_string(start + len) + ") of " +
                   shape_string(x.shape()));
    const std::size_t batch = x.dim(0);
    const std::size_t l = x.dim(1);
    const std::size_t d = x.dim(2);
    Buffer<T> out(batch * len * d);
    for (std::size_t i = 0; i < batch; ++i) {
        std::copy_n(x.data().data() + (((i * l) + start) * d), len * d, out.data() + (i * len * d));
    }
    return make_result<T>({batch, len, d}, std::move(out), {&x}, [batch, l, d, start, len](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t j = 0; j < len * d; ++j) gx[(((i * l) + start) * d) + j] += self.grad[(i * len * d) + j];
        }
    });
}

template <std::floating_point T>
Tensor<T> expand_batch(const Tensor<T>& x, std::size_t batch) {
    Shape out_shape{batch};
    out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
    const std::size_t n = x.numel();
    Buffer<T> out(batch * n);
    for (std::size_t i = 0; i < batch; ++i) std::copy_n(x.data().data(), n, out.data() + (i * n));
    return make_result<T>(std::move(out_shape), std::move(out), {&x}, [batch, n](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t j = 0; j < n; ++j) gx[j] += self.grad[(i * n) + j];
        }
    });
}

template <std::floating_point T>
Tensor<T> mean_time(const Tensor<T>& x) {
    REQUIRE_SHAPE(x.rank() == 3 && x.dim(1) > 0, "mean_time: expected [B x L x d], got " + shape_string(x.shape()));
    const std::size_t batch = x.dim(0);
    const std::size_t l = x.dim(1);
    const std::size_t d = x.dim(2);
    Buffer<T> out(batch * d, T(0));
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t t = 0; t < l; ++t) {
            for (std::size_t j = 0; j < d; ++j) out[(i * d) + j] += x.data()[(((i * l) + t) * d) + j];
        }
    }
    for (auto& v : out) v /= static_cast<T>(l);
    return make_result<T>({batch, d}, std::move(out), {&x}, [batch, l, d](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        const T inv = T(1) / static_cast<T>(l);
        for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t t = 0; t < l; ++t) {
                for (std::size_t j = 0; j < d; ++j) gx[(((i * l) + t) * d) + j] += self.grad[(i * d) + j] * inv;
            }
        }
    });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& x) {
    const auto xd = x.data();
    const T total = std::accumulate(xd.begin(), xd.end(), T(0));
    return make_result<T>({}, {total}, {&x}, [](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        const T g = self.grad[0];
        for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) gx[i] += g;
    });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& x) {
    REQUIRE_SHAPE(x.numel() > 0, "mean: empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <std::floating_point T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
    REQUIRE_SHAPE(x.rank() == 3 && heads > 0 && x.dim(2) % heads == 0,
               "split_heads: " + shape_string(x.shape()) + " into " + std::to_string(heads) + " heads");
    const std::size_t batch = x.dim(0);
    const std::size_t l = x.dim(1);
    const std::size_t d = x.dim(2);
    const std::size_t dh = d / heads;
    Buffer<T> out(x.numel());
    const T* xd = x.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < l; ++t) {
                std::copy_n(xd + (((b * l) + t) * d) + (h * dh), dh, out.data() + ((((b * heads) + h) * l + t) * dh));
            }
        }
    }
    return make_result<T>({batch * heads, l, dh}, std::move(out), {&x}, [batch, heads, l, d, dh](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t t = 0; t < l; ++t) {
                    const T* g = self.grad.data() + ((((b * heads) + h) * l + t) * dh);
                    T* dst = gx + (((b * l) + t) * d) + (h * dh);
                    for (std::size_t e = 0; e < dh; ++e) dst[e] += g[e];
                }
            }
        }
    });
}

template <std::floating_point T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
    REQUIRE_SHAPE(x.rank() == 3 && heads > 0 && x.dim(0) % heads == 0,
               "merge_heads: " + shape_string(x.shape()) + " from " + std::to_string(heads) + " heads");
    const std::size_t batch = x.dim(0) / heads;
    const std::size_t l = x.dim(1);
    const std::size_t dh = x.dim(2);
    const std::size_t d = dh * heads;
    Buffer<T> out(x.numel());
    const T* xd = x.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < l; ++t) {
                std::copy_n(xd + ((((b * heads) + h) * l + t) * dh), dh, out.data() + (((b * l) + t) * d) + (h * dh));
            }
        }
    }
    return make_result<T>({batch, l, d}, std::move(out), {&x}, [batch, heads, l, d, dh](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t t = 0; t < l; ++t) {
                    const T* g = self.grad.data() + (((b * l) + t) * d) + (h * dh);
                    T* dst = gx + ((((b * heads) + h) * l + t) * dh);
                    for (std::size_t e = 0; e < dh; ++e) dst[e] += g[e];
                }
            }
        }
    });
}

// ---------------------------------------------------------------- normalization

template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& x) {
    REQUIRE_SHAPE(x.rank() >= 1 && x.dim(-1) > 0, "softmax: empty last axis");
    const std::size_t n = x.dim(-1);
    const std::size_t rows = x.numel() / n;
    Buffer<T> out(x.numel());
    const T* xd = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xd + (r * n);
        const T mx = *std::max_element(in, in + n);
        for (std::size_t j = 0; j < n; ++j) out[(r * n) + j] = in[j] - mx;
    }
    MapArr<T> all(out.data(), out.size());
    all = all.exp();
    constexpr T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xd + (r * n);
        T* o = out.data() + (r * n);
        T total = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            // The vectorized exp clamps its argument, so masked entries are zeroed here.
            if (in[j] == neg_inf) o[j] = T(0);
            total += o[j];
        }
        const T inv = T(1) / total;
        for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
    }
    return make_result<T>(x.shape(), std::move(out), {&x}, [rows, n](Node<T>& self) {
        T* gx = parent_grad(self, 0);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(rows); ++ri) {
            const auto r = static_cast<std::size_t>(ri);
            const T* y = self.data.data() + (r * n);
            const T* g = self.grad.data() + (r * n);
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) gx[(r * n) + j] += y[j] * (g[j] - dot);
        }
    });
}

template <std::floating_point T>
Tensor<T> causal_mask(const Tensor<T>& x) {
    REQUIRE_SHAPE(x.rank() >= 2 && x.dim(-1) == x.dim(-2), "causal_mask: expected square trailing axes, got " +
                                                               shape_string(x.shape()));
    const std::size_t l = x.dim(-1);
    const std::size_t blocks = x.numel() / std::max<std::size_t>(l * l, 1);
    Buffer<T> out(x.data().begin(), x.data().end());
    for (std::size_t b = 0; b < blocks; ++b) {
        for (std::size_t i = 0; i < l; ++i) {
            for (std::size_t j = i + 1; j < l; ++j) out[(b * l * l) + (i * l) + j] = -std::numeric_limits<T>::infinity();
        }
    }
    return make_result<T>(x.shape(), std::move(out), {&x}, [blocks, l](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        for (std::size_t b = 0; b < blocks; ++b) {
            for (std::size_t i = 0; i < l; ++i) {
                for (std::size_t j = 0; j <= i; ++j) gx[(b * l * l) + (i * l) + j] += self.grad[(b * l * l) + (i * l) + j];
            }
        }
    });
}

template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps) {
    REQUIRE_SHAPE(x.rank() >= 1 && x.dim(-1) > 0, "layer_norm: zero-length normalized axis");
    const std::size_t d = x.dim(-1);
    REQUIRE_SHAPE(gain.shape() == Shape{d} && shift.shape() == Shape{d},
               "layer_norm: gain/shift must be [" + std::to_string(d) + "]");
    if (!(eps > T(0))) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / d;

    auto xhat = std::make_shared<Buffer<T>>(x.numel());
    auto inv_std = std::make_shared<Buffer<T>>(rows);
    Buffer<T> out(x.numel());
    const T* xd = x.data().data();
    const T* g = gain.data().data();
    const T* s = shift.data().data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(rows); ++ri) {
        const auto r = static_cast<std::size_t>(ri);
        const T* in = xd + (r * d);
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += in[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (in[j] - mu) * inv;
            (*xhat)[(r * d) + j] = h;
            out[(r * d) + j] = h * g[j] + s[j];
        }
    }
    return make_result<T>(x.shape(), std::move(out), {&x, &gain, &shift}, [rows, d, xhat, inv_std](Node<T>& self) {
        const T* gy = self.grad.data();
        const T* gv = self.parents[1]->data.data();
        if (T* gx = parent_grad(self, 0)) {
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(rows); ++ri) {
                const auto r = static_cast<std::size_t>(ri);
                T mean_g = T(0);
                T mean_gh = T(0);
                for (std::size_t j = 0; j < d; ++j) {
                    const T gh = gy[(r * d) + j] * gv[j];
                    mean_g += gh;
                    mean_gh += gh * (*xhat)[(r * d) + j];
                }
                mean_g /= static_cast<T>(d);
                mean_gh /= static_cast<T>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const T gh = gy[(r * d) + j] * gv[j];
                    gx[(r * d) + j] += (*inv_std)[r] * (gh - mean_g - (*xhat)[(r * d) + j] * mean_gh);
                }
            }
        }
        T* ggain = parent_grad(self, 1);
        T* gshift = parent_grad(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                if (ggain) ggain[j] += gy[(r * d) + j] * (*xhat)[(r * d) + j];
                if (gshift) gshift[j] += gy[(r * d) + j];
            }
        }
    });
}

// ---------------------------------------------------------------- convolution

template <std::floating_point T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
    REQUIRE_SHAPE(x.rank() == 3 && kernel.rank() == 3, "conv1d: expected x [B x L x Cin] and kernel [K x Cin x Cout]");
    const std::size_t batch = x.dim(0);
    const std::size_t l = x.dim(1);
    const std::size_t cin = x.dim(2);
    const std::size_t ks = kernel.dim(0);
    const std::size_t cout = kernel.dim(2);
    REQUIRE_SHAPE(kernel.dim(1) == cin, "conv1d: kernel expects " + std::to_string(kernel.dim(1)) +
                                         " input channels, input has " + std::to_string(cin));
    REQUIRE_SHAPE(ks % 2 == 1, "conv1d: kernel size must be odd");
    REQUIRE_SHAPE(bias.shape() == Shape{cout}, "conv1d: bias must be [" + std::to_string(cout) + "]");
    const std::size_t pad = ks / 2;

    // Rows t of the output that see input row t + k - pad for tap k.
    auto valid = [l, pad](std::size_t k) {
        const std::size_t lo = k < pad ? pad - k : 0;
        const std::size_t hi = l + pad > k ? std::min(l, l + pad - k) : 0;
        return std::pair{lo, hi > lo ? hi - lo : 0};
    };

    Buffer<T> out(batch * l * cout);
    const T* xd = x.data().data();
    const T* wd = kernel.data().data();
    const T* bd = bias.data().data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(batch); ++bi) {
        const auto b = static_cast<std::size_t>(bi);
        Mat<T> o(out.data() + (b * l * cout), l, cout);
        o.rowwise() = CVec<T>(bd, cout).transpose();
        for (std::size_t k = 0; k < ks; ++k) {
            const auto [t0, cnt] = valid(k);
            if (cnt == 0) continue;
            o.middleRows(t0, cnt).noalias() +=
                CMat<T>(xd + (((b * l) + t0 + k - pad) * cin), cnt, cin) * CMat<T>(wd + (k * cin * cout), cin, cout);
        }
    }
    return make_result<T>({batch, l, cout}, std::move(out), {&x, &kernel, &bias},
                          [batch, l, cin, cout, ks, pad, valid](Node<T>& self) {
        const T* xv = self.parents[0]->data.data();
        const T* wv = self.parents[1]->data.data();
        T* gx = parent_grad(self, 0);
        T* gw = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        if (gx) {
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(batch); ++bi) {
                const auto b = static_cast<std::size_t>(bi);
                CMat<T> g(self.grad.data() + (b * l * cout), l, cout);
                for (std::size_t k = 0; k < ks; ++k) {
                    const auto [t0, cnt] = valid(k);
                    if (cnt == 0) continue;
                    Mat<T>(gx + (((b * l) + t0 + k - pad) * cin), cnt, cin).noalias() +=
                        g.middleRows(t0, cnt) * CMat<T>(wv + (k * cin * cout), cin, cout).transpose();
                }
            }
        }
        for (std::size_t b = 0; b < batch; ++b) {
            CMat<T> g(self.grad.data() + (b * l * cout), l, cout);
            if (gw) {
                for (std::size_t k = 0; k < ks; ++k) {
                    const auto [t0, cnt] = valid(k);
                    if (cnt == 0) continue;
                    Mat<T>(gw + (k * cin * cout), cin, cout).noalias() +=
                        CMat<T>(xv + (((b * l) + t0 + k - pad) * cin), cnt, cin).transpose() * g.middleRows(t0, cnt);
                }
            }
            if (gb) Vec<T>(gb, cout) += g.colwise().sum().transpose();
        }
    });
}

// ---------------------------------------------------------------- regularization / loss

template <std::floating_point T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must be in [0, 1)");
    if (!training || p == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    // Each 64-bit draw decides four elements through 16-bit fields.
    const auto cut = static_cast<std::uint64_t>(std::llround(p * 65536.0));
    auto mask = std::make_shared<Buffer<T>>(x.numel());
    Buffer<T> out(x.numel());
    const T* xd = x.data().data();
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (i % 4 == 0) bits = rng.next();
        const bool keep = ((bits >> (16 * (i % 4))) & 0xffffU) >= cut;
        (*mask)[i] = keep ? keep_scale : T(0);
        out[i] = xd[i] * (*mask)[i];
    }
    return make_result<T>(x.shape(), std::move(out), {&x}, [mask](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * (*mask)[i];
    });
}

template <std::floating_point T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, std::span<const int> labels, std::array<T, 2> class_weights) {
    REQUIRE_SHAPE(logits.rank() == 2 && logits.dim(1) == 2, "cross_entropy_logits: logits must be [B x 2], got " +
                                                             shape_string(logits.shape()));
    const std::size_t batch = logits.dim(0);
    REQUIRE_SHAPE(labels.size() == batch && batch > 0, "cross_entropy_logits: label count does not match batch");
    if (!(class_weights[0] > T(0) && class_weights[1] > T(0))) {
        throw std::invalid_argument("cross_entropy_logits: class weights must be positive");
    }
    auto probs = std::make_shared<Buffer<T>>(batch * 2);
    auto ys = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
    T total = T(0);
    const T* z = logits.data().data();
    for (std::size_t i = 0; i < batch; ++i) {
        const int y = labels[i];
        if (y != 0 && y != 1) throw std::invalid_argument("cross_entropy_logits: label " + std::to_string(y) + " is not 0 or 1");
        const T mx = std::max(z[2 * i], z[(2 * i) + 1]);
        const T e0 = std::exp(z[2 * i] - mx);
        const T e1 = std::exp(z[(2 * i) + 1] - mx);
        const T lse = mx + std::log(e0 + e1);
        (*probs)[2 * i] = e0 / (e0 + e1);
        (*probs)[(2 * i) + 1] = e1 / (e0 + e1);
        total += class_weights[static_cast<std::size_t>(y)] * (lse - z[(2 * i) + static_cast<std::size_t>(y)]);
    }
    total /= static_cast<T>(batch);
    return make_result<T>({}, {total}, {&logits}, [batch, probs, ys, class_weights](Node<T>& self) {
        T* gz = parent_grad(self, 0);
        const T g = self.grad[0] / static_cast<T>(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            const auto y = static_cast<std::size_t>((*ys)[i]);
            const T w = class_weights[y] * g;
            for (std::size_t j = 0; j < 2; ++j) gz[(2 * i) + j] += w * ((*probs)[(2 * i) + j] - (j == y ? T(1) : T(0)));
        }
    });
}

// ---------------------------------------------------------------- instantiations

#define SURGECAST_INSTANTIATE(T)                                                                          \
    template class Tensor<T>;                                                                             \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> scale(const Tensor<T>&, T);                                                        \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> transpose(const Tensor<T>&);                                                       \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                  \
    template Tensor<T> concat_time(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> slice_time(const Tensor<T>&, std::size_t, std::size_t);                            \
    template Tensor<T> expand_batch(const Tensor<T>&, std::size_t);                                       \
    template Tensor<T> mean_time(const Tensor<T>&);                                                       \
    template Tensor<T> sum(const Tensor<T>&);                                                             \
    template Tensor<T> mean(const Tensor<T>&);                                                            \
    template Tensor<T> split_heads(const Tensor<T>&, std::size_t);                                        \
    template Tensor<T> merge_heads(const Tensor<T>&, std::size_t);                                        \
    template Tensor<T> softmax(const Tensor<T>&);                                                         \
    template Tensor<T> causal_mask(const Tensor<T>&);                                                     \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);               \
    template Tensor<T> silu(const Tensor<T>&);                                                            \
    template Tensor<T> gelu(const Tensor<T>&);                                                            \
    template Tensor<T> relu(const Tensor<T>&);                                                            \
    template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> dropout(const Tensor<T>&, double, Rng&, bool);                                     \
    template Tensor<T> cross_entropy_logits(const Tensor<T>&, std::span<const int>, std::array<T, 2>);

SURGECAST_INSTANTIATE(float)
SURGECAST_INSTANTIATE(double)

#undef SURGECAST_INSTANTIATE

}  // namespace surgecast
