#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Templated on the scalar type: training runs in float, gradient checks and
// anything that feeds statistics runs in double. Every op uses a fixed
// sequential reduction order, so identical inputs produce bit-identical
// outputs. A forward op records its parents and a backward closure on the
// result node; Tensor::backward() walks the graph once in reverse topological
// order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "citemtl/rng.hpp"

namespace citemtl {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// Thread-local gradient mode. Inference paths wrap themselves in NoGradGuard
// so forward ops skip graph construction.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
    bool backward_done = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
    // True if backward must deposit a gradient here: either a trainable leaf
    // or an interior node that passes gradients further up.
    bool needs_grad() const { return requires_grad || static_cast<bool>(backward_fn); }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->data.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
        t.node_->shape = std::move(shape);
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return full({1}, value); }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
            throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(data.size()) + " data elements");
        }
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        return t;
    }

    // Normal(0, stddev) truncated at 4 sigma; the init used for all weights.
    static Tensor trunc_normal(Shape shape, Rng& rng, double stddev) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.node_->data) v = static_cast<T>(rng.next_trunc_normal(stddev));
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
    std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<T>& grad() { return node_->ensure_grad(); }
    const std::vector<T>& grad_view() const { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    T item() const {
        if (numel() != 1) {
            throw std::invalid_argument("item: tensor has shape " + shape_str(node_->shape) +
                                        ", expected a single element");
        }
        return node_->data[0];
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
        node_->backward_done = false;
    }

    // Reverse-mode sweep from a scalar loss. Calling backward twice on the
    // same graph is an error; build a new forward graph per step.
    void backward() {
        if (numel() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(node_->shape));
        }
        if (node_->backward_done) {
            throw std::logic_error(
                "backward: graph already consumed; run a new forward pass before calling "
                "backward again");
        }
        std::vector<TensorNode<T>*> order;
        topo_sort(order);
        node_->ensure_grad()[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode<T>* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn();
        }
        node_->backward_done = true;
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }

    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

private:
    // Iterative post-order DFS; each node appears exactly once.
    void topo_sort(std::vector<TensorNode<T>*>& order) const {
        std::unordered_set<TensorNode<T>*> visited;
        std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next_child] = stack.back();
            if (next_child < n->parents.size()) {
                TensorNode<T>* p = n->parents[next_child].get();
                ++next_child;
                if (visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

// Build an op result node. Parents and the backward closure are recorded only
// when grad mode is on and some parent actually participates in training.
template <typename T, typename BackwardFactory>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> parents,
                      BackwardFactory&& make_backward) {
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(data));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& p : parents) {
        if (p.node()->needs_grad()) {
            any = true;
            break;
        }
    }
    if (!any) return out;
    auto out_node = out.node();
    for (auto& p : parents) out_node->parents.push_back(p.node());
    out_node->backward_fn = make_backward(out_node.get());
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// C[m,n] = A[m,k] * B[k,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    }
    const std::int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::int64_t i = 0; i < m; ++i) {
        T* po = out.data() + i * n;
        const T* pai = pa + i * k;
        for (std::int64_t t = 0; t < k; ++t) {
            const T av = pai[t];
            const T* pbt = pb + t * n;
            for (std::int64_t j = 0; j < n; ++j) po[j] += av * pbt[j];
        }
    }
    return detail::make_result<T>(
        {m, n}, std::move(out), {a, b}, [a, b, m, k, n](TensorNode<T>* out_node) {
            return [a, b, m, k, n, out_node]() {
                const T* g = out_node->grad.data();
                auto an = a.node();
                auto bn = b.node();
                if (an->needs_grad()) {
                    T* ga = an->ensure_grad().data();
                    const T* pb = bn->data.data();
                    for (std::int64_t i = 0; i < m; ++i) {
                        const T* gi = g + i * n;
                        T* gai = ga + i * k;
                        for (std::int64_t t = 0; t < k; ++t) {
                            const T* pbt = pb + t * n;
                            T acc = T(0);
                            for (std::int64_t j = 0; j < n; ++j) acc += gi[j] * pbt[j];
                            gai[t] += acc;
                        }
                    }
                }
                if (bn->needs_grad()) {
                    T* gb = bn->ensure_grad().data();
                    const T* pa = an->data.data();
                    for (std::int64_t i = 0; i < m; ++i) {
                        const T* gi = g + i * n;
                        const T* pai = pa + i * k;
                        for (std::int64_t t = 0; t < k; ++t) {
                            const T av = pai[t];
                            T* gbt = gb + t * n;
                            for (std::int64_t j = 0; j < n; ++j) gbt[j] += av * gi[j];
                        }
                    }
                }
            };
        });
}

// Batched C[b] = A[b] * B[b], A: [N,m,k], B: [N,k,n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[0] != b.shape()[0] ||
        a.shape()[2] != b.shape()[1]) {
        throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    const std::int64_t N = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
    std::vector<T> out(static_cast<std::size_t>(N * m * n), T(0));
    for (std::int64_t bi = 0; bi < N; ++bi) {
        const T* pa = a.data().data() + bi * m * k;
        const T* pb = b.data().data() + bi * k * n;
        T* po = out.data() + bi * m * n;
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t t = 0; t < k; ++t) {
                const T av = pa[i * k + t];
                const T* pbt = pb + t * n;
                T* poi = po + i * n;
                for (std::int64_t j = 0; j < n; ++j) poi[j] += av * pbt[j];
            }
        }
    }
    return detail::make_result<T>(
        {N, m, n}, std::move(out), {a, b}, [a, b, N, m, k, n](TensorNode<T>* out_node) {
            return [a, b, N, m, k, n, out_node]() {
                const T* g = out_node->grad.data();
                auto an = a.node();
                auto bn = b.node();
                if (an->needs_grad()) {
                    T* ga = an->ensure_grad().data();
                    const T* pb = bn->data.data();
                    for (std::int64_t bi = 0; bi < N; ++bi) {
                        const T* gB = g + bi * m * n;
                        const T* pbB = pb + bi * k * n;
                        T* gaB = ga + bi * m * k;
                        for (std::int64_t i = 0; i < m; ++i) {
                            for (std::int64_t t = 0; t < k; ++t) {
                                const T* pbt = pbB + t * n;
                                const T* gi = gB + i * n;
                                T acc = T(0);
                                for (std::int64_t j = 0; j < n; ++j) acc += gi[j] * pbt[j];
                                gaB[i * k + t] += acc;
                            }
                        }
                    }
                }
                if (bn->needs_grad()) {
                    T* gb = bn->ensure_grad().data();
                    const T* pa = an->data.data();
                    for (std::int64_t bi = 0; bi < N; ++bi) {
                        const T* gB = g + bi * m * n;
                        const T* paB = pa + bi * m * k;
                        T* gbB = gb + bi * k * n;
                        for (std::int64_t i = 0; i < m; ++i) {
                            const T* gi = gB + i * n;
                            for (std::int64_t t = 0; t < k; ++t) {
                                const T av = paB[i * k + t];
                                T* gbt = gbB + t * n;
                                for (std::int64_t j = 0; j < n; ++j) gbt[j] += av * gi[j];
                            }
                        }
                    }
                }
            };
        });
}

// Batched C[b] = scale * A[b] * B[b]^T, A: [N,m,k], B: [N,n,k].
// This is the attention-score product; rows of A and B are contiguous.
template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b, T scale) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[0] != b.shape()[0] ||
        a.shape()[2] != b.shape()[2]) {
        throw std::invalid_argument("bmm_nt: incompatible shapes " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()) + "^T");
    }
    const std::int64_t N = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[1];
    std::vector<T> out(static_cast<std::size_t>(N * m * n));
    for (std::int64_t bi = 0; bi < N; ++bi) {
        const T* pa = a.data().data() + bi * m * k;
        const T* pb = b.data().data() + bi * n * k;
        T* po = out.data() + bi * m * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const T* pai = pa + i * k;
            for (std::int64_t j = 0; j < n; ++j) {
                const T* pbj = pb + j * k;
                T acc = T(0);
                for (std::int64_t t = 0; t < k; ++t) acc += pai[t] * pbj[t];
                po[i * n + j] = scale * acc;
            }
        }
    }
    return detail::make_result<T>(
        {N, m, n}, std::move(out), {a, b}, [a, b, N, m, k, n, scale](TensorNode<T>* out_node) {
            return [a, b, N, m, k, n, scale, out_node]() {
                const T* g = out_node->grad.data();
                auto an = a.node();
                auto bn = b.node();
                if (an->needs_grad()) {
                    // dA[b] = scale * dC[b] * B[b]
                    T* ga = an->ensure_grad().data();
                    const T* pb = bn->data.data();
                    for (std::int64_t bi = 0; bi < N; ++bi) {
                        const T* gB = g + bi * m * n;
                        const T* pbB = pb + bi * n * k;
                        T* gaB = ga + bi * m * k;
                        for (std::int64_t i = 0; i < m; ++i) {
                            const T* gi = gB + i * n;
                            T* gai = gaB + i * k;
                            for (std::int64_t j = 0; j < n; ++j) {
                                const T gv = scale * gi[j];
                                const T* pbj = pbB + j * k;
                                for (std::int64_t t = 0; t < k; ++t) gai[t] += gv * pbj[t];
                            }
                        }
                    }
                }
                if (bn->needs_grad()) {
                    // dB[b] = scale * dC[b]^T * A[b]
                    T* gb = bn->ensure_grad().data();
                    const T* pa = an->data.data();
                    for (std::int64_t bi = 0; bi < N; ++bi) {
                        const T* gB = g + bi * m * n;
                        const T* paB = pa + bi * m * k;
                        T* gbB = gb + bi * n * k;
                        for (std::int64_t i = 0; i < m; ++i) {
                            const T* gi = gB + i * n;
                            const T* pai = paB + i * k;
                            for (std::int64_t j = 0; j < n; ++j) {
                                const T gv = scale * gi[j];
                                T* gbj = gbB + j * k;
                                for (std::int64_t t = 0; t < k; ++t) gbj[t] += gv * pai[t];
                            }
                        }
                    }
                }
            };
        });
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape("add", a, b);
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b},
                                  [a, b](TensorNode<T>* out_node) {
                                      return [a, b, out_node]() {
                                          const T* g = out_node->grad.data();
                                          for (auto& pn : {a.node(), b.node()}) {
                                              if (!pn->needs_grad()) continue;
                                              T* gp = pn->ensure_grad().data();
                                              const std::size_t n = pn->data.size();
                                              for (std::size_t i = 0; i < n; ++i) gp[i] += g[i];
                                          }
                                      };
                                  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape("mul", a, b);
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_result<T>(
        a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>* out_node) {
            return [a, b, out_node]() {
                const T* g = out_node->grad.data();
                auto an = a.node();
                auto bn = b.node();
                if (an->needs_grad()) {
                    T* ga = an->ensure_grad().data();
                    for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g[i] * bn->data[i];
                }
                if (bn->needs_grad()) {
                    T* gb = bn->ensure_grad().data();
                    for (std::size_t i = 0; i < bn->data.size(); ++i) gb[i] += g[i] * an->data[i];
                }
            };
        });
}

// x * c for a constant c (not a learnable tensor).
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    std::vector<T> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
    return detail::make_result<T>(x.shape(), std::move(out), {x},
                                  [x, c](TensorNode<T>* out_node) {
                                      return [x, c, out_node]() {
                                          auto xn = x.node();
                                          if (!xn->needs_grad()) return;
                                          const T* g = out_node->grad.data();
                                          T* gx = xn->ensure_grad().data();
                                          for (std::size_t i = 0; i < xn->data.size(); ++i)
                                              gx[i] += g[i] * c;
                                      };
                                  });
}

// x[n,d] + bias[d], broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.shape().size() != 2 || bias.shape().size() != 1 || x.shape()[1] != bias.shape()[0]) {
        throw std::invalid_argument("add_bias: incompatible shapes " + shape_str(x.shape()) +
                                    " + " + shape_str(bias.shape()));
    }
    const std::int64_t n = x.shape()[0], d = x.shape()[1];
    std::vector<T> out(x.data().size());
    const T* px = x.data().data();
    const T* pb = bias.data().data();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) out[i * d + j] = px[i * d + j] + pb[j];
    return detail::make_result<T>(
        x.shape(), std::move(out), {x, bias}, [x, bias, n, d](TensorNode<T>* out_node) {
            return [x, bias, n, d, out_node]() {
                const T* g = out_node->grad.data();
                auto xn = x.node();
                auto bn = bias.node();
                if (xn->needs_grad()) {
                    T* gx = xn->ensure_grad().data();
                    for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g[i];
                }
                if (bn->needs_grad()) {
                    T* gb = bn->ensure_grad().data();
                    for (std::int64_t i = 0; i < n; ++i)
                        for (std::int64_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                }
            };
        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(new_shape));
    }
    std::vector<T> out = x.data();
    return detail::make_result<T>(std::move(new_shape), std::move(out), {x},
                                  [x](TensorNode<T>* out_node) {
                                      return [x, out_node]() {
                                          auto xn = x.node();
                                          if (!xn->needs_grad()) return;
                                          const T* g = out_node->grad.data();
                                          T* gx = xn->ensure_grad().data();
                                          for (std::size_t i = 0; i < xn->data.size(); ++i)
                                              gx[i] += g[i];
                                      };
                                  });
}

// Concatenate along axis 0; all inputs must agree on trailing dimensions.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Shape rest(xs[0].shape().begin() + 1, xs[0].shape().end());
    std::int64_t rows = 0;
    for (const auto& x : xs) {
        Shape r(x.shape().begin() + 1, x.shape().end());
        if (r != rest) {
            throw std::invalid_argument("concat_rows: trailing shape mismatch " +
                                        shape_str(xs[0].shape()) + " vs " + shape_str(x.shape()));
        }
        rows += x.shape()[0];
    }
    Shape out_shape;
    out_shape.push_back(rows);
    for (auto d : rest) out_shape.push_back(d);
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(shape_numel(out_shape)));
    for (const auto& x : xs) out.insert(out.end(), x.data().begin(), x.data().end());
    return detail::make_result<T>(
        std::move(out_shape), std::move(out), xs, [xs](TensorNode<T>* out_node) {
            return [xs, out_node]() {
                const T* g = out_node->grad.data();
                std::size_t offset = 0;
                for (const auto& x : xs) {
                    auto xn = x.node();
                    const std::size_t n = xn->data.size();
                    if (xn->needs_grad()) {
                        T* gx = xn->ensure_grad().data();
                        for (std::size_t i = 0; i < n; ++i) gx[i] += g[offset + i];
                    }
                    offset += n;
                }
            };
        });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

template <typename T>
inline T gelu_scalar(T x) {
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    const T u = c * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    std::vector<T> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(x.data()[i]);
    return detail::make_result<T>(
        x.shape(), std::move(out), {x}, [x](TensorNode<T>* out_node) {
            return [x, out_node]() {
                auto xn = x.node();
                if (!xn->needs_grad()) return;
                const T* g = out_node->grad.data();
                T* gx = xn->ensure_grad().data();
                const T c = T(0.7978845608028654);
                for (std::size_t i = 0; i < xn->data.size(); ++i) {
                    const T v = xn->data[i];
                    const T u = c * (v + T(0.044715) * v * v * v);
                    const T t = std::tanh(u);
                    const T du = c * (T(1) + T(3) * T(0.044715) * v * v);
                    const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
                    gx[i] += g[i] * d;
                }
            };
        });
}

// Layer normalization over the last dimension of x[n,d].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    if (x.shape().size() != 2 || gain.shape().size() != 1 || bias.shape().size() != 1 ||
        x.shape()[1] != gain.shape()[0] || x.shape()[1] != bias.shape()[0]) {
        throw std::invalid_argument("layer_norm: incompatible shapes " + shape_str(x.shape()) +
                                    ", gain " + shape_str(gain.shape()) + ", bias " +
                                    shape_str(bias.shape()));
    }
    const std::int64_t n = x.shape()[0], d = x.shape()[1];
    std::vector<T> out(x.data().size());
    std::vector<T> xhat(x.data().size());
    std::vector<T> inv_std(static_cast<std::size_t>(n));
    const T* px = x.data().data();
    const T* pg = gain.data().data();
    const T* pb = bias.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const T* row = px + i * d;
        T mean = T(0);
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= T(d);
        T var = T(0);
        for (std::int64_t j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        for (std::int64_t j = 0; j < d; ++j) {
            const T h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            out[i * d + j] = h * pg[j] + pb[j];
        }
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), {x, gain, bias},
        [x, gain, bias, n, d, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](TensorNode<T>* out_node) {
            return [x, gain, bias, n, d, xhat, inv_std, out_node]() {
                const T* g = out_node->grad.data();
                auto xn = x.node();
                auto gn = gain.node();
                auto bn = bias.node();
                if (gn->needs_grad()) {
                    T* gg = gn->ensure_grad().data();
                    for (std::int64_t i = 0; i < n; ++i)
                        for (std::int64_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                }
                if (bn->needs_grad()) {
                    T* gb = bn->ensure_grad().data();
                    for (std::int64_t i = 0; i < n; ++i)
                        for (std::int64_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                }
                if (xn->needs_grad()) {
                    T* gx = xn->ensure_grad().data();
                    const T* pg = gn->data.data();
                    for (std::int64_t i = 0; i < n; ++i) {
                        const T* gi = g + i * d;
                        const T* hi = xhat.data() + i * d;
                        T sum_gy = T(0), sum_gyh = T(0);
                        for (std::int64_t j = 0; j < d; ++j) {
                            const T gy = gi[j] * pg[j];
                            sum_gy += gy;
                            sum_gyh += gy * hi[j];
                        }
                        const T is = inv_std[static_cast<std::size_t>(i)];
                        const T inv_d = T(1) / T(d);
                        for (std::int64_t j = 0; j < d; ++j) {
                            const T gy = gi[j] * pg[j];
                            gx[i * d + j] +=
                                is * (gy - inv_d * sum_gy - hi[j] * inv_d * sum_gyh);
                        }
                    }
                }
            };
        });
}

// Softmax over the last dimension. Shift-invariant via max subtraction.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    if (x.shape().empty()) throw std::invalid_argument("softmax: scalar input");
    const std::int64_t k = x.shape().back();
    const std::int64_t rows = x.numel() / k;
    std::vector<T> out(x.data().size());
    const T* px = x.data().data();
    for (std::int64_t i = 0; i < rows; ++i) {
        const T* row = px + i * k;
        T mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (std::int64_t j = 0; j < k; ++j) {
            const T e = std::exp(row[j] - mx);
            out[i * k + j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (std::int64_t j = 0; j < k; ++j) out[i * k + j] *= inv;
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), {x}, [x, rows, k](TensorNode<T>* out_node) {
            return [x, rows, k, out_node]() {
                auto xn = x.node();
                if (!xn->needs_grad()) return;
                const T* g = out_node->grad.data();
                const T* y = out_node->data.data();
                T* gx = xn->ensure_grad().data();
                for (std::int64_t i = 0; i < rows; ++i) {
                    const T* gi = g + i * k;
                    const T* yi = y + i * k;
                    T dot = T(0);
                    for (std::int64_t j = 0; j < k; ++j) dot += gi[j] * yi[j];
                    for (std::int64_t j = 0; j < k; ++j)
                        gx[i * k + j] += yi[j] * (gi[j] - dot);
                }
            };
        });
}

// ---------------------------------------------------------------------------
// Losses and reductions
// ---------------------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[target]. Computed via
// log-sum-exp, never through an explicit log of a probability.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
    if (logits.shape().size() != 2) {
        throw std::invalid_argument("cross_entropy: logits must be [batch, classes], got " +
                                    shape_str(logits.shape()));
    }
    const std::int64_t b = logits.shape()[0], k = logits.shape()[1];
    if (static_cast<std::int64_t>(targets.size()) != b) {
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for batch of " + std::to_string(b));
    }
    for (int t : targets) {
        if (t < 0 || t >= k) {
            throw std::out_of_range("cross_entropy: target index " + std::to_string(t) +
                                    " outside [0, " + std::to_string(k) + ")");
        }
    }
    const T* pl = logits.data().data();
    T total = T(0);
    for (std::int64_t i = 0; i < b; ++i) {
        const T* row = pl + i * k;
        T mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (std::int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
        const T lse = mx + std::log(sum);
        total += lse - row[targets[static_cast<std::size_t>(i)]];
    }
    std::vector<T> out{total / T(b)};
    return detail::make_result<T>(
        {1}, std::move(out), {logits}, [logits, targets, b, k](TensorNode<T>* out_node) {
            return [logits, targets, b, k, out_node]() {
                auto ln = logits.node();
                if (!ln->needs_grad()) return;
                const T go = out_node->grad[0];
                T* gl = ln->ensure_grad().data();
                const T* pl = ln->data.data();
                const T inv_b = T(1) / T(b);
                for (std::int64_t i = 0; i < b; ++i) {
                    const T* row = pl + i * k;
                    T mx = row[0];
                    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
                    T sum = T(0);
                    for (std::int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
                    const T inv = T(1) / sum;
                    for (std::int64_t j = 0; j < k; ++j) {
                        T p = std::exp(row[j] - mx) * inv;
                        if (j == targets[static_cast<std::size_t>(i)]) p -= T(1);
                        gl[i * k + j] += go * p * inv_b;
                    }
                }
            };
        });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T total = T(0);
    for (T v : x.data()) total += v;
    return detail::make_result<T>({1}, std::vector<T>{total}, {x},
                                  [x](TensorNode<T>* out_node) {
                                      return [x, out_node]() {
                                          auto xn = x.node();
                                          if (!xn->needs_grad()) return;
                                          const T g = out_node->grad[0];
                                          T* gx = xn->ensure_grad().data();
                                          for (std::size_t i = 0; i < xn->data.size(); ++i)
                                              gx[i] += g;
                                      };
                                  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    T total = T(0);
    for (T v : x.data()) total += v;
    const T inv = T(1) / T(x.numel());
    return detail::make_result<T>({1}, std::vector<T>{total * inv}, {x},
                                  [x, inv](TensorNode<T>* out_node) {
                                      return [x, inv, out_node]() {
                                          auto xn = x.node();
                                          if (!xn->needs_grad()) return;
                                          const T g = out_node->grad[0] * inv;
                                          T* gx = xn->ensure_grad().data();
                                          for (std::size_t i = 0; i < xn->data.size(); ++i)
                                              gx[i] += g;
                                      };
                                  });
}

// ---------------------------------------------------------------------------
// Embedding and attention plumbing
// ---------------------------------------------------------------------------

// table[V,d] indexed by ids (length B*L) -> [B,L,d]; backward scatters rows.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids, std::int64_t b,
                           std::int64_t l) {
    if (table.shape().size() != 2) {
        throw std::invalid_argument("embedding_lookup: table must be 2-D, got " +
                                    shape_str(table.shape()));
    }
    const std::int64_t v = table.shape()[0], d = table.shape()[1];
    if (static_cast<std::int64_t>(ids.size()) != b * l) {
        throw std::invalid_argument("embedding_lookup: expected " + std::to_string(b * l) +
                                    " ids, got " + std::to_string(ids.size()));
    }
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                                    " outside vocabulary of size " + std::to_string(v));
        }
    }
    std::vector<T> out(static_cast<std::size_t>(b * l * d));
    const T* pt = table.data().data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const T* src = pt + static_cast<std::int64_t>(ids[i]) * d;
        std::copy(src, src + d, out.data() + static_cast<std::int64_t>(i) * d);
    }
    return detail::make_result<T>(
        {b, l, d}, std::move(out), {table}, [table, ids, d](TensorNode<T>* out_node) {
            return [table, ids, d, out_node]() {
                auto tn = table.node();
                if (!tn->needs_grad()) return;
                const T* g = out_node->grad.data();
                T* gt = tn->ensure_grad().data();
                for (std::size_t i = 0; i < ids.size(); ++i) {
                    T* dst = gt + static_cast<std::int64_t>(ids[i]) * d;
                    const T* src = g + static_cast<std::int64_t>(i) * d;
                    for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
            };
        });
}

// Positional rows 0..l-1 of table[max_len,d] broadcast over the batch -> [B,L,d].
template <typename T>
Tensor<T> positional_rows(const Tensor<T>& table, std::int64_t b, std::int64_t l) {
    const std::int64_t max_len = table.shape()[0], d = table.shape()[1];
    if (l > max_len) {
        throw std::invalid_argument("positional_rows: sequence length " + std::to_string(l) +
                                    " exceeds table length " + std::to_string(max_len));
    }
    std::vector<T> out(static_cast<std::size_t>(b * l * d));
    const T* pt = table.data().data();
    for (std::int64_t bi = 0; bi < b; ++bi)
        std::copy(pt, pt + l * d, out.data() + bi * l * d);
    return detail::make_result<T>(
        {b, l, d}, std::move(out), {table}, [table, b, l, d](TensorNode<T>* out_node) {
            return [table, b, l, d, out_node]() {
                auto tn = table.node();
                if (!tn->needs_grad()) return;
                const T* g = out_node->grad.data();
                T* gt = tn->ensure_grad().data();
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    const T* src = g + bi * l * d;
                    for (std::int64_t i = 0; i < l * d; ++i) gt[i] += src[i];
                }
            };
        });
}

// [B,L,H*dh] -> [B*H,L,dh]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::int64_t n_heads) {
    if (x.shape().size() != 3 || x.shape()[2] % n_heads != 0) {
        throw std::invalid_argument("split_heads: cannot split " + shape_str(x.shape()) +
                                    " into " + std::to_string(n_heads) + " heads");
    }
    const std::int64_t b = x.shape()[0], l = x.shape()[1], d = x.shape()[2];
    const std::int64_t dh = d / n_heads;
    std::vector<T> out(x.data().size());
    const T* px = x.data().data();
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t li = 0; li < l; ++li)
            for (std::int64_t h = 0; h < n_heads; ++h) {
                const T* src = px + (bi * l + li) * d + h * dh;
                T* dst = out.data() + ((bi * n_heads + h) * l + li) * dh;
                std::copy(src, src + dh, dst);
            }
    return detail::make_result<T>(
        {b * n_heads, l, dh}, std::move(out), {x},
        [x, b, l, d, dh, n_heads](TensorNode<T>* out_node) {
            return [x, b, l, d, dh, n_heads, out_node]() {
                auto xn = x.node();
                if (!xn->needs_grad()) return;
                const T* g = out_node->grad.data();
                T* gx = xn->ensure_grad().data();
                for (std::int64_t bi = 0; bi < b; ++bi)
                    for (std::int64_t li = 0; li < l; ++li)
                        for (std::int64_t h = 0; h < n_heads; ++h) {
                            const T* src = g + ((bi * n_heads + h) * l + li) * dh;
                            T* dst = gx + (bi * l + li) * d + h * dh;
                            for (std::int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                        }
            };
        });
}

// [B*H,L,dh] -> [B,L,H*dh]; inverse of split_heads.
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::int64_t n_heads) {
    if (x.shape().size() != 3 || x.shape()[0] % n_heads != 0) {
        throw std::invalid_argument("merge_heads: cannot merge " + shape_str(x.shape()) +
                                    " from " + std::to_string(n_heads) + " heads");
    }
    const std::int64_t b = x.shape()[0] / n_heads, l = x.shape()[1], dh = x.shape()[2];
    const std::int64_t d = dh * n_heads;
    std::vector<T> out(x.data().size());
    const T* px = x.data().data();
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t li = 0; li < l; ++li)
            for (std::int64_t h = 0; h < n_heads; ++h) {
                const T* src = px + ((bi * n_heads + h) * l + li) * dh;
                T* dst = out.data() + (bi * l + li) * d + h * dh;
                std::copy(src, src + dh, dst);
            }
    return detail::make_result<T>(
        {b, l, d}, std::move(out), {x}, [x, b, l, d, dh, n_heads](TensorNode<T>* out_node) {
            return [x, b, l, d, dh, n_heads, out_node]() {
                auto xn = x.node();
                if (!xn->needs_grad()) return;
                const T* g = out_node->grad.data();
                T* gx = xn->ensure_grad().data();
                for (std::int64_t bi = 0; bi < b; ++bi)
                    for (std::int64_t li = 0; li < l; ++li)
                        for (std::int64_t h = 0; h < n_heads; ++h) {
                            const T* src = g + (bi * l + li) * d + h * dh;
                            T* dst = gx + ((bi * n_heads + h) * l + li) * dh;
                            for (std::int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                        }
            };
        });
}

// Adds a large negative bias to score columns whose key position is padding,
// so those keys receive zero attention weight after softmax.
// scores: [B*H, L, L], mask: row-major B x L, 1 = real token.
template <typename T>
Tensor<T> attention_mask_bias(const Tensor<T>& scores, const std::vector<std::uint8_t>& mask,
                              std::int64_t n_heads) {
    const std::int64_t bh = scores.shape()[0], lq = scores.shape()[1], lk = scores.shape()[2];
    const std::int64_t b = bh / n_heads;
    if (static_cast<std::int64_t>(mask.size()) != b * lk) {
        throw std::invalid_argument("attention_mask_bias: mask size " +
                                    std::to_string(mask.size()) + " does not cover " +
                                    std::to_string(b * lk) + " key positions");
    }
    const T neg = T(-1e9);
    std::vector<T> out = scores.data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const std::uint8_t* mrow = mask.data() + bi * lk;
        for (std::int64_t h = 0; h < n_heads; ++h) {
            T* block = out.data() + (bi * n_heads + h) * lq * lk;
            for (std::int64_t i = 0; i < lq; ++i)
                for (std::int64_t j = 0; j < lk; ++j)
                    if (!mrow[j]) block[i * lk + j] += neg;
        }
    }
    return detail::make_result<T>(scores.shape(), std::move(out), {scores},
                                  [scores](TensorNode<T>* out_node) {
                                      return [scores, out_node]() {
                                          auto sn = scores.node();
                                          if (!sn->needs_grad()) return;
                                          const T* g = out_node->grad.data();
                                          T* gs = sn->ensure_grad().data();
                                          for (std::size_t i = 0; i < sn->data.size(); ++i)
                                              gs[i] += g[i];
                                      };
                                  });
}

// Inverted dropout with an explicit RNG stream. Identity when disabled.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool enabled) {
    if (!enabled || rate <= 0.0) return x;
    const T keep = T(1.0 - rate);
    const T inv_keep = T(1) / keep;
    std::vector<T> mask(x.data().size());
    std::vector<T> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool kept = rng.next_double() >= rate;
        mask[i] = kept ? inv_keep : T(0);
        out[i] = x.data()[i] * mask[i];
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x},
                                  [x, mask = std::move(mask)](TensorNode<T>* out_node) {
                                      return [x, mask, out_node]() {
                                          auto xn = x.node();
                                          if (!xn->needs_grad()) return;
                                          const T* g = out_node->grad.data();
                                          T* gx = xn->ensure_grad().data();
                                          for (std::size_t i = 0; i < xn->data.size(); ++i)
                                              gx[i] += g[i] * mask[i];
                                      };
                                  });
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamConfig {
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

// Standard Adam with bias correction. One optimizer owns a fixed parameter
// list; per-parameter first/second moment buffers match parameter shapes.
template <typename T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, AdamConfig<T> cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].data().size(), T(0));
            v_[i].assign(params_[i].data().size(), T(0));
        }
    }

    std::int64_t step_count() const { return step_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // Global-norm gradient clipping; returns the pre-clip norm.
    double clip_grad_norm(double max_norm) {
        double sq = 0.0;
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            for (T g : p.grad_view()) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(sq);
        if (norm > max_norm && norm > 0.0) {
            const T s = static_cast<T>(max_norm / norm);
            for (auto& p : params_) {
                if (!p.has_grad()) continue;
                for (T& g : p.grad()) g *= s;
            }
        }
        return norm;
    }

    void step(T lr) {
        ++step_;
        const T bc1 = T(1) - std::pow(cfg_.beta1, static_cast<T>(step_));
        const T bc2 = T(1) - std::pow(cfg_.beta2, static_cast<T>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (p.data().size() != m_[i].size()) {
                throw std::logic_error("adam: parameter " + std::to_string(i) +
                                       " changed size since construction");
            }
            const std::vector<T>& g = p.grad();
            std::vector<T>& m = m_[i];
            std::vector<T>& v = v_[i];
            T* pd = p.data().data();
            for (std::size_t j = 0; j < g.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (T(1) - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (T(1) - cfg_.beta2) * g[j] * g[j];
                const T mhat = m[j] / bc1;
                const T vhat = v[j] / bc2;
                pd[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    std::vector<Tensor<T>> params_;
    AdamConfig<T> cfg_;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
    std::int64_t step_ = 0;
};

}  // namespace citemtl
