#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// Graphs are built define-by-run: any operation whose inputs carry
// requires_grad records its parents and a backward rule on the result node.
// Tape::record linearizes the graph reachable from an output once, and
// backward() replays the rules in reverse topological order, so each node's
// rule runs exactly once per sweep.
//
// Reductions that cross token order (softmax denominators, matmul_stable,
// sum_stable) accumulate their terms in ascending value order. Reordering
// the inputs of such a reduction permutes the term multiset only, so the
// result is bit-identical under input permutations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "astra/errors.hpp"

namespace astra {

class Tensor;

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first touched
    bool requires_grad = false;
    std::string op;  // empty for leaves
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t size() const { return value.size(); }

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), 0.0);
        }
    }
};

using NodePtr = std::shared_ptr<TensorNode>;

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? " x " : "") << shape[i];
    }
    os << "]";
    return os.str();
}

inline std::size_t checked_numel(const std::vector<std::size_t>& shape, const char* who) {
    if (shape.empty()) {
        throw ShapeError(std::string(who) + ": rank-0 shape is not supported");
    }
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError(std::string(who) + ": zero-sized dimension in " + shape_str(shape));
        }
        n *= d;
    }
    return n;
}

// Sum in ascending value order. The result depends only on the multiset of
// terms, so reductions built on this are bit-stable under input reordering.
// -0.0 is collapsed to +0.0 so the sign of zero cannot leak order either.
inline double sum_sorted(std::vector<double>& terms) {
    for (double& t : terms) {
        if (std::isnan(t)) {
            return t;
        }
        if (t == 0.0) {
            t = 0.0;
        }
    }
    std::sort(terms.begin(), terms.end());
    double acc = 0.0;
    for (double t : terms) {
        acc += t;
    }
    return acc;
}

}  // namespace detail

// Shared handle to a graph node. Copies alias the same storage.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad = false) {
        const std::size_t n = detail::checked_numel(shape, "Tensor");
        if (data.size() != n) {
            throw ShapeError("Tensor: " + std::to_string(data.size()) +
                             " values for shape " + detail::shape_str(shape));
        }
        node_ = std::make_shared<detail::TensorNode>();
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        const std::size_t n = detail::checked_numel(shape, "Tensor::zeros");
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(std::vector<std::size_t> shape, double v, bool requires_grad = false) {
        const std::size_t n = detail::checked_numel(shape, "Tensor::full");
        return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    static Tensor row(std::vector<double> v, bool requires_grad = false) {
        const std::size_t n = v.size();
        return Tensor({1, n}, std::move(v), requires_grad);
    }

    static Tensor vec(std::vector<double> v, bool requires_grad = false) {
        const std::size_t n = v.size();
        return Tensor({n}, std::move(v), requires_grad);
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false) {
        const std::size_t r = rows.size();
        if (r == 0) {
            throw ShapeError("Tensor::matrix: no rows");
        }
        const std::size_t c = rows.begin()->size();
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw ShapeError("Tensor::matrix: ragged rows");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }

    const std::vector<std::size_t>& shape() const { return check()->shape; }
    std::size_t rank() const { return check()->shape.size(); }
    std::size_t dim(std::size_t i) const {
        const auto& s = check()->shape;
        if (i >= s.size()) {
            throw ShapeError("Tensor::dim: axis " + std::to_string(i) + " of " +
                             detail::shape_str(s));
        }
        return s[i];
    }
    std::size_t size() const { return check()->value.size(); }

    bool requires_grad() const { return check()->requires_grad; }

    // Leaves only; op results fix their flag at construction.
    void set_requires_grad(bool rq) {
        auto* n = check();
        if (!n->op.empty()) {
            throw ContractError("set_requires_grad: not a leaf tensor (op '" + n->op + "')");
        }
        n->requires_grad = rq;
    }

    double item() const {
        const auto* n = check();
        if (n->value.size() != 1) {
            throw ShapeError("Tensor::item: shape " + detail::shape_str(n->shape) +
                             " is not scalar");
        }
        return n->value[0];
    }

    std::span<const double> data() const { return check()->value; }

    // Direct writes to the stored values (optimizer updates, perturbation);
    // does not record anything on the graph.
    std::span<double> mutable_data() { return check()->value; }

    double at(std::initializer_list<std::size_t> idx) const {
        const auto* n = check();
        if (idx.size() != n->shape.size()) {
            throw ShapeError("Tensor::at: " + std::to_string(idx.size()) + " indices for " +
                             detail::shape_str(n->shape));
        }
        std::size_t flat = 0;
        std::size_t axis = 0;
        for (std::size_t i : idx) {
            if (i >= n->shape[axis]) {
                throw ShapeError("Tensor::at: index out of range on axis " + std::to_string(axis));
            }
            flat = flat * n->shape[axis] + i;
            ++axis;
        }
        return n->value[flat];
    }

    std::span<const double> grad() const {
        auto* n = check();
        if (!n->requires_grad) {
            throw ContractError("Tensor::grad: tensor does not require gradients");
        }
        n->ensure_grad();
        return n->grad;
    }

    void zero_grad() {
        auto* n = check();
        if (n->requires_grad) {
            n->grad.assign(n->value.size(), 0.0);
        }
    }

    // Graph-internal node handle.
    const detail::NodePtr& node() const {
        check();
        return node_;
    }

private:
    detail::TensorNode* check() const {
        if (!node_) {
            throw ContractError("Tensor: empty handle");
        }
        return node_.get();
    }

    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

    friend Tensor make_op(std::string, std::vector<std::size_t>, std::vector<double>,
                          std::vector<detail::NodePtr>, std::function<void(detail::TensorNode&)>);

    detail::NodePtr node_;
};

// Builds an op result. Parents and the backward rule are dropped when no
// parent participates in differentiation, so inference graphs stay flat.
inline Tensor make_op(std::string op, std::vector<std::size_t> shape, std::vector<double> value,
                      std::vector<detail::NodePtr> parents,
                      std::function<void(detail::TensorNode&)> backward) {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool rq = false;
    for (const auto& p : parents) {
        rq = rq || p->requires_grad;
    }
    node->requires_grad = rq;
    if (rq) {
        node->op = std::move(op);
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward);
    }
    return Tensor(std::move(node));
}

namespace detail {

inline void accumulate(TensorNode& parent, const std::vector<double>& contribution) {
    if (!parent.requires_grad) {
        return;
    }
    parent.ensure_grad();
    for (std::size_t i = 0; i < contribution.size(); ++i) {
        parent.grad[i] += contribution[i];
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

inline void require_rank(const Tensor& t, std::size_t r, const char* who) {
    if (t.rank() != r) {
        throw ShapeError(std::string(who) + ": expected rank-" + std::to_string(r) +
                         " tensor, got " + shape_str(t.shape()));
    }
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    return make_op("add", a.shape(), std::move(out), {a.node(), b.node()},
                   [](detail::TensorNode& self) {
                       detail::accumulate(*self.parents[0], self.grad);
                       detail::accumulate(*self.parents[1], self.grad);
                   });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] - bv[i];
    }
    return make_op("sub", a.shape(), std::move(out), {a.node(), b.node()},
                   [](detail::TensorNode& self) {
                       detail::accumulate(*self.parents[0], self.grad);
                       if (self.parents[1]->requires_grad) {
                           std::vector<double> neg(self.grad.size());
                           for (std::size_t i = 0; i < neg.size(); ++i) {
                               neg[i] = -self.grad[i];
                           }
                           detail::accumulate(*self.parents[1], neg);
                       }
                   });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * bv[i];
    }
    return make_op("mul", a.shape(), std::move(out), {a.node(), b.node()},
                   [](detail::TensorNode& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       if (pa.requires_grad) {
                           std::vector<double> da(self.grad.size());
                           for (std::size_t i = 0; i < da.size(); ++i) {
                               da[i] = self.grad[i] * pb.value[i];
                           }
                           detail::accumulate(pa, da);
                       }
                       if (pb.requires_grad) {
                           std::vector<double> db(self.grad.size());
                           for (std::size_t i = 0; i < db.size(); ++i) {
                               db[i] = self.grad[i] * pa.value[i];
                           }
                           detail::accumulate(pb, db);
                       }
                   });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] * c;
    }
    return make_op("scale", x.shape(), std::move(out), {x.node()},
                   [c](detail::TensorNode& self) {
                       std::vector<double> dx(self.grad.size());
                       for (std::size_t i = 0; i < dx.size(); ++i) {
                           dx[i] = self.grad[i] * c;
                       }
                       detail::accumulate(*self.parents[0], dx);
                   });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor add_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] + c;
    }
    return make_op("add_scalar", x.shape(), std::move(out), {x.node()},
                   [](detail::TensorNode& self) {
                       detail::accumulate(*self.parents[0], self.grad);
                   });
}

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    }
    return make_op("relu", x.shape(), std::move(out), {x.node()},
                   [](detail::TensorNode& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) {
                           return;
                       }
                       std::vector<double> dx(self.grad.size());
                       for (std::size_t i = 0; i < dx.size(); ++i) {
                           dx[i] = p.value[i] > 0.0 ? self.grad[i] : 0.0;
                       }
                       detail::accumulate(p, dx);
                   });
}

// Exact-erf GELU: x * Phi(x).
inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<double> out(x.size());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
    }
    return make_op("gelu", x.shape(), std::move(out), {x.node()},
                   [inv_sqrt2, inv_sqrt2pi](detail::TensorNode& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) {
                           return;
                       }
                       std::vector<double> dx(self.grad.size());
                       for (std::size_t i = 0; i < dx.size(); ++i) {
                           const double v = p.value[i];
                           const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                           const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                           dx[i] = self.grad[i] * (cdf + v * pdf);
                       }
                       detail::accumulate(p, dx);
                   });
}

inline Tensor exp(const Tensor& x) {
    std::vector<double> out(x.size());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(xv[i]);
    }
    return make_op("exp", x.shape(), std::move(out), {x.node()},
                   [](detail::TensorNode& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) {
                           return;
                       }
                       std::vector<double> dx(self.grad.size());
                       for (std::size_t i = 0; i < dx.size(); ++i) {
                           dx[i] = self.grad[i] * self.value[i];
                       }
                       detail::accumulate(p, dx);
                   });
}

inline Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo <= hi)) {
        throw ContractError("clamp: lo > hi");
    }
    std::vector<double> out(x.size());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::min(std::max(xv[i], lo), hi);
    }
    return make_op("clamp", x.shape(), std::move(out), {x.node()},
                   [lo, hi](detail::TensorNode& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) {
                           return;
                       }
                       std::vector<double> dx(self.grad.size());
                       for (std::size_t i = 0; i < dx.size(); ++i) {
                           const double v = p.value[i];
                           dx[i] = (v > lo && v < hi) ? self.grad[i] : 0.0;
                       }
                       detail::accumulate(p, dx);
                   });
}

// Elementwise smooth L1 (Huber with delta = 1): 0.5 d^2 inside, |d| - 0.5 outside.
inline Tensor smooth_l1(const Tensor& x) {
    std::vector<double> out(x.size());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double a = std::abs(xv[i]);
        out[i] = a < 1.0 ? 0.5 * xv[i] * xv[i] : a - 0.5;
    }
    return make_op("smooth_l1", x.shape(), std::move(out), {x.node()},
                   [](detail::TensorNode& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) {
                           return;
                       }
                       std::vector<double> dx(self.grad.size());
                       for (std::size_t i = 0; i < dx.size(); ++i) {
                           const double v = p.value[i];
                           const double d = std::abs(v) < 1.0 ? v : (v > 0.0 ? 1.0 : -1.0);
                           dx[i] = self.grad[i] * d;
                       }
                       detail::accumulate(p, dx);
                   });
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions differ: " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) {
                out[i * n + j] += aip * bv[p * n + j];
            }
        }
    }
    return make_op("matmul", {m, n}, std::move(out), {a.node(), b.node()},
                   [m, k, n](detail::TensorNode& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       if (pa.requires_grad) {
                           std::vector<double> da(m * k, 0.0);
                           for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double g = self.grad[i * n + j];
                                   for (std::size_t p = 0; p < k; ++p) {
                                       da[i * k + p] += g * pb.value[p * n + j];
                                   }
                               }
                           }
                           detail::accumulate(pa, da);
                       }
                       if (pb.requires_grad) {
                           std::vector<double> db(k * n, 0.0);
                           for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t p = 0; p < k; ++p) {
                                   const double aip = pa.value[i * k + p];
                                   for (std::size_t j = 0; j < n; ++j) {
                                       db[p * n + j] += aip * self.grad[i * n + j];
                                   }
                               }
                           }
                           detail::accumulate(pb, db);
                       }
                   });
}

// matmul whose inner-product terms are accumulated in ascending value order.
// Used where the contracted axis is token order, so that reordering tokens
// reorders the terms without changing any output bit.
inline Tensor matmul_stable(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul_stable");
    detail::require_rank(b, 2, "matmul_stable");
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ShapeError("matmul_stable: inner dimensions differ: " +
                         detail::shape_str(a.shape()) + " vs " + detail::shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<double> terms(k);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t p = 0; p < k; ++p) {
                terms[p] = av[i * k + p] * bv[p * n + j];
            }
            out[i * n + j] = detail::sum_sorted(terms);
            terms.resize(k);
        }
    }
    Tensor result = make_op(
        "matmul_stable", {m, n}, std::move(out), {a.node(), b.node()},
        [m, k, n](detail::TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                std::vector<double> da(m * k, 0.0);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = self.grad[i * n + j];
                        for (std::size_t p = 0; p < k; ++p) {
                            da[i * k + p] += g * pb.value[p * n + j];
                        }
                    }
                }
                detail::accumulate(pa, da);
            }
            if (pb.requires_grad) {
                std::vector<double> db(k * n, 0.0);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = pa.value[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) {
                            db[p * n + j] += aip * self.grad[i * n + j];
                        }
                    }
                }
                detail::accumulate(pb, db);
            }
        });
    return result;
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose");
    const std::size_t r = x.dim(0), c = x.dim(1);
    std::vector<double> out(r * c);
    const auto xv = x.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j * r + i] = xv[i * c + j];
        }
    }
    return make_op("transpose", {c, r}, std::move(out), {x.node()},
                   [r, c](detail::TensorNode& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) {
                           return;
                       }
                       std::vector<double> dx(r * c);
                       for (std::size_t i = 0; i < r; ++i) {
                           for (std::size_t j = 0; j < c; ++j) {
                               dx[i * c + j] = self.grad[j * r + i];
                           }
                       }
                       detail::accumulate(p, dx);
                   });
}

// Adds a length-d vector to every length-d slice along the last axis.
inline Tensor bias_add(const Tensor& x, const Tensor& bias) {
    const std::size_t d = x.shape().back();
    if (bias.size() != d) {
        throw ShapeError("bias_add: bias " + detail::shape_str(bias.shape()) +
                         " does not match last axis of " + detail::shape_str(x.shape()));
    }
    const std::size_t slices = x.size() / d;
    std::vector<double> out(x.size());
    const auto xv = x.data();
    const auto bv = bias.data();
    for (std::size_t s = 0; s < slices; ++s) {
        for (std::size_t j = 0; j < d; ++j) {
            out[s * d + j] = xv[s * d + j] + bv[j];
        }
    }
    return make_op("bias_add", x.shape(), std::move(out), {x.node(), bias.node()},
                   [slices, d](detail::TensorNode& self) {
                       detail::accumulate(*self.parents[0], self.grad);
                       auto& pb = *self.parents[1];
                       if (pb.requires_grad) {
                           std::vector<double> db(d, 0.0);
                           for (std::size_t s = 0; s < slices; ++s) {
                               for (std::size_t j = 0; j < d; ++j) {
                                   db[j] += self.grad[s * d + j];
                               }
                           }
                           detail::accumulate(pb, db);
                       }
                   });
}

// ---- normalization and softmax ----

// Softmax over the last axis. Each slice is shifted by its max and the
// denominator is accumulated in sorted order, so slice results depend only
// on the multiset of slice values elsewhere in the tensor.
inline Tensor softmax_last_dim(const Tensor& x) {
    const std::size_t d = x.shape().back();
    const std::size_t slices = x.size() / d;
    std::vector<double> out(x.size());
    const auto xv = x.data();
    std::vector<double> terms(d);
    for (std::size_t s = 0; s < slices; ++s) {
        double m = xv[s * d];
        for (std::size_t j = 1; j < d; ++j) {
            m = std::max(m, xv[s * d + j]);
        }
        terms.resize(d);
        for (std::size_t j = 0; j < d; ++j) {
            terms[j] = std::exp(xv[s * d + j] - m);
            out[s * d + j] = terms[j];
        }
        const double denom = detail::sum_sorted(terms);
        for (std::size_t j = 0; j < d; ++j) {
            out[s * d + j] /= denom;
        }
    }
    return make_op("softmax_last_dim", x.shape(), std::move(out), {x.node()},
                   [slices, d](detail::TensorNode& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) {
                           return;
                       }
                       std::vector<double> dx(self.grad.size());
                       for (std::size_t s = 0; s < slices; ++s) {
                           double dot = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                               dot += self.grad[s * d + j] * self.value[s * d + j];
                           }
                           for (std::size_t j = 0; j < d; ++j) {
                               dx[s * d + j] =
                                   self.value[s * d + j] * (self.grad[s * d + j] - dot);
                           }
                       }
                       detail::accumulate(p, dx);
                   });
}

// Layer normalization over the last axis with learned gain and shift.
// Uses the biased variance, matching the usual transformer convention.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = x.shape().back();
    if (gamma.size() != d || beta.size() != d) {
        throw ShapeError("layer_norm: gain/shift sized " + std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()) + " for last axis " + std::to_string(d));
    }
    if (!(eps > 0.0)) {
        throw ContractError("layer_norm: eps must be positive");
    }
    const std::size_t slices = x.size() / d;
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_sigma(slices);
    const auto xv = x.data();
    const auto gv = gamma.data();
    const auto bv = beta.data();
    for (std::size_t s = 0; s < slices; ++s) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mean += xv[s * d + j];
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xv[s * d + j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        inv_sigma[s] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[s * d + j] = (xv[s * d + j] - mean) * inv_sigma[s];
            out[s * d + j] = gv[j] * xhat[s * d + j] + bv[j];
        }
    }
    return make_op(
        "layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
        [slices, d, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](
            detail::TensorNode& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            if (pg.requires_grad) {
                std::vector<double> dg(d, 0.0);
                for (std::size_t s = 0; s < slices; ++s) {
                    for (std::size_t j = 0; j < d; ++j) {
                        dg[j] += self.grad[s * d + j] * xhat[s * d + j];
                    }
                }
                detail::accumulate(pg, dg);
            }
            if (pb.requires_grad) {
                std::vector<double> db(d, 0.0);
                for (std::size_t s = 0; s < slices; ++s) {
                    for (std::size_t j = 0; j < d; ++j) {
                        db[j] += self.grad[s * d + j];
                    }
                }
                detail::accumulate(pb, db);
            }
            if (px.requires_grad) {
                std::vector<double> dx(self.grad.size());
                for (std::size_t s = 0; s < slices; ++s) {
                    double mean_dh = 0.0;
                    double mean_dh_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = self.grad[s * d + j] * pg.value[j];
                        mean_dh += dh;
                        mean_dh_xhat += dh * xhat[s * d + j];
                    }
                    mean_dh /= static_cast<double>(d);
                    mean_dh_xhat /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = self.grad[s * d + j] * pg.value[j];
                        dx[s * d + j] =
                            inv_sigma[s] * (dh - mean_dh - xhat[s * d + j] * mean_dh_xhat);
                    }
                }
                detail::accumulate(px, dx);
            }
        });
}

// ---- reductions ----

inline Tensor sum(const Tensor& x) {
    const auto xv = x.data();
    double acc = 0.0;
    for (double v : xv) {
        acc += v;
    }
    return make_op("sum", {1}, {acc}, {x.node()}, [](detail::TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) {
            return;
        }
        std::vector<double> dx(p.value.size(), self.grad[0]);
        detail::accumulate(p, dx);
    });
}

// Full-tensor sum accumulated in ascending value order; bit-stable under
// any permutation of the entries.
inline Tensor sum_stable(const Tensor& x) {
    std::vector<double> terms(x.data().begin(), x.data().end());
    const double acc = detail::sum_sorted(terms);
    return make_op("sum_stable", {1}, {acc}, {x.node()}, [](detail::TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) {
            return;
        }
        std::vector<double> dx(p.value.size(), self.grad[0]);
        detail::accumulate(p, dx);
    });
}

inline Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---- structural ops ----

inline Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
    const std::size_t n = detail::checked_numel(shape, "reshape");
    if (n != x.size()) {
        throw ShapeError("reshape: " + detail::shape_str(x.shape()) + " has " +
                         std::to_string(x.size()) + " values, target " +
                         detail::shape_str(shape) + " needs " + std::to_string(n));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_op("reshape", std::move(shape), std::move(out), {x.node()},
                   [](detail::TensorNode& self) {
                       detail::accumulate(*self.parents[0], self.grad);
                   });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols: no inputs");
    }
    const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
    std::size_t total = 0;
    std::vector<detail::NodePtr> parents;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols");
        if (p.dim(0) != rows) {
            throw ShapeError("concat_cols: row counts differ: " + std::to_string(rows) + " vs " +
                             std::to_string(p.dim(0)));
        }
        widths.push_back(p.dim(1));
        total += p.dim(1);
        parents.push_back(p.node());
    }
    std::vector<double> out(rows * total);
    std::size_t col0 = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto pv = parts[k].data();
        const std::size_t w = widths[k];
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                out[i * total + col0 + j] = pv[i * w + j];
            }
        }
        col0 += w;
    }
    return make_op("concat_cols", {rows, total}, std::move(out), std::move(parents),
                   [rows, total, widths](detail::TensorNode& self) {
                       std::size_t col = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                           auto& p = *self.parents[k];
                           const std::size_t w = widths[k];
                           if (p.requires_grad) {
                               std::vector<double> dp(rows * w);
                               for (std::size_t i = 0; i < rows; ++i) {
                                   for (std::size_t j = 0; j < w; ++j) {
                                       dp[i * w + j] = self.grad[i * total + col + j];
                                   }
                               }
                               detail::accumulate(p, dp);
                           }
                           col += w;
                       }
                   });
}

inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
    std::vector<Tensor> v(parts);
    return concat_cols(std::span<const Tensor>(v));
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    const std::size_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
    std::size_t total_rows = 0;
    std::vector<detail::NodePtr> parents;
    std::vector<std::size_t> heights;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_rows");
        if (p.dim(1) != cols) {
            throw ShapeError("concat_rows: column counts differ: " + std::to_string(cols) +
                             " vs " + std::to_string(p.dim(1)));
        }
        heights.push_back(p.dim(0));
        total_rows += p.dim(0);
        parents.push_back(p.node());
    }
    std::vector<double> out;
    out.reserve(total_rows * cols);
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return make_op("concat_rows", {total_rows, cols}, std::move(out), std::move(parents),
                   [cols, heights](detail::TensorNode& self) {
                       std::size_t row = 0;
                       for (std::size_t k = 0; k < heights.size(); ++k) {
                           auto& p = *self.parents[k];
                           const std::size_t h = heights[k];
                           if (p.requires_grad) {
                               std::vector<double> dp(
                                   self.grad.begin() + static_cast<std::ptrdiff_t>(row * cols),
                                   self.grad.begin() +
                                       static_cast<std::ptrdiff_t>((row + h) * cols));
                               detail::accumulate(p, dp);
                           }
                           row += h;
                       }
                   });
}

inline Tensor concat_rows(std::initializer_list<Tensor> parts) {
    std::vector<Tensor> v(parts);
    return concat_rows(std::span<const Tensor>(v));
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
    detail::require_rank(x, 2, "slice_cols");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (count == 0 || start + count > cols) {
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + std::to_string(cols) +
                         " columns");
    }
    std::vector<double> out(rows * count);
    const auto xv = x.data();
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < count; ++j) {
            out[i * count + j] = xv[i * cols + start + j];
        }
    }
    return make_op("slice_cols", {rows, count}, std::move(out), {x.node()},
                   [rows, cols, start, count](detail::TensorNode& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) {
                           return;
                       }
                       std::vector<double> dx(rows * cols, 0.0);
                       for (std::size_t i = 0; i < rows; ++i) {
                           for (std::size_t j = 0; j < count; ++j) {
                               dx[i * cols + start + j] = self.grad[i * count + j];
                           }
                       }
                       detail::accumulate(p, dx);
                   });
}

// Rows of x selected by index, duplicates allowed. Backward scatter-adds.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> idx) {
    detail::require_rank(x, 2, "gather_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (idx.empty()) {
        throw ShapeError("gather_rows: empty index list");
    }
    for (std::size_t i : idx) {
        if (i >= rows) {
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of " +
                             std::to_string(rows) + " rows");
        }
    }
    std::vector<double> out(idx.size() * cols);
    const auto xv = x.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t j = 0; j < cols; ++j) {
            out[r * cols + j] = xv[idx[r] * cols + j];
        }
    }
    const std::size_t out_rows = idx.size();
    return make_op("gather_rows", {out_rows, cols}, std::move(out), {x.node()},
                   [rows, cols, idx = std::move(idx)](detail::TensorNode& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) {
                           return;
                       }
                       std::vector<double> dx(rows * cols, 0.0);
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                           for (std::size_t j = 0; j < cols; ++j) {
                               dx[idx[r] * cols + j] += self.grad[r * cols + j];
                           }
                       }
                       detail::accumulate(p, dx);
                   });
}

// Running sum down the rows: out[t] = sum of rows 0..t.
inline Tensor cumsum_rows(const Tensor& x) {
    detail::require_rank(x, 2, "cumsum_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 1; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out[i * cols + j] += out[(i - 1) * cols + j];
        }
    }
    return make_op("cumsum_rows", x.shape(), std::move(out), {x.node()},
                   [rows, cols](detail::TensorNode& self) {
                       auto& p = *self.parents[0];
                       if (!p.requires_grad) {
                           return;
                       }
                       std::vector<double> dx(rows * cols);
                       std::vector<double> suffix(cols, 0.0);
                       for (std::size_t i = rows; i-- > 0;) {
                           for (std::size_t j = 0; j < cols; ++j) {
                               suffix[j] += self.grad[i * cols + j];
                               dx[i * cols + j] = suffix[j];
                           }
                       }
                       detail::accumulate(p, dx);
                   });
}

// Scalars packed into a rank-1 tensor; used to reduce per-agent losses.
inline Tensor stack_scalars(std::span<const Tensor> scalars) {
    if (scalars.empty()) {
        throw ShapeError("stack_scalars: no inputs");
    }
    std::vector<double> out;
    std::vector<detail::NodePtr> parents;
    for (const auto& s : scalars) {
        if (s.size() != 1) {
            throw ShapeError("stack_scalars: non-scalar input " + detail::shape_str(s.shape()));
        }
        out.push_back(s.data()[0]);
        parents.push_back(s.node());
    }
    const std::size_t n = out.size();
    return make_op("stack_scalars", {n}, std::move(out), std::move(parents),
                   [](detail::TensorNode& self) {
                       for (std::size_t i = 0; i < self.parents.size(); ++i) {
                           detail::accumulate(*self.parents[i], {self.grad[i]});
                       }
                   });
}

// ---- MLP ----

enum class Activation { identity, relu, gelu };

inline Tensor apply_activation(const Tensor& x, Activation act) {
    switch (act) {
        case Activation::identity:
            return x;
        case Activation::relu:
            return relu(x);
        case Activation::gelu:
            return gelu(x);
    }
    throw ContractError("apply_activation: unknown activation");
}

inline const char* activation_name(Activation act) {
    switch (act) {
        case Activation::identity:
            return "identity";
        case Activation::relu:
            return "relu";
        case Activation::gelu:
            return "gelu";
    }
    return "?";
}

struct DenseLayer {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]
    Activation act = Activation::identity;
};

// Applies a dense stack to the last axis of x; leading axes are preserved.
inline Tensor mlp_forward(const Tensor& x, std::span<const DenseLayer> layers) {
    if (layers.empty()) {
        throw ShapeError("mlp_forward: no layers");
    }
    const std::vector<std::size_t> in_shape = x.shape();
    const std::size_t features = in_shape.back();
    const std::size_t lead = x.size() / features;
    Tensor h = x.rank() == 2 ? x : reshape(x, {lead, features});
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        detail::require_rank(layer.weight, 2, "mlp_forward");
        if (layer.weight.dim(0) != h.dim(1)) {
            throw ShapeError("mlp_forward: layer " + std::to_string(l) + " expects " +
                             std::to_string(layer.weight.dim(0)) + " features, got " +
                             std::to_string(h.dim(1)));
        }
        if (layer.bias.size() != layer.weight.dim(1)) {
            throw ShapeError("mlp_forward: layer " + std::to_string(l) + " bias size " +
                             std::to_string(layer.bias.size()) + " for " +
                             std::to_string(layer.weight.dim(1)) + " outputs");
        }
        h = apply_activation(bias_add(matmul(h, layer.weight), layer.bias), layer.act);
    }
    if (in_shape.size() != 2) {
        std::vector<std::size_t> out_shape(in_shape.begin(), in_shape.end() - 1);
        out_shape.push_back(h.dim(1));
        h = reshape(h, out_shape);
    }
    return h;
}

// ---- tape ----

// Linearized view of the graph below one output. Records topological order
// once; backward() then visits each node exactly once, in reverse.
class Tape {
public:
    struct NodeInfo {
        std::string op;  // empty for leaves
        std::vector<std::size_t> shape;
        bool requires_grad = false;
    };

    static Tape record(const Tensor& output) {
        Tape tape;
        tape.root_ = output.node();
        std::unordered_map<const detail::TensorNode*, bool> state;  // false = open, true = done
        std::vector<std::pair<detail::NodePtr, std::size_t>> stack;
        stack.emplace_back(tape.root_, 0);
        state[tape.root_.get()] = false;
        while (!stack.empty()) {
            auto& [node, next_child] = stack.back();
            if (next_child < node->parents.size()) {
                const auto& child = node->parents[next_child];
                ++next_child;
                auto it = state.find(child.get());
                if (it == state.end()) {
                    state[child.get()] = false;
                    stack.emplace_back(child, 0);
                } else if (!it->second) {
                    throw ContractError("Tape::record: cycle in graph");
                }
            } else {
                state[node.get()] = true;
                tape.order_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    // Seeds d(output)/d(output) = 1 and accumulates into every reachable
    // tensor with requires_grad. The output must be scalar.
    void backward() {
        if (root_->value.size() != 1) {
            throw ContractError("Tape::backward: root has shape " +
                                detail::shape_str(root_->shape) + ", expected a scalar");
        }
        if (!root_->requires_grad) {
            return;
        }
        root_->ensure_grad();
        root_->grad[0] += 1.0;
        for (std::size_t i = order_.size(); i-- > 0;) {
            auto& node = *order_[i];
            if (node.backward_fn) {
                node.ensure_grad();
                node.backward_fn(node);
            }
        }
    }

    std::size_t size() const { return order_.size(); }

    std::vector<NodeInfo> nodes() const {
        std::vector<NodeInfo> out;
        out.reserve(order_.size());
        for (const auto& n : order_) {
            out.push_back({n->op, n->shape, n->requires_grad});
        }
        return out;
    }

private:
    std::vector<detail::NodePtr> order_;
    detail::NodePtr root_;
};

inline void backward(const Tensor& output) { Tape::record(output).backward(); }

}  // namespace astra
