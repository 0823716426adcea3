#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "s2scast/common.hpp"
#include "s2scast/gridstore.hpp"

// Reverse-mode automatic differentiation over dense f64 tensors. Graphs are
// built define-by-run: every op computes its forward value immediately and
// records a closure that scatters gradients to its parents. A graph instance
// is single-threaded; independent graphs (one per ensemble member) can run
// in parallel.
//
// Broadcasting is deliberately narrow: binary ops accept equal shapes, or a
// right operand whose shape is a suffix of the left's (the usual bias-add
// case). Anything else needs an explicit expand().

namespace s2scast {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;  // same length as val when requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
};

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make(std::move(shape), {}, requires_grad);
    }
    static Tensor constant(Shape shape, std::vector<double> data) {
        return make(std::move(shape), std::move(data), false);
    }
    static Tensor param(Shape shape, std::vector<double> data) {
        return make(std::move(shape), std::move(data), true);
    }
    static Tensor scalar(double v) { return constant({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->val.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<double>& values() { return node_->val; }
    const std::vector<double>& values() const { return node_->val; }
    std::vector<double>& grad() {
        if (!node_->requires_grad)
            throw ArgumentError("tensor does not track gradients");
        return node_->grad;
    }
    const std::vector<double>& grad() const {
        if (!node_->requires_grad)
            throw ArgumentError("tensor does not track gradients");
        return node_->grad;
    }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    // Seeds d(loss)/d(loss) = 1 and walks the graph once in reverse
    // topological order. Calling backward twice without zeroing gradients
    // accumulates them; that is intended behavior, not a bug.
    void backward() const {
        if (numel() != 1)
            throw ArgumentError("backward: loss must be scalar, got shape " +
                                shape_str(node_->shape));
        if (!node_->requires_grad)
            throw ArgumentError("backward: loss does not depend on any parameter");

        std::vector<detail::TensorNode*> order;
        std::unordered_set<detail::TensorNode*> visited;
        std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& top = stack.back();
            if (top.second < top.first->parents.size()) {
                detail::TensorNode* p = top.first->parents[top.second].get();
                ++top.second;
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(top.first);
                stack.pop_back();
            }
        }
        // interior nodes get a fresh pass each call; only leaf gradients
        // accumulate across calls
        for (detail::TensorNode* n : order)
            if (n->backward_fn) std::fill(n->grad.begin(), n->grad.end(), 0.0);
        node_->grad[0] += 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }

    // internal plumbing for op implementations
    std::shared_ptr<detail::TensorNode> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::TensorNode> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

  private:
    static Tensor make(Shape shape, std::vector<double> data, bool requires_grad) {
        auto n = std::make_shared<detail::TensorNode>();
        const std::size_t count = shape_numel(shape);
        n->shape = std::move(shape);
        if (data.empty()) {
            n->val.assign(count, 0.0);
        } else {
            if (data.size() != count)
                throw ShapeError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(n->shape));
            n->val = std::move(data);
        }
        n->requires_grad = requires_grad;
        if (requires_grad) n->grad.assign(count, 0.0);
        return wrap(std::move(n));
    }

    std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> val,
                      std::vector<std::shared_ptr<TensorNode>> parents,
                      std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    for (const auto& p : parents)
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    if (n->requires_grad) {
        n->grad.assign(n->val.size(), 0.0);
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor::wrap(std::move(n));
}

inline bool is_suffix(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i)
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
}

inline void check_binary(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return;
    if (is_suffix(a.shape(), b.shape())) return;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are neither equal nor suffix-broadcastable");
}

// (outer, axis length, inner) decomposition used by axis-wise ops
struct AxisSplit {
    std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size())
        throw ArgumentError(std::string(op) + ": axis " + std::to_string(axis) +
                            " out of range for shape " + shape_str(shape));
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_binary(a, b, "add");
    const std::size_t n = a.numel(), bn = b.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] + b.values()[i % bn];
    auto pa = a.node(), pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb, n, bn](detail::TensorNode& self) {
        if (pa->requires_grad)
            for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i];
        if (pb->requires_grad)
            for (std::size_t i = 0; i < n; ++i) pb->grad[i % bn] += self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_binary(a, b, "sub");
    const std::size_t n = a.numel(), bn = b.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] - b.values()[i % bn];
    auto pa = a.node(), pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb, n, bn](detail::TensorNode& self) {
        if (pa->requires_grad)
            for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i];
        if (pb->requires_grad)
            for (std::size_t i = 0; i < n; ++i) pb->grad[i % bn] -= self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_binary(a, b, "mul");
    const std::size_t n = a.numel(), bn = b.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] * b.values()[i % bn];
    auto pa = a.node(), pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb, n, bn](detail::TensorNode& self) {
        if (pa->requires_grad)
            for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i] * pb->val[i % bn];
        if (pb->requires_grad)
            for (std::size_t i = 0; i < n; ++i) pb->grad[i % bn] += self.grad[i] * pa->val[i];
    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_binary(a, b, "div");
    const std::size_t n = a.numel(), bn = b.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] / b.values()[i % bn];
    auto pa = a.node(), pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb, n, bn](detail::TensorNode& self) {
        if (pa->requires_grad)
            for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i] / pb->val[i % bn];
        if (pb->requires_grad)
            for (std::size_t i = 0; i < n; ++i) {
                const double bv = pb->val[i % bn];
                pb->grad[i % bn] -= self.grad[i] * pa->val[i] / (bv * bv);
            }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] * c;
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {pa}, [pa, n, c](detail::TensorNode& self) {
        for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i] * c;
    });
}

inline Tensor add_const(const Tensor& a, double c) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] + c;
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {pa}, [pa, n](detail::TensorNode& self) {
        for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i];
    });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Unary nonlinearities.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dydx) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a.values()[i]);
    auto pa = a.node();
    std::vector<double> saved = out;
    return make_op(a.shape(), std::move(out), {pa},
                   [pa, n, dydx, saved = std::move(saved)](TensorNode& self) {
                       for (std::size_t i = 0; i < n; ++i)
                           pa->grad[i] += self.grad[i] * dydx(pa->val[i], saved[i]);
                   });
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_op(
        a,
        [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

inline Tensor clamp_min(const Tensor& a, double lo) {
    return detail::unary_op(
        a, [lo](double x) { return x < lo ? lo : x; },
        [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Matrix multiply (2-D), with optional transposes.
// ---------------------------------------------------------------------------

namespace detail {

// out(M x N) += or = A_eff(M x K) * B_eff(K x N), where the _eff views apply
// the transpose flags to the stored row-major arrays
inline void gemm(const double* a, std::size_t ar, std::size_t ac, bool ta, const double* b,
                 std::size_t br, std::size_t bc, bool tb, double* out, bool accumulate) {
    const std::size_t M = ta ? ac : ar;
    const std::size_t K = ta ? ar : ac;
    const std::size_t Kb = tb ? bc : br;
    const std::size_t N = tb ? br : bc;
    if (K != Kb) throw ShapeError("matmul: inner dimensions disagree");
    if (!accumulate) std::fill(out, out + M * N, 0.0);
    for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t k = 0; k < K; ++k) {
            const double av = ta ? a[k * ac + m] : a[m * ac + k];
            if (av == 0.0) continue;
            const double* brow = tb ? nullptr : b + k * bc;
            double* orow = out + m * N;
            if (!tb) {
                for (std::size_t j = 0; j < N; ++j) orow[j] += av * brow[j];
            } else {
                for (std::size_t j = 0; j < N; ++j) orow[j] += av * b[j * bc + k];
            }
        }
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
                     bool transpose_b = false) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw ShapeError("matmul: both operands must be 2-D, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const std::size_t ar = a.dim(0), ac = a.dim(1);
    const std::size_t br = b.dim(0), bc = b.dim(1);
    const std::size_t M = transpose_a ? ac : ar;
    const std::size_t K = transpose_a ? ar : ac;
    const std::size_t Kb = transpose_b ? bc : br;
    const std::size_t N = transpose_b ? br : bc;
    if (K != Kb)
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                         (transpose_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                         (transpose_b ? "^T" : ""));

    std::vector<double> out(M * N);
    detail::gemm(a.values().data(), ar, ac, transpose_a, b.values().data(), br, bc, transpose_b,
                 out.data(), false);
    auto pa = a.node(), pb = b.node();
    const bool ta = transpose_a, tb = transpose_b;
    return detail::make_op(
        {M, N}, std::move(out), {pa, pb},
        [pa, pb, ar, ac, br, bc, M, N, ta, tb](detail::TensorNode& self) {
            const double* g = self.grad.data();
            if (pa->requires_grad) {
                if (!ta && !tb)
                    detail::gemm(g, M, N, false, pb->val.data(), br, bc, true,
                                 pa->grad.data(), true);
                else if (ta && !tb)
                    detail::gemm(pb->val.data(), br, bc, false, g, M, N, true,
                                 pa->grad.data(), true);
                else if (!ta && tb)
                    detail::gemm(g, M, N, false, pb->val.data(), br, bc, false,
                                 pa->grad.data(), true);
                else
                    detail::gemm(pb->val.data(), br, bc, true, g, M, N, true,
                                 pa->grad.data(), true);
            }
            if (pb->requires_grad) {
                if (!ta && !tb)
                    detail::gemm(pa->val.data(), ar, ac, true, g, M, N, false,
                                 pb->grad.data(), true);
                else if (ta && !tb)
                    detail::gemm(pa->val.data(), ar, ac, false, g, M, N, false,
                                 pb->grad.data(), true);
                else if (!ta && tb)
                    detail::gemm(g, M, N, true, pa->val.data(), ar, ac, false,
                                 pb->grad.data(), true);
                else
                    detail::gemm(g, M, N, true, pa->val.data(), ar, ac, true,
                                 pb->grad.data(), true);
            }
        });
}

// ---------------------------------------------------------------------------
// Shape surgery: concat, slice, expand, row select/scatter/gather.
// ---------------------------------------------------------------------------

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ArgumentError("concat: no inputs");
    const Shape& base = parts[0].shape();
    Shape out_shape = base;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != base.size())
            throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < base.size(); ++d)
            if (d != axis && p.shape()[d] != base[d])
                throw ShapeError("concat: non-axis dimension mismatch");
        total += p.shape()[axis];
    }
    out_shape[axis] = total;
    const auto sp = detail::split_axis(out_shape, axis, "concat");

    std::vector<double> out(shape_numel(out_shape));
    std::vector<std::shared_ptr<detail::TensorNode>> parents;
    std::vector<std::size_t> offsets;  // start along axis per part
    std::size_t off = 0;
    for (const auto& p : parts) {
        parents.push_back(p.node());
        offsets.push_back(off);
        const std::size_t plen = p.shape()[axis];
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t k = 0; k < plen; ++k)
                std::copy(p.values().begin() + static_cast<std::ptrdiff_t>((o * plen + k) * sp.inner),
                          p.values().begin() + static_cast<std::ptrdiff_t>((o * plen + k + 1) * sp.inner),
                          out.begin() + static_cast<std::ptrdiff_t>((o * sp.len + off + k) * sp.inner));
        off += plen;
    }
    auto parent_copy = parents;
    return detail::make_op(
        out_shape, std::move(out), std::move(parents),
        [parent_copy, offsets, sp, axis](detail::TensorNode& self) {
            for (std::size_t pi = 0; pi < parent_copy.size(); ++pi) {
                auto& p = *parent_copy[pi];
                if (!p.requires_grad) continue;
                const std::size_t plen = p.shape[axis];
                const std::size_t off2 = offsets[pi];
                for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t k = 0; k < plen; ++k)
                        for (std::size_t i = 0; i < sp.inner; ++i)
                            p.grad[(o * plen + k) * sp.inner + i] +=
                                self.grad[(o * sp.len + off2 + k) * sp.inner + i];
            }
        });
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
    const auto sp = detail::split_axis(x.shape(), axis, "slice");
    if (start + len > sp.len || len == 0)
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of axis length " +
                         std::to_string(sp.len));
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    std::vector<double> out(shape_numel(out_shape));
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < len; ++k)
            std::copy(
                x.values().begin() + static_cast<std::ptrdiff_t>((o * sp.len + start + k) * sp.inner),
                x.values().begin() + static_cast<std::ptrdiff_t>((o * sp.len + start + k + 1) * sp.inner),
                out.begin() + static_cast<std::ptrdiff_t>((o * len + k) * sp.inner));
    auto px = x.node();
    return detail::make_op(out_shape, std::move(out), {px},
                           [px, sp, start, len](detail::TensorNode& self) {
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                   for (std::size_t k = 0; k < len; ++k)
                                       for (std::size_t i = 0; i < sp.inner; ++i)
                                           px->grad[(o * sp.len + start + k) * sp.inner + i] +=
                                               self.grad[(o * len + k) * sp.inner + i];
                           });
}

// repeat a size-1 axis n times
inline Tensor expand(const Tensor& x, std::size_t axis, std::size_t n) {
    const auto sp = detail::split_axis(x.shape(), axis, "expand");
    if (sp.len != 1)
        throw ShapeError("expand: axis " + std::to_string(axis) + " has size " +
                         std::to_string(sp.len) + ", expected 1");
    Shape out_shape = x.shape();
    out_shape[axis] = n;
    std::vector<double> out(shape_numel(out_shape));
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
            std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(o * sp.inner),
                      x.values().begin() + static_cast<std::ptrdiff_t>((o + 1) * sp.inner),
                      out.begin() + static_cast<std::ptrdiff_t>((o * n + k) * sp.inner));
    auto px = x.node();
    return detail::make_op(out_shape, std::move(out), {px},
                           [px, sp, n](detail::TensorNode& self) {
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                   for (std::size_t k = 0; k < n; ++k)
                                       for (std::size_t i = 0; i < sp.inner; ++i)
                                           px->grad[o * sp.inner + i] +=
                                               self.grad[(o * n + k) * sp.inner + i];
                           });
}

// pick whole rows of a 2-D tensor (duplicates allowed)
inline Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    if (x.shape().size() != 2) throw ShapeError("select_rows: input must be 2-D");
    const std::size_t C = x.dim(1);
    std::vector<double> out(rows.size() * C);
    for (std::size_t m = 0; m < rows.size(); ++m) {
        if (rows[m] >= x.dim(0)) throw ArgumentError("select_rows: row index out of range");
        std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(rows[m] * C),
                  x.values().begin() + static_cast<std::ptrdiff_t>((rows[m] + 1) * C),
                  out.begin() + static_cast<std::ptrdiff_t>(m * C));
    }
    auto px = x.node();
    return detail::make_op({rows.size(), C}, std::move(out), {px},
                           [px, rows, C](detail::TensorNode& self) {
                               for (std::size_t m = 0; m < rows.size(); ++m)
                                   for (std::size_t j = 0; j < C; ++j)
                                       px->grad[rows[m] * C + j] += self.grad[m * C + j];
                           });
}

// place rows of a 2-D tensor into a zero (n_rows x C) canvas
inline Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& rows,
                           std::size_t n_rows) {
    if (x.shape().size() != 2) throw ShapeError("scatter_rows: input must be 2-D");
    if (rows.size() != x.dim(0))
        throw ShapeError("scatter_rows: need one target row per input row");
    const std::size_t C = x.dim(1);
    std::vector<double> out(n_rows * C, 0.0);
    for (std::size_t m = 0; m < rows.size(); ++m) {
        if (rows[m] >= n_rows) throw ArgumentError("scatter_rows: row index out of range");
        for (std::size_t j = 0; j < C; ++j) out[rows[m] * C + j] += x.values()[m * C + j];
    }
    auto px = x.node();
    return detail::make_op({n_rows, C}, std::move(out), {px},
                           [px, rows, C](detail::TensorNode& self) {
                               for (std::size_t m = 0; m < rows.size(); ++m)
                                   for (std::size_t j = 0; j < C; ++j)
                                       px->grad[m * C + j] += self.grad[rows[m] * C + j];
                           });
}

// per-row element pick from a 2-D tensor: out[i] = x[i, indices[i]]
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
    if (x.shape().size() != 2) throw ShapeError("gather_rows: input must be 2-D");
    if (indices.size() != x.dim(0))
        throw ShapeError("gather_rows: need exactly one column index per row");
    const std::size_t C = x.dim(1);
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= C) throw ArgumentError("gather_rows: column index out of range");
        out[i] = x.values()[i * C + indices[i]];
    }
    auto px = x.node();
    return detail::make_op({indices.size()}, std::move(out), {px},
                           [px, indices, C](detail::TensorNode& self) {
                               for (std::size_t i = 0; i < indices.size(); ++i)
                                   px->grad[i * C + indices[i]] += self.grad[i];
                           });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

inline Tensor reduce_sum(const Tensor& x, std::size_t axis, bool keepdim = false) {
    const auto sp = detail::split_axis(x.shape(), axis, "reduce_sum");
    Shape out_shape;
    for (std::size_t d = 0; d < x.shape().size(); ++d) {
        if (d == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(x.shape()[d]);
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.len; ++k)
            for (std::size_t i = 0; i < sp.inner; ++i)
                out[o * sp.inner + i] += x.values()[(o * sp.len + k) * sp.inner + i];
    auto px = x.node();
    return detail::make_op(out_shape, std::move(out), {px}, [px, sp](detail::TensorNode& self) {
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t k = 0; k < sp.len; ++k)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    px->grad[(o * sp.len + k) * sp.inner + i] += self.grad[o * sp.inner + i];
    });
}

inline Tensor reduce_mean(const Tensor& x, std::size_t axis, bool keepdim = false) {
    const double inv = 1.0 / static_cast<double>(x.shape()[axis]);
    return scale(reduce_sum(x, axis, keepdim), inv);
}

namespace detail {

// shared by reduce_max and reduce_min; gradient flows to the first element
// attaining the extremum (subgradient choice, matters only on exact ties)
inline Tensor reduce_extremum(const Tensor& x, std::size_t axis, bool keepdim, bool want_max,
                              const char* op) {
    const auto sp = split_axis(x.shape(), axis, op);
    Shape out_shape;
    for (std::size_t d = 0; d < x.shape().size(); ++d) {
        if (d == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(x.shape()[d]);
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);
    std::vector<double> out(sp.outer * sp.inner);
    std::vector<std::size_t> argpos(sp.outer * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            std::size_t best_k = 0;
            double best = x.values()[(o * sp.len) * sp.inner + i];
            for (std::size_t k = 1; k < sp.len; ++k) {
                const double v = x.values()[(o * sp.len + k) * sp.inner + i];
                if (want_max ? v > best : v < best) {
                    best = v;
                    best_k = k;
                }
            }
            out[o * sp.inner + i] = best;
            argpos[o * sp.inner + i] = best_k;
        }
    auto px = x.node();
    return make_op(out_shape, std::move(out), {px},
                   [px, sp, argpos = std::move(argpos)](TensorNode& self) {
                       for (std::size_t o = 0; o < sp.outer; ++o)
                           for (std::size_t i = 0; i < sp.inner; ++i)
                               px->grad[(o * sp.len + argpos[o * sp.inner + i]) * sp.inner + i] +=
                                   self.grad[o * sp.inner + i];
                   });
}

}  // namespace detail

inline Tensor reduce_max(const Tensor& x, std::size_t axis, bool keepdim = false) {
    return detail::reduce_extremum(x, axis, keepdim, true, "reduce_max");
}

inline Tensor reduce_min(const Tensor& x, std::size_t axis, bool keepdim = false) {
    return detail::reduce_extremum(x, axis, keepdim, false, "reduce_min");
}

inline Tensor reduce_sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto px = x.node();
    const std::size_t n = x.numel();
    return detail::make_op({1}, {s}, {px}, [px, n](detail::TensorNode& self) {
        for (std::size_t i = 0; i < n; ++i) px->grad[i] += self.grad[0];
    });
}

inline Tensor reduce_mean_all(const Tensor& x) {
    return scale(reduce_sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// Softmax along an axis (numerically stabilized).
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto sp = detail::split_axis(x.shape(), axis, "softmax");
    if (sp.len == 0) throw ArgumentError("softmax: empty axis");
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < sp.len; ++k)
                mx = std::max(mx, x.values()[(o * sp.len + k) * sp.inner + i]);
            double denom = 0.0;
            for (std::size_t k = 0; k < sp.len; ++k) {
                const double e = std::exp(x.values()[(o * sp.len + k) * sp.inner + i] - mx);
                out[(o * sp.len + k) * sp.inner + i] = e;
                denom += e;
            }
            for (std::size_t k = 0; k < sp.len; ++k)
                out[(o * sp.len + k) * sp.inner + i] /= denom;
        }
    auto px = x.node();
    std::vector<double> y = out;
    return detail::make_op(x.shape(), std::move(out), {px},
                           [px, sp, y = std::move(y)](detail::TensorNode& self) {
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                   for (std::size_t i = 0; i < sp.inner; ++i) {
                                       double dot = 0.0;
                                       for (std::size_t k = 0; k < sp.len; ++k) {
                                           const std::size_t idx = (o * sp.len + k) * sp.inner + i;
                                           dot += self.grad[idx] * y[idx];
                                       }
                                       for (std::size_t k = 0; k < sp.len; ++k) {
                                           const std::size_t idx = (o * sp.len + k) * sp.inner + i;
                                           px->grad[idx] += y[idx] * (self.grad[idx] - dot);
                                       }
                                   }
                           });
}

// ---------------------------------------------------------------------------
// Dropout with a counter-based mask: the mask for (seed, layer_id, step) is
// identical no matter how many graphs run in parallel or in what order.
// ---------------------------------------------------------------------------

inline Tensor dropout(const Tensor& x, double p, bool train, std::uint64_t seed,
                      std::uint64_t layer_id, std::uint64_t step) {
    if (p < 0.0 || p >= 1.0) throw ArgumentError("dropout: p must be in [0, 1)");
    if (!train || p == 0.0) return x;
    const std::size_t n = x.numel();
    std::vector<double> mask(n);
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = u64_to_unit_double(counter_hash(seed, layer_id, step, i));
        mask[i] = u < p ? 0.0 : keep_scale;
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x.values()[i] * mask[i];
    auto px = x.node();
    return detail::make_op(x.shape(), std::move(out), {px},
                           [px, n, mask = std::move(mask)](detail::TensorNode& self) {
                               for (std::size_t i = 0; i < n; ++i)
                                   px->grad[i] += self.grad[i] * mask[i];
                           });
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis (composite of primitives).
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    const std::size_t last = x.shape().size() - 1;
    const std::size_t width = x.shape()[last];
    if (gamma.shape() != Shape{width} || beta.shape() != Shape{width})
        throw ShapeError("layer_norm: gamma/beta must have shape (" + std::to_string(width) + ")");
    Tensor mu = expand(reduce_mean(x, last, true), last, width);
    Tensor centered = sub(x, mu);
    Tensor var = expand(reduce_mean(mul(centered, centered), last, true), last, width);
    Tensor normed = div(centered, sqrt(add_const(var, eps)));
    return add(mul(normed, gamma), beta);
}

// ---------------------------------------------------------------------------
// Batch norm over axis 0 of a 2-D (batch x features) tensor. Train mode
// normalizes with batch statistics (as graph nodes) and updates the running
// statistics in `state`; eval mode uses the frozen running statistics.
// ---------------------------------------------------------------------------

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;
    bool initialized = false;

    void reset() {
        std::fill(running_mean.begin(), running_mean.end(), 0.0);
        std::fill(running_var.begin(), running_var.end(), 1.0);
        initialized = false;
    }
};

inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         BatchNormState& state, bool train) {
    if (x.shape().size() != 2) throw ShapeError("batch_norm: input must be 2-D");
    const std::size_t B = x.dim(0), F = x.dim(1);
    if (gamma.shape() != Shape{F} || beta.shape() != Shape{F})
        throw ShapeError("batch_norm: gamma/beta must have shape (" + std::to_string(F) + ")");
    if (state.running_mean.empty()) {
        state.running_mean.assign(F, 0.0);
        state.running_var.assign(F, 1.0);
    }
    if (state.running_mean.size() != F)
        throw ShapeError("batch_norm: state width does not match features");

    if (train) {
        Tensor mu = reduce_mean(x, 0, true);                    // (1 x F)
        Tensor mu_b = expand(mu, 0, B);                         // (B x F)
        Tensor centered = sub(x, mu_b);
        Tensor var = reduce_mean(mul(centered, centered), 0, true);  // biased, (1 x F)
        Tensor var_b = expand(var, 0, B);
        Tensor normed = div(centered, sqrt(add_const(var_b, state.eps)));

        // running statistics live outside the graph
        for (std::size_t f = 0; f < F; ++f) {
            const double bm = mu.values()[f];
            const double bv = var.values()[f];
            if (!state.initialized) {
                state.running_mean[f] = bm;
                state.running_var[f] = bv;
            } else {
                state.running_mean[f] =
                    (1.0 - state.momentum) * state.running_mean[f] + state.momentum * bm;
                state.running_var[f] =
                    (1.0 - state.momentum) * state.running_var[f] + state.momentum * bv;
            }
        }
        state.initialized = true;
        return add(mul(normed, gamma), beta);
    }

    Tensor mean_c = Tensor::constant({F}, state.running_mean);
    std::vector<double> inv_sd(F);
    for (std::size_t f = 0; f < F; ++f)
        inv_sd[f] = 1.0 / std::sqrt(state.running_var[f] + state.eps);
    Tensor inv_c = Tensor::constant({F}, std::move(inv_sd));
    return add(mul(mul(sub(x, mean_c), inv_c), gamma), beta);
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention for (tokens x dim) inputs.
// ---------------------------------------------------------------------------

inline Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                           std::size_t heads) {
    if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2)
        throw ShapeError("attention: q, k, v must be 2-D");
    const std::size_t D = q.dim(1);
    if (k.dim(1) != D || v.dim(1) != D)
        throw ShapeError("attention: q, k, v widths disagree");
    if (k.dim(0) != v.dim(0))
        throw ShapeError("attention: k and v token counts disagree");
    if (heads == 0 || D % heads != 0)
        throw ShapeError("attention: width " + std::to_string(D) + " not divisible by " +
                         std::to_string(heads) + " heads");
    const std::size_t dh = D / heads;
    const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice(q, 1, h * dh, dh);
        Tensor kh = slice(k, 1, h * dh, dh);
        Tensor vh = slice(v, 1, h * dh, dh);
        Tensor scores = scale(matmul(qh, kh, false, true), scale_f);
        Tensor attn = softmax(scores, 1);
        outs.push_back(matmul(attn, vh));
    }
    return concat(outs, 1);
}

// ---------------------------------------------------------------------------
// Optimizer machinery. Weight decay is the classic L2-in-gradient form
// (decay * p added to the gradient before the moment updates), and clipping
// rescales the concatenated gradient of all parameters to a target norm.
// ---------------------------------------------------------------------------

// returns the pre-clip global norm
inline double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
    if (max_norm <= 0.0) throw ArgumentError("clip_global_norm: max_norm must be positive");
    double sq = 0.0;
    for (auto& p : params)
        for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double f = max_norm / norm;
        for (auto& p : params)
            for (double& g : p.grad()) g *= f;
    }
    return norm;
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class Adam {
  public:
    Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        if (cfg.lr <= 0.0) throw ArgumentError("adam: learning rate must be positive");
        for (const auto& p : params_) {
            if (!p.requires_grad()) throw ArgumentError("adam: parameter does not track gradients");
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t j = 0; j < params_.size(); ++j) {
            auto& val = params_[j].values();
            const auto& grad = params_[j].grad();
            for (std::size_t i = 0; i < val.size(); ++i) {
                const double g = grad[i] + cfg_.weight_decay * val[i];
                m_[j][i] = cfg_.beta1 * m_[j][i] + (1.0 - cfg_.beta1) * g;
                v_[j][i] = cfg_.beta2 * v_[j][i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m_[j][i] / bc1;
                const double vhat = v_[j][i] / bc2;
                val[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

  private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Parameter checkpoints: versioned binary of named f64 tensors.
// ---------------------------------------------------------------------------

struct CheckpointEntry {
    Shape shape;
    std::vector<double> values;
};

using Checkpoint = std::map<std::string, CheckpointEntry>;

namespace detail {

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace detail

inline void save_checkpoint(const Checkpoint& entries, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write("TSR1", 4);
    detail::write_pod<std::uint32_t>(os, detail::kCheckpointVersion);
    detail::write_pod<std::uint64_t>(os, entries.size());
    for (const auto& [name, entry] : entries) {
        detail::write_str16(os, name);
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(entry.shape.size()));
        for (std::size_t d : entry.shape) detail::write_pod<std::uint64_t>(os, d);
        if (entry.values.size() != shape_numel(entry.shape))
            throw ValidationError("checkpoint entry '" + name + "': data/shape mismatch");
        detail::write_array(os, entry.values);
    }
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TSR1", 4) != 0)
        throw FormatError("not a checkpoint file: " + path);
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != detail::kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto count = detail::read_pod<std::uint64_t>(is, "entry count");
    Checkpoint out;
    for (std::uint64_t e = 0; e < count; ++e) {
        const std::string name = detail::read_str16(is, "entry name");
        const auto ndim = detail::read_pod<std::uint32_t>(is, "rank");
        CheckpointEntry entry;
        for (std::uint32_t d = 0; d < ndim; ++d)
            entry.shape.push_back(detail::read_pod<std::uint64_t>(is, "dim"));
        detail::read_array(is, entry.values, shape_numel(entry.shape), "tensor payload");
        if (out.count(name)) throw CorruptionError("duplicate checkpoint entry '" + name + "'");
        out[name] = std::move(entry);
    }
    is.peek();
    if (!is.eof()) throw CorruptionError("trailing bytes after checkpoint payload: " + path);
    return out;
}

// digest of parameter bytes, for frozen-weight and determinism checks
inline std::uint64_t checkpoint_digest(const Checkpoint& entries) {
    std::uint64_t h = kFnvOffset;
    for (const auto& [name, entry] : entries) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(entry.values.data(), entry.values.size() * sizeof(double), h);
    }
    return h;
}

}  // namespace s2scast
