#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "dgseg/errors.hpp"

namespace dgseg {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

namespace detail {

template <typename Scalar>
struct TensorNode {
    Shape shape;
    std::vector<Scalar> values;
    std::vector<Scalar> grad;  // sized on demand, same length as values
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Pulls this node's grad into the parents. Installed by the op that
    // produced the node; leaves have none.
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), Scalar(0));
    }
};

}  // namespace detail

// Dense n-dimensional array with optional reverse-mode gradient taping.
// A Tensor is a value-semantics handle onto a shared node; operations produce
// fresh nodes, so anything returned by an op is treated as immutable. Leaves
// (parameters, inputs) own mutable storage that the optimizer may update in
// place between forward passes. One tape belongs to one execution context;
// nodes are not synchronized for concurrent mutation.
template <typename Scalar>
class Tensor {
public:
    using Node = detail::TensorNode<Scalar>;

    Tensor() = default;

    explicit Tensor(Shape shape, Scalar fill = Scalar(0), bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        node_->shape = std::move(shape);
        node_->values.assign(static_cast<std::size_t>(shape_numel(node_->shape)), fill);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<Scalar> values, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
            throw DimensionError("value count " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->values = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(Scalar v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<Scalar>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->values.size()); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<Scalar>& data() { return node_->values; }
    const std::vector<Scalar>& data() const { return node_->values; }

    // Gradient buffer; empty until a backward pass reaches this node.
    const std::vector<Scalar>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Scalar(0));
    }

    void set_requires_grad(bool rg) {
        if (node_->backward_fn)
            throw ContractError("requires_grad may only be toggled on leaf tensors");
        node_->requires_grad = rg;
    }

    Scalar item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->values[0];
    }

    // Deep copy with no tape attached.
    Tensor detach(bool requires_grad = false) const {
        Tensor t(node_->shape, node_->values, requires_grad);
        return t;
    }

    // Reverse-mode pass from a scalar root. Accumulates into .grad of every
    // reachable node that requires grad.
    void backward() const {
        if (numel() != 1) throw ContractError("backward() requires a scalar root, got " + shape_str(shape()));
        if (!node_->requires_grad) return;

        // Iterative post-order over parents.
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx].get();
                ++idx;
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }

        node_->ensure_grad();
        node_->grad[0] += Scalar(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward_fn) n->backward_fn(*n);
        }
    }

    std::shared_ptr<Node> node() const { return node_; }

    // Raw node construction for ops.
    static Tensor from_node(std::shared_ptr<Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

// Builds an op output node. backward receives (out_node) and must accumulate
// into the listed parents' grads; it is installed only when some parent
// requires grad, so constant subgraphs carry no tape.
template <typename Scalar>
Tensor<Scalar> make_op(Shape shape, std::vector<Scalar> values,
                       std::vector<std::shared_ptr<TensorNode<Scalar>>> parents,
                       std::function<void(TensorNode<Scalar>&)> backward) {
    auto node = std::make_shared<TensorNode<Scalar>>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    node->requires_grad = rg;
    if (rg) {
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward);
    }
    return Tensor<Scalar>::from_node(std::move(node));
}

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<Scalar> out(a.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op<Scalar>(a.shape(), std::move(out), {an, bn},
        [an, bn](detail::TensorNode<Scalar>& o) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
            }
        });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<Scalar> out(a.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op<Scalar>(a.shape(), std::move(out), {an, bn},
        [an, bn](detail::TensorNode<Scalar>& o) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
            }
        });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<Scalar> out(a.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op<Scalar>(a.shape(), std::move(out), {an, bn},
        [an, bn](detail::TensorNode<Scalar>& o) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->values[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->values[i];
            }
        });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<Scalar> out(a.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op<Scalar>(a.shape(), std::move(out), {an, bn},
        [an, bn](detail::TensorNode<Scalar>& o) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] / bn->values[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < o.grad.size(); ++i)
                    bn->grad[i] -= o.grad[i] * an->values[i] / (bn->values[i] * bn->values[i]);
            }
        });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar c) {
    std::vector<Scalar> out(a.data());
    for (auto& v : out) v *= c;
    auto an = a.node();
    return detail::make_op<Scalar>(a.shape(), std::move(out), {an},
        [an, c](detail::TensorNode<Scalar>& o) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
        });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar c) {
    std::vector<Scalar> out(a.data());
    for (auto& v : out) v += c;
    auto an = a.node();
    return detail::make_op<Scalar>(a.shape(), std::move(out), {an},
        [an](detail::TensorNode<Scalar>& o) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        });
}

namespace detail {

template <typename Scalar, typename F, typename DF>
Tensor<Scalar> unary_op(const Tensor<Scalar>& a, F f, DF dfdx) {
    std::vector<Scalar> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
    auto an = a.node();
    return make_op<Scalar>(a.shape(), std::move(out), {an},
        [an, dfdx](TensorNode<Scalar>& o) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                an->grad[i] += o.grad[i] * dfdx(an->values[i], o.values[i]);
        });
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
    return detail::unary_op(a,
        [](Scalar x) { return x > Scalar(0) ? x : Scalar(0); },
        [](Scalar x, Scalar) { return x > Scalar(0) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& a) {
    // Exact erf form; derivative Phi(x) + x*phi(x).
    return detail::unary_op(a,
        [](Scalar x) {
            return Scalar(0.5) * x * (Scalar(1) + std::erf(x / Scalar(std::sqrt(2.0))));
        },
        [](Scalar x, Scalar) {
            const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / Scalar(std::sqrt(2.0))));
            const Scalar pdf = Scalar(std::exp(-0.5 * double(x) * double(x)) / std::sqrt(2.0 * M_PI));
            return cdf + x * pdf;
        });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& a) {
    return detail::unary_op(a,
        [](Scalar x) { return std::exp(x); },
        [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
    return detail::unary_op(a,
        [](Scalar x) { return std::log(x); },
        [](Scalar x, Scalar) { return Scalar(1) / x; });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a) {
    return detail::unary_op(a,
        [](Scalar x) { return x * x; },
        [](Scalar x, Scalar) { return Scalar(2) * x; });
}

template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& a) {
    // Subgradient 0 at the kink.
    return detail::unary_op(a,
        [](Scalar x) { return std::abs(x); },
        [](Scalar x, Scalar) { return x > Scalar(0) ? Scalar(1) : (x < Scalar(0) ? Scalar(-1) : Scalar(0)); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
    Scalar s = std::accumulate(a.data().begin(), a.data().end(), Scalar(0));
    auto an = a.node();
    return detail::make_op<Scalar>(Shape{1}, std::vector<Scalar>{s}, {an},
        [an](detail::TensorNode<Scalar>& o) {
            an->ensure_grad();
            const Scalar g = o.grad[0];
            for (auto& gi : an->grad) gi += g;
        });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
    const Scalar inv = Scalar(1) / Scalar(a.numel());
    Scalar s = std::accumulate(a.data().begin(), a.data().end(), Scalar(0)) * inv;
    auto an = a.node();
    return detail::make_op<Scalar>(Shape{1}, std::vector<Scalar>{s}, {an},
        [an, inv](detail::TensorNode<Scalar>& o) {
            an->ensure_grad();
            const Scalar g = o.grad[0] * inv;
            for (auto& gi : an->grad) gi += g;
        });
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

// Same element order, new shape.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    auto an = a.node();
    return detail::make_op<Scalar>(std::move(shape), std::vector<Scalar>(a.data()), {an},
        [an](detail::TensorNode<Scalar>& o) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        });
}

// (L, d) token rows -> (d, h, w) channel-major map, with L == h*w.
template <typename Scalar>
Tensor<Scalar> tokens_to_map(const Tensor<Scalar>& a, int h, int w) {
    if (a.ndim() != 2 || a.dim(0) != h * w)
        throw DimensionError("tokens_to_map: " + shape_str(a.shape()) + " to grid " +
                             std::to_string(h) + "x" + std::to_string(w));
    const int L = a.dim(0), d = a.dim(1);
    std::vector<Scalar> out(static_cast<std::size_t>(L) * d);
    for (int t = 0; t < L; ++t)
        for (int c = 0; c < d; ++c)
            out[static_cast<std::size_t>(c) * L + t] = a.data()[static_cast<std::size_t>(t) * d + c];
    auto an = a.node();
    return detail::make_op<Scalar>(Shape{d, h, w}, std::move(out), {an},
        [an, L, d](detail::TensorNode<Scalar>& o) {
            an->ensure_grad();
            for (int t = 0; t < L; ++t)
                for (int c = 0; c < d; ++c)
                    an->grad[static_cast<std::size_t>(t) * d + c] +=
                        o.grad[static_cast<std::size_t>(c) * L + t];
        });
}

// (d, h, w) -> (h*w, d)
template <typename Scalar>
Tensor<Scalar> map_to_tokens(const Tensor<Scalar>& a) {
    if (a.ndim() != 3) throw DimensionError("map_to_tokens: want (C,H,W), got " + shape_str(a.shape()));
    const int d = a.dim(0), L = a.dim(1) * a.dim(2);
    std::vector<Scalar> out(static_cast<std::size_t>(L) * d);
    for (int c = 0; c < d; ++c)
        for (int t = 0; t < L; ++t)
            out[static_cast<std::size_t>(t) * d + c] = a.data()[static_cast<std::size_t>(c) * L + t];
    auto an = a.node();
    return detail::make_op<Scalar>(Shape{L, d}, std::move(out), {an},
        [an, L, d](detail::TensorNode<Scalar>& o) {
            an->ensure_grad();
            for (int c = 0; c < d; ++c)
                for (int t = 0; t < L; ++t)
                    an->grad[static_cast<std::size_t>(c) * L + t] +=
                        o.grad[static_cast<std::size_t>(t) * d + c];
        });
}

// Column range [c0, c1) of a 2-d tensor.
template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& a, int c0, int c1) {
    if (a.ndim() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
        throw DimensionError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") of " + shape_str(a.shape()));
    const int rows = a.dim(0), cols = a.dim(1), w = c1 - c0;
    std::vector<Scalar> out(static_cast<std::size_t>(rows) * w);
    for (int r = 0; r < rows; ++r)
        std::copy_n(a.data().begin() + static_cast<std::size_t>(r) * cols + c0, w,
                    out.begin() + static_cast<std::size_t>(r) * w);
    auto an = a.node();
    return detail::make_op<Scalar>(Shape{rows, w}, std::move(out), {an},
        [an, rows, cols, c0, w](detail::TensorNode<Scalar>& o) {
            an->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < w; ++c)
                    an->grad[static_cast<std::size_t>(r) * cols + c0 + c] +=
                        o.grad[static_cast<std::size_t>(r) * w + c];
        });
}

// Concatenate 2-d tensors sharing a row count along columns.
template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of nothing");
    const int rows = parts[0].dim(0);
    int cols = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != rows)
            throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
        cols += p.dim(1);
    }
    std::vector<Scalar> out(static_cast<std::size_t>(rows) * cols);
    std::vector<std::shared_ptr<detail::TensorNode<Scalar>>> nodes;
    std::vector<int> widths;
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int r = 0; r < rows; ++r)
            std::copy_n(p.data().begin() + static_cast<std::size_t>(r) * w, w,
                        out.begin() + static_cast<std::size_t>(r) * cols + off);
        off += w;
        nodes.push_back(p.node());
        widths.push_back(w);
    }
    auto parent_nodes = nodes;
    return detail::make_op<Scalar>(Shape{rows, cols}, std::move(out), std::move(parent_nodes),
        [nodes, widths, rows, cols](detail::TensorNode<Scalar>& o) {
            int off2 = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                const int w = widths[k];
                if (nodes[k]->requires_grad) {
                    nodes[k]->ensure_grad();
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < w; ++c)
                            nodes[k]->grad[static_cast<std::size_t>(r) * w + c] +=
                                o.grad[static_cast<std::size_t>(r) * cols + off2 + c];
                }
                off2 += w;
            }
        });
}

// Channel k of a (K, H, W) tensor as an (H, W) plane.
template <typename Scalar>
Tensor<Scalar> slice_channel(const Tensor<Scalar>& a, int k) {
    if (a.ndim() != 3 || k < 0 || k >= a.dim(0))
        throw DimensionError("slice_channel " + std::to_string(k) + " of " + shape_str(a.shape()));
    const int hw = a.dim(1) * a.dim(2);
    std::vector<Scalar> out(a.data().begin() + static_cast<std::size_t>(k) * hw,
                            a.data().begin() + static_cast<std::size_t>(k + 1) * hw);
    auto an = a.node();
    const Shape out_shape{a.dim(1), a.dim(2)};
    return detail::make_op<Scalar>(out_shape, std::move(out), {an},
        [an, k, hw](detail::TensorNode<Scalar>& o) {
            an->ensure_grad();
            for (int i = 0; i < hw; ++i)
                an->grad[static_cast<std::size_t>(k) * hw + i] += o.grad[static_cast<std::size_t>(i)];
        });
}

// Stack (C_i, H, W) maps into (sum C_i, H, W).
template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& parts) {
    if (parts.empty()) throw DimensionError("concat_channels of nothing");
    const int h = parts[0].dim(1), w = parts[0].dim(2);
    int ctot = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 3 || p.dim(1) != h || p.dim(2) != w)
            throw DimensionError("concat_channels: spatial mismatch " + shape_str(p.shape()));
        ctot += p.dim(0);
    }
    std::vector<Scalar> out;
    out.reserve(static_cast<std::size_t>(ctot) * h * w);
    std::vector<std::shared_ptr<detail::TensorNode<Scalar>>> nodes;
    std::vector<std::int64_t> sizes;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        nodes.push_back(p.node());
        sizes.push_back(p.numel());
    }
    auto parent_nodes = nodes;
    return detail::make_op<Scalar>(Shape{ctot, h, w}, std::move(out), std::move(parent_nodes),
        [nodes, sizes](detail::TensorNode<Scalar>& o) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (nodes[k]->requires_grad) {
                    nodes[k]->ensure_grad();
                    for (std::int64_t i = 0; i < sizes[k]; ++i)
                        nodes[k]->grad[static_cast<std::size_t>(i)] += o.grad[off + static_cast<std::size_t>(i)];
                }
                off += static_cast<std::size_t>(sizes[k]);
            }
        });
}

}  // namespace dgseg
