#pragma once

// Tape-based reverse-mode differentiation over dense float64 tensors. The op
// set is deliberately small: exactly what the GRU-TCN classifier and the
// Q-network need. Broadcasting exists only in add_bias.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "strokesight/eeg_io.hpp"
#include "strokesight/error.hpp"

namespace strokesight::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s)
{
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

struct Parameter {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;

    Parameter() = default;
    Parameter(std::string n, Shape s)
        : name(std::move(n)), shape(std::move(s)), value(numel(shape), 0.0), grad(numel(shape), 0.0)
    {
    }

    std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using ParamRefs = std::vector<Parameter*>;

inline void zero_grads(const ParamRefs& ps)
{
    for (auto* p : ps) p->zero_grad();
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline void init_uniform(Parameter& p, std::size_t fan_in, std::mt19937_64& rng)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : p.value) v = u(rng);
}

class Graph;

class Var {
public:
    Var() = default;
    Var(Graph* g, std::size_t id) : g_(g), id_(id) {}

    Graph& graph() const { return *g_; }
    std::size_t id() const { return id_; }
    bool valid() const { return g_ != nullptr; }

    const Shape& shape() const;
    std::size_t size() const;
    std::span<const double> value() const;
    std::span<const double> grad() const;
    double item() const;

private:
    Graph* g_ = nullptr;
    std::size_t id_ = 0;
};

class Graph {
public:
    using Backward = std::function<void(Graph&)>;

    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        bool needs_grad = false;
        Parameter* param = nullptr;
        Backward backward;
    };

    // With record = false no backward closures are kept (inference mode).
    explicit Graph(bool record = true) : record_(record) { nodes_.reserve(256); }

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return record_; }
    std::size_t size() const { return nodes_.size(); }

    // When enabled every op output is scanned for NaN/Inf.
    void set_finite_check(bool on) { finite_check_ = on; }

    Var constant(Shape shape, std::vector<double> values)
    {
        if (values.size() != numel(shape))
            fail(ErrorKind::InvalidArgument, "constant: " + std::to_string(values.size()) +
                                                 " values for shape " + shape_string(shape));
        return push(std::move(shape), std::move(values), false, {});
    }

    // Leaf that accumulates a gradient (used for input-gradient checks).
    Var leaf(Shape shape, std::vector<double> values)
    {
        if (values.size() != numel(shape)) fail(ErrorKind::InvalidArgument, "leaf: value count mismatch");
        return push(std::move(shape), std::move(values), record_, {});
    }

    Var param(Parameter& p)
    {
        auto v = push(p.shape, p.value, record_, {});
        nodes_[v.id()].param = &p;
        return v;
    }

    void backward(Var loss)
    {
        if (!record_) fail(ErrorKind::InvalidArgument, "backward on a graph built without recording");
        if (consumed_) fail(ErrorKind::InvalidArgument, "backward called twice on the same graph; rebuild the forward pass");
        if (&loss.graph() != this) fail(ErrorKind::InvalidArgument, "loss belongs to another graph");
        if (loss.size() != 1) fail(ErrorKind::InvalidArgument, "backward needs a scalar loss, got " + shape_string(loss.shape()));
        consumed_ = true;
        grad_of(loss.id())[0] = 1.0;
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this);
        }
        for (auto& n : nodes_) {
            if (!n.param || n.grad.empty()) continue;
            auto& g = n.param->grad;
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
        }
    }

    // Hash of every relu sign pattern seen so far; two evaluations with equal
    // signatures took the same piecewise-linear branch.
    std::uint64_t kink_signature() const { return kink_hash_; }
    void note_kink_pattern(std::span<const double> pre_activation)
    {
        std::uint64_t h = kink_hash_ ^ 0x9e3779b97f4a7c15ULL;
        for (double v : pre_activation) h = (h ^ (v > 0.0 ? 0x100000001b3ULL : 0x3ULL)) * 0x100000001b3ULL;
        kink_hash_ = h;
    }

    Node& node(std::size_t id) { return nodes_[id]; }
    const Node& node(std::size_t id) const { return nodes_[id]; }

    std::vector<double>& grad_of(std::size_t id)
    {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }

    bool needs_grad(std::initializer_list<Var> vars) const
    {
        if (!record_) return false;
        for (const auto& v : vars)
            if (nodes_[v.id()].needs_grad) return true;
        return false;
    }

    Var push(Shape shape, std::vector<double> value, bool needs_grad, Backward bw)
    {
        if (finite_check_)
            for (double v : value)
                if (!std::isfinite(v)) fail(ErrorKind::NonFinite, "non-finite value produced by op");
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.needs_grad = needs_grad && record_;
        if (n.needs_grad) n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

private:
    std::vector<Node> nodes_;
    bool record_;
    bool consumed_ = false;
    bool finite_check_ = false;
    std::uint64_t kink_hash_ = 0;
};

inline const Shape& Var::shape() const { return g_->node(id_).shape; }
inline std::size_t Var::size() const { return g_->node(id_).value.size(); }
inline std::span<const double> Var::value() const { return g_->node(id_).value; }
inline std::span<const double> Var::grad() const { return g_->node(id_).grad; }
inline double Var::item() const
{
    if (size() != 1) fail(ErrorKind::InvalidArgument, "item() on non-scalar " + shape_string(shape()));
    return value()[0];
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline void require(bool ok, const std::string& what)
{
    if (!ok) fail(ErrorKind::InvalidArgument, what);
}

inline void same_shape(Var a, Var b, const char* op)
{
    require(&a.graph() == &b.graph(), std::string(op) + ": operands from different graphs");
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                        shape_string(b.shape()));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b)
{
    detail::same_shape(a, b, "add");
    Graph& g = a.graph();
    std::vector<double> out(a.value().begin(), a.value().end());
    const auto bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const std::size_t ia = a.id(), ib = b.id(), io = g.size();
    return g.push(a.shape(), std::move(out), g.needs_grad({a, b}), [ia, ib, io](Graph& gr) {
        const auto go = gr.node(io).grad;
        for (std::size_t id : {ia, ib}) {
            if (!gr.node(id).needs_grad) continue;
            auto& gi = gr.grad_of(id);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        }
    });
}

inline Var sub(Var a, Var b)
{
    detail::same_shape(a, b, "sub");
    Graph& g = a.graph();
    std::vector<double> out(a.value().begin(), a.value().end());
    const auto bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    const std::size_t ia = a.id(), ib = b.id(), io = g.size();
    return g.push(a.shape(), std::move(out), g.needs_grad({a, b}), [ia, ib, io](Graph& gr) {
        const auto& go = gr.node(io).grad;
        if (gr.node(ia).needs_grad) {
            auto& gi = gr.grad_of(ia);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        }
        if (gr.node(ib).needs_grad) {
            auto& gi = gr.grad_of(ib);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] -= go[i];
        }
    });
}

inline Var mul(Var a, Var b)
{
    detail::same_shape(a, b, "mul");
    Graph& g = a.graph();
    const auto av = a.value(), bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    const std::size_t ia = a.id(), ib = b.id(), io = g.size();
    return g.push(a.shape(), std::move(out), g.needs_grad({a, b}), [ia, ib, io](Graph& gr) {
        const auto& go = gr.node(io).grad;
        const auto& va = gr.node(ia).value;
        const auto& vb = gr.node(ib).value;
        if (gr.node(ia).needs_grad) {
            auto& gi = gr.grad_of(ia);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * vb[i];
        }
        if (gr.node(ib).needs_grad) {
            auto& gi = gr.grad_of(ib);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * va[i];
        }
    });
}

inline Var scale(Var a, double s)
{
    Graph& g = a.graph();
    std::vector<double> out(a.value().begin(), a.value().end());
    for (auto& v : out) v *= s;
    const std::size_t ia = a.id(), io = g.size();
    return g.push(a.shape(), std::move(out), g.needs_grad({a}), [ia, io, s](Graph& gr) {
        const auto& go = gr.node(io).grad;
        auto& gi = gr.grad_of(ia);
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += s * go[i];
    });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// a has shape [..., n], bias has shape [n].
inline Var add_bias(Var a, Var bias)
{
    detail::require(&a.graph() == &bias.graph(), "add_bias: operands from different graphs");
    detail::require(!a.shape().empty() && bias.shape().size() == 1 && bias.shape()[0] == a.shape().back(),
                    "add_bias: bias " + shape_string(bias.shape()) + " does not match " + shape_string(a.shape()));
    Graph& g = a.graph();
    const std::size_t n = bias.shape()[0];
    std::vector<double> out(a.value().begin(), a.value().end());
    const auto bv = bias.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
    const std::size_t ia = a.id(), ib = bias.id(), io = g.size();
    return g.push(a.shape(), std::move(out), g.needs_grad({a, bias}), [ia, ib, io, n](Graph& gr) {
        const auto& go = gr.node(io).grad;
        if (gr.node(ia).needs_grad) {
            auto& gi = gr.grad_of(ia);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        }
        if (gr.node(ib).needs_grad) {
            auto& gb = gr.grad_of(ib);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i % n] += go[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var sigmoid(Var a)
{
    Graph& g = a.graph();
    const auto av = a.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double x = av[i];
        // Split on sign so exp never overflows.
        if (x >= 0) {
            out[i] = 1.0 / (1.0 + std::exp(-x));
        } else {
            const double e = std::exp(x);
            out[i] = e / (1.0 + e);
        }
    }
    const std::size_t ia = a.id(), io = g.size();
    return g.push(a.shape(), std::move(out), g.needs_grad({a}), [ia, io](Graph& gr) {
        const auto& go = gr.node(io).grad;
        const auto& y = gr.node(io).value;
        auto& gi = gr.grad_of(ia);
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * y[i] * (1.0 - y[i]);
    });
}

inline Var tanh(Var a)
{
    Graph& g = a.graph();
    const auto av = a.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
    const std::size_t ia = a.id(), io = g.size();
    return g.push(a.shape(), std::move(out), g.needs_grad({a}), [ia, io](Graph& gr) {
        const auto& go = gr.node(io).grad;
        const auto& y = gr.node(io).value;
        auto& gi = gr.grad_of(ia);
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * (1.0 - y[i] * y[i]);
    });
}

inline Var relu(Var a)
{
    Graph& g = a.graph();
    const auto av = a.value();
    g.note_kink_pattern(av);
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    const std::size_t ia = a.id(), io = g.size();
    return g.push(a.shape(), std::move(out), g.needs_grad({a}), [ia, io](Graph& gr) {
        const auto& go = gr.node(io).grad;
        const auto& x = gr.node(ia).value;
        auto& gi = gr.grad_of(ia);
        for (std::size_t i = 0; i < go.size(); ++i)
            if (x[i] > 0.0) gi[i] += go[i];
    });
}

// Softmax over the last axis.
inline Var softmax(Var a)
{
    detail::require(!a.shape().empty(), "softmax: scalar input");
    Graph& g = a.graph();
    const std::size_t n = a.shape().back(), rows = a.size() / n;
    const auto av = a.value();
    std::vector<double> out(av.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * n;
        double* y = out.data() + r * n;
        const double mx = *std::max_element(x, x + n);
        double z = 0.0;
        for (std::size_t k = 0; k < n; ++k) z += (y[k] = std::exp(x[k] - mx));
        for (std::size_t k = 0; k < n; ++k) y[k] /= z;
    }
    const std::size_t ia = a.id(), io = g.size();
    return g.push(a.shape(), std::move(out), g.needs_grad({a}), [ia, io, n, rows](Graph& gr) {
        const auto& go = gr.node(io).grad;
        const auto& y = gr.node(io).value;
        auto& gi = gr.grad_of(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t k = 0; k < n; ++k) dot += go[r * n + k] * y[r * n + k];
            for (std::size_t k = 0; k < n; ++k) gi[r * n + k] += y[r * n + k] * (go[r * n + k] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b)
{
    detail::require(&a.graph() == &b.graph(), "matmul: operands from different graphs");
    detail::require(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[0],
                    "matmul: shape mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    Graph& g = a.graph();
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n);
    detail::MapMat(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
        detail::ConstMapMat(a.value().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
        detail::ConstMapMat(b.value().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    const std::size_t ia = a.id(), ib = b.id(), io = g.size();
    return g.push({m, n}, std::move(out), g.needs_grad({a, b}), [ia, ib, io, m, k, n](Graph& gr) {
        const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
        detail::ConstMapMat go(gr.node(io).grad.data(), M, N);
        if (gr.node(ia).needs_grad) {
            detail::MapMat ga(gr.grad_of(ia).data(), M, K);
            ga.noalias() += go * detail::ConstMapMat(gr.node(ib).value.data(), K, N).transpose();
        }
        if (gr.node(ib).needs_grad) {
            detail::MapMat gb(gr.grad_of(ib).data(), K, N);
            gb.noalias() += detail::ConstMapMat(gr.node(ia).value.data(), M, K).transpose() * go;
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(Var a, Shape shape)
{
    detail::require(numel(shape) == a.size(), "reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
    Graph& g = a.graph();
    const std::size_t ia = a.id(), io = g.size();
    return g.push(std::move(shape), std::vector<double>(a.value().begin(), a.value().end()), g.needs_grad({a}),
                  [ia, io](Graph& gr) {
                      const auto& go = gr.node(io).grad;
                      auto& gi = gr.grad_of(ia);
                      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
                  });
}

namespace detail {

struct AxisView {
    std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis)
{
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
    v.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

} // namespace detail

// Elements [begin, end) along axis.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end)
{
    const Shape& s = a.shape();
    detail::require(axis < s.size() && begin < end && end <= s[axis],
                    "slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                        std::to_string(axis) + " of " + shape_string(s));
    Graph& g = a.graph();
    const auto v = detail::axis_view(s, axis);
    const std::size_t len = end - begin;
    Shape os = s;
    os[axis] = len;
    std::vector<double> out(v.outer * len * v.inner);
    const auto av = a.value();
    for (std::size_t o = 0; o < v.outer; ++o)
        std::copy_n(av.data() + (o * v.extent + begin) * v.inner, len * v.inner, out.data() + o * len * v.inner);
    const std::size_t ia = a.id(), io = g.size();
    return g.push(std::move(os), std::move(out), g.needs_grad({a}), [ia, io, v, begin, len](Graph& gr) {
        const auto& go = gr.node(io).grad;
        auto& gi = gr.grad_of(ia);
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t j = 0; j < len * v.inner; ++j)
                gi[(o * v.extent + begin) * v.inner + j] += go[o * len * v.inner + j];
    });
}

inline Var concat(std::span<const Var> parts, std::size_t axis)
{
    detail::require(!parts.empty(), "concat: no inputs");
    Graph& g = parts[0].graph();
    Shape os = parts[0].shape();
    detail::require(axis < os.size(), "concat: axis out of range");
    os[axis] = 0;
    for (const auto& p : parts) {
        detail::require(&p.graph() == &g && p.shape().size() == os.size(), "concat: incompatible inputs");
        for (std::size_t d = 0; d < os.size(); ++d)
            if (d != axis) detail::require(p.shape()[d] == parts[0].shape()[d], "concat: shape mismatch off-axis");
        os[axis] += p.shape()[axis];
    }
    const auto ov = detail::axis_view(os, axis);
    std::vector<double> out(numel(os));
    std::vector<std::size_t> ids, offsets, extents;
    bool needs = false;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t ext = p.shape()[axis];
        const auto pv = p.value();
        for (std::size_t o = 0; o < ov.outer; ++o)
            std::copy_n(pv.data() + o * ext * ov.inner, ext * ov.inner, out.data() + (o * ov.extent + off) * ov.inner);
        ids.push_back(p.id());
        offsets.push_back(off);
        extents.push_back(ext);
        needs = needs || g.needs_grad({p});
        off += ext;
    }
    const std::size_t io = g.size();
    return g.push(std::move(os), std::move(out), needs, [ids, offsets, extents, ov, io](Graph& gr) {
        const auto& go = gr.node(io).grad;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!gr.node(ids[k]).needs_grad) continue;
            auto& gi = gr.grad_of(ids[k]);
            const std::size_t ext = extents[k];
            for (std::size_t o = 0; o < ov.outer; ++o)
                for (std::size_t j = 0; j < ext * ov.inner; ++j)
                    gi[o * ext * ov.inner + j] += go[(o * ov.extent + offsets[k]) * ov.inner + j];
        }
    });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis)
{
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

// ---------------------------------------------------------------------------
// Reductions

inline Var mean_over_axis(Var a, std::size_t axis)
{
    const Shape& s = a.shape();
    detail::require(axis < s.size(), "mean_over_axis: axis out of range for " + shape_string(s));
    Graph& g = a.graph();
    const auto v = detail::axis_view(s, axis);
    Shape os;
    for (std::size_t d = 0; d < s.size(); ++d)
        if (d != axis) os.push_back(s[d]);
    if (os.empty()) os.push_back(1);
    std::vector<double> out(v.outer * v.inner, 0.0);
    const auto av = a.value();
    const double w = 1.0 / static_cast<double>(v.extent);
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t e = 0; e < v.extent; ++e)
            for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += w * av[(o * v.extent + e) * v.inner + i];
    const std::size_t ia = a.id(), io = g.size();
    return g.push(std::move(os), std::move(out), g.needs_grad({a}), [ia, io, v, w](Graph& gr) {
        const auto& go = gr.node(io).grad;
        auto& gi = gr.grad_of(ia);
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t e = 0; e < v.extent; ++e)
                for (std::size_t i = 0; i < v.inner; ++i) gi[(o * v.extent + e) * v.inner + i] += w * go[o * v.inner + i];
    });
}

inline Var sum(Var a)
{
    Graph& g = a.graph();
    double total = 0.0;
    for (double x : a.value()) total += x;
    const std::size_t ia = a.id(), io = g.size();
    return g.push({1}, {total}, g.needs_grad({a}), [ia, io](Graph& gr) {
        const double go = gr.node(io).grad[0];
        for (auto& v : gr.grad_of(ia)) v += go;
    });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// out[i] = a[i, idx[i]] for a of shape [m, n].
inline Var pick(Var a, std::span<const int> idx)
{
    detail::require(a.shape().size() == 2 && idx.size() == a.shape()[0], "pick: expects [m,n] and m indices");
    Graph& g = a.graph();
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m);
    std::vector<std::size_t> flat(m);
    for (std::size_t i = 0; i < m; ++i) {
        detail::require(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < n, "pick: index out of range");
        flat[i] = i * n + static_cast<std::size_t>(idx[i]);
        out[i] = a.value()[flat[i]];
    }
    const std::size_t ia = a.id(), io = g.size();
    return g.push({m}, std::move(out), g.needs_grad({a}), [ia, io, flat](Graph& gr) {
        const auto& go = gr.node(io).grad;
        auto& gi = gr.grad_of(ia);
        for (std::size_t i = 0; i < flat.size(); ++i) gi[flat[i]] += go[i];
    });
}

// ---------------------------------------------------------------------------
// Losses

// Mean categorical cross-entropy of row-wise softmax(logits) against labels.
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels)
{
    detail::require(logits.shape().size() == 2 && labels.size() == logits.shape()[0],
                    "softmax_cross_entropy: expects [m,n] logits and m labels");
    Graph& g = logits.graph();
    const std::size_t m = logits.shape()[0], n = logits.shape()[1];
    const auto x = logits.value();
    std::vector<double> probs(m * n);
    double loss = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        detail::require(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < n, "softmax_cross_entropy: bad label");
        const double* xr = x.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (std::size_t k = 0; k < n; ++k) z += (probs[r * n + k] = std::exp(xr[k] - mx));
        for (std::size_t k = 0; k < n; ++k) probs[r * n + k] /= z;
        loss += -(xr[labels[r]] - mx - std::log(z));
    }
    loss /= static_cast<double>(m);
    std::vector<int> lab(labels.begin(), labels.end());
    const std::size_t ia = logits.id(), io = g.size();
    return g.push({1}, {loss}, g.needs_grad({logits}), [ia, io, probs = std::move(probs), lab, m, n](Graph& gr) {
        const double go = gr.node(io).grad[0] / static_cast<double>(m);
        auto& gi = gr.grad_of(ia);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t k = 0; k < n; ++k)
                gi[r * n + k] += go * (probs[r * n + k] - (static_cast<int>(k) == lab[r] ? 1.0 : 0.0));
    });
}

// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
inline Var sigmoid_bce(Var logits, std::span<const double> targets)
{
    detail::require(logits.size() == targets.size(), "sigmoid_bce: logits/targets size mismatch");
    Graph& g = logits.graph();
    const auto x = logits.value();
    const std::size_t m = x.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        loss += std::max(x[i], 0.0) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i])));
    loss /= static_cast<double>(m);
    std::vector<double> t(targets.begin(), targets.end());
    const std::size_t ia = logits.id(), io = g.size();
    return g.push({1}, {loss}, g.needs_grad({logits}), [ia, io, t, m](Graph& gr) {
        const double go = gr.node(io).grad[0] / static_cast<double>(m);
        const auto& xv = gr.node(ia).value;
        auto& gi = gr.grad_of(ia);
        for (std::size_t i = 0; i < m; ++i) {
            const double s = xv[i] >= 0 ? 1.0 / (1.0 + std::exp(-xv[i])) : std::exp(xv[i]) / (1.0 + std::exp(xv[i]));
            gi[i] += go * (s - t[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// Dilated 1-D convolution
//
// x: [B, T, Cin], w: [k, Cin, Cout], b: [Cout]
// y[b, t, o] = b[o] + sum_i sum_c w[i, c, o] * x[b, t + offset - i*d, c]
// Samples outside [0, T) read as zero. offset = 0 is the causal form where
// w = [1, 0, 0] is the identity; offset = (k-1)*d/2 centres the kernel.

inline Var dilated_conv1d(Var x, Var w, Var bias, std::size_t dilation, std::size_t offset)
{
    detail::require(x.shape().size() == 3 && w.shape().size() == 3 && bias.shape().size() == 1,
                    "dilated_conv1d: expects x[B,T,Cin], w[k,Cin,Cout], b[Cout]");
    detail::require(w.shape()[1] == x.shape()[2] && w.shape()[2] == bias.shape()[0],
                    "dilated_conv1d: channel mismatch " + shape_string(x.shape()) + " * " + shape_string(w.shape()));
    detail::require(dilation >= 1, "dilated_conv1d: dilation must be >= 1");
    Graph& g = x.graph();
    const std::size_t B = x.shape()[0], T = x.shape()[1], Ci = x.shape()[2];
    const std::size_t K = w.shape()[0], Co = w.shape()[2];
    const auto Ti = static_cast<Eigen::Index>(T), Cii = static_cast<Eigen::Index>(Ci), Coi = static_cast<Eigen::Index>(Co);

    // Valid output row range for tap i: t in [t0, t1) with src = t + shift.
    struct Tap {
        std::ptrdiff_t shift;
        std::size_t t0, t1;
    };
    std::vector<Tap> taps;
    for (std::size_t i = 0; i < K; ++i) {
        const auto shift = static_cast<std::ptrdiff_t>(offset) - static_cast<std::ptrdiff_t>(i * dilation);
        const auto lo = std::max<std::ptrdiff_t>(0, -shift);
        const auto hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(T), static_cast<std::ptrdiff_t>(T) - shift);
        taps.push_back({shift, static_cast<std::size_t>(std::max(lo, std::ptrdiff_t{0})),
                        static_cast<std::size_t>(std::max(hi, lo))});
    }

    std::vector<double> out(B * T * Co);
    const auto xv = x.value(), wv = w.value(), bv = bias.value();
    for (std::size_t b = 0; b < B; ++b) {
        detail::MapMat y(out.data() + b * T * Co, Ti, Coi);
        y.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(bv.data(), Coi);
        detail::ConstMapMat xb(xv.data() + b * T * Ci, Ti, Cii);
        for (std::size_t i = 0; i < K; ++i) {
            const auto& tp = taps[i];
            if (tp.t1 <= tp.t0) continue;
            const auto n = static_cast<Eigen::Index>(tp.t1 - tp.t0);
            detail::ConstMapMat wi(wv.data() + i * Ci * Co, Cii, Coi);
            y.middleRows(static_cast<Eigen::Index>(tp.t0), n).noalias() +=
                xb.middleRows(static_cast<Eigen::Index>(tp.t0) + tp.shift, n) * wi;
        }
    }
    const std::size_t ix = x.id(), iw = w.id(), ib = bias.id(), io = g.size();
    return g.push({B, T, Co}, std::move(out), g.needs_grad({x, w, bias}),
                  [ix, iw, ib, io, taps, B, T, Ci, K, Co](Graph& gr) {
                      const auto Ti = static_cast<Eigen::Index>(T), Cii = static_cast<Eigen::Index>(Ci),
                                 Coi = static_cast<Eigen::Index>(Co);
                      const auto& go = gr.node(io).grad;
                      const bool gx = gr.node(ix).needs_grad, gw = gr.node(iw).needs_grad, gb = gr.node(ib).needs_grad;
                      const auto& xval = gr.node(ix).value;
                      const auto& wval = gr.node(iw).value;
                      for (std::size_t b = 0; b < B; ++b) {
                          detail::ConstMapMat gy(go.data() + b * T * Co, Ti, Coi);
                          if (gb) {
                              auto& gbv = gr.grad_of(ib);
                              Eigen::Map<Eigen::RowVectorXd>(gbv.data(), Coi) += gy.colwise().sum();
                          }
                          for (std::size_t i = 0; i < K; ++i) {
                              const auto& tp = taps[i];
                              if (tp.t1 <= tp.t0) continue;
                              const auto n = static_cast<Eigen::Index>(tp.t1 - tp.t0);
                              const auto t0 = static_cast<Eigen::Index>(tp.t0);
                              if (gx) {
                                  detail::MapMat gxb(gr.grad_of(ix).data() + b * T * Ci, Ti, Cii);
                                  gxb.middleRows(t0 + tp.shift, n).noalias() +=
                                      gy.middleRows(t0, n) * detail::ConstMapMat(wval.data() + i * Ci * Co, Cii, Coi).transpose();
                              }
                              if (gw) {
                                  detail::MapMat gwi(gr.grad_of(iw).data() + i * Ci * Co, Cii, Coi);
                                  gwi.noalias() +=
                                      detail::ConstMapMat(xval.data() + b * T * Ci, Ti, Cii).middleRows(t0 + tp.shift, n).transpose() *
                                      gy.middleRows(t0, n);
                              }
                          }
                      }
                  });
}

// ---------------------------------------------------------------------------
// Optimiser

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;  // decoupled: applied to parameters, not gradients
    double eps = 1e-8;
};

struct AdamState {
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m, v;
};

inline void adam_step(const ParamRefs& params, AdamState& st, const AdamConfig& cfg)
{
    if (st.m.empty()) {
        for (auto* p : params) {
            st.m.emplace_back(p->size(), 0.0);
            st.v.emplace_back(p->size(), 0.0);
        }
    }
    if (st.m.size() != params.size()) fail(ErrorKind::InvalidArgument, "adam_step: state does not match parameters");
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = *params[k];
        auto& m = st.m[k];
        auto& v = st.v[k];
        if (m.size() != p.size()) fail(ErrorKind::InvalidArgument, "adam_step: moment shape mismatch for " + p.name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = p.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = m[i] / bc1, vhat = v[i] / bc2;
            p.value[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.value[i]);
        }
    }
}

// Rescales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
inline double clip_grad_norm(const ParamRefs& params, double max_norm)
{
    double sq = 0.0;
    for (auto* p : params)
        for (double gi : p->grad) sq += gi * gi;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto* p : params)
            for (auto& gi : p->grad) gi *= s;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckOptions {
    double step = 1e-4;
    double tolerance = 1e-4;
    // Denominator floor so entries with near-zero gradient are judged on
    // absolute error.
    double floor = 1e-4;
    // 0 checks every entry; otherwise a seeded random subset per parameter.
    std::size_t max_entries_per_param = 0;
    std::uint64_t seed = 0;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> params;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
    bool passed = false;
};

using LossBuilder = std::function<Var(Graph&)>;

inline double relative_error(double analytic, double numeric, double floor)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Entries whose +-h perturbation flips any relu sign are skipped and counted:
// central differences straddling a kink do not estimate the one-sided slope.
inline GradCheckReport grad_check(const LossBuilder& build, const ParamRefs& params, const GradCheckOptions& opt = {})
{
    zero_grads(params);
    std::uint64_t base_sig = 0;
    {
        Graph g(true);
        auto loss = build(g);
        base_sig = g.kink_signature();
        g.backward(loss);
    }
    auto eval = [&](std::uint64_t& sig) {
        Graph g(false);
        const double v = build(g).item();
        sig = g.kink_signature();
        return v;
    };

    GradCheckReport rep;
    std::mt19937_64 rng(opt.seed);
    for (auto* p : params) {
        GradCheckEntry e;
        e.name = p->name;
        std::vector<std::size_t> idx(p->size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (opt.max_entries_per_param && idx.size() > opt.max_entries_per_param) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(opt.max_entries_per_param);
        }
        for (std::size_t i : idx) {
            const double orig = p->value[i];
            std::uint64_t sp = 0, sm = 0;
            p->value[i] = orig + opt.step;
            const double fp = eval(sp);
            p->value[i] = orig - opt.step;
            const double fm = eval(sm);
            p->value[i] = orig;
            if (sp != base_sig || sm != base_sig) {
                ++e.skipped_kinks;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * opt.step);
            e.max_rel_error = std::max(e.max_rel_error, relative_error(p->grad[i], numeric, opt.floor));
            ++e.checked;
        }
        rep.max_rel_error = std::max(rep.max_rel_error, e.max_rel_error);
        rep.checked += e.checked;
        rep.skipped_kinks += e.skipped_kinks;
        rep.params.push_back(std::move(e));
    }
    rep.passed = rep.max_rel_error < opt.tolerance && rep.checked > 0;
    return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.bin holds little-endian float64 arrays back to back,
// <stem>.json indexes them by name, shape and element offset.

inline nlohmann::json checkpoint_index(const ParamRefs& params)
{
    nlohmann::json idx = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto* p : params) {
        idx.push_back({{"name", p->name}, {"shape", p->shape}, {"offset", offset}});
        offset += p->size();
    }
    return {{"format", "strokesight-checkpoint-v1"}, {"dtype", "float64-le"}, {"params", idx}};
}

inline std::string checkpoint_payload(const ParamRefs& params)
{
    std::string bytes;
    for (const auto* p : params) {
        for (double v : p->value) {
            std::uint64_t u;
            std::memcpy(&u, &v, 8);
            for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
        }
    }
    return bytes;
}

inline void restore_checkpoint(const nlohmann::json& index, const std::string& payload, const ParamRefs& params)
{
    std::map<std::string, Parameter*> by_name;
    for (auto* p : params) by_name[p->name] = p;
    std::size_t restored = 0;
    try {
        for (const auto& e : index.at("params")) {
            const auto name = e.at("name").get<std::string>();
            auto it = by_name.find(name);
            if (it == by_name.end()) fail(ErrorKind::MalformedInput, "checkpoint has unexpected parameter " + name);
            const auto shape = e.at("shape").get<Shape>();
            if (shape != it->second->shape)
                fail(ErrorKind::MalformedInput, "checkpoint shape " + shape_string(shape) + " for " + name +
                                                    " does not match " + shape_string(it->second->shape));
            const auto offset = e.at("offset").get<std::size_t>();
            if ((offset + numel(shape)) * 8 > payload.size())
                fail(ErrorKind::MalformedInput, "checkpoint payload too short for " + name);
            for (std::size_t i = 0; i < numel(shape); ++i) {
                std::uint64_t u = 0;
                for (int b = 0; b < 8; ++b)
                    u |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[(offset + i) * 8 + b])) << (8 * b);
                std::memcpy(&it->second->value[i], &u, 8);
            }
            ++restored;
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::MalformedInput, std::string("checkpoint index: ") + e.what());
    }
    if (restored != params.size()) fail(ErrorKind::MalformedInput, "checkpoint is missing parameters");
}

inline void save_checkpoint(const std::filesystem::path& stem, const ParamRefs& params)
{
    auto bin = stem;
    bin += ".bin";
    auto js = stem;
    js += ".json";
    strokesight::write_file(bin, checkpoint_payload(params));
    strokesight::write_file(js, checkpoint_index(params).dump(2));
}

inline void load_checkpoint(const std::filesystem::path& stem, const ParamRefs& params)
{
    auto bin = stem;
    bin += ".bin";
    auto js = stem;
    js += ".json";
    nlohmann::json index;
    try {
        index = nlohmann::json::parse(strokesight::read_file(js));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::MalformedInput, "checkpoint index " + js.string() + ": " + e.what());
    }
    restore_checkpoint(index, strokesight::read_file(bin), params);
}

} // namespace strokesight::ad
