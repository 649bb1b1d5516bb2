#ifndef HOPFLOW_AUTODIFF_HPP
#define HOPFLOW_AUTODIFF_HPP

// Tape-based reverse-mode differentiation over dense row-major arrays.
//
// Every op appends one record holding its inputs and an adjoint closure. Values
// live on the tape until reset(), so adjoints read forward results directly
// instead of copying them. backward() walks the records once in reverse order.

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <unordered_map>

#include <Eigen/Dense>

#include "common.hpp"
#include "params.hpp"

namespace hopflow::ad {

template <class Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <class Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;

enum class OpKind {
    leaf,
    linear,
    add,
    add_broadcast,
    scale,
    mul,
    relu,
    dropout,
    layer_norm,
    softmax,
    attention,
    mean_hops,
    max_hops,
    hop_mean_all,
    hop_mean_others,
    concat_last,
    concat_rows,
    project_last,
    weighted_hops,
    reshape,
    sum,
    cross_entropy,
    barlow,
    supcon,
};

struct Var {
    std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
    bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

template <class Real>
class Tape {
public:
    struct Record {
        OpKind kind;
        std::vector<Var> inputs;
        Var output;
        std::vector<Real> saved;
        std::vector<std::uint32_t> index;
        std::function<void(Tape&, const Record&)> backward;
    };

    Var constant(Tensor<Real> t) { return push_leaf(std::move(t), false, nullptr); }
    Var variable(Tensor<Real> t) { return push_leaf(std::move(t), true, nullptr); }

    /// Leaf bound to a stored parameter; its gradient is added to the store after backward().
    /// Repeated calls with the same name on one tape return the same leaf.
    Var parameter(ParamStore<Real>& store, const std::string& name)
    {
        auto& e = store.entry(name);
        auto key = &e;
        if (auto it = param_leaves_.find(key); it != param_leaves_.end()) return it->second;
        Var v = push_leaf(e.value, true, &e.grad);
        param_leaves_.emplace(key, v);
        return v;
    }

    const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }
    const std::vector<Real>& value(Var v) const { return nodes_.at(v.id).value; }
    Real scalar(Var v) const
    {
        const auto& n = nodes_.at(v.id);
        if (n.value.size() != 1) throw ConfigError("scalar(): value has shape " + shape_str(n.shape));
        return n.value[0];
    }
    Tensor<Real> tensor(Var v) const { return Tensor<Real>(shape(v), value(v)); }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient of the last backward() target w.r.t. v; zeros when v was not reached.
    std::vector<Real> grad(Var v) const
    {
        const auto& n = nodes_.at(v.id);
        if (n.grad.empty()) return std::vector<Real>(n.value.size(), Real(0));
        return n.grad;
    }

    /// Mutable gradient buffer, allocated on first use. For adjoint closures.
    std::vector<Real>& grad_buffer(Var v)
    {
        auto& n = nodes_[v.id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), Real(0));
        return n.grad;
    }
    bool has_grad(Var v) const { return !nodes_[v.id].grad.empty(); }

    Record& emit(OpKind kind, Shape shape, std::vector<Real> value, std::vector<Var> inputs,
                 std::function<void(Tape&, const Record&)> backward)
    {
        if (backward_done_) throw ConfigError("tape: cannot record after backward() without reset()");
        bool rg = false;
        for (auto in : inputs) rg = rg || nodes_.at(in.id).requires_grad;
        Var out{static_cast<std::uint32_t>(nodes_.size())};
        nodes_.push_back(Node{std::move(shape), std::move(value), {}, rg, nullptr});
        records_.push_back(Record{kind, std::move(inputs), out, {}, {}, std::move(backward)});
        return records_.back();
    }

    /// Accumulates d(loss)/d(param) into every parameter leaf reachable from `loss`.
    void backward(Var loss)
    {
        if (backward_done_) throw ConfigError("tape: backward() called twice without reset()");
        if (records_.empty()) throw ConfigError("tape: backward() on an empty tape");
        if (nodes_.at(loss.id).value.size() != 1) throw ConfigError("tape: backward() needs a scalar loss");
        backward_done_ = true;
        grad_buffer(loss)[0] = Real(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            const auto& out = nodes_[it->output.id];
            if (out.grad.empty() || !out.requires_grad) continue;
            it->backward(*this, *it);
        }
        for (auto& n : nodes_) {
            if (!n.param_grad || n.grad.empty()) continue;
            for (std::size_t i = 0; i < n.grad.size(); ++i) (*n.param_grad)[i] += n.grad[i];
        }
    }

    void reset()
    {
        nodes_.clear();
        records_.clear();
        param_leaves_.clear();
        backward_done_ = false;
    }

    std::size_t num_nodes() const { return nodes_.size(); }
    std::size_t num_records() const { return records_.size(); }
    const Record& record(std::size_t i) const { return records_.at(i); }

    /// Bytes held by values and gradients currently on the tape.
    std::size_t bytes() const
    {
        std::size_t b = 0;
        for (const auto& n : nodes_) b += (n.value.capacity() + n.grad.capacity()) * sizeof(Real);
        for (const auto& r : records_) b += r.saved.capacity() * sizeof(Real) + r.index.capacity() * sizeof(std::uint32_t);
        return b;
    }

private:
    struct Node {
        Shape shape;
        std::vector<Real> value;
        std::vector<Real> grad;
        bool requires_grad = false;
        std::vector<Real>* param_grad = nullptr;
    };

    Var push_leaf(Tensor<Real> t, bool requires_grad, std::vector<Real>* param_grad)
    {
        if (backward_done_) throw ConfigError("tape: cannot record after backward() without reset()");
        Var v{static_cast<std::uint32_t>(nodes_.size())};
        nodes_.push_back(Node{std::move(t.shape), std::move(t.data), {}, requires_grad, param_grad});
        return v;
    }

    std::vector<Node> nodes_;
    std::vector<Record> records_;
    std::unordered_map<const void*, Var> param_leaves_;
    bool backward_done_ = false;
};

namespace detail {

inline void require(bool ok, const std::string& msg)
{
    if (!ok) throw ConfigError(msg);
}

inline std::size_t last_dim(const Shape& s)
{
    require(!s.empty(), "expected at least one dimension");
    return s.back();
}

template <class Real>
void accumulate(std::vector<Real>& dst, const std::vector<Real>& src)
{
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace detail

/// x[..., m] * W[m, n] (+ bias[n]).
template <class Real>
Var linear(Tape<Real>& t, Var x, Var w, Var bias = {})
{
    const auto& xs = t.shape(x);
    const auto& ws = t.shape(w);
    detail::require(ws.size() == 2, "linear: weight must be 2-D, got " + shape_str(ws));
    const std::size_t m = ws[0], n = ws[1];
    detail::require(detail::last_dim(xs) == m, "linear: input " + shape_str(xs) + " does not match weight " + shape_str(ws));
    if (bias.valid()) detail::require(t.shape(bias) == Shape{n}, "linear: bias shape " + shape_str(t.shape(bias)));
    const std::size_t rows = shape_numel(xs) / m;
    Shape os = xs;
    os.back() = n;
    std::vector<Real> out(rows * n);
    MatMap<Real> Y(out.data(), rows, n);
    Y.noalias() = ConstMatMap<Real>(t.value(x).data(), rows, m) * ConstMatMap<Real>(t.value(w).data(), m, n);
    if (bias.valid()) {
        const auto& b = t.value(bias);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) out[r * n + j] += b[j];
    }
    std::vector<Var> inputs{x, w};
    if (bias.valid()) inputs.push_back(bias);
    auto& rec = t.emit(OpKind::linear, os, std::move(out), inputs, [rows, m, n](Tape<Real>& t, const auto& r) {
        Var x = r.inputs[0], w = r.inputs[1];
        ConstMatMap<Real> dY(t.grad_buffer(r.output).data(), rows, n);
        if (t.requires_grad(x)) {
            MatMap<Real> dX(t.grad_buffer(x).data(), rows, m);
            dX.noalias() += dY * ConstMatMap<Real>(t.value(w).data(), m, n).transpose();
        }
        if (t.requires_grad(w)) {
            MatMap<Real> dW(t.grad_buffer(w).data(), m, n);
            dW.noalias() += ConstMatMap<Real>(t.value(x).data(), rows, m).transpose() * dY;
        }
        if (r.inputs.size() == 3 && t.requires_grad(r.inputs[2])) {
            auto& db = t.grad_buffer(r.inputs[2]);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < n; ++j) db[j] += dY(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
    });
    (void)rec;
    return rec.output;
}

template <class Real>
Var add(Tape<Real>& t, Var a, Var b)
{
    detail::require(t.shape(a) == t.shape(b), "add: shape mismatch " + shape_str(t.shape(a)) + " vs " + shape_str(t.shape(b)));
    std::vector<Real> out = t.value(a);
    const auto& bv = t.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return t.emit(OpKind::add, t.shape(a), std::move(out), {a, b}, [](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        for (Var in : r.inputs)
            if (t.requires_grad(in)) detail::accumulate(t.grad_buffer(in), g);
    }).output;
}

/// x + y where y's shape equals the trailing dimensions of x (y repeated over the leading ones).
template <class Real>
Var add_broadcast(Tape<Real>& t, Var x, Var y)
{
    const auto& xs = t.shape(x);
    const auto& ys = t.shape(y);
    detail::require(ys.size() <= xs.size() && std::equal(ys.rbegin(), ys.rend(), xs.rbegin()),
                    "add_broadcast: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
    const std::size_t inner = shape_numel(ys);
    std::vector<Real> out = t.value(x);
    const auto& yv = t.value(y);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += yv[i % inner];
    return t.emit(OpKind::add_broadcast, xs, std::move(out), {x, y}, [inner](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        if (t.requires_grad(r.inputs[0])) detail::accumulate(t.grad_buffer(r.inputs[0]), g);
        if (t.requires_grad(r.inputs[1])) {
            auto& gy = t.grad_buffer(r.inputs[1]);
            for (std::size_t i = 0; i < g.size(); ++i) gy[i % inner] += g[i];
        }
    }).output;
}

template <class Real>
Var scale(Tape<Real>& t, Var x, Real s)
{
    std::vector<Real> out = t.value(x);
    for (auto& v : out) v *= s;
    return t.emit(OpKind::scale, t.shape(x), std::move(out), {x}, [s](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        auto& gx = t.grad_buffer(r.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
    }).output;
}

template <class Real>
Var mul(Tape<Real>& t, Var a, Var b)
{
    detail::require(t.shape(a) == t.shape(b), "mul: shape mismatch");
    std::vector<Real> out = t.value(a);
    const auto& bv = t.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return t.emit(OpKind::mul, t.shape(a), std::move(out), {a, b}, [](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        Var a = r.inputs[0], b = r.inputs[1];
        if (t.requires_grad(a)) {
            auto& ga = t.grad_buffer(a);
            const auto& bv = t.value(b);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(b)) {
            auto& gb = t.grad_buffer(b);
            const auto& av = t.value(a);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    }).output;
}

template <class Real>
Var relu(Tape<Real>& t, Var x)
{
    std::vector<Real> out = t.value(x);
    for (auto& v : out) v = v > Real(0) ? v : Real(0);
    return t.emit(OpKind::relu, t.shape(x), std::move(out), {x}, [](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        const auto& y = t.value(r.output);
        auto& gx = t.grad_buffer(r.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (y[i] > Real(0)) gx[i] += g[i];
    }).output;
}

/// Sum of all entries, as a scalar.
template <class Real>
Var sum(Tape<Real>& t, Var x)
{
    Real s = 0;
    for (auto v : t.value(x)) s += v;
    return t.emit(OpKind::sum, {}, {s}, {x}, [](Tape<Real>& t, const auto& r) {
        Real g = t.grad_buffer(r.output)[0];
        for (auto& v : t.grad_buffer(r.inputs[0])) v += g;
    }).output;
}

template <class Real>
Var reshape(Tape<Real>& t, Var x, Shape shape)
{
    detail::require(shape_numel(shape) == shape_numel(t.shape(x)),
                    "reshape: cannot view " + shape_str(t.shape(x)) + " as " + shape_str(shape));
    return t.emit(OpKind::reshape, std::move(shape), t.value(x), {x}, [](Tape<Real>& t, const auto& r) {
        detail::accumulate(t.grad_buffer(r.inputs[0]), t.grad_buffer(r.output));
    }).output;
}

/// b x T x d -> b x (T*d).
template <class Real>
Var flatten(Tape<Real>& t, Var x)
{
    const auto& s = t.shape(x);
    detail::require(s.size() >= 2, "flatten: need at least 2-D input");
    return reshape(t, x, Shape{s[0], shape_numel(s) / s[0]});
}

/// Inverted dropout. Identity when !training or p == 0; mask entries are 0 or 1/(1-p).
template <class Real>
Var dropout(Tape<Real>& t, Var x, double p, std::mt19937_64& rng, bool training)
{
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    const Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
    std::vector<Real> mask(t.value(x).size());
    for (auto& m : mask) m = uniform01(rng) >= p ? keep_scale : Real(0);
    std::vector<Real> out = t.value(x);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    auto& rec = t.emit(OpKind::dropout, t.shape(x), std::move(out), {x}, [](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        auto& gx = t.grad_buffer(r.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * r.saved[i];
    });
    rec.saved = std::move(mask);
    return rec.output;
}

/// Per-last-axis standardization followed by gamma * xhat + beta.
template <class Real>
Var layer_norm(Tape<Real>& t, Var x, Var gamma, Var beta, double eps = 1e-5)
{
    const std::size_t d = detail::last_dim(t.shape(x));
    detail::require(d >= 1 && t.shape(gamma) == Shape{d} && t.shape(beta) == Shape{d}, "layer_norm: affine shape mismatch");
    const auto& xv = t.value(x);
    const auto& gv = t.value(gamma);
    const auto& bv = t.value(beta);
    const std::size_t rows = xv.size() / d;
    std::vector<Real> out(xv.size());
    std::vector<Real> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* row = &xv[r * d];
        Real mean = 0;
        for (std::size_t k = 0; k < d; ++k) mean += row[k];
        mean /= static_cast<Real>(d);
        Real var = 0;
        for (std::size_t k = 0; k < d; ++k) var += (row[k] - mean) * (row[k] - mean);
        var /= static_cast<Real>(d);
        const Real is = Real(1) / std::sqrt(var + static_cast<Real>(eps));
        inv_std[r] = is;
        for (std::size_t k = 0; k < d; ++k) out[r * d + k] = (row[k] - mean) * is * gv[k] + bv[k];
    }
    auto& rec = t.emit(OpKind::layer_norm, t.shape(x), std::move(out), {x, gamma, beta}, [rows, d](Tape<Real>& t, const auto& r) {
        Var x = r.inputs[0], gamma = r.inputs[1], beta = r.inputs[2];
        const auto& g = t.grad_buffer(r.output);
        const auto& xv = t.value(x);
        const auto& gv = t.value(gamma);
        std::vector<Real> xhat(d), dxhat(d);
        const bool need_x = t.requires_grad(x), need_g = t.requires_grad(gamma), need_b = t.requires_grad(beta);
        for (std::size_t row = 0; row < rows; ++row) {
            const Real is = r.saved[row];
            Real mean = 0;
            for (std::size_t k = 0; k < d; ++k) mean += xv[row * d + k];
            mean /= static_cast<Real>(d);
            Real m1 = 0, m2 = 0;
            for (std::size_t k = 0; k < d; ++k) {
                xhat[k] = (xv[row * d + k] - mean) * is;
                dxhat[k] = g[row * d + k] * gv[k];
                m1 += dxhat[k];
                m2 += dxhat[k] * xhat[k];
            }
            m1 /= static_cast<Real>(d);
            m2 /= static_cast<Real>(d);
            if (need_x) {
                auto& gx = t.grad_buffer(x);
                for (std::size_t k = 0; k < d; ++k) gx[row * d + k] += is * (dxhat[k] - m1 - xhat[k] * m2);
            }
            if (need_g) {
                auto& gg = t.grad_buffer(gamma);
                for (std::size_t k = 0; k < d; ++k) gg[k] += g[row * d + k] * xhat[k];
            }
            if (need_b) {
                auto& gb = t.grad_buffer(beta);
                for (std::size_t k = 0; k < d; ++k) gb[k] += g[row * d + k];
            }
        }
    });
    rec.saved = std::move(inv_std);
    return rec.output;
}

/// Softmax over the last axis with max subtraction.
template <class Real>
Var softmax(Tape<Real>& t, Var x)
{
    const std::size_t d = detail::last_dim(t.shape(x));
    std::vector<Real> out = t.value(x);
    for (std::size_t r = 0; r < out.size() / d; ++r) {
        Real* row = &out[r * d];
        Real mx = *std::max_element(row, row + d);
        Real s = 0;
        for (std::size_t k = 0; k < d; ++k) s += (row[k] = std::exp(row[k] - mx));
        for (std::size_t k = 0; k < d; ++k) row[k] /= s;
    }
    return t.emit(OpKind::softmax, t.shape(x), std::move(out), {x}, [d](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        const auto& y = t.value(r.output);
        auto& gx = t.grad_buffer(r.inputs[0]);
        for (std::size_t row = 0; row < y.size() / d; ++row) {
            Real dot = 0;
            for (std::size_t k = 0; k < d; ++k) dot += g[row * d + k] * y[row * d + k];
            for (std::size_t k = 0; k < d; ++k) gx[row * d + k] += y[row * d + k] * (g[row * d + k] - dot);
        }
    }).output;
}

/// Scaled dot-product attention on projected tokens: q, k, v are b x T x d, split into
/// `heads` contiguous column blocks of width d/heads. Per head: softmax(q k^T / sqrt(d/heads)) v.
/// Heads are concatenated back to b x T x d.
template <class Real>
Var attention(Tape<Real>& t, Var q, Var k, Var v, std::size_t heads)
{
    const auto& s = t.shape(q);
    detail::require(s.size() == 3 && t.shape(k) == s && t.shape(v) == s, "attention: q/k/v must share a b x T x d shape");
    detail::require(heads >= 1 && s[2] % heads == 0,
                    "attention: d=" + std::to_string(s[2]) + " is not divisible by heads=" + std::to_string(heads));
    const std::size_t b = s[0], T = s[1], d = s[2], dh = d / heads;
    const Real inv_scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    const auto& qv = t.value(q);
    const auto& kv = t.value(k);
    const auto& vv = t.value(v);
    std::vector<Real> out(b * T * d, Real(0));
    std::vector<Real> probs(b * heads * T * T);
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t h = 0; h < heads; ++h) {
            Real* a = &probs[((n * heads + h) * T) * T];
            for (std::size_t i = 0; i < T; ++i) {
                const Real* qi = &qv[(n * T + i) * d + h * dh];
                Real mx = -std::numeric_limits<Real>::infinity();
                for (std::size_t j = 0; j < T; ++j) {
                    const Real* kj = &kv[(n * T + j) * d + h * dh];
                    Real dot = 0;
                    for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                    a[i * T + j] = dot * inv_scale;
                    mx = std::max(mx, a[i * T + j]);
                }
                Real z = 0;
                for (std::size_t j = 0; j < T; ++j) z += (a[i * T + j] = std::exp(a[i * T + j] - mx));
                for (std::size_t j = 0; j < T; ++j) a[i * T + j] /= z;
                Real* oi = &out[(n * T + i) * d + h * dh];
                for (std::size_t j = 0; j < T; ++j) {
                    const Real w = a[i * T + j];
                    const Real* vj = &vv[(n * T + j) * d + h * dh];
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
                }
            }
        }
    auto& rec = t.emit(OpKind::attention, s, std::move(out), {q, k, v}, [b, T, d, dh, heads, inv_scale](Tape<Real>& t, const auto& r) {
        Var q = r.inputs[0], k = r.inputs[1], v = r.inputs[2];
        const auto& g = t.grad_buffer(r.output);
        const auto& qv = t.value(q);
        const auto& kv = t.value(k);
        const auto& vv = t.value(v);
        std::vector<Real> zeros;
        auto& gq = t.requires_grad(q) ? t.grad_buffer(q) : zeros;
        auto& gk = t.requires_grad(k) ? t.grad_buffer(k) : zeros;
        auto& gv = t.requires_grad(v) ? t.grad_buffer(v) : zeros;
        std::vector<Real> da(T * T);
        for (std::size_t n = 0; n < b; ++n)
            for (std::size_t h = 0; h < heads; ++h) {
                const Real* a = &r.saved[((n * heads + h) * T) * T];
                // dA = dO V^T ; dV = A^T dO
                for (std::size_t i = 0; i < T; ++i) {
                    const Real* gi = &g[(n * T + i) * d + h * dh];
                    for (std::size_t j = 0; j < T; ++j) {
                        const Real* vj = &vv[(n * T + j) * d + h * dh];
                        Real dot = 0;
                        for (std::size_t c = 0; c < dh; ++c) dot += gi[c] * vj[c];
                        da[i * T + j] = dot;
                        if (!gv.empty()) {
                            Real* gvj = &gv[(n * T + j) * d + h * dh];
                            for (std::size_t c = 0; c < dh; ++c) gvj[c] += a[i * T + j] * gi[c];
                        }
                    }
                }
                // softmax adjoint, then through the scaled scores
                for (std::size_t i = 0; i < T; ++i) {
                    Real dot = 0;
                    for (std::size_t j = 0; j < T; ++j) dot += da[i * T + j] * a[i * T + j];
                    for (std::size_t j = 0; j < T; ++j) {
                        const Real ds = a[i * T + j] * (da[i * T + j] - dot) * inv_scale;
                        if (!gq.empty()) {
                            Real* gqi = &gq[(n * T + i) * d + h * dh];
                            const Real* kj = &kv[(n * T + j) * d + h * dh];
                            for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                        }
                        if (!gk.empty()) {
                            Real* gkj = &gk[(n * T + j) * d + h * dh];
                            const Real* qi = &qv[(n * T + i) * d + h * dh];
                            for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                        }
                    }
                }
            }
    });
    rec.saved = std::move(probs);
    return rec.output;
}

/// Attention weights of the most recent attention record producing `out`, shaped b x heads x T x T.
template <class Real>
const std::vector<Real>& attention_weights(const Tape<Real>& t, Var out)
{
    for (std::size_t i = t.num_records(); i-- > 0;)
        if (t.record(i).output.id == out.id && t.record(i).kind == OpKind::attention) return t.record(i).saved;
    throw ConfigError("attention_weights: variable is not an attention output");
}

/// Self-attention over hop tokens: projections H Wq, H Wk, H Wv (no bias), per-head
/// scaled dot-product, heads concatenated, optional output projection.
template <class Real>
Var multi_head_attention(Tape<Real>& t, Var h, Var wq, Var wk, Var wv, std::size_t heads, Var wo = {})
{
    const auto& s = t.shape(h);
    detail::require(s.size() == 3, "multi_head_attention: input must be b x T x d");
    detail::require(heads >= 1 && s[2] % heads == 0,
                    "multi_head_attention: d=" + std::to_string(s[2]) + " is not divisible by heads=" + std::to_string(heads));
    Var q = linear(t, h, wq);
    Var k = linear(t, h, wk);
    Var v = linear(t, h, wv);
    Var o = attention(t, q, k, v, heads);
    return wo.valid() ? linear(t, o, wo) : o;
}

/// b x T x d -> b x d, mean over the hop axis.
template <class Real>
Var mean_hops(Tape<Real>& t, Var h)
{
    const auto& s = t.shape(h);
    detail::require(s.size() == 3 && s[1] >= 1, "mean_hops: input must be b x T x d with T >= 1");
    const std::size_t b = s[0], T = s[1], d = s[2];
    const auto& hv = t.value(h);
    std::vector<Real> out(b * d, Real(0));
    const Real inv = Real(1) / static_cast<Real>(T);
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t c = 0; c < d; ++c) out[n * d + c] += hv[(n * T + i) * d + c];
    for (auto& x : out) x *= inv;
    return t.emit(OpKind::mean_hops, {b, d}, std::move(out), {h}, [b, T, d, inv](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        auto& gh = t.grad_buffer(r.inputs[0]);
        for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t c = 0; c < d; ++c) gh[(n * T + i) * d + c] += g[n * d + c] * inv;
    }).output;
}

/// b x T x d -> b x d, elementwise max over the hop axis (first maximum wins ties).
template <class Real>
Var max_hops(Tape<Real>& t, Var h)
{
    const auto& s = t.shape(h);
    detail::require(s.size() == 3 && s[1] >= 1, "max_hops: input must be b x T x d with T >= 1");
    const std::size_t b = s[0], T = s[1], d = s[2];
    const auto& hv = t.value(h);
    std::vector<Real> out(b * d);
    std::vector<std::uint32_t> arg(b * d, 0);
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t c = 0; c < d; ++c) {
            Real best = hv[(n * T) * d + c];
            for (std::size_t i = 1; i < T; ++i)
                if (hv[(n * T + i) * d + c] > best) {
                    best = hv[(n * T + i) * d + c];
                    arg[n * d + c] = static_cast<std::uint32_t>(i);
                }
            out[n * d + c] = best;
        }
    auto& rec = t.emit(OpKind::max_hops, {b, d}, std::move(out), {h}, [T, d](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        auto& gh = t.grad_buffer(r.inputs[0]);
        for (std::size_t idx = 0; idx < g.size(); ++idx) {
            std::size_t n = idx / d, c = idx % d;
            gh[(n * T + r.index[idx]) * d + c] += g[idx];
        }
    });
    rec.index = std::move(arg);
    return rec.output;
}

/// Every hop token replaced by the mean of all tokens of its node (fully connected hop graph).
template <class Real>
Var hop_mean_all(Tape<Real>& t, Var h)
{
    const auto& s = t.shape(h);
    detail::require(s.size() == 3, "hop_mean_all: input must be b x T x d");
    const std::size_t b = s[0], T = s[1], d = s[2];
    const auto& hv = t.value(h);
    std::vector<Real> out(hv.size());
    std::vector<Real> mean(d);
    for (std::size_t n = 0; n < b; ++n) {
        std::fill(mean.begin(), mean.end(), Real(0));
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t c = 0; c < d; ++c) mean[c] += hv[(n * T + i) * d + c];
        for (auto& m : mean) m /= static_cast<Real>(T);
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t c = 0; c < d; ++c) out[(n * T + i) * d + c] = mean[c];
    }
    return t.emit(OpKind::hop_mean_all, s, std::move(out), {h}, [b, T, d](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        auto& gh = t.grad_buffer(r.inputs[0]);
        std::vector<Real> acc(d);
        for (std::size_t n = 0; n < b; ++n) {
            std::fill(acc.begin(), acc.end(), Real(0));
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t c = 0; c < d; ++c) acc[c] += g[(n * T + i) * d + c];
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t c = 0; c < d; ++c) gh[(n * T + i) * d + c] += acc[c] / static_cast<Real>(T);
        }
    }).output;
}

/// Token i replaced by the mean of the other T-1 tokens (zeros when T == 1).
template <class Real>
Var hop_mean_others(Tape<Real>& t, Var h)
{
    const auto& s = t.shape(h);
    detail::require(s.size() == 3, "hop_mean_others: input must be b x T x d");
    const std::size_t b = s[0], T = s[1], d = s[2];
    const Real inv = T > 1 ? Real(1) / static_cast<Real>(T - 1) : Real(0);
    const auto& hv = t.value(h);
    std::vector<Real> out(hv.size());
    std::vector<Real> total(d);
    for (std::size_t n = 0; n < b; ++n) {
        std::fill(total.begin(), total.end(), Real(0));
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t c = 0; c < d; ++c) total[c] += hv[(n * T + i) * d + c];
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t c = 0; c < d; ++c) out[(n * T + i) * d + c] = (total[c] - hv[(n * T + i) * d + c]) * inv;
    }
    return t.emit(OpKind::hop_mean_others, s, std::move(out), {h}, [b, T, d, inv](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        auto& gh = t.grad_buffer(r.inputs[0]);
        std::vector<Real> acc(d);
        for (std::size_t n = 0; n < b; ++n) {
            std::fill(acc.begin(), acc.end(), Real(0));
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t c = 0; c < d; ++c) acc[c] += g[(n * T + i) * d + c];
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t c = 0; c < d; ++c) gh[(n * T + i) * d + c] += (acc[c] - g[(n * T + i) * d + c]) * inv;
        }
    }).output;
}

/// [..., m] ++ [..., n] -> [..., m + n].
template <class Real>
Var concat_last(Tape<Real>& t, Var a, Var b)
{
    Shape sa = t.shape(a), sb = t.shape(b);
    detail::require(sa.size() == sb.size() && std::equal(sa.begin(), sa.end() - 1, sb.begin()),
                    "concat_last: leading dimensions differ");
    const std::size_t m = sa.back(), n = sb.back(), rows = shape_numel(sa) / m;
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    std::vector<Real> out(rows * (m + n));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(&av[r * m], m, &out[r * (m + n)]);
        std::copy_n(&bv[r * n], n, &out[r * (m + n) + m]);
    }
    Shape os = sa;
    os.back() = m + n;
    return t.emit(OpKind::concat_last, os, std::move(out), {a, b}, [rows, m, n](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        if (t.requires_grad(r.inputs[0])) {
            auto& ga = t.grad_buffer(r.inputs[0]);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t c = 0; c < m; ++c) ga[i * m + c] += g[i * (m + n) + c];
        }
        if (t.requires_grad(r.inputs[1])) {
            auto& gb = t.grad_buffer(r.inputs[1]);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t c = 0; c < n; ++c) gb[i * n + c] += g[i * (m + n) + m + c];
        }
    }).output;
}

/// [r1, ...] stacked on [r2, ...] -> [r1 + r2, ...].
template <class Real>
Var concat_rows(Tape<Real>& t, Var a, Var b)
{
    Shape sa = t.shape(a), sb = t.shape(b);
    detail::require(!sa.empty() && sa.size() == sb.size() && std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1),
                    "concat_rows: trailing dimensions differ");
    std::vector<Real> out = t.value(a);
    const auto& bv = t.value(b);
    out.insert(out.end(), bv.begin(), bv.end());
    const std::size_t na = t.value(a).size();
    Shape os = sa;
    os[0] += sb[0];
    return t.emit(OpKind::concat_rows, os, std::move(out), {a, b}, [na](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        if (t.requires_grad(r.inputs[0])) {
            auto& ga = t.grad_buffer(r.inputs[0]);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(r.inputs[1])) {
            auto& gb = t.grad_buffer(r.inputs[1]);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
        }
    }).output;
}

/// [..., d] . a[d] -> [...].
template <class Real>
Var project_last(Tape<Real>& t, Var x, Var a)
{
    const auto& xs = t.shape(x);
    const std::size_t d = detail::last_dim(xs);
    detail::require(t.shape(a) == Shape{d}, "project_last: vector length mismatch");
    const auto& xv = t.value(x);
    const auto& av = t.value(a);
    const std::size_t rows = xv.size() / d;
    std::vector<Real> out(rows, Real(0));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c) out[r] += xv[r * d + c] * av[c];
    Shape os(xs.begin(), xs.end() - 1);
    return t.emit(OpKind::project_last, os, std::move(out), {x, a}, [rows, d](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        Var x = r.inputs[0], a = r.inputs[1];
        if (t.requires_grad(x)) {
            auto& gx = t.grad_buffer(x);
            const auto& av = t.value(a);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t c = 0; c < d; ++c) gx[i * d + c] += g[i] * av[c];
        }
        if (t.requires_grad(a)) {
            auto& ga = t.grad_buffer(a);
            const auto& xv = t.value(x);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t c = 0; c < d; ++c) ga[c] += g[i] * xv[i * d + c];
        }
    }).output;
}

/// sum_t w[b,t] * h[b,t,:] -> b x d.
template <class Real>
Var weighted_hops(Tape<Real>& t, Var h, Var w)
{
    const auto& s = t.shape(h);
    detail::require(s.size() == 3 && t.shape(w) == Shape{s[0], s[1]}, "weighted_hops: weights must be b x T");
    const std::size_t b = s[0], T = s[1], d = s[2];
    const auto& hv = t.value(h);
    const auto& wv = t.value(w);
    std::vector<Real> out(b * d, Real(0));
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t c = 0; c < d; ++c) out[n * d + c] += wv[n * T + i] * hv[(n * T + i) * d + c];
    return t.emit(OpKind::weighted_hops, {b, d}, std::move(out), {h, w}, [b, T, d](Tape<Real>& t, const auto& r) {
        const auto& g = t.grad_buffer(r.output);
        Var h = r.inputs[0], w = r.inputs[1];
        const auto& hv = t.value(h);
        const auto& wv = t.value(w);
        const bool need_h = t.requires_grad(h), need_w = t.requires_grad(w);
        for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < T; ++i) {
                Real dw = 0;
                for (std::size_t c = 0; c < d; ++c) {
                    if (need_h) t.grad_buffer(h)[(n * T + i) * d + c] += wv[n * T + i] * g[n * d + c];
                    dw += hv[(n * T + i) * d + c] * g[n * d + c];
                }
                if (need_w) t.grad_buffer(w)[n * T + i] += dw;
            }
    }).output;
}

} // namespace hopflow::ad

#endif
