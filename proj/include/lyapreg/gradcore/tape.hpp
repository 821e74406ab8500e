#pragma once

// Reverse-mode gradient engine over an explicit, append-only expression graph.
//
// Nodes carry vector payloads (a scalar is a vector of length 1). Values are
// computed eagerly when every parent is evaluated, so a rollout can inspect
// intermediate states while it is being unrolled. After rebinding a leaf with
// set_value(), forward() recomputes the whole graph in topological order,
// which is what the finite-difference tests rely on.

#include "lyapreg/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace lyapreg::grad {

enum class Op : std::uint8_t {
    input,
    parameter,
    constant,
    add,
    sub,
    mul,
    div,
    neg,
    sin,
    cos,
    tanh,
    exp,
    elu,
    relu,
    abs,
    softplus,
    clip,
    sum,
    max_over_axis,
    dot,
    affine,
    concat,
    slice,
};

inline const char* op_name(Op op) {
    switch (op) {
    case Op::input: return "input";
    case Op::parameter: return "parameter";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::sin: return "sin";
    case Op::cos: return "cos";
    case Op::tanh: return "tanh";
    case Op::exp: return "exp";
    case Op::elu: return "elu";
    case Op::relu: return "relu";
    case Op::abs: return "abs";
    case Op::softplus: return "softplus";
    case Op::clip: return "clip";
    case Op::sum: return "sum";
    case Op::max_over_axis: return "max_over_axis";
    case Op::dot: return "dot";
    case Op::affine: return "affine";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    }
    return "?";
}

/// Numerically stable log(1 + e^x).
inline double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

/// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double elu(double x) { return x >= 0.0 ? x : std::expm1(x); }

class Tape;

/// Lightweight handle to a node of a Tape. Copyable; does not own anything.
class Var {
public:
    Var() = default;

    [[nodiscard]] Tape* tape() const { return tape_; }
    [[nodiscard]] std::uint32_t id() const { return id_; }
    [[nodiscard]] bool valid() const { return tape_ != nullptr; }

    [[nodiscard]] std::size_t size() const;
    /// View into tape storage. Invalidated by the next node creation.
    [[nodiscard]] std::span<const double> value() const;
    [[nodiscard]] double scalar() const;
    [[nodiscard]] double operator[](std::size_t i) const { return value()[i]; }

private:
    friend class Tape;
    Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::uint32_t id_ = 0;
};

using Gradients = std::map<std::string, std::vector<double>>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Drops every node but keeps allocated capacity.
    void clear() {
        nodes_.clear();
        parents_.clear();
        values_.clear();
        adjoints_.clear();
        names_.clear();
        registry_.clear();
    }

    [[nodiscard]] std::size_t node_count() const { return nodes_.size(); }

    // ---------------------------------------------------------------- leaves

    /// Named differentiable input bound to values.
    Var input(const std::string& name, std::span<const double> values) {
        return named_leaf(Op::input, name, values.size(), 0, 0, values);
    }
    /// Named input declared without a value; forward() refuses to run until bound.
    Var input(const std::string& name, std::size_t size) {
        return named_leaf(Op::input, name, size, 0, 0, {});
    }
    Var parameter(const std::string& name, std::span<const double> values) {
        return named_leaf(Op::parameter, name, values.size(), 0, 0, values);
    }
    /// Row-major matrix parameter usable as the weight of affine().
    Var parameter(const std::string& name, std::span<const double> values, std::size_t rows,
                  std::size_t cols) {
        if (rows * cols != values.size()) {
            throw ValidationError("parameter '" + name + "': shape does not match value count");
        }
        return named_leaf(Op::parameter, name, values.size(), rows, cols, values);
    }

    Var constant(std::span<const double> values) {
        return leaf(Op::constant, values.size(), 0, 0, values, false);
    }
    Var constant(std::initializer_list<double> values) {
        return constant(std::span<const double>(values.begin(), values.size()));
    }
    Var constant(double value) { return constant(std::span<const double>(&value, 1)); }
    /// Row-major constant matrix.
    Var matrix(std::span<const double> values, std::size_t rows, std::size_t cols) {
        if (rows * cols != values.size()) {
            throw ValidationError("matrix constant: shape does not match value count");
        }
        return leaf(Op::constant, values.size(), rows, cols, values, false);
    }

    /// Rebinds a leaf. Dependent values are stale until forward() runs.
    void set_value(Var leaf_var, std::span<const double> values) {
        Node& n = node(leaf_var);
        if (n.op != Op::input && n.op != Op::parameter && n.op != Op::constant) {
            throw ValidationError(std::string("set_value on non-leaf node (") + op_name(n.op) + ")");
        }
        if (values.size() != n.size) {
            throw ValidationError("set_value: size mismatch for leaf '" + leaf_name(leaf_var.id_) + "'");
        }
        std::copy(values.begin(), values.end(), values_.begin() + n.offset);
        n.evaluated = true;
    }

    [[nodiscard]] Var lookup(const std::string& name) const {
        auto it = registry_.find(name);
        if (it == registry_.end()) {
            throw ValidationError("no leaf named '" + name + "'");
        }
        return Var(const_cast<Tape*>(this), it->second);
    }

    // ------------------------------------------------------------ operations

    Var add(Var a, Var b) { return binary(Op::add, a, b); }
    Var sub(Var a, Var b) { return binary(Op::sub, a, b); }
    Var mul(Var a, Var b) { return binary(Op::mul, a, b); }
    Var div(Var a, Var b) { return binary(Op::div, a, b); }
    Var unary(Op op, Var a) {
        check_owner(a);
        return push(op, {a.id_}, node(a).size);
    }
    /// Element-wise clamp into [lo, hi]; lo/hi broadcast from length 1.
    /// Gradient passes to x only, and only where lo <= x <= hi.
    Var clip(Var x, Var lo, Var hi) {
        check_owner(x);
        check_owner(lo);
        check_owner(hi);
        const std::size_t n = node(x).size;
        check_broadcast(n, node(lo).size, "clip");
        check_broadcast(n, node(hi).size, "clip");
        return push(Op::clip, {x.id_, lo.id_, hi.id_}, n);
    }
    /// Scalar sum of all entries of all operands.
    Var sum(std::span<const Var> xs) {
        std::vector<std::uint32_t> ids;
        ids.reserve(xs.size());
        for (const Var& v : xs) {
            check_owner(v);
            ids.push_back(v.id_);
        }
        if (ids.empty()) {
            return constant(0.0);
        }
        return push(Op::sum, ids, 1);
    }
    Var sum(Var x) { return sum(std::span<const Var>(&x, 1)); }
    /// Element-wise maximum across same-size operands (the stacked axis).
    /// The subgradient goes to the earliest operand attaining the maximum.
    Var max_over_axis(std::span<const Var> xs) {
        if (xs.empty()) {
            throw ValidationError("max_over_axis: no operands");
        }
        std::vector<std::uint32_t> ids;
        ids.reserve(xs.size());
        const std::size_t n = xs.front().size();
        for (const Var& v : xs) {
            check_owner(v);
            if (node(v).size != n) {
                throw ValidationError("max_over_axis: operand sizes differ");
            }
            ids.push_back(v.id_);
        }
        return push(Op::max_over_axis, ids, n);
    }
    Var dot(Var a, Var b) {
        check_owner(a);
        check_owner(b);
        if (node(a).size != node(b).size) {
            throw ValidationError("dot: operand sizes differ");
        }
        return push(Op::dot, {a.id_, b.id_}, 1);
    }
    /// W·x (+ bias) or Wᵀ·x (+ bias) for a row-major matrix node W.
    Var affine(Var w, Var x, bool transpose = false) { return affine_impl(w, x, nullptr, transpose); }
    Var affine(Var w, Var x, Var bias, bool transpose = false) {
        return affine_impl(w, x, &bias, transpose);
    }
    Var concat(std::span<const Var> xs) {
        std::vector<std::uint32_t> ids;
        std::size_t total = 0;
        for (const Var& v : xs) {
            check_owner(v);
            ids.push_back(v.id_);
            total += node(v).size;
        }
        return push(Op::concat, ids, total);
    }
    Var slice(Var x, std::size_t start, std::size_t length) {
        check_owner(x);
        if (start + length > node(x).size) {
            throw ValidationError("slice: range exceeds operand size");
        }
        Var out = push(Op::slice, {x.id_}, length, start);
        return out;
    }

    // ------------------------------------------------------------ evaluation

    /// Recomputes every node in creation (topological) order.
    void forward() {
        for (std::uint32_t id = 0; id < nodes_.size(); ++id) {
            Node& n = nodes_[id];
            if (is_leaf(n.op)) {
                if (!n.evaluated) {
                    throw ValidationError("unbound leaf '" + leaf_name(id) + "'");
                }
                continue;
            }
            evaluate(id);
        }
    }

    /// Seeds d(root)/d(root) = 1 and propagates adjoints to every leaf.
    /// Returns adjoints of all named leaves.
    Gradients backward(Var root) {
        propagate(root);
        Gradients out;
        for (const auto& [name, id] : registry_) {
            const Node& n = nodes_[id];
            out.emplace(name, std::vector<double>(adjoints_.begin() + n.offset,
                                                  adjoints_.begin() + n.offset + n.size));
        }
        return out;
    }

    /// Same as backward() without building the name map.
    void propagate(Var root) {
        check_owner(root);
        const Node& r = node(root);
        if (r.size != 1) {
            throw ValidationError("backward: root must be scalar, got size " + std::to_string(r.size));
        }
        if (!r.evaluated) {
            throw ValidationError("backward: forward has not run");
        }
        adjoints_.assign(values_.size(), 0.0);
        adjoints_[r.offset] = 1.0;
        for (std::int64_t id = root.id_; id >= 0; --id) {
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.requires_grad || is_leaf(n.op)) {
                continue;
            }
            backprop(static_cast<std::uint32_t>(id));
        }
    }

    /// Adjoint of any node after backward()/propagate().
    [[nodiscard]] std::span<const double> adjoint(Var v) const {
        const Node& n = nodes_.at(v.id_);
        if (adjoints_.size() < n.offset + n.size) {
            return {};
        }
        return {adjoints_.data() + n.offset, n.size};
    }

    [[nodiscard]] std::span<const double> value(Var v) const {
        const Node& n = nodes_.at(v.id_);
        return {values_.data() + n.offset, n.size};
    }
    [[nodiscard]] std::size_t size(Var v) const { return nodes_.at(v.id_).size; }
    [[nodiscard]] Op op(Var v) const { return nodes_.at(v.id_).op; }
    [[nodiscard]] bool evaluated(Var v) const { return nodes_.at(v.id_).evaluated; }

private:
    struct Node {
        Op op = Op::constant;
        std::uint32_t offset = 0;
        std::uint32_t size = 0;
        std::uint32_t rows = 0;
        std::uint32_t cols = 0;
        std::uint32_t first_parent = 0;
        std::uint32_t n_parents = 0;
        std::uint32_t aux = 0;  // slice start; affine: 1 = transpose, 2 = has bias
        bool evaluated = false;
        bool requires_grad = false;
    };

    static bool is_leaf(Op op) { return op == Op::input || op == Op::parameter || op == Op::constant; }

    Node& node(Var v) { return nodes_.at(v.id_); }
    const Node& node(Var v) const { return nodes_.at(v.id_); }

    void check_owner(Var v) const {
        if (v.tape_ != this) {
            throw ValidationError("variable belongs to a different tape");
        }
    }

    static void check_broadcast(std::size_t n, std::size_t m, const char* what) {
        if (m != n && m != 1) {
            throw ValidationError(std::string(what) + ": incompatible operand sizes");
        }
    }

    std::string leaf_name(std::uint32_t id) const {
        auto it = names_.find(id);
        return it == names_.end() ? std::string("<anonymous #") + std::to_string(id) + ">" : it->second;
    }

    Var named_leaf(Op op, const std::string& name, std::size_t size, std::size_t rows, std::size_t cols,
                   std::span<const double> values) {
        if (registry_.count(name) != 0) {
            throw ValidationError("duplicate leaf name '" + name + "'");
        }
        Var v = leaf(op, size, rows, cols, values, true);
        registry_.emplace(name, v.id_);
        names_.emplace(v.id_, name);
        return v;
    }

    Var leaf(Op op, std::size_t size, std::size_t rows, std::size_t cols, std::span<const double> values,
             bool requires_grad) {
        Node n;
        n.op = op;
        n.offset = static_cast<std::uint32_t>(values_.size());
        n.size = static_cast<std::uint32_t>(size);
        n.rows = static_cast<std::uint32_t>(rows);
        n.cols = static_cast<std::uint32_t>(cols);
        n.first_parent = static_cast<std::uint32_t>(parents_.size());
        n.requires_grad = requires_grad;
        n.evaluated = !values.empty() || size == 0;
        if (!values.empty()) {
            values_.insert(values_.end(), values.begin(), values.end());
        } else {
            values_.resize(values_.size() + size, std::numeric_limits<double>::quiet_NaN());
        }
        nodes_.push_back(n);
        return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
    }

    Var push(Op op, std::initializer_list<std::uint32_t> parents, std::size_t size, std::uint32_t aux = 0) {
        return push(op, std::span<const std::uint32_t>(parents.begin(), parents.size()), size, aux);
    }

    Var push(Op op, std::span<const std::uint32_t> parents, std::size_t size, std::uint32_t aux = 0) {
        Node n;
        n.op = op;
        n.offset = static_cast<std::uint32_t>(values_.size());
        n.size = static_cast<std::uint32_t>(size);
        n.first_parent = static_cast<std::uint32_t>(parents_.size());
        n.n_parents = static_cast<std::uint32_t>(parents.size());
        n.aux = aux;
        bool ready = true;
        for (std::uint32_t p : parents) {
            n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
            ready = ready && nodes_[p].evaluated;
        }
        parents_.insert(parents_.end(), parents.begin(), parents.end());
        values_.resize(values_.size() + size, 0.0);
        nodes_.push_back(n);
        const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
        if (ready) {
            evaluate(id);
        }
        return Var(this, id);
    }

    Var binary(Op op, Var a, Var b) {
        check_owner(a);
        check_owner(b);
        const std::size_t na = node(a).size;
        const std::size_t nb = node(b).size;
        if (na != nb && na != 1 && nb != 1) {
            throw ValidationError(std::string(op_name(op)) + ": incompatible operand sizes " +
                                  std::to_string(na) + " and " + std::to_string(nb));
        }
        return push(op, {a.id_, b.id_}, std::max(na, nb));
    }

    Var affine_impl(Var w, Var x, const Var* bias, bool transpose) {
        check_owner(w);
        check_owner(x);
        const Node& wn = node(w);
        if (wn.rows == 0 || wn.cols == 0) {
            throw ValidationError("affine: weight node has no matrix shape");
        }
        const std::size_t in = transpose ? wn.rows : wn.cols;
        const std::size_t out = transpose ? wn.cols : wn.rows;
        if (node(x).size != in) {
            throw ValidationError("affine: input size " + std::to_string(node(x).size) + " does not match " +
                                  std::to_string(in));
        }
        std::uint32_t aux = transpose ? 1u : 0u;
        if (bias != nullptr) {
            check_owner(*bias);
            if (node(*bias).size != out) {
                throw ValidationError("affine: bias size does not match output size");
            }
            aux |= 2u;
            return push(Op::affine, {w.id_, x.id_, bias->id_}, out, aux);
        }
        return push(Op::affine, {w.id_, x.id_}, out, aux);
    }

    std::uint32_t parent(const Node& n, std::size_t k) const { return parents_[n.first_parent + k]; }

    void evaluate(std::uint32_t id) {
        Node& n = nodes_[id];
        double* out = values_.data() + n.offset;
        const double* v = values_.data();
        auto in = [&](std::size_t k) -> const Node& { return nodes_[parent(n, k)]; };
        switch (n.op) {
        case Op::input:
        case Op::parameter:
        case Op::constant:
            break;
        case Op::add:
        case Op::sub:
        case Op::mul:
        case Op::div: {
            const Node& a = in(0);
            const Node& b = in(1);
            const std::size_t sa = a.size == 1 ? 0 : 1;
            const std::size_t sb = b.size == 1 ? 0 : 1;
            const double* pa = v + a.offset;
            const double* pb = v + b.offset;
            for (std::size_t i = 0; i < n.size; ++i) {
                const double x = pa[i * sa];
                const double y = pb[i * sb];
                switch (n.op) {
                case Op::add: out[i] = x + y; break;
                case Op::sub: out[i] = x - y; break;
                case Op::mul: out[i] = x * y; break;
                default: out[i] = x / y; break;
                }
            }
            break;
        }
        case Op::neg:
        case Op::sin:
        case Op::cos:
        case Op::tanh:
        case Op::exp:
        case Op::elu:
        case Op::relu:
        case Op::abs:
        case Op::softplus: {
            const double* pa = v + in(0).offset;
            for (std::size_t i = 0; i < n.size; ++i) {
                const double x = pa[i];
                switch (n.op) {
                case Op::neg: out[i] = -x; break;
                case Op::sin: out[i] = std::sin(x); break;
                case Op::cos: out[i] = std::cos(x); break;
                case Op::tanh: out[i] = std::tanh(x); break;
                case Op::exp: out[i] = std::exp(x); break;
                case Op::elu: out[i] = grad::elu(x); break;
                case Op::relu: out[i] = x > 0.0 ? x : 0.0; break;
                case Op::abs: out[i] = std::abs(x); break;
                default: out[i] = grad::softplus(x); break;
                }
            }
            break;
        }
        case Op::clip: {
            const Node& x = in(0);
            const Node& lo = in(1);
            const Node& hi = in(2);
            const std::size_t sl = lo.size == 1 ? 0 : 1;
            const std::size_t sh = hi.size == 1 ? 0 : 1;
            for (std::size_t i = 0; i < n.size; ++i) {
                out[i] = std::clamp(v[x.offset + i], v[lo.offset + i * sl], v[hi.offset + i * sh]);
            }
            break;
        }
        case Op::sum: {
            double acc = 0.0;
            for (std::size_t k = 0; k < n.n_parents; ++k) {
                const Node& a = in(k);
                for (std::size_t i = 0; i < a.size; ++i) {
                    acc += v[a.offset + i];
                }
            }
            out[0] = acc;
            break;
        }
        case Op::max_over_axis: {
            const Node& first = in(0);
            std::copy(v + first.offset, v + first.offset + n.size, out);
            for (std::size_t k = 1; k < n.n_parents; ++k) {
                const double* pa = v + in(k).offset;
                for (std::size_t i = 0; i < n.size; ++i) {
                    if (pa[i] > out[i]) {
                        out[i] = pa[i];
                    }
                }
            }
            break;
        }
        case Op::dot: {
            const double* pa = v + in(0).offset;
            const double* pb = v + in(1).offset;
            double acc = 0.0;
            for (std::size_t i = 0; i < in(0).size; ++i) {
                acc += pa[i] * pb[i];
            }
            out[0] = acc;
            break;
        }
        case Op::affine: {
            const Node& w = in(0);
            const double* pw = v + w.offset;
            const double* px = v + in(1).offset;
            const bool transpose = (n.aux & 1u) != 0;
            const double* pb = (n.aux & 2u) != 0 ? v + in(2).offset : nullptr;
            if (!transpose) {
                for (std::size_t r = 0; r < w.rows; ++r) {
                    double acc = 0.0;
                    const double* row = pw + r * w.cols;
                    for (std::size_t c = 0; c < w.cols; ++c) {
                        acc += row[c] * px[c];
                    }
                    out[r] = pb != nullptr ? acc + pb[r] : acc;
                }
            } else {
                std::fill(out, out + n.size, 0.0);
                for (std::size_t r = 0; r < w.rows; ++r) {
                    const double* row = pw + r * w.cols;
                    const double xr = px[r];
                    for (std::size_t c = 0; c < w.cols; ++c) {
                        out[c] += row[c] * xr;
                    }
                }
                if (pb != nullptr) {
                    for (std::size_t c = 0; c < w.cols; ++c) {
                        out[c] += pb[c];
                    }
                }
            }
            break;
        }
        case Op::concat: {
            std::size_t pos = 0;
            for (std::size_t k = 0; k < n.n_parents; ++k) {
                const Node& a = in(k);
                std::copy(v + a.offset, v + a.offset + a.size, out + pos);
                pos += a.size;
            }
            break;
        }
        case Op::slice: {
            const double* pa = v + in(0).offset + n.aux;
            std::copy(pa, pa + n.size, out);
            break;
        }
        }
        n.evaluated = true;
    }

    void backprop(std::uint32_t id) {
        const Node& n = nodes_[id];
        const double* g = adjoints_.data() + n.offset;
        const double* v = values_.data();
        double* adj = adjoints_.data();
        auto in = [&](std::size_t k) -> const Node& { return nodes_[parent(n, k)]; };
        switch (n.op) {
        case Op::input:
        case Op::parameter:
        case Op::constant:
            break;
        case Op::add:
        case Op::sub:
        case Op::mul:
        case Op::div: {
            const Node& a = in(0);
            const Node& b = in(1);
            const std::size_t sa = a.size == 1 ? 0 : 1;
            const std::size_t sb = b.size == 1 ? 0 : 1;
            for (std::size_t i = 0; i < n.size; ++i) {
                const double x = v[a.offset + i * sa];
                const double y = v[b.offset + i * sb];
                double da = 0.0;
                double db = 0.0;
                switch (n.op) {
                case Op::add: da = g[i]; db = g[i]; break;
                case Op::sub: da = g[i]; db = -g[i]; break;
                case Op::mul: da = g[i] * y; db = g[i] * x; break;
                default: da = g[i] / y; db = -g[i] * x / (y * y); break;
                }
                if (a.requires_grad) {
                    adj[a.offset + i * sa] += da;
                }
                if (b.requires_grad) {
                    adj[b.offset + i * sb] += db;
                }
            }
            break;
        }
        case Op::neg:
        case Op::sin:
        case Op::cos:
        case Op::tanh:
        case Op::exp:
        case Op::elu:
        case Op::relu:
        case Op::abs:
        case Op::softplus: {
            const Node& a = in(0);
            if (!a.requires_grad) {
                break;
            }
            const double* pa = v + a.offset;
            const double* py = v + n.offset;
            double* da = adj + a.offset;
            for (std::size_t i = 0; i < n.size; ++i) {
                const double x = pa[i];
                double d = 0.0;
                switch (n.op) {
                case Op::neg: d = -1.0; break;
                case Op::sin: d = std::cos(x); break;
                case Op::cos: d = -std::sin(x); break;
                case Op::tanh: d = 1.0 - py[i] * py[i]; break;
                case Op::exp: d = py[i]; break;
                case Op::elu: d = x >= 0.0 ? 1.0 : py[i] + 1.0; break;
                case Op::relu: d = x > 0.0 ? 1.0 : 0.0; break;
                case Op::abs: d = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); break;
                default: d = sigmoid(x); break;
                }
                da[i] += g[i] * d;
            }
            break;
        }
        case Op::clip: {
            const Node& x = in(0);
            if (!x.requires_grad) {
                break;
            }
            const Node& lo = in(1);
            const Node& hi = in(2);
            const std::size_t sl = lo.size == 1 ? 0 : 1;
            const std::size_t sh = hi.size == 1 ? 0 : 1;
            for (std::size_t i = 0; i < n.size; ++i) {
                const double xi = v[x.offset + i];
                if (xi >= v[lo.offset + i * sl] && xi <= v[hi.offset + i * sh]) {
                    adj[x.offset + i] += g[i];
                }
            }
            break;
        }
        case Op::sum: {
            for (std::size_t k = 0; k < n.n_parents; ++k) {
                const Node& a = in(k);
                if (!a.requires_grad) {
                    continue;
                }
                for (std::size_t i = 0; i < a.size; ++i) {
                    adj[a.offset + i] += g[0];
                }
            }
            break;
        }
        case Op::max_over_axis: {
            for (std::size_t i = 0; i < n.size; ++i) {
                std::size_t best = 0;
                double best_value = v[in(0).offset + i];
                for (std::size_t k = 1; k < n.n_parents; ++k) {
                    const double x = v[in(k).offset + i];
                    if (x > best_value) {
                        best_value = x;
                        best = k;
                    }
                }
                const Node& a = in(best);
                if (a.requires_grad) {
                    adj[a.offset + i] += g[i];
                }
            }
            break;
        }
        case Op::dot: {
            const Node& a = in(0);
            const Node& b = in(1);
            for (std::size_t i = 0; i < a.size; ++i) {
                if (a.requires_grad) {
                    adj[a.offset + i] += g[0] * v[b.offset + i];
                }
                if (b.requires_grad) {
                    adj[b.offset + i] += g[0] * v[a.offset + i];
                }
            }
            break;
        }
        case Op::affine: {
            const Node& w = in(0);
            const Node& x = in(1);
            const bool transpose = (n.aux & 1u) != 0;
            const double* pw = v + w.offset;
            const double* px = v + x.offset;
            if (!transpose) {
                // y_r = Σ_c W_rc x_c
                for (std::size_t r = 0; r < w.rows; ++r) {
                    const double gr = g[r];
                    if (gr == 0.0) {
                        continue;
                    }
                    if (w.requires_grad) {
                        double* dw = adj + w.offset + r * w.cols;
                        for (std::size_t c = 0; c < w.cols; ++c) {
                            dw[c] += gr * px[c];
                        }
                    }
                    if (x.requires_grad) {
                        const double* row = pw + r * w.cols;
                        double* dx = adj + x.offset;
                        for (std::size_t c = 0; c < w.cols; ++c) {
                            dx[c] += gr * row[c];
                        }
                    }
                }
            } else {
                // y_c = Σ_r W_rc x_r
                for (std::size_t r = 0; r < w.rows; ++r) {
                    const double* row = pw + r * w.cols;
                    if (x.requires_grad) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < w.cols; ++c) {
                            acc += row[c] * g[c];
                        }
                        adj[x.offset + r] += acc;
                    }
                    if (w.requires_grad) {
                        const double xr = px[r];
                        double* dw = adj + w.offset + r * w.cols;
                        for (std::size_t c = 0; c < w.cols; ++c) {
                            dw[c] += g[c] * xr;
                        }
                    }
                }
            }
            if ((n.aux & 2u) != 0) {
                const Node& b = in(2);
                if (b.requires_grad) {
                    for (std::size_t i = 0; i < n.size; ++i) {
                        adj[b.offset + i] += g[i];
                    }
                }
            }
            break;
        }
        case Op::concat: {
            std::size_t pos = 0;
            for (std::size_t k = 0; k < n.n_parents; ++k) {
                const Node& a = in(k);
                if (a.requires_grad) {
                    for (std::size_t i = 0; i < a.size; ++i) {
                        adj[a.offset + i] += g[pos + i];
                    }
                }
                pos += a.size;
            }
            break;
        }
        case Op::slice: {
            const Node& a = in(0);
            if (a.requires_grad) {
                for (std::size_t i = 0; i < n.size; ++i) {
                    adj[a.offset + n.aux + i] += g[i];
                }
            }
            break;
        }
        }
    }

    std::vector<Node> nodes_;
    std::vector<std::uint32_t> parents_;
    std::vector<double> values_;
    std::vector<double> adjoints_;
    std::map<std::uint32_t, std::string> names_;
    std::map<std::string, std::uint32_t> registry_;
};

// ------------------------------------------------------------------ Var sugar

inline std::size_t Var::size() const { return tape_->size(*this); }
inline std::span<const double> Var::value() const { return tape_->value(*this); }
inline double Var::scalar() const {
    auto v = value();
    if (v.size() != 1) {
        throw ValidationError("scalar() on a node of size " + std::to_string(v.size()));
    }
    return v[0];
}

inline Var operator+(Var a, Var b) { return a.tape()->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape()->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape()->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape()->div(a, b); }
inline Var operator+(Var a, double b) { return a + a.tape()->constant(b); }
inline Var operator-(Var a, double b) { return a - a.tape()->constant(b); }
inline Var operator*(Var a, double b) { return a * a.tape()->constant(b); }
inline Var operator/(Var a, double b) { return a / a.tape()->constant(b); }
inline Var operator+(double a, Var b) { return b.tape()->constant(a) + b; }
inline Var operator-(double a, Var b) { return b.tape()->constant(a) - b; }
inline Var operator*(double a, Var b) { return b.tape()->constant(a) * b; }
inline Var operator/(double a, Var b) { return b.tape()->constant(a) / b; }
inline Var operator-(Var a) { return a.tape()->unary(Op::neg, a); }

inline Var sin(Var a) { return a.tape()->unary(Op::sin, a); }
inline Var cos(Var a) { return a.tape()->unary(Op::cos, a); }
inline Var tanh(Var a) { return a.tape()->unary(Op::tanh, a); }
inline Var exp(Var a) { return a.tape()->unary(Op::exp, a); }
inline Var elu(Var a) { return a.tape()->unary(Op::elu, a); }
inline Var relu(Var a) { return a.tape()->unary(Op::relu, a); }
inline Var abs(Var a) { return a.tape()->unary(Op::abs, a); }
inline Var softplus(Var a) { return a.tape()->unary(Op::softplus, a); }
inline Var clip(Var x, Var lo, Var hi) { return x.tape()->clip(x, lo, hi); }
inline Var sum(Var x) { return x.tape()->sum(x); }
inline Var dot(Var a, Var b) { return a.tape()->dot(a, b); }
inline Var affine(Var w, Var x) { return w.tape()->affine(w, x); }
inline Var affine(Var w, Var x, Var bias) { return w.tape()->affine(w, x, bias); }
inline Var affine_transposed(Var w, Var x) { return w.tape()->affine(w, x, true); }
inline Var slice(Var x, std::size_t start, std::size_t length) { return x.tape()->slice(x, start, length); }

/// elu'(x) written with graph primitives: exp(min(x, 0)) = exp(-relu(-x)).
inline Var elu_derivative(Var x) { return exp(-relu(-x)); }

} // namespace lyapreg::grad
