#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "loraview/numerics/linalg.hpp"

namespace loraview {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    const Matrix& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

enum class OpKind {
    leaf,
    matmul,
    add,
    hadamard,
    scale,
    row_softmax,
    gelu,
    layer_norm,
    mse_loss,
    concat_rows,
    slice_rows,
    broadcast_row,
    abs_cosine,
};

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward() is a single reverse scan. A node only takes part in the
/// backward pass when some trainable leaf feeds into it; frozen subgraphs
/// (base weights during adapter training, say) cost nothing on the way back.
///
/// Single-threaded. Every training step builds a fresh tape.
class Tape {
public:
    struct Node {
        OpKind op = OpKind::leaf;
        std::vector<std::size_t> inputs;
        Matrix value;
        Matrix grad;
        bool needs_grad = false;
        // op-specific attributes
        Transpose ta = Transpose::no;
        Transpose tb = Transpose::no;
        float scalar = 0.0f;
        std::size_t begin = 0;
        std::size_t end = 0;
        Matrix cache_a;  // layer_norm: normalized input; gelu: input copy
        Matrix cache_b;  // layer_norm: per-row inverse std (rows x 1)
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Trainable leaf: receives a gradient in backward().
    Var parameter(Matrix value) { return leaf(std::move(value), true); }
    /// Non-trainable leaf: never receives a gradient.
    Var constant(Matrix value) { return leaf(std::move(value), false); }

    Var leaf(Matrix value, bool trainable) {
        if (!value.all_finite()) throw ContractError("tape leaf holds non-finite values");
        Node n;
        n.op = OpKind::leaf;
        n.value = std::move(value);
        n.needs_grad = trainable;
        return push(std::move(n));
    }

    const Node& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }
    const Matrix& value(Var v) const { return nodes_.at(v.id()).value; }

    /// dLoss/dv after backward(). Zeros for nodes that received no gradient.
    Matrix grad(Var v) const {
        const Node& n = nodes_.at(v.id());
        if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
        return n.grad;
    }

    bool trainable(Var v) const {
        const Node& n = nodes_.at(v.id());
        return n.op == OpKind::leaf && n.needs_grad;
    }

    /// Propagates d(loss)/d(node) to every node in reverse creation order.
    void backward(Var loss) {
        Node& root = nodes_.at(loss.id());
        if (root.value.rows() != 1 || root.value.cols() != 1) {
            throw ContractError("backward: loss must be 1x1, got " + root.value.shape_str());
        }
        for (auto& n : nodes_) n.grad = Matrix();
        root.grad = Matrix(1, 1, 1.0f);
        for (std::size_t id = loss.id() + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.needs_grad || n.grad.empty() || n.op == OpKind::leaf) continue;
            propagate(n);
        }
    }

    // Op recording; use the free functions below instead of calling these.
    Var push(Node n) {
        if (n.op != OpKind::leaf) {
            for (std::size_t in : n.inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
        }
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }
    Node& node_mut(std::size_t id) { return nodes_.at(id); }

private:
    void accumulate(std::size_t id, const Matrix& g) {
        Node& n = nodes_[id];
        if (!n.needs_grad) return;
        if (n.grad.empty()) n.grad = g;
        else n.grad += g;
    }

    static Transpose flip(Transpose t) { return t == Transpose::no ? Transpose::yes : Transpose::no; }

    void propagate(const Node& n) {
        const Matrix& g = n.grad;
        switch (n.op) {
        case OpKind::leaf:
            break;
        case OpKind::matmul: {
            const Matrix& a = nodes_[n.inputs[0]].value;
            const Matrix& b = nodes_[n.inputs[1]].value;
            // With C = op(A) op(B): d op(A) = G op(B)^T, d op(B) = op(A)^T G.
            if (nodes_[n.inputs[0]].needs_grad) {
                Matrix d = matmul(g, b, Transpose::no, flip(n.tb));
                accumulate(n.inputs[0], n.ta == Transpose::yes ? d.transposed() : d);
            }
            if (nodes_[n.inputs[1]].needs_grad) {
                Matrix d = matmul(a, g, flip(n.ta), Transpose::no);
                accumulate(n.inputs[1], n.tb == Transpose::yes ? d.transposed() : d);
            }
            break;
        }
        case OpKind::add:
            accumulate(n.inputs[0], g);
            accumulate(n.inputs[1], g);
            break;
        case OpKind::hadamard: {
            const Matrix& a = nodes_[n.inputs[0]].value;
            const Matrix& b = nodes_[n.inputs[1]].value;
            if (nodes_[n.inputs[0]].needs_grad) {
                Matrix d = g;
                for (std::size_t i = 0; i < d.size(); ++i) d[i] *= b[i];
                accumulate(n.inputs[0], d);
            }
            if (nodes_[n.inputs[1]].needs_grad) {
                Matrix d = g;
                for (std::size_t i = 0; i < d.size(); ++i) d[i] *= a[i];
                accumulate(n.inputs[1], d);
            }
            break;
        }
        case OpKind::scale:
            accumulate(n.inputs[0], g * n.scalar);
            break;
        case OpKind::row_softmax: {
            // y * (g - <g, y>) per row
            const Matrix& y = n.value;
            Matrix d(y.rows(), y.cols());
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double gy = detail::dot_f64(g.data() + r * y.cols(), y.data() + r * y.cols(), y.cols());
                for (std::size_t c = 0; c < y.cols(); ++c)
                    d(r, c) = static_cast<float>(y(r, c) * (g(r, c) - gy));
            }
            accumulate(n.inputs[0], d);
            break;
        }
        case OpKind::gelu: {
            const Matrix& x = n.cache_a;
            Matrix d(x.rows(), x.cols());
            for (std::size_t i = 0; i < x.size(); ++i) {
                double xi = x[i];
                double cdf = 0.5 * (1.0 + std::erf(xi * std::numbers::sqrt2 / 2.0));
                double pdf = std::exp(-0.5 * xi * xi) / std::sqrt(2.0 * std::numbers::pi);
                d[i] = static_cast<float>(g[i] * (cdf + xi * pdf));
            }
            accumulate(n.inputs[0], d);
            break;
        }
        case OpKind::layer_norm: {
            const Matrix& xhat = n.cache_a;
            const Matrix& inv_std = n.cache_b;
            const Matrix& gain = nodes_[n.inputs[1]].value;
            const std::size_t rows = xhat.rows(), cols = xhat.cols();
            if (nodes_[n.inputs[1]].needs_grad || nodes_[n.inputs[2]].needs_grad) {
                Matrix dgain(1, cols), dbias(1, cols);
                for (std::size_t c = 0; c < cols; ++c) {
                    double sg = 0, sb = 0;
                    for (std::size_t r = 0; r < rows; ++r) {
                        sg += static_cast<double>(g(r, c)) * xhat(r, c);
                        sb += g(r, c);
                    }
                    dgain[c] = static_cast<float>(sg);
                    dbias[c] = static_cast<float>(sb);
                }
                accumulate(n.inputs[1], dgain);
                accumulate(n.inputs[2], dbias);
            }
            if (nodes_[n.inputs[0]].needs_grad) {
                Matrix dx(rows, cols);
                std::vector<double> dxhat(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_d = 0, mean_dx = 0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        dxhat[c] = static_cast<double>(g(r, c)) * gain[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat(r, c);
                    }
                    mean_d /= static_cast<double>(cols);
                    mean_dx /= static_cast<double>(cols);
                    for (std::size_t c = 0; c < cols; ++c)
                        dx(r, c) = static_cast<float>(inv_std[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx));
                }
                accumulate(n.inputs[0], dx);
            }
            break;
        }
        case OpKind::mse_loss: {
            const Matrix& p = nodes_[n.inputs[0]].value;
            const Matrix& t = nodes_[n.inputs[1]].value;
            const double k = 2.0 * g[0] / static_cast<double>(p.size());
            Matrix d(p.rows(), p.cols());
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(k * (static_cast<double>(p[i]) - t[i]));
            accumulate(n.inputs[0], d);
            if (nodes_[n.inputs[1]].needs_grad) accumulate(n.inputs[1], d * -1.0f);
            break;
        }
        case OpKind::concat_rows: {
            std::size_t offset = 0;
            for (std::size_t in : n.inputs) {
                const Matrix& part = nodes_[in].value;
                if (nodes_[in].needs_grad) {
                    Matrix d(part.rows(), part.cols());
                    std::copy_n(g.data() + offset * g.cols(), d.size(), d.data());
                    accumulate(in, d);
                }
                offset += part.rows();
            }
            break;
        }
        case OpKind::slice_rows: {
            const Matrix& x = nodes_[n.inputs[0]].value;
            Matrix d(x.rows(), x.cols());
            std::copy_n(g.data(), g.size(), d.data() + n.begin * x.cols());
            accumulate(n.inputs[0], d);
            break;
        }
        case OpKind::broadcast_row: {
            Matrix d(1, g.cols());
            for (std::size_t c = 0; c < g.cols(); ++c) {
                double s = 0;
                for (std::size_t r = 0; r < g.rows(); ++r) s += g(r, c);
                d[c] = static_cast<float>(s);
            }
            accumulate(n.inputs[0], d);
            break;
        }
        case OpKind::abs_cosine: {
            const Matrix& a = nodes_[n.inputs[0]].value;
            const Matrix& b = nodes_[n.inputs[1]].value;
            const double dot = detail::dot_f64(a.data(), b.data(), a.size());
            const double na = std::sqrt(detail::dot_f64(a.data(), a.data(), a.size()));
            const double nb = std::sqrt(detail::dot_f64(b.data(), b.data(), b.size()));
            const double den = na * nb + n.scalar;
            const double sign = dot > 0 ? 1.0 : (dot < 0 ? -1.0 : 0.0);
            auto side = [&](const Matrix& self, double n_self, const Matrix& other, double n_other) {
                Matrix d(self.rows(), self.cols());
                for (std::size_t i = 0; i < d.size(); ++i) {
                    double term = sign * other[i] / den;
                    if (n_self > 0) term -= std::abs(dot) * n_other * (self[i] / n_self) / (den * den);
                    d[i] = static_cast<float>(g[0] * term);
                }
                return d;
            };
            if (nodes_[n.inputs[0]].needs_grad) accumulate(n.inputs[0], side(a, na, b, nb));
            if (nodes_[n.inputs[1]].needs_grad) accumulate(n.inputs[1], side(b, nb, a, na));
            break;
        }
        }
    }

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

namespace detail {
inline Tape& same_tape(const Var& a, const Var& b) {
    if (a.tape() == nullptr || a.tape() != b.tape()) throw ContractError("vars recorded on different tapes");
    return *a.tape();
}
inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw ShapeError(std::string(op) + ": " + a.value().shape_str() + " vs " + b.value().shape_str());
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops. Anything outside this set is composed from it.

inline Var matmul(const Var& a, const Var& b, Transpose ta = Transpose::no, Transpose tb = Transpose::no) {
    Tape& t = detail::same_tape(a, b);
    Tape::Node n;
    n.op = OpKind::matmul;
    n.inputs = {a.id(), b.id()};
    n.ta = ta;
    n.tb = tb;
    n.value = matmul(a.value(), b.value(), ta, tb);
    return t.push(std::move(n));
}

inline Var add(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "add");
    Tape::Node n;
    n.op = OpKind::add;
    n.inputs = {a.id(), b.id()};
    n.value = a.value() + b.value();
    return t.push(std::move(n));
}

inline Var hadamard(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "hadamard");
    Tape::Node n;
    n.op = OpKind::hadamard;
    n.inputs = {a.id(), b.id()};
    n.value = a.value();
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= b.value()[i];
    return t.push(std::move(n));
}

inline Var scale(const Var& a, float s) {
    Tape::Node n;
    n.op = OpKind::scale;
    n.inputs = {a.id()};
    n.scalar = s;
    n.value = a.value() * s;
    return a.tape()->push(std::move(n));
}

/// Numerically stable softmax along each row.
inline Var row_softmax(const Var& a) {
    const Matrix& x = a.value();
    Tape::Node n;
    n.op = OpKind::row_softmax;
    n.inputs = {a.id()};
    n.value = Matrix(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        float mx = x(r, 0);
        for (std::size_t c = 1; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
        double z = 0;
        for (std::size_t c = 0; c < x.cols(); ++c) z += std::exp(static_cast<double>(x(r, c)) - mx);
        for (std::size_t c = 0; c < x.cols(); ++c)
            n.value(r, c) = static_cast<float>(std::exp(static_cast<double>(x(r, c)) - mx) / z);
    }
    return a.tape()->push(std::move(n));
}

/// Exact (erf) GELU.
inline Var gelu(const Var& a) {
    const Matrix& x = a.value();
    Tape::Node n;
    n.op = OpKind::gelu;
    n.inputs = {a.id()};
    n.cache_a = x;
    n.value = Matrix(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double xi = x[i];
        n.value[i] = static_cast<float>(0.5 * xi * (1.0 + std::erf(xi * std::numbers::sqrt2 / 2.0)));
    }
    return a.tape()->push(std::move(n));
}

/// Row-wise layer normalization with affine gain and bias (both 1 x cols).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, float eps = 1e-5f) {
    Tape& t = detail::same_tape(x, gain);
    detail::same_tape(x, bias);
    const Matrix& xv = x.value();
    if (gain.rows() != 1 || gain.cols() != xv.cols() || !gain.value().same_shape(bias.value()))
        throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(xv.cols()));
    Tape::Node n;
    n.op = OpKind::layer_norm;
    n.inputs = {x.id(), gain.id(), bias.id()};
    n.cache_a = Matrix(xv.rows(), xv.cols());
    n.cache_b = Matrix(xv.rows(), 1);
    n.value = Matrix(xv.rows(), xv.cols());
    const double cols = static_cast<double>(xv.cols());
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        double mean = 0;
        for (std::size_t c = 0; c < xv.cols(); ++c) mean += xv(r, c);
        mean /= cols;
        double var = 0;
        for (std::size_t c = 0; c < xv.cols(); ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
        var /= cols;
        double inv = 1.0 / std::sqrt(var + eps);
        n.cache_b[r] = static_cast<float>(inv);
        for (std::size_t c = 0; c < xv.cols(); ++c) {
            double xh = (xv(r, c) - mean) * inv;
            n.cache_a(r, c) = static_cast<float>(xh);
            n.value(r, c) = static_cast<float>(xh * gain.value()[c] + bias.value()[c]);
        }
    }
    return t.push(std::move(n));
}

/// Mean squared error, returns a 1x1 node.
inline Var mse_loss(const Var& pred, const Var& target) {
    Tape& t = detail::same_tape(pred, target);
    detail::require_same_shape(pred, target, "mse_loss");
    double s = 0;
    const Matrix& p = pred.value();
    const Matrix& q = target.value();
    for (std::size_t i = 0; i < p.size(); ++i) {
        double d = static_cast<double>(p[i]) - q[i];
        s += d * d;
    }
    Tape::Node n;
    n.op = OpKind::mse_loss;
    n.inputs = {pred.id(), target.id()};
    n.value = Matrix(1, 1, static_cast<float>(s / static_cast<double>(p.size())));
    return t.push(std::move(n));
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Tape& t = *parts.front().tape();
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.tape() != &t) throw ContractError("vars recorded on different tapes");
        if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
        rows += p.rows();
    }
    Tape::Node n;
    n.op = OpKind::concat_rows;
    n.value = Matrix(rows, cols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        n.inputs.push_back(p.id());
        std::copy_n(p.value().data(), p.value().size(), n.value.data() + offset * cols);
        offset += p.rows();
    }
    return t.push(std::move(n));
}

/// Rows [begin, end) of `x`.
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
    const Matrix& xv = x.value();
    if (begin >= end || end > xv.rows())
        throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         xv.shape_str());
    Tape::Node n;
    n.op = OpKind::slice_rows;
    n.inputs = {x.id()};
    n.begin = begin;
    n.end = end;
    n.value = Matrix(end - begin, xv.cols());
    std::copy_n(xv.data() + begin * xv.cols(), n.value.size(), n.value.data());
    return x.tape()->push(std::move(n));
}

/// Repeats a 1 x n row `rows` times (column-wise broadcast).
inline Var broadcast_row(const Var& row, std::size_t rows) {
    const Matrix& rv = row.value();
    if (rv.rows() != 1) throw ShapeError("broadcast_row: expected 1xn, got " + rv.shape_str());
    Tape::Node n;
    n.op = OpKind::broadcast_row;
    n.inputs = {row.id()};
    n.value = Matrix(rows, rv.cols());
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(rv.data(), rv.cols(), n.value.data() + r * rv.cols());
    return row.tape()->push(std::move(n));
}

/// |<a, b>| / (||a|| ||b|| + eps) for two same-shape vectors; 1x1 result.
inline Var abs_cosine(const Var& a, const Var& b, float eps = 1e-8f) {
    Tape& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "abs_cosine");
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    const double dot = detail::dot_f64(av.data(), bv.data(), av.size());
    const double na = std::sqrt(detail::dot_f64(av.data(), av.data(), av.size()));
    const double nb = std::sqrt(detail::dot_f64(bv.data(), bv.data(), bv.size()));
    Tape::Node n;
    n.op = OpKind::abs_cosine;
    n.inputs = {a.id(), b.id()};
    n.scalar = eps;
    n.value = Matrix(1, 1, static_cast<float>(std::abs(dot) / (na * nb + eps)));
    return t.push(std::move(n));
}

// ---------------------------------------------------------------------------
// Composites.

inline Var add_row(const Var& x, const Var& row) { return add(x, broadcast_row(row, x.rows())); }

/// Sum of all entries as ones(1 x r) * x * ones(c x 1).
inline Var sum_all(const Var& x) {
    Tape& t = *x.tape();
    Var left = t.constant(Matrix::ones(1, x.rows()));
    Var right = t.constant(Matrix::ones(x.cols(), 1));
    return matmul(matmul(left, x), right);
}

}  // namespace loraview
