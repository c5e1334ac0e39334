#pragma once

// Matrix-granular reverse-mode differentiation.
//
// A Tape records one forward evaluation as a list of nodes. Each node owns its
// value and, when any input depends on a trainable Parameter, a gradient
// buffer plus a closure that pushes the output gradient back onto its inputs.
// Parameters bound with Tape::param() receive accumulated gradients when
// Tape::backward() runs. Everything is double precision and single-threaded.

#include "darlc/common.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace darlc::ad {

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter(std::string n, Matrix v)
        : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(); }
};

/// Named, ordered parameter collection. Iteration order is insertion order.
class ParamSet {
public:
    Parameter& add(const std::string& name, Matrix value) {
        require(!index_.contains(name), "diff_engine", "duplicate parameter '" + name + "'");
        index_.emplace(name, params_.size());
        params_.emplace_back(name, std::move(value));
        return params_.back();
    }

    bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }

    Parameter& operator[](std::string_view name) { return params_[lookup(name)]; }
    const Parameter& operator[](std::string_view name) const { return params_[lookup(name)]; }

    std::size_t size() const { return params_.size(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
        return n;
    }

    bool all_finite() const {
        for (const auto& p : params_)
            if (!p.value.allFinite()) return false;
        return true;
    }

private:
    std::size_t lookup(std::string_view name) const {
        auto it = index_.find(name);
        require(it != index_.end(), "diff_engine", "unknown parameter '" + std::string(name) + "'");
        return it->second;
    }

    std::deque<Parameter> params_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
    bool requires_grad() const;
    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }

private:
    friend class Tape;
    Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value) { return push(std::move(value), false, nullptr, {}); }
    Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

    /// Binds a trainable parameter; backward() accumulates into p.grad.
    Var param(Parameter& p) { return push(p.value, true, &p, {}); }

    /// Records an op output. The closure runs only if some input needs a gradient.
    Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
        bool needs = false;
        for (const Var& v : inputs) {
            require(v.tape_ == this, "diff_engine", "operand recorded on a different tape");
            needs = needs || nodes_[v.id_].requires_grad;
        }
        return push(std::move(value), needs, nullptr, needs ? std::move(backward) : Backward{});
    }

    const Matrix& value(const Var& v) const { return nodes_[v.id_].value; }
    bool requires_grad(const Var& v) const { return nodes_[v.id_].requires_grad; }

    /// Adds `g` into the gradient of `v` if it participates in differentiation.
    template <typename Expr>
    void accumulate(const Var& v, const Expr& g) {
        Node& n = nodes_[v.id_];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        n.grad += g;
    }

    /// Reverse sweep from a 1x1 loss node.
    void backward(const Var& loss) {
        require(loss.tape_ == this, "diff_engine", "loss recorded on a different tape");
        require(value(loss).size() == 1, "diff_engine", "backward() needs a scalar loss");
        Node& root = nodes_[loss.id_];
        if (!root.requires_grad) return;
        root.grad = Matrix::Ones(1, 1);
        for (std::size_t i = loss.id_ + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (n.param) n.param->grad += n.grad;
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Parameter* param = nullptr;
        Backward backward;
    };

    Var push(Matrix value, bool requires_grad, Parameter* p, Backward backward) {
        nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, p, std::move(backward)});
        return Var(this, nodes_.size() - 1);
    }

    std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

// ---------------------------------------------------------------------------
// Elementary ops
// ---------------------------------------------------------------------------

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "diff_engine",
            std::string(op) + ": shape mismatch");
}
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::same_shape(a, b, "add");
    return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::same_shape(a, b, "sub");
    return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, -g);
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::same_shape(a, b, "mul");
    return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                            [a, b](Tape& t, const Matrix& g) {
                                t.accumulate(a, g.cwiseProduct(b.value()));
                                t.accumulate(b, g.cwiseProduct(a.value()));
                            });
}

inline Var scale(const Var& a, double c) {
    return a.tape()->record(a.value() * c, {a}, [a, c](Tape& t, const Matrix& g) { t.accumulate(a, g * c); });
}

inline Var add_scalar(const Var& a, double c) {
    return a.tape()->record(a.value().array() + c, {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

/// a (1x1) times b, broadcasting the scalar.
inline Var scalar_mul(const Var& s, const Var& b) {
    require(s.rows() == 1 && s.cols() == 1, "diff_engine", "scalar_mul: first operand must be 1x1");
    return s.tape()->record(b.value() * s.scalar(), {s, b}, [s, b](Tape& t, const Matrix& g) {
        t.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(b.value()).sum()));
        t.accumulate(b, g * s.scalar());
    });
}

inline Var matmul(const Var& a, const Var& b) {
    require(a.cols() == b.rows(), "diff_engine", "matmul: inner dimension mismatch");
    return a.tape()->record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
        if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
    });
}

inline Var transpose(const Var& a) {
    return a.tape()->record(a.value().transpose(), {a},
                            [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

/// Adds a 1 x cols row vector to every row.
inline Var add_row(const Var& a, const Var& row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "diff_engine", "add_row: bad row shape");
    Matrix out = a.value().rowwise() + row.value().row(0);
    return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
    });
}

/// Multiplies every row elementwise by a 1 x cols row vector.
inline Var mul_row(const Var& a, const Var& row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "diff_engine", "mul_row: bad row shape");
    Matrix out = a.value().array().rowwise() * row.value().row(0).array();
    return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, (g.array().rowwise() * row.value().row(0).array()).matrix());
        if (t.requires_grad(row)) t.accumulate(row, g.cwiseProduct(a.value()).colwise().sum());
    });
}

/// Adds a T x cols block to each consecutive group of T rows.
inline Var add_tiled(const Var& a, const Var& tile) {
    const Index T = tile.rows();
    require(tile.cols() == a.cols() && T > 0 && a.rows() % T == 0, "diff_engine", "add_tiled: bad shape");
    Matrix out = a.value();
    for (Index b = 0; b < a.rows() / T; ++b) out.middleRows(b * T, T) += tile.value();
    return a.tape()->record(std::move(out), {a, tile}, [a, tile, T](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (!t.requires_grad(tile)) return;
        Matrix gt = Matrix::Zero(T, g.cols());
        for (Index b = 0; b < g.rows() / T; ++b) gt += g.middleRows(b * T, T);
        t.accumulate(tile, gt);
    });
}

inline Var sum(const Var& a) {
    return a.tape()->record(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var slice_rows(const Var& a, Index start, Index count) {
    require(start >= 0 && count >= 0 && start + count <= a.rows(), "diff_engine", "slice_rows: out of range");
    return a.tape()->record(a.value().middleRows(start, count), {a}, [a, start, count](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(a.rows(), a.cols());
        full.middleRows(start, count) = g;
        t.accumulate(a, full);
    });
}

inline Var slice_cols(const Var& a, Index start, Index count) {
    require(start >= 0 && count >= 0 && start + count <= a.cols(), "diff_engine", "slice_cols: out of range");
    return a.tape()->record(a.value().middleCols(start, count), {a}, [a, start, count](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(a.rows(), a.cols());
        full.middleCols(start, count) = g;
        t.accumulate(a, full);
    });
}

/// Same data reinterpreted with a new row-major shape.
inline Var reshape(const Var& a, Index rows, Index cols) {
    require(rows * cols == a.value().size(), "diff_engine", "reshape: size mismatch");
    Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
    return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, Eigen::Map<const Matrix>(g.data(), a.rows(), a.cols()));
    });
}

namespace detail {
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
    Matrix out = a.value().unaryExpr(f);
    return a.tape()->record(std::move(out), {a}, [a, df](Tape& t, const Matrix& g) {
        Matrix d = a.value().unaryExpr(df);
        t.accumulate(a, g.cwiseProduct(d));
    });
}
}  // namespace detail

inline Var leaky_relu(const Var& a, double slope = 0.2) {
    return detail::unary(
        a, [slope](double x) { return x > 0 ? x : slope * x; },
        [slope](double x) { return x > 0 ? 1.0 : slope; });
}

inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

inline double selu_value(double x) { return x > 0 ? kSeluLambda * x : kSeluLambda * kSeluAlpha * std::expm1(x); }

inline Var selu(const Var& a) {
    return detail::unary(
        a, [](double x) { return selu_value(x); },
        [](double x) { return x > 0 ? kSeluLambda : kSeluLambda * kSeluAlpha * std::exp(x); });
}

inline double gelu_value(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

/// tanh-approximated GELU.
inline Var gelu(const Var& a) {
    return detail::unary(
        a, [](double x) { return gelu_value(x); },
        [](double x) {
            constexpr double c = 0.7978845608028654;
            const double u = c * (x + 0.044715 * x * x * x);
            const double th = std::tanh(u);
            const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        });
}

inline Var exp(const Var& a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

inline Var log(const Var& a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Var square(const Var& a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

/// log(1 + exp(x)), stable for large |x|.
inline Var softplus(const Var& a) {
    return detail::unary(
        a, [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

// ---------------------------------------------------------------------------
// Row-wise reductions and normalizations
// ---------------------------------------------------------------------------

inline Matrix logsumexp_rows_value(const Matrix& x) {
    Matrix out(x.rows(), 1);
    for (Index i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).maxCoeff();
        out(i, 0) = std::isfinite(m) ? m + std::log((x.row(i).array() - m).exp().sum()) : m;
    }
    return out;
}

inline Matrix softmax_rows_value(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).maxCoeff();
        out.row(i) = (x.row(i).array() - m).exp().matrix();
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

/// N x K -> N x 1.
inline Var logsumexp_rows(const Var& a) {
    Matrix out = logsumexp_rows_value(a.value());
    return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
        Matrix p = softmax_rows_value(a.value());
        t.accumulate(a, (p.array().colwise() * g.col(0).array()).matrix());
    });
}

inline Var softmax_rows(const Var& a) {
    Matrix out = softmax_rows_value(a.value());
    return a.tape()->record(out, {a}, [a, out](Tape& t, const Matrix& g) {
        Matrix dot = g.cwiseProduct(out).rowwise().sum();
        Matrix ga = out.cwiseProduct((g.array().colwise() - dot.col(0).array()).matrix());
        t.accumulate(a, ga);
    });
}

inline Var log_softmax_rows(const Var& a) {
    Matrix lse = logsumexp_rows_value(a.value());
    Matrix out = a.value().array().colwise() - lse.col(0).array();
    return a.tape()->record(out, {a}, [a, out](Tape& t, const Matrix& g) {
        Matrix p = out.array().exp();
        Matrix gs = g.rowwise().sum();
        t.accumulate(a, g - (p.array().colwise() * gs.col(0).array()).matrix());
    });
}

/// Row-wise layer normalization with learned gain and bias (1 x cols each).
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Index n = x.rows(), d = x.cols();
    Matrix xhat(n, d);
    Vector inv_std(n);
    for (Index i = 0; i < n; ++i) {
        const double mu = x.value().row(i).mean();
        const double var = (x.value().row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
    }
    Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return x.tape()->record(std::move(out), {x, gamma, beta},
                            [x, gamma, beta, xhat, inv_std, d](Tape& t, const Matrix& g) {
                                if (t.requires_grad(gamma)) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                                if (t.requires_grad(beta)) t.accumulate(beta, g.colwise().sum());
                                if (!t.requires_grad(x)) return;
                                Matrix gx_hat = g.array().rowwise() * gamma.value().row(0).array();
                                Matrix gx(g.rows(), d);
                                for (Index i = 0; i < g.rows(); ++i) {
                                    const double m1 = gx_hat.row(i).mean();
                                    const double m2 = gx_hat.row(i).dot(xhat.row(i)) / static_cast<double>(d);
                                    gx.row(i) = inv_std(i) * (gx_hat.row(i).array() - m1 - xhat.row(i).array() * m2);
                                }
                                t.accumulate(x, gx);
                            });
}

struct BatchStats {
    RowVector mean;
    RowVector var;  // biased
};

/// Column-wise normalization with batch statistics (no affine part).
inline Var batch_normalize(const Var& x, double eps, BatchStats* stats = nullptr) {
    const Index n = x.rows(), d = x.cols();
    require(n >= 2, "smm_cluster", "batch normalization in train mode needs at least 2 rows");
    RowVector mu = x.value().colwise().mean();
    Matrix centered = x.value().rowwise() - mu;
    RowVector var = centered.array().square().colwise().mean();
    RowVector inv_std = (var.array() + eps).rsqrt();
    Matrix xhat = centered.array().rowwise() * inv_std.array();
    if (stats) *stats = BatchStats{mu, var};
    return x.tape()->record(xhat, {x}, [x, xhat, inv_std, n, d](Tape& t, const Matrix& g) {
        RowVector m1 = g.colwise().mean();
        RowVector m2 = g.cwiseProduct(xhat).colwise().mean();
        Matrix gx = ((g.rowwise() - m1).array() - xhat.array().rowwise() * m2.array()).rowwise() * inv_std.array();
        (void)n;
        (void)d;
        t.accumulate(x, gx);
    });
}

/// (B*T) x D -> B x D, averaging each consecutive group of T rows.
inline Var mean_pool(const Var& x, Index group) {
    require(group > 0 && x.rows() % group == 0, "diff_engine", "mean_pool: rows not divisible by group");
    const Index B = x.rows() / group;
    Matrix out(B, x.cols());
    for (Index b = 0; b < B; ++b) out.row(b) = x.value().middleRows(b * group, group).colwise().mean();
    return x.tape()->record(std::move(out), {x}, [x, group, B](Tape& t, const Matrix& g) {
        Matrix gx(x.rows(), x.cols());
        for (Index b = 0; b < B; ++b)
            gx.middleRows(b * group, group) = g.row(b).replicate(group, 1) / static_cast<double>(group);
        t.accumulate(x, gx);
    });
}

/// Rows flagged true are replaced by `token` (1 x cols).
inline Var replace_rows(const Var& x, const Var& token, std::vector<bool> flags) {
    require(static_cast<Index>(flags.size()) == x.rows() && token.rows() == 1 && token.cols() == x.cols(),
            "diff_engine", "replace_rows: bad shape");
    Matrix out = x.value();
    for (Index r = 0; r < x.rows(); ++r)
        if (flags[static_cast<std::size_t>(r)]) out.row(r) = token.value().row(0);
    return x.tape()->record(std::move(out), {x, token}, [x, token, flags](Tape& t, const Matrix& g) {
        Matrix gx = g;
        RowVector gt = RowVector::Zero(g.cols());
        for (Index r = 0; r < g.rows(); ++r) {
            if (flags[static_cast<std::size_t>(r)]) {
                gt += g.row(r);
                gx.row(r).setZero();
            }
        }
        t.accumulate(x, gx);
        t.accumulate(token, gt);
    });
}

/// Sum over rows of the Euclidean row norm; the subgradient at a zero row is 0.
inline Var sum_row_norms(const Var& a) {
    Vector norms = a.value().rowwise().norm();
    return a.tape()->record(Matrix::Constant(1, 1, norms.sum()), {a}, [a, norms](Tape& t, const Matrix& g) {
        Matrix ga = Matrix::Zero(a.rows(), a.cols());
        for (Index i = 0; i < a.rows(); ++i)
            if (norms(i) > 0) ga.row(i) = a.value().row(i) / norms(i) * g(0, 0);
        t.accumulate(a, ga);
    });
}

/// Tr(Z^T M Z) for a constant square M.
inline Var trace_quadratic(const Var& z, const Matrix& m) {
    require(m.rows() == z.rows() && m.cols() == z.rows(), "diff_engine", "trace_quadratic: shape mismatch");
    Matrix mz = m * z.value();
    const double v = z.value().cwiseProduct(mz).sum();
    return z.tape()->record(Matrix::Constant(1, 1, v), {z}, [z, m, mz](Tape& t, const Matrix& g) {
        t.accumulate(z, (mz + m.transpose() * z.value()) * g(0, 0));
    });
}

// ---------------------------------------------------------------------------
// Multi-head self-attention over independent groups of rows.
// qkv is (B*T) x 3D laid out as [Q | K | V]; output is (B*T) x D.
// ---------------------------------------------------------------------------

inline Var multihead_attention(const Var& qkv, Index tokens, Index heads) {
    const Index rows = qkv.rows();
    require(qkv.cols() % 3 == 0, "repr_module", "attention input must hold Q, K and V");
    const Index D = qkv.cols() / 3;
    require(tokens > 0 && rows % tokens == 0 && heads > 0 && D % heads == 0, "repr_module",
            "attention: tokens/heads do not divide the input");
    const Index B = rows / tokens, hd = D / heads;
    const double scale_f = 1.0 / std::sqrt(static_cast<double>(hd));
    const Matrix& in = qkv.value();

    Matrix out(rows, D);
    std::vector<Matrix> probs(static_cast<std::size_t>(B * heads));
    for (Index b = 0; b < B; ++b) {
        for (Index h = 0; h < heads; ++h) {
            auto q = in.block(b * tokens, h * hd, tokens, hd);
            auto k = in.block(b * tokens, D + h * hd, tokens, hd);
            auto v = in.block(b * tokens, 2 * D + h * hd, tokens, hd);
            Matrix s = (q * k.transpose()) * scale_f;
            Matrix p = softmax_rows_value(s);
            out.block(b * tokens, h * hd, tokens, hd) = p * v;
            probs[static_cast<std::size_t>(b * heads + h)] = std::move(p);
        }
    }
    return qkv.tape()->record(std::move(out), {qkv},
                              [qkv, probs, tokens, heads, B, D, hd, scale_f](Tape& t, const Matrix& g) {
                                  const Matrix& in = qkv.value();
                                  Matrix gin = Matrix::Zero(in.rows(), in.cols());
                                  for (Index b = 0; b < B; ++b) {
                                      for (Index h = 0; h < heads; ++h) {
                                          const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
                                          auto q = in.block(b * tokens, h * hd, tokens, hd);
                                          auto k = in.block(b * tokens, D + h * hd, tokens, hd);
                                          auto v = in.block(b * tokens, 2 * D + h * hd, tokens, hd);
                                          auto go = g.block(b * tokens, h * hd, tokens, hd);
                                          Matrix gp = go * v.transpose();
                                          Matrix dot = gp.cwiseProduct(p).rowwise().sum();
                                          Matrix gs = p.cwiseProduct((gp.array().colwise() - dot.col(0).array()).matrix()) *
                                                      scale_f;
                                          gin.block(b * tokens, h * hd, tokens, hd) += gs * k;
                                          gin.block(b * tokens, D + h * hd, tokens, hd) += gs.transpose() * q;
                                          gin.block(b * tokens, 2 * D + h * hd, tokens, hd) += p.transpose() * go;
                                      }
                                  }
                                  t.accumulate(qkv, gin);
                              });
}

}  // namespace darlc::ad
