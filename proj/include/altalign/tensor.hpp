#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "altalign/common.hpp"

namespace altalign {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <class S>
struct TensorDataT {
    Shape shape;
    std::vector<S> val;
    std::vector<S> grad;  // empty until a backward pass touches this tensor
    bool requires_grad = false;
};

// Value-semantics handle over a shared dense buffer. Ops never mutate input
// value buffers; only grad buffers accumulate.
template <class S>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return TensorT(std::move(shape), {}, requires_grad, /*fill_zero=*/true);
    }

    static TensorT from(Shape shape, std::vector<S> vals, bool requires_grad = false) {
        return TensorT(std::move(shape), std::move(vals), requires_grad, false);
    }

    static TensorT scalar(S v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }

    const Shape& shape() const { return d_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->val.size()); }
    std::int64_t rows() const { return dim_or_throw(0); }
    std::int64_t cols() const { return dim_or_throw(1); }
    int ndim() const { return static_cast<int>(d_->shape.size()); }

    std::vector<S>& val() { return d_->val; }
    const std::vector<S>& val() const { return d_->val; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<S>& grad() {
        if (d_->grad.empty()) throw std::logic_error("tensor has no gradient");
        return d_->grad;
    }
    const std::vector<S>& grad() const {
        if (d_->grad.empty()) throw std::logic_error("tensor has no gradient");
        return d_->grad;
    }

    void zero_grad() { d_->grad.clear(); }

    // Accumulates dv into the grad buffer, allocating it on first use.
    // Tensors with requires_grad=false never get a buffer.
    void accumulate_grad(std::span<const S> dv) {
        if (!d_->requires_grad) return;
        if (d_->grad.empty()) d_->grad.assign(d_->val.size(), S(0));
        for (std::size_t i = 0; i < dv.size(); ++i) d_->grad[i] += dv[i];
    }
    void accumulate_grad_at(std::int64_t offset, std::span<const S> dv) {
        if (!d_->requires_grad) return;
        if (d_->grad.empty()) d_->grad.assign(d_->val.size(), S(0));
        for (std::size_t i = 0; i < dv.size(); ++i) d_->grad[offset + i] += dv[i];
    }

    const void* id() const { return d_.get(); }

    template <class S2>
    TensorT<S2> cast() const {
        std::vector<S2> v(d_->val.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S2>(d_->val[i]);
        return TensorT<S2>::from(d_->shape, std::move(v), d_->requires_grad);
    }

private:
    TensorT(Shape shape, std::vector<S> vals, bool requires_grad, bool fill_zero) {
        for (auto dim : shape) {
            if (dim <= 0)
                throw std::invalid_argument("tensor dimensions must be positive, got shape " +
                                            shape_str(shape));
        }
        auto n = static_cast<std::size_t>(shape_numel(shape));
        if (fill_zero) {
            vals.assign(n, S(0));
        } else if (vals.size() != n) {
            throw std::invalid_argument("value count does not match shape " + shape_str(shape));
        }
        d_ = std::make_shared<TensorDataT<S>>();
        d_->shape = std::move(shape);
        d_->val = std::move(vals);
        d_->requires_grad = requires_grad;
    }

    std::int64_t dim_or_throw(int i) const {
        if (ndim() <= i) throw std::invalid_argument("tensor rank too small: " + shape_str(d_->shape));
        return d_->shape[static_cast<std::size_t>(i)];
    }

    std::shared_ptr<TensorDataT<S>> d_;
};

// Tape of executed differentiable ops. Execution order is a topological
// order, so reverse iteration visits each node exactly once after all its
// consumers. One graph per training step, single-threaded.
template <class S>
class GraphT {
public:
    explicit GraphT(bool recording = true) : recording_(recording) {}

    using Tensor = TensorT<S>;

    // ---- basic arithmetic ----

    Tensor add(Tensor a, Tensor b) {
        check_same_shape("add", a, b);
        Tensor out = make_like(a, is_diff(a, b));
        auto& o = out.val();
        const auto& av = a.val();
        const auto& bv = b.val();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
        record(out, [a, b, out]() mutable {
            std::span<const S> g(out.grad());
            a.accumulate_grad(g);
            b.accumulate_grad(g);
        });
        return out;
    }

    // out[r,c] = x[r,c] + bias[c]
    Tensor add_rowvec(Tensor x, Tensor bias) {
        require(x.ndim() == 2, "add_rowvec: x must be 2-D");
        require(bias.ndim() == 1 && bias.shape()[0] == x.cols(),
                "add_rowvec: bias length must equal x columns");
        Tensor out = make_like(x, is_diff(x, bias));
        const std::int64_t n = x.rows(), d = x.cols();
        const auto& xv = x.val();
        const auto& bv = bias.val();
        auto& o = out.val();
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < d; ++c) o[r * d + c] = xv[r * d + c] + bv[c];
        record(out, [x, bias, out, n, d]() mutable {
            const auto& g = out.grad();
            x.accumulate_grad(g);
            if (bias.requires_grad()) {
                std::vector<S> db(static_cast<std::size_t>(d), S(0));
                for (std::int64_t r = 0; r < n; ++r)
                    for (std::int64_t c = 0; c < d; ++c) db[c] += g[r * d + c];
                bias.accumulate_grad(db);
            }
        });
        return out;
    }

    Tensor mul(Tensor a, Tensor b) {
        check_same_shape("mul", a, b);
        Tensor out = make_like(a, is_diff(a, b));
        auto& o = out.val();
        const auto& av = a.val();
        const auto& bv = b.val();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
        record(out, [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                std::vector<S> da(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * b.val()[i];
                a.accumulate_grad(da);
            }
            if (b.requires_grad()) {
                std::vector<S> db(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * a.val()[i];
                b.accumulate_grad(db);
            }
        });
        return out;
    }

    Tensor scale(Tensor x, double c) {
        Tensor out = make_like(x, is_diff(x));
        const auto& xv = x.val();
        auto& o = out.val();
        const S cs = static_cast<S>(c);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * cs;
        record(out, [x, out, cs]() mutable {
            const auto& g = out.grad();
            std::vector<S> dx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * cs;
            x.accumulate_grad(dx);
        });
        return out;
    }

    // out = x * s, with s a one-element tensor (e.g. a learnable temperature).
    Tensor mul_scalar(Tensor x, Tensor s) {
        require(s.numel() == 1, "mul_scalar: scale must hold exactly one element");
        Tensor out = make_like(x, is_diff(x, s));
        const S sv = s.val()[0];
        const auto& xv = x.val();
        auto& o = out.val();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * sv;
        record(out, [x, s, out, sv]() mutable {
            const auto& g = out.grad();
            if (x.requires_grad()) {
                std::vector<S> dx(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * sv;
                x.accumulate_grad(dx);
            }
            if (s.requires_grad()) {
                S ds = 0;
                for (std::size_t i = 0; i < g.size(); ++i) ds += g[i] * x.val()[i];
                s.accumulate_grad(std::span<const S>(&ds, 1));
            }
        });
        return out;
    }

    Tensor exp(Tensor x) {
        Tensor out = make_like(x, is_diff(x));
        const auto& xv = x.val();
        auto& o = out.val();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(xv[i]);
        record(out, [x, out]() mutable {
            const auto& g = out.grad();
            std::vector<S> dx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * out.val()[i];
            x.accumulate_grad(dx);
        });
        return out;
    }

    Tensor gelu(Tensor x) {
        Tensor out = make_like(x, is_diff(x));
        const auto& xv = x.val();
        auto& o = out.val();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * normal_cdf(xv[i]);
        record(out, [x, out]() mutable {
            const auto& g = out.grad();
            std::vector<S> dx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const S v = x.val()[i];
                dx[i] = g[i] * (normal_cdf(v) + v * normal_pdf(v));
            }
            x.accumulate_grad(dx);
        });
        return out;
    }

    // ---- linear algebra ----

    Tensor matmul(Tensor a, Tensor b) {
        require(a.ndim() == 2 && b.ndim() == 2, "matmul: operands must be 2-D");
        if (a.cols() != b.rows())
            throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
        Tensor out = TensorT<S>::zeros({m, n}, false);
        out.set_requires_grad(is_diff(a, b));
        matmul_into(out.val(), a.val(), b.val(), m, k, n);
        record(out, [a, b, out, m, k, n]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                // dA = G * B^T
                std::vector<S> da(static_cast<std::size_t>(m * k), S(0));
                const auto& bv = b.val();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) {
                        const S gij = g[i * n + j];
                        for (std::int64_t p = 0; p < k; ++p) da[i * k + p] += gij * bv[p * n + j];
                    }
                a.accumulate_grad(da);
            }
            if (b.requires_grad()) {
                // dB = A^T * G
                std::vector<S> db(static_cast<std::size_t>(k * n), S(0));
                const auto& av = a.val();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t p = 0; p < k; ++p) {
                        const S aip = av[i * k + p];
                        for (std::int64_t j = 0; j < n; ++j) db[p * n + j] += aip * g[i * n + j];
                    }
                b.accumulate_grad(db);
            }
        });
        return out;
    }

    Tensor transpose(Tensor x) {
        require(x.ndim() == 2, "transpose: operand must be 2-D");
        const std::int64_t m = x.rows(), n = x.cols();
        Tensor out = TensorT<S>::zeros({n, m}, false);
        out.set_requires_grad(is_diff(x));
        const auto& xv = x.val();
        auto& o = out.val();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) o[j * m + i] = xv[i * n + j];
        record(out, [x, out, m, n]() mutable {
            const auto& g = out.grad();
            std::vector<S> dx(static_cast<std::size_t>(m * n));
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) dx[i * n + j] = g[j * m + i];
            x.accumulate_grad(dx);
        });
        return out;
    }

    // ---- shape surgery ----

    Tensor slice_rows(Tensor x, std::int64_t r0, std::int64_t nrows) {
        require(x.ndim() == 2, "slice_rows: operand must be 2-D");
        require(r0 >= 0 && nrows >= 1 && r0 + nrows <= x.rows(), "slice_rows: range out of bounds");
        const std::int64_t d = x.cols();
        Tensor out = TensorT<S>::zeros({nrows, d}, false);
        out.set_requires_grad(is_diff(x));
        const auto& xv = x.val();
        std::copy(xv.begin() + r0 * d, xv.begin() + (r0 + nrows) * d, out.val().begin());
        record(out, [x, out, r0, d]() mutable {
            const auto& g = out.grad();
            x.accumulate_grad_at(r0 * d, g);
        });
        return out;
    }

    Tensor slice_cols(Tensor x, std::int64_t c0, std::int64_t ncols) {
        require(x.ndim() == 2, "slice_cols: operand must be 2-D");
        require(c0 >= 0 && ncols >= 1 && c0 + ncols <= x.cols(), "slice_cols: range out of bounds");
        const std::int64_t n = x.rows(), d = x.cols();
        Tensor out = TensorT<S>::zeros({n, ncols}, false);
        out.set_requires_grad(is_diff(x));
        const auto& xv = x.val();
        auto& o = out.val();
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < ncols; ++c) o[r * ncols + c] = xv[r * d + c0 + c];
        record(out, [x, out, c0, n, d, ncols]() mutable {
            if (!x.requires_grad()) return;
            const auto& g = out.grad();
            std::vector<S> dx(static_cast<std::size_t>(n * d), S(0));
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t c = 0; c < ncols; ++c) dx[r * d + c0 + c] = g[r * ncols + c];
            x.accumulate_grad(dx);
        });
        return out;
    }

    Tensor concat_rows(std::vector<Tensor> parts) {
        require(!parts.empty(), "concat_rows: need at least one part");
        const std::int64_t d = parts[0].cols();
        std::int64_t total = 0;
        bool diff = false;
        for (const auto& p : parts) {
            require(p.ndim() == 2 && p.cols() == d, "concat_rows: column counts disagree");
            total += p.rows();
            diff = diff || p.requires_grad();
        }
        Tensor out = TensorT<S>::zeros({total, d}, false);
        out.set_requires_grad(diff);
        auto& o = out.val();
        std::int64_t r = 0;
        for (const auto& p : parts) {
            std::copy(p.val().begin(), p.val().end(), o.begin() + r * d);
            r += p.rows();
        }
        record(out, [parts, out, d]() mutable {
            const auto& g = out.grad();
            std::int64_t r = 0;
            for (auto& p : parts) {
                p.accumulate_grad(std::span<const S>(g.data() + r * d,
                                                     static_cast<std::size_t>(p.rows() * d)));
                r += p.rows();
            }
        });
        return out;
    }

    Tensor concat_cols(std::vector<Tensor> parts) {
        require(!parts.empty(), "concat_cols: need at least one part");
        const std::int64_t n = parts[0].rows();
        std::int64_t total = 0;
        bool diff = false;
        for (const auto& p : parts) {
            require(p.ndim() == 2 && p.rows() == n, "concat_cols: row counts disagree");
            total += p.cols();
            diff = diff || p.requires_grad();
        }
        Tensor out = TensorT<S>::zeros({n, total}, false);
        out.set_requires_grad(diff);
        auto& o = out.val();
        std::int64_t c0 = 0;
        for (const auto& p : parts) {
            const std::int64_t pc = p.cols();
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t c = 0; c < pc; ++c) o[r * total + c0 + c] = p.val()[r * pc + c];
            c0 += pc;
        }
        record(out, [parts, out, n, total]() mutable {
            const auto& g = out.grad();
            std::int64_t c0 = 0;
            for (auto& p : parts) {
                const std::int64_t pc = p.cols();
                if (p.requires_grad()) {
                    std::vector<S> dp(static_cast<std::size_t>(n * pc));
                    for (std::int64_t r = 0; r < n; ++r)
                        for (std::int64_t c = 0; c < pc; ++c) dp[r * pc + c] = g[r * total + c0 + c];
                    p.accumulate_grad(dp);
                }
                c0 += pc;
            }
        });
        return out;
    }

    Tensor embedding(Tensor table, const std::vector<int>& ids) {
        require(table.ndim() == 2, "embedding: table must be 2-D");
        require(!ids.empty(), "embedding: empty id list");
        const std::int64_t v = table.rows(), d = table.cols();
        for (int id : ids)
            if (id < 0 || id >= v)
                throw std::out_of_range("embedding: id " + std::to_string(id) +
                                        " outside vocabulary of size " + std::to_string(v));
        const auto n = static_cast<std::int64_t>(ids.size());
        Tensor out = TensorT<S>::zeros({n, d}, false);
        out.set_requires_grad(is_diff(table));
        const auto& tv = table.val();
        auto& o = out.val();
        for (std::int64_t i = 0; i < n; ++i)
            std::copy(tv.begin() + ids[i] * d, tv.begin() + (ids[i] + 1) * d, o.begin() + i * d);
        record(out, [table, out, ids, d]() mutable {
            const auto& g = out.grad();
            for (std::size_t i = 0; i < ids.size(); ++i)
                table.accumulate_grad_at(static_cast<std::int64_t>(ids[i]) * d,
                                         std::span<const S>(g.data() + i * d, static_cast<std::size_t>(d)));
        });
        return out;
    }

    // ---- normalization / nonlinearity over rows ----

    Tensor softmax_rows(Tensor x) {
        require(x.ndim() == 2, "softmax_rows: operand must be 2-D");
        const std::int64_t n = x.rows(), d = x.cols();
        Tensor out = make_like(x, is_diff(x));
        const auto& xv = x.val();
        auto& o = out.val();
        for (std::int64_t r = 0; r < n; ++r) {
            S mx = xv[r * d];
            for (std::int64_t c = 1; c < d; ++c) mx = std::max(mx, xv[r * d + c]);
            S sum = 0;
            for (std::int64_t c = 0; c < d; ++c) {
                const S e = std::exp(xv[r * d + c] - mx);
                o[r * d + c] = e;
                sum += e;
            }
            for (std::int64_t c = 0; c < d; ++c) o[r * d + c] /= sum;
        }
        record(out, [x, out, n, d]() mutable {
            const auto& g = out.grad();
            const auto& y = out.val();
            std::vector<S> dx(g.size());
            for (std::int64_t r = 0; r < n; ++r) {
                S dot = 0;
                for (std::int64_t c = 0; c < d; ++c) dot += g[r * d + c] * y[r * d + c];
                for (std::int64_t c = 0; c < d; ++c)
                    dx[r * d + c] = y[r * d + c] * (g[r * d + c] - dot);
            }
            x.accumulate_grad(dx);
        });
        return out;
    }

    Tensor l2_normalize_rows(Tensor x) {
        require(x.ndim() == 2, "l2_normalize_rows: operand must be 2-D");
        const std::int64_t n = x.rows(), d = x.cols();
        Tensor out = make_like(x, is_diff(x));
        const auto& xv = x.val();
        auto& o = out.val();
        std::vector<S> norms(static_cast<std::size_t>(n));
        for (std::int64_t r = 0; r < n; ++r) {
            S ss = 0;
            for (std::int64_t c = 0; c < d; ++c) ss += xv[r * d + c] * xv[r * d + c];
            const S norm = std::sqrt(ss);
            if (!(norm > S(0)))
                throw NumericError("l2_normalize: zero-norm row " + std::to_string(r));
            norms[static_cast<std::size_t>(r)] = norm;
            for (std::int64_t c = 0; c < d; ++c) o[r * d + c] = xv[r * d + c] / norm;
        }
        record(out, [x, out, norms, n, d]() mutable {
            const auto& g = out.grad();
            const auto& y = out.val();
            std::vector<S> dx(g.size());
            for (std::int64_t r = 0; r < n; ++r) {
                S dot = 0;
                for (std::int64_t c = 0; c < d; ++c) dot += g[r * d + c] * y[r * d + c];
                const S inv = S(1) / norms[static_cast<std::size_t>(r)];
                for (std::int64_t c = 0; c < d; ++c)
                    dx[r * d + c] = (g[r * d + c] - y[r * d + c] * dot) * inv;
            }
            x.accumulate_grad(dx);
        });
        return out;
    }

    // Per-last-axis normalization with population variance:
    // y = gamma * (x - mean) / sqrt(var + eps) + beta.
    Tensor layer_norm(Tensor x, Tensor gamma, Tensor beta, double eps) {
        require(x.ndim() == 2, "layer_norm: x must be 2-D");
        const std::int64_t n = x.rows(), d = x.cols();
        require(gamma.ndim() == 1 && gamma.shape()[0] == d, "layer_norm: gamma must have length d");
        require(beta.ndim() == 1 && beta.shape()[0] == d, "layer_norm: beta must have length d");
        Tensor out = make_like(x, is_diff(x, gamma, beta));
        const auto& xv = x.val();
        const auto& gv = gamma.val();
        const auto& bv = beta.val();
        auto& o = out.val();
        std::vector<S> inv_std(static_cast<std::size_t>(n));
        std::vector<S> xhat(static_cast<std::size_t>(n * d));
        for (std::int64_t r = 0; r < n; ++r) {
            S mean = 0;
            for (std::int64_t c = 0; c < d; ++c) mean += xv[r * d + c];
            mean /= static_cast<S>(d);
            S var = 0;
            for (std::int64_t c = 0; c < d; ++c) {
                const S diff = xv[r * d + c] - mean;
                var += diff * diff;
            }
            var /= static_cast<S>(d);
            const S istd = S(1) / std::sqrt(var + static_cast<S>(eps));
            inv_std[static_cast<std::size_t>(r)] = istd;
            for (std::int64_t c = 0; c < d; ++c) {
                const S xh = (xv[r * d + c] - mean) * istd;
                xhat[static_cast<std::size_t>(r * d + c)] = xh;
                o[r * d + c] = gv[c] * xh + bv[c];
            }
        }
        record(out, [x, gamma, beta, out, inv_std, xhat, n, d]() mutable {
            const auto& g = out.grad();
            if (gamma.requires_grad()) {
                std::vector<S> dg(static_cast<std::size_t>(d), S(0));
                for (std::int64_t r = 0; r < n; ++r)
                    for (std::int64_t c = 0; c < d; ++c)
                        dg[c] += g[r * d + c] * xhat[static_cast<std::size_t>(r * d + c)];
                gamma.accumulate_grad(dg);
            }
            if (beta.requires_grad()) {
                std::vector<S> db(static_cast<std::size_t>(d), S(0));
                for (std::int64_t r = 0; r < n; ++r)
                    for (std::int64_t c = 0; c < d; ++c) db[c] += g[r * d + c];
                beta.accumulate_grad(db);
            }
            if (x.requires_grad()) {
                std::vector<S> dx(g.size());
                const auto& gv = gamma.val();
                for (std::int64_t r = 0; r < n; ++r) {
                    S m1 = 0, m2 = 0;
                    for (std::int64_t c = 0; c < d; ++c) {
                        const S gg = g[r * d + c] * gv[c];
                        m1 += gg;
                        m2 += gg * xhat[static_cast<std::size_t>(r * d + c)];
                    }
                    m1 /= static_cast<S>(d);
                    m2 /= static_cast<S>(d);
                    for (std::int64_t c = 0; c < d; ++c) {
                        const S gg = g[r * d + c] * gv[c];
                        dx[r * d + c] = (gg - m1 - xhat[static_cast<std::size_t>(r * d + c)] * m2) *
                                        inv_std[static_cast<std::size_t>(r)];
                    }
                }
                x.accumulate_grad(dx);
            }
        });
        return out;
    }

    // ---- reductions / losses ----

    Tensor sum_all(Tensor x) {
        Tensor out = TensorT<S>::zeros({1}, false);
        out.set_requires_grad(is_diff(x));
        S s = 0;
        for (S v : x.val()) s += v;
        out.val()[0] = s;
        record(out, [x, out]() mutable {
            const S g = out.grad()[0];
            std::vector<S> dx(static_cast<std::size_t>(x.numel()), g);
            x.accumulate_grad(dx);
        });
        return out;
    }

    Tensor mean_all(Tensor x) {
        Tensor out = TensorT<S>::zeros({1}, false);
        out.set_requires_grad(is_diff(x));
        S s = 0;
        for (S v : x.val()) s += v;
        const auto n = static_cast<S>(x.numel());
        out.val()[0] = s / n;
        record(out, [x, out, n]() mutable {
            const S g = out.grad()[0] / n;
            std::vector<S> dx(static_cast<std::size_t>(x.numel()), g);
            x.accumulate_grad(dx);
        });
        return out;
    }

    Tensor mse(Tensor a, Tensor b) {
        check_same_shape("mse", a, b);
        Tensor out = TensorT<S>::zeros({1}, false);
        out.set_requires_grad(is_diff(a, b));
        const auto& av = a.val();
        const auto& bv = b.val();
        S s = 0;
        for (std::size_t i = 0; i < av.size(); ++i) {
            const S diff = av[i] - bv[i];
            s += diff * diff;
        }
        const auto n = static_cast<S>(a.numel());
        out.val()[0] = s / n;
        record(out, [a, b, out, n]() mutable {
            const S g = out.grad()[0];
            const auto& av = a.val();
            const auto& bv = b.val();
            if (a.requires_grad()) {
                std::vector<S> da(av.size());
                for (std::size_t i = 0; i < av.size(); ++i)
                    da[i] = g * S(2) * (av[i] - bv[i]) / n;
                a.accumulate_grad(da);
            }
            if (b.requires_grad()) {
                std::vector<S> db(av.size());
                for (std::size_t i = 0; i < av.size(); ++i)
                    db[i] = g * S(2) * (bv[i] - av[i]) / n;
                b.accumulate_grad(db);
            }
        });
        return out;
    }

    // Mean over rows of -log softmax(logits)[target], row-max stabilized.
    Tensor softmax_cross_entropy(Tensor logits, const std::vector<int>& targets) {
        require(logits.ndim() == 2, "softmax_cross_entropy: logits must be 2-D");
        const std::int64_t n = logits.rows(), c = logits.cols();
        require(static_cast<std::int64_t>(targets.size()) == n,
                "softmax_cross_entropy: one target per row required");
        for (int t : targets)
            if (t < 0 || t >= c)
                throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) +
                                        " out of range for " + std::to_string(c) + " classes");
        Tensor out = TensorT<S>::zeros({1}, false);
        out.set_requires_grad(is_diff(logits));
        const auto& z = logits.val();
        std::vector<S> probs(static_cast<std::size_t>(n * c));
        S loss = 0;
        for (std::int64_t r = 0; r < n; ++r) {
            S mx = z[r * c];
            for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, z[r * c + j]);
            S sum = 0;
            for (std::int64_t j = 0; j < c; ++j) {
                const S e = std::exp(z[r * c + j] - mx);
                probs[static_cast<std::size_t>(r * c + j)] = e;
                sum += e;
            }
            for (std::int64_t j = 0; j < c; ++j) probs[static_cast<std::size_t>(r * c + j)] /= sum;
            loss += std::log(sum) - (z[r * c + targets[static_cast<std::size_t>(r)]] - mx);
        }
        out.val()[0] = loss / static_cast<S>(n);
        record(out, [logits, out, probs, targets, n, c]() mutable {
            const S g = out.grad()[0] / static_cast<S>(n);
            std::vector<S> dz(probs.size());
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t j = 0; j < c; ++j) {
                    S p = probs[static_cast<std::size_t>(r * c + j)];
                    if (j == targets[static_cast<std::size_t>(r)]) p -= S(1);
                    dz[static_cast<std::size_t>(r * c + j)] = g * p;
                }
            logits.accumulate_grad(dz);
        });
        return out;
    }

    // ---- backward ----

    void backward(Tensor loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                        shape_str(loss.shape()));
        if (backward_done_)
            throw std::logic_error("backward: graph already consumed; run a new forward pass");
        if (!produced_.count(loss.id()))
            throw std::logic_error("backward: loss was not produced by this graph's forward pass");
        backward_done_ = true;
        const S one = 1;
        loss.accumulate_grad(std::span<const S>(&one, 1));
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
            if (it->out.has_grad()) it->back();
        }
    }

    std::size_t recorded_ops() const { return tape_.size(); }
    bool recording() const { return recording_; }

private:
    struct Node {
        Tensor out;
        std::function<void()> back;
    };

    static void require(bool cond, const char* msg) {
        if (!cond) throw std::invalid_argument(msg);
    }

    static void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape())
            throw std::invalid_argument(std::string(op) + ": shape mismatch, " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }

    static Tensor make_like(const Tensor& x, bool diff) {
        Tensor out = TensorT<S>::zeros(x.shape(), false);
        out.set_requires_grad(diff);
        return out;
    }

    template <class... Ts>
    bool is_diff(const Ts&... ts) const {
        if (!recording_) return false;
        return (ts.requires_grad() || ...);
    }

    void record(Tensor out, std::function<void()> back) {
        if (!recording_ || !out.requires_grad()) return;
        produced_.insert(out.id());
        tape_.push_back(Node{std::move(out), std::move(back)});
    }

    static S normal_cdf(S x) {
        return S(0.5) * (S(1) + std::erf(x * S(0.7071067811865475244)));
    }
    static S normal_pdf(S x) {
        return std::exp(S(-0.5) * x * x) * S(0.3989422804014326779);
    }

    static void matmul_into(std::vector<S>& o, const std::vector<S>& a, const std::vector<S>& b,
                            std::int64_t m, std::int64_t k, std::int64_t n) {
        // i-k-j order keeps the inner loop contiguous over both b and o.
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t p = 0; p < k; ++p) {
                const S aip = a[i * k + p];
                const S* brow = b.data() + p * n;
                S* orow = o.data() + i * n;
                for (std::int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
            }
    }

    std::vector<Node> tape_;
    std::unordered_set<const void*> produced_;
    bool recording_ = true;
    bool backward_done_ = false;
};

using Tensor = TensorT<float>;
using Graph = GraphT<float>;

// Seeded init helpers (deterministic across platforms via Rng).
template <class S>
TensorT<S> randn_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
    auto n = static_cast<std::size_t>(shape_numel(shape));
    std::vector<S> v(n);
    for (auto& x : v) x = static_cast<S>(rng.normal() * stddev);
    return TensorT<S>::from(std::move(shape), std::move(v), requires_grad);
}

template <class S>
TensorT<S> full_tensor(Shape shape, S value, bool requires_grad = false) {
    auto n = static_cast<std::size_t>(shape_numel(shape));
    return TensorT<S>::from(std::move(shape), std::vector<S>(n, value), requires_grad);
}

}  // namespace altalign
