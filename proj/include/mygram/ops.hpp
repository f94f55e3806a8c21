#ifndef MYGRAM_OPS_HPP
#define MYGRAM_OPS_HPP

// Differentiable primitives. Every primitive states its forward value and
// propagates the incoming gradient to each input that requires one.

#include "mygram/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mygram {

using Index = Eigen::Index;

namespace detail {

inline void require(bool cond, const std::string& what)
{
    if (!cond)
        throw Error(what);
}

inline std::string shape(const Tensor& t)
{
    return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

inline Node& input(Node& n, std::size_t i) { return *n.inputs[i]; }

// Determinant of a 4x4 row-major matrix; fills the cofactor matrix when asked.
inline double cofactor4(const double* a, double* cof)
{
    auto minor3 = [a](int skip_r, int skip_c) {
        int r[3], c[3];
        for (int i = 0, k = 0; i < 4; ++i)
            if (i != skip_r)
                r[k++] = i;
        for (int j = 0, k = 0; j < 4; ++j)
            if (j != skip_c)
                c[k++] = j;
        auto at = [a](int i, int j) { return a[4 * i + j]; };
        return at(r[0], c[0]) * (at(r[1], c[1]) * at(r[2], c[2]) - at(r[1], c[2]) * at(r[2], c[1])) -
               at(r[0], c[1]) * (at(r[1], c[0]) * at(r[2], c[2]) - at(r[1], c[2]) * at(r[2], c[0])) +
               at(r[0], c[2]) * (at(r[1], c[0]) * at(r[2], c[1]) - at(r[1], c[1]) * at(r[2], c[0]));
    };
    double det = 0.0;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            if (cof == nullptr && i > 0)
                return det;
            const double sign = ((i + j) % 2 == 0) ? 1.0 : -1.0;
            const double c = sign * minor3(i, j);
            if (cof != nullptr)
                cof[4 * i + j] = c;
            if (i == 0)
                det += a[j] * c;
        }
    }
    return det;
}

} // namespace detail

inline Tensor constant(Matrix m) { return Tensor(std::move(m), false); }

inline Tensor matmul(const Tensor& a, const Tensor& b)
{
    detail::require(a.cols() == b.rows(), "matmul: shape mismatch " + detail::shape(a) + " * " + detail::shape(b));
    Matrix out;
    out.noalias() = a.value() * b.value();
    return make_result(std::move(out), {a, b}, [](detail::Node& n) {
        auto& x = detail::input(n, 0);
        auto& y = detail::input(n, 1);
        if (x.requires_grad)
            x.accumulate_expr(n.grad * y.value.transpose());
        if (y.requires_grad)
            y.accumulate_expr(x.value.transpose() * n.grad);
    });
}

inline Tensor add(const Tensor& a, const Tensor& b)
{
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(),
                    "add: shape mismatch " + detail::shape(a) + " + " + detail::shape(b));
    return make_result(a.value() + b.value(), {a, b}, [](detail::Node& n) {
        for (std::size_t i = 0; i < 2; ++i)
            if (detail::input(n, i).requires_grad)
                detail::input(n, i).accumulate(n.grad);
    });
}

inline Tensor subtract(const Tensor& a, const Tensor& b)
{
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(),
                    "subtract: shape mismatch " + detail::shape(a) + " - " + detail::shape(b));
    return make_result(a.value() - b.value(), {a, b}, [](detail::Node& n) {
        if (detail::input(n, 0).requires_grad)
            detail::input(n, 0).accumulate(n.grad);
        if (detail::input(n, 1).requires_grad)
            detail::input(n, 1).accumulate_expr(-n.grad);
    });
}

/// x + b with a 1xn bias added to every row.
inline Tensor add_row(const Tensor& x, const Tensor& bias)
{
    detail::require(bias.rows() == 1 && bias.cols() == x.cols(),
                    "add_row: bias " + detail::shape(bias) + " does not match " + detail::shape(x));
    Matrix out = x.value();
    out.rowwise() += bias.value().row(0);
    return make_result(std::move(out), {x, bias}, [](detail::Node& n) {
        if (detail::input(n, 0).requires_grad)
            detail::input(n, 0).accumulate(n.grad);
        if (detail::input(n, 1).requires_grad)
            detail::input(n, 1).accumulate_expr(n.grad.colwise().sum());
    });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b)
{
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(),
                    "hadamard: shape mismatch " + detail::shape(a) + " .* " + detail::shape(b));
    return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](detail::Node& n) {
        auto& x = detail::input(n, 0);
        auto& y = detail::input(n, 1);
        if (x.requires_grad)
            x.accumulate_expr(n.grad.cwiseProduct(y.value));
        if (y.requires_grad)
            y.accumulate_expr(n.grad.cwiseProduct(x.value));
    });
}

inline Tensor scale(const Tensor& x, double c)
{
    return make_result(x.value() * c, {x}, [c](detail::Node& n) {
        detail::input(n, 0).accumulate_expr(n.grad * c);
    });
}

/// Multiplies x by a 1x1 tensor, or each row i of x by s(i,0) when s is mx1.
inline Tensor scale_by(const Tensor& x, const Tensor& s)
{
    const bool scalar = s.rows() == 1 && s.cols() == 1;
    detail::require(scalar || (s.rows() == x.rows() && s.cols() == 1),
                    "scale_by: factor " + detail::shape(s) + " does not match " + detail::shape(x));
    Matrix out = scalar ? Matrix(x.value() * s.value()(0, 0))
                        : Matrix(x.value().array().colwise() * s.value().col(0).array());
    return make_result(std::move(out), {x, s}, [scalar](detail::Node& n) {
        auto& a = detail::input(n, 0);
        auto& f = detail::input(n, 1);
        if (scalar) {
            if (a.requires_grad)
                a.accumulate_expr(n.grad * f.value(0, 0));
            if (f.requires_grad) {
                Matrix g(1, 1);
                g(0, 0) = n.grad.cwiseProduct(a.value).sum();
                f.accumulate(g);
            }
        } else {
            if (a.requires_grad)
                a.accumulate_expr(Matrix(n.grad.array().colwise() * f.value.col(0).array()));
            if (f.requires_grad)
                f.accumulate_expr(n.grad.cwiseProduct(a.value).rowwise().sum());
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts)
{
    detail::require(!parts.empty(), "concat_cols: no inputs");
    const Index rows = parts.front().rows();
    Index cols = 0;
    for (const auto& p : parts) {
        detail::require(p.rows() == rows, "concat_cols: row mismatch " + detail::shape(p));
        cols += p.cols();
    }
    Matrix out(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return make_result(std::move(out), parts, [](detail::Node& n) {
        Index offset = 0;
        for (auto& in : n.inputs) {
            const Index w = in->value.cols();
            if (in->requires_grad)
                in->accumulate_expr(n.grad.middleCols(offset, w));
            offset += w;
        }
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts)
{
    detail::require(!parts.empty(), "concat_rows: no inputs");
    const Index cols = parts.front().cols();
    Index rows = 0;
    for (const auto& p : parts) {
        detail::require(p.cols() == cols, "concat_rows: column mismatch " + detail::shape(p));
        rows += p.rows();
    }
    Matrix out(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return make_result(std::move(out), parts, [](detail::Node& n) {
        Index offset = 0;
        for (auto& in : n.inputs) {
            const Index h = in->value.rows();
            if (in->requires_grad)
                in->accumulate_expr(n.grad.middleRows(offset, h));
            offset += h;
        }
    });
}

inline Tensor slice_cols(const Tensor& x, Index start, Index count)
{
    detail::require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols: out of range");
    return make_result(x.value().middleCols(start, count), {x}, [start, count](detail::Node& n) {
        auto& in = detail::input(n, 0);
        Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
        g.middleCols(start, count) = n.grad;
        in.accumulate(g);
    });
}

inline Tensor transpose(const Tensor& x)
{
    return make_result(x.value().transpose(), {x}, [](detail::Node& n) {
        detail::input(n, 0).accumulate_expr(n.grad.transpose());
    });
}

/// Row-major reinterpretation with the same number of entries.
inline Tensor reshape(const Tensor& x, Index rows, Index cols)
{
    detail::require(rows * cols == x.rows() * x.cols(), "reshape: size mismatch");
    Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
    return make_result(std::move(out), {x}, [](detail::Node& n) {
        auto& in = detail::input(n, 0);
        in.accumulate_expr(Eigen::Map<const Matrix>(n.grad.data(), in.value.rows(), in.value.cols()));
    });
}

inline Tensor relu(const Tensor& x)
{
    return make_result(x.value().cwiseMax(0.0), {x}, [](detail::Node& n) {
        auto& in = detail::input(n, 0);
        in.accumulate_expr(Matrix((in.value.array() > 0.0).select(n.grad.array(), 0.0)));
    });
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2)
{
    Matrix out = (x.value().array() > 0.0).select(x.value().array(), slope * x.value().array());
    return make_result(std::move(out), {x}, [slope](detail::Node& n) {
        auto& in = detail::input(n, 0);
        in.accumulate_expr(Matrix((in.value.array() > 0.0).select(n.grad.array(), slope * n.grad.array())));
    });
}

inline Tensor tanh(const Tensor& x)
{
    Matrix out = x.value().array().tanh();
    return make_result(std::move(out), {x}, [](detail::Node& n) {
        detail::input(n, 0).accumulate_expr(Matrix(n.grad.array() * (1.0 - n.value.array().square())));
    });
}

inline Tensor exp(const Tensor& x)
{
    Matrix out = x.value().array().exp();
    return make_result(std::move(out), {x}, [](detail::Node& n) {
        detail::input(n, 0).accumulate_expr(n.grad.cwiseProduct(n.value));
    });
}

inline Tensor log(const Tensor& x)
{
    Matrix out = x.value().array().log();
    return make_result(std::move(out), {x}, [](detail::Node& n) {
        auto& in = detail::input(n, 0);
        in.accumulate_expr(Matrix(n.grad.array() / in.value.array()));
    });
}

/// Elementwise square root. Requesting a gradient at an input below 1e-12 is a
/// contract error; callers keep the argument bounded away from zero.
inline Tensor sqrt(const Tensor& x)
{
    detail::require(!(x.value().array() < 0.0).any(), "sqrt: negative input");
    Matrix out = x.value().array().sqrt();
    return make_result(std::move(out), {x}, [](detail::Node& n) {
        auto& in = detail::input(n, 0);
        detail::require((in.value.array() >= 1e-12).all(), "sqrt: gradient requested at an input below 1e-12");
        in.accumulate_expr(Matrix(n.grad.array() / (2.0 * n.value.array())));
    });
}

inline Tensor abs(const Tensor& x)
{
    Matrix out = x.value().cwiseAbs();
    return make_result(std::move(out), {x}, [](detail::Node& n) {
        auto& in = detail::input(n, 0);
        in.accumulate_expr(Matrix(n.grad.array() * in.value.array().sign()));
    });
}

inline Tensor sum(const Tensor& x)
{
    Matrix out(1, 1);
    out(0, 0) = x.value().sum();
    return make_result(std::move(out), {x}, [](detail::Node& n) {
        auto& in = detail::input(n, 0);
        in.accumulate_expr(Matrix::Constant(in.value.rows(), in.value.cols(), n.grad(0, 0)));
    });
}

inline Tensor mean(const Tensor& x)
{
    detail::require(x.rows() * x.cols() > 0, "mean: empty tensor");
    const double count = static_cast<double>(x.rows() * x.cols());
    Matrix out(1, 1);
    out(0, 0) = x.value().sum() / count;
    return make_result(std::move(out), {x}, [count](detail::Node& n) {
        auto& in = detail::input(n, 0);
        in.accumulate_expr(Matrix::Constant(in.value.rows(), in.value.cols(), n.grad(0, 0) / count));
    });
}

/// Per-row sum, mx1.
inline Tensor row_sum(const Tensor& x)
{
    return make_result(x.value().rowwise().sum(), {x}, [](detail::Node& n) {
        auto& in = detail::input(n, 0);
        Matrix g(in.value.rows(), in.value.cols());
        g.colwise() = n.grad.col(0);
        in.accumulate(g);
    });
}

inline Tensor gather_rows(const Tensor& x, std::vector<Index> idx)
{
    Matrix out(static_cast<Index>(idx.size()), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        detail::require(idx[i] >= 0 && idx[i] < x.rows(), "gather_rows: index out of range");
        out.row(static_cast<Index>(i)) = x.value().row(idx[i]);
    }
    return make_result(std::move(out), {x}, [idx = std::move(idx)](detail::Node& n) {
        auto& in = detail::input(n, 0);
        Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
        for (std::size_t i = 0; i < idx.size(); ++i)
            g.row(idx[i]) += n.grad.row(static_cast<Index>(i));
        in.accumulate(g);
    });
}

/// Rows scaled to unit L2 norm; all-zero rows stay zero.
inline Tensor l2_normalize_rows(const Tensor& x)
{
    Eigen::VectorXd norms = x.value().rowwise().norm();
    Matrix out = x.value();
    for (Index i = 0; i < out.rows(); ++i)
        if (norms(i) > 0.0)
            out.row(i) /= norms(i);
    return make_result(std::move(out), {x}, [norms = std::move(norms)](detail::Node& n) {
        auto& in = detail::input(n, 0);
        Matrix g = Matrix::Zero(n.value.rows(), n.value.cols());
        for (Index i = 0; i < g.rows(); ++i) {
            if (norms(i) <= 0.0)
                continue;
            const double proj = n.value.row(i).dot(n.grad.row(i));
            g.row(i) = (n.grad.row(i) - proj * n.value.row(i)) / norms(i);
        }
        in.accumulate(g);
    });
}

/// softmax(scale * x) along each row, with per-row max subtraction.
inline Tensor row_softmax(const Tensor& x, double scale = 1.0)
{
    detail::require(scale > 0.0, "row_softmax: scale must be positive");
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        const auto row = x.value().row(i);
        const double mx = row.maxCoeff();
        auto e = ((row.array() - mx) * scale).exp();
        out.row(i) = e / e.sum();
    }
    return make_result(std::move(out), {x}, [scale](detail::Node& n) {
        auto& in = detail::input(n, 0);
        Matrix gp = n.grad.cwiseProduct(n.value);
        Eigen::VectorXd dot = gp.rowwise().sum();
        Matrix g = gp - (n.value.array().colwise() * dot.array()).matrix();
        in.accumulate_expr(g * scale);
    });
}

/// log(sum_j exp(x_ij)) per row, mx1. When a mask is given, only entries with a
/// nonzero mask take part; every row must keep at least one entry.
inline Tensor row_logsumexp(const Tensor& x, const Matrix* mask = nullptr)
{
    if (mask != nullptr)
        detail::require(mask->rows() == x.rows() && mask->cols() == x.cols(), "row_logsumexp: mask shape mismatch");
    const Index m = x.rows(), k = x.cols();
    Matrix weights = Matrix::Zero(m, k);
    Matrix out(m, 1);
    for (Index i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (Index j = 0; j < k; ++j)
            if (mask == nullptr || (*mask)(i, j) != 0.0) {
                any = true;
                mx = std::max(mx, x.value()(i, j));
            }
        detail::require(any, "row_logsumexp: row has no included entry");
        if (!std::isfinite(mx)) {
            // Non-finite input propagates so the caller can report it.
            out(i, 0) = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        double total = 0.0;
        for (Index j = 0; j < k; ++j)
            if (mask == nullptr || (*mask)(i, j) != 0.0) {
                weights(i, j) = std::exp(x.value()(i, j) - mx);
                total += weights(i, j);
            }
        weights.row(i) /= total;
        out(i, 0) = mx + std::log(total);
    }
    return make_result(std::move(out), {x}, [weights = std::move(weights)](detail::Node& n) {
        detail::input(n, 0).accumulate_expr(Matrix(weights.array().colwise() * n.grad.col(0).array()));
    });
}

/// Row-wise standardization (biased variance) followed by gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6)
{
    const Index m = x.rows(), d = x.cols();
    detail::require(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
                    "layer_norm: gain/bias must be 1x" + std::to_string(d));
    detail::require(eps > 0.0, "layer_norm: eps must be positive");
    Matrix xhat(m, d);
    Eigen::VectorXd inv_std(m);
    for (Index i = 0; i < m; ++i) {
        const double mu = x.value().row(i).mean();
        auto centered = x.value().row(i).array() - mu;
        const double var = centered.square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = centered * inv_std(i);
    }
    Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
    out.rowwise() += bias.value().row(0);
    return make_result(std::move(out), {x, gain, bias},
                       [xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& n) {
                           auto& in = detail::input(n, 0);
                           auto& g = detail::input(n, 1);
                           auto& b = detail::input(n, 2);
                           if (g.requires_grad)
                               g.accumulate_expr(n.grad.cwiseProduct(xhat).colwise().sum());
                           if (b.requires_grad)
                               b.accumulate_expr(n.grad.colwise().sum());
                           if (!in.requires_grad)
                               return;
                           const double width = static_cast<double>(xhat.cols());
                           Matrix dxhat = n.grad.array().rowwise() * g.value.row(0).array();
                           Matrix dx(xhat.rows(), xhat.cols());
                           for (Index i = 0; i < xhat.rows(); ++i) {
                               const double s1 = dxhat.row(i).sum();
                               const double s2 = dxhat.row(i).dot(xhat.row(i));
                               dx.row(i) = (inv_std(i) / width) *
                                           (width * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2);
                           }
                           in.accumulate(dx);
                       });
}

enum class Mode { train, eval };

/// Inverted dropout: in train mode entries survive with probability 1-rate and
/// are scaled by 1/(1-rate); eval mode is the identity.
inline Tensor dropout(const Tensor& x, double rate, Mode mode, std::mt19937_64& rng)
{
    detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
    if (mode == Mode::eval || rate == 0.0)
        return x;
    std::bernoulli_distribution keep(1.0 - rate);
    Matrix mask(x.rows(), x.cols());
    const double inv = 1.0 / (1.0 - rate);
    for (Index i = 0; i < mask.size(); ++i)
        mask.data()[i] = keep(rng) ? inv : 0.0;
    Matrix out = x.value().cwiseProduct(mask);
    return make_result(std::move(out), {x}, [mask = std::move(mask)](detail::Node& n) {
        detail::input(n, 0).accumulate_expr(n.grad.cwiseProduct(mask));
    });
}

/// Determinant of a 4x4 tensor by cofactor expansion; the gradient is the
/// cofactor matrix, valid for singular input as well.
inline Tensor det4(const Tensor& g)
{
    detail::require(g.rows() == 4 && g.cols() == 4, "det4: expected 4x4, got " + detail::shape(g));
    Matrix cof(4, 4);
    Matrix out(1, 1);
    out(0, 0) = detail::cofactor4(g.value().data(), cof.data());
    return make_result(std::move(out), {g}, [cof = std::move(cof)](detail::Node& n) {
        detail::input(n, 0).accumulate_expr(cof * n.grad(0, 0));
    });
}

/// Batched det4: each row of a Bx16 tensor is a row-major 4x4 matrix.
inline Tensor det4_rows(const Tensor& g)
{
    detail::require(g.cols() == 16, "det4_rows: expected Bx16, got " + detail::shape(g));
    Matrix cof(g.rows(), 16);
    Matrix out(g.rows(), 1);
    for (Index i = 0; i < g.rows(); ++i)
        out(i, 0) = detail::cofactor4(g.value().row(i).data(), cof.row(i).data());
    return make_result(std::move(out), {g}, [cof = std::move(cof)](detail::Node& n) {
        detail::input(n, 0).accumulate_expr(Matrix(cof.array().colwise() * n.grad.col(0).array()));
    });
}

/// Constant sparse matrix times x. The matrix must outlive the active Recording.
inline Tensor spmm(const SparseMatrix& a, const Tensor& x)
{
    detail::require(a.cols() == x.rows(), "spmm: shape mismatch");
    Matrix out = a * x.value();
    return make_result(std::move(out), {x}, [&a](detail::Node& n) {
        detail::input(n, 0).accumulate_expr(Matrix(a.transpose() * n.grad));
    });
}

/// out.row(s) = sum of x.row(e) over all e with segment[e] == s.
inline Tensor segment_sum(const Tensor& x, std::vector<Index> segment, Index segments)
{
    detail::require(static_cast<Index>(segment.size()) == x.rows(), "segment_sum: segment size mismatch");
    Matrix out = Matrix::Zero(segments, x.cols());
    for (std::size_t e = 0; e < segment.size(); ++e) {
        detail::require(segment[e] >= 0 && segment[e] < segments, "segment_sum: segment out of range");
        out.row(segment[e]) += x.value().row(static_cast<Index>(e));
    }
    return make_result(std::move(out), {x}, [segment = std::move(segment)](detail::Node& n) {
        auto& in = detail::input(n, 0);
        Matrix g(in.value.rows(), in.value.cols());
        for (std::size_t e = 0; e < segment.size(); ++e)
            g.row(static_cast<Index>(e)) = n.grad.row(segment[e]);
        in.accumulate(g);
    });
}

/// Softmax of an Ex1 column within each segment.
inline Tensor segment_softmax(const Tensor& logits, std::vector<Index> segment, Index segments)
{
    detail::require(logits.cols() == 1 && static_cast<Index>(segment.size()) == logits.rows(),
                    "segment_softmax: expected Ex1 logits with E segment ids");
    const auto& v = logits.value();
    std::vector<double> mx(static_cast<std::size_t>(segments), -std::numeric_limits<double>::infinity());
    for (std::size_t e = 0; e < segment.size(); ++e) {
        detail::require(segment[e] >= 0 && segment[e] < segments, "segment_softmax: segment out of range");
        mx[segment[e]] = std::max(mx[segment[e]], v(static_cast<Index>(e), 0));
    }
    std::vector<double> total(static_cast<std::size_t>(segments), 0.0);
    Matrix out(logits.rows(), 1);
    for (std::size_t e = 0; e < segment.size(); ++e) {
        out(static_cast<Index>(e), 0) = std::exp(v(static_cast<Index>(e), 0) - mx[segment[e]]);
        total[segment[e]] += out(static_cast<Index>(e), 0);
    }
    for (std::size_t e = 0; e < segment.size(); ++e)
        out(static_cast<Index>(e), 0) /= total[segment[e]];
    return make_result(std::move(out), {logits}, [segment = std::move(segment), segments](detail::Node& n) {
        std::vector<double> dot(static_cast<std::size_t>(segments), 0.0);
        for (std::size_t e = 0; e < segment.size(); ++e)
            dot[segment[e]] += n.grad(static_cast<Index>(e), 0) * n.value(static_cast<Index>(e), 0);
        Matrix g(n.value.rows(), 1);
        for (std::size_t e = 0; e < segment.size(); ++e) {
            const auto i = static_cast<Index>(e);
            g(i, 0) = n.value(i, 0) * (n.grad(i, 0) - dot[segment[e]]);
        }
        detail::input(n, 0).accumulate(g);
    });
}

/// Attention probabilities within fixed-size blocks of rows.
///
/// q and k are (B*T) x (H*dh): B blocks of T consecutive rows, H heads of width dh.
/// The result is (B*T) x (H*T) with out(b*T+m, h*T+j) = softmax_j(scale * <q_m, k_j>)
/// restricted to head h and block b.
inline Tensor block_attention_probs(const Tensor& q, const Tensor& k, Index heads, Index block, double scale)
{
    detail::require(q.rows() == k.rows() && q.cols() == k.cols(), "block_attention_probs: q/k shape mismatch");
    detail::require(heads > 0 && q.cols() % heads == 0, "block_attention_probs: width not divisible by heads");
    detail::require(block > 0 && q.rows() % block == 0, "block_attention_probs: rows not divisible by block");
    const Index dh = q.cols() / heads, blocks = q.rows() / block;
    Matrix out(q.rows(), heads * block);
    for (Index b = 0; b < blocks; ++b)
        for (Index h = 0; h < heads; ++h) {
            Matrix s = q.value().block(b * block, h * dh, block, dh) *
                       k.value().block(b * block, h * dh, block, dh).transpose() * scale;
            for (Index m = 0; m < block; ++m) {
                const double mx = s.row(m).maxCoeff();
                auto e = (s.row(m).array() - mx).exp();
                out.block(b * block + m, h * block, 1, block) = e / e.sum();
            }
        }
    return make_result(std::move(out), {q, k}, [heads, block, dh, blocks, scale](detail::Node& n) {
        auto& qn = detail::input(n, 0);
        auto& kn = detail::input(n, 1);
        Matrix gq = Matrix::Zero(qn.value.rows(), qn.value.cols());
        Matrix gk = Matrix::Zero(kn.value.rows(), kn.value.cols());
        for (Index b = 0; b < blocks; ++b)
            for (Index h = 0; h < heads; ++h) {
                const auto p = n.value.block(b * block, h * block, block, block);
                const auto dp = n.grad.block(b * block, h * block, block, block);
                Eigen::VectorXd dot = p.cwiseProduct(dp).rowwise().sum();
                Matrix ds = (p.array() * (dp.array().colwise() - dot.array())).matrix() * scale;
                gq.block(b * block, h * dh, block, dh) += ds * kn.value.block(b * block, h * dh, block, dh);
                gk.block(b * block, h * dh, block, dh) += ds.transpose() * qn.value.block(b * block, h * dh, block, dh);
            }
        if (qn.requires_grad)
            qn.accumulate(gq);
        if (kn.requires_grad)
            kn.accumulate(gk);
    });
}

/// Applies block attention probabilities (see block_attention_probs) to values
/// v of shape (B*T) x (H*dh); head outputs are concatenated along columns.
inline Tensor block_attention_apply(const Tensor& p, const Tensor& v, Index heads, Index block)
{
    detail::require(p.rows() == v.rows() && p.cols() == heads * block, "block_attention_apply: shape mismatch");
    detail::require(v.cols() % heads == 0 && v.rows() % block == 0, "block_attention_apply: bad value shape");
    const Index dh = v.cols() / heads, blocks = v.rows() / block;
    Matrix out(v.rows(), v.cols());
    for (Index b = 0; b < blocks; ++b)
        for (Index h = 0; h < heads; ++h)
            out.block(b * block, h * dh, block, dh).noalias() =
                p.value().block(b * block, h * block, block, block) * v.value().block(b * block, h * dh, block, dh);
    return make_result(std::move(out), {p, v}, [heads, block, dh, blocks](detail::Node& n) {
        auto& pn = detail::input(n, 0);
        auto& vn = detail::input(n, 1);
        Matrix gp = Matrix::Zero(pn.value.rows(), pn.value.cols());
        Matrix gv = Matrix::Zero(vn.value.rows(), vn.value.cols());
        for (Index b = 0; b < blocks; ++b)
            for (Index h = 0; h < heads; ++h) {
                const auto dout = n.grad.block(b * block, h * dh, block, dh);
                gp.block(b * block, h * block, block, block).noalias() =
                    dout * vn.value.block(b * block, h * dh, block, dh).transpose();
                gv.block(b * block, h * dh, block, dh).noalias() =
                    pn.value.block(b * block, h * block, block, block).transpose() * dout;
            }
        if (pn.requires_grad)
            pn.accumulate(gp);
        if (vn.requires_grad)
            vn.accumulate(gv);
    });
}

} // namespace mygram

#endif // MYGRAM_OPS_HPP
