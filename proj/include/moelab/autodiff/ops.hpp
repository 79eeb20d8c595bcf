#pragma once

#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "moelab/autodiff/graph.hpp"

namespace moelab::ad {

namespace detail {

inline Graph& common_graph(const Tensor& a) {
    if (!a.valid()) {
        throw InvalidArgument("use of an empty tensor handle");
    }
    return *a.graph();
}

inline Graph& common_graph(const Tensor& a, const Tensor& b) {
    Graph& g = common_graph(a);
    g.own(b);
    return g;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
}

inline void add_to(Graph& g, int id, const Matrix& delta) {
    if (g.requires_grad(id)) {
        g.grad_buffer(id) += delta;
    }
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    Graph& g = detail::common_graph(a, b);
    detail::require_same_shape("add", a, b);
    const int ia = a.id(), ib = b.id();
    return g.record(a.value() + b.value(), {ia, ib}, [ia, ib](Graph& gr, const Matrix& go) {
        detail::add_to(gr, ia, go);
        detail::add_to(gr, ib, go);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    Graph& g = detail::common_graph(a, b);
    detail::require_same_shape("sub", a, b);
    const int ia = a.id(), ib = b.id();
    return g.record(a.value() - b.value(), {ia, ib}, [ia, ib](Graph& gr, const Matrix& go) {
        detail::add_to(gr, ia, go);
        detail::add_to(gr, ib, -go);
    });
}

/// Element-wise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    Graph& g = detail::common_graph(a, b);
    detail::require_same_shape("mul", a, b);
    const int ia = a.id(), ib = b.id();
    return g.record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Graph& gr, const Matrix& go) {
        if (gr.requires_grad(ia)) {
            gr.grad_buffer(ia) += go.cwiseProduct(gr.value(ib));
        }
        if (gr.requires_grad(ib)) {
            gr.grad_buffer(ib) += go.cwiseProduct(gr.value(ia));
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    Graph& g = detail::common_graph(a);
    const int ia = a.id();
    return g.record(a.value() * s, {ia}, [ia, s](Graph& gr, const Matrix& go) { detail::add_to(gr, ia, go * s); });
}

/// Multiplies every entry of `a` by the scalar tensor `s`.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    Graph& g = detail::common_graph(a, s);
    if (s.value().size() != 1) {
        throw ShapeError("scale_by: factor must be scalar, got " + to_string(s.shape()));
    }
    const int ia = a.id(), is = s.id();
    return g.record(a.value() * s.item(), {ia, is}, [ia, is](Graph& gr, const Matrix& go) {
        const double sv = gr.value(is)(0, 0);
        if (gr.requires_grad(ia)) {
            gr.grad_buffer(ia) += go * sv;
        }
        if (gr.requires_grad(is)) {
            gr.grad_buffer(is)(0, 0) += go.cwiseProduct(gr.value(ia)).sum();
        }
    });
}

/// Scales row i of `a` by `column(i, 0)`.
inline Tensor mul_rows(const Tensor& a, const Tensor& column) {
    Graph& g = detail::common_graph(a, column);
    if (column.cols() != 1 || column.rows() != a.rows()) {
        throw ShapeError("mul_rows: expected column of " + std::to_string(a.rows()) + " rows, got " +
                         to_string(column.shape()));
    }
    const int ia = a.id(), ic = column.id();
    Matrix out = column.value().col(0).asDiagonal() * a.value();
    return g.record(std::move(out), {ia, ic}, [ia, ic](Graph& gr, const Matrix& go) {
        if (gr.requires_grad(ia)) {
            gr.grad_buffer(ia) += gr.value(ic).col(0).asDiagonal() * go;
        }
        if (gr.requires_grad(ic)) {
            gr.grad_buffer(ic).col(0) += go.cwiseProduct(gr.value(ia)).rowwise().sum();
        }
    });
}

inline Tensor square(const Tensor& a) {
    Graph& g = detail::common_graph(a);
    const int ia = a.id();
    return g.record(a.value().array().square().matrix(), {ia}, [ia](Graph& gr, const Matrix& go) {
        detail::add_to(gr, ia, 2.0 * go.cwiseProduct(gr.value(ia)));
    });
}

/// x * sigmoid(x)
inline Tensor silu(const Tensor& a) {
    Graph& g = detail::common_graph(a);
    const int ia = a.id();
    const Matrix sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
    Matrix out = a.value().cwiseProduct(sig);
    return g.record(std::move(out), {ia}, [ia, sig](Graph& gr, const Matrix& go) {
        if (!gr.requires_grad(ia)) {
            return;
        }
        const auto x = gr.value(ia).array();
        const auto s = sig.array();
        gr.grad_buffer(ia) += (go.array() * (s + x * s * (1.0 - s))).matrix();
    });
}

/// Natural log of max(x, floor); entries at or below the floor get zero gradient.
inline Tensor log_clamped(const Tensor& a, double floor) {
    Graph& g = detail::common_graph(a);
    if (!(floor > 0.0)) {
        throw InvalidArgument("log_clamped: floor must be positive");
    }
    const int ia = a.id();
    Matrix out = a.value().array().max(floor).log().matrix();
    return g.record(std::move(out), {ia}, [ia, floor](Graph& gr, const Matrix& go) {
        if (!gr.requires_grad(ia)) {
            return;
        }
        const auto x = gr.value(ia).array();
        gr.grad_buffer(ia) += (x > floor).select(go.array() / x, 0.0).matrix();
    });
}

// ---------------------------------------------------------------- products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    Graph& g = detail::common_graph(a, b);
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const int ia = a.id(), ib = b.id();
    Matrix out = a.value() * b.value();
    return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, const Matrix& go) {
        if (gr.requires_grad(ia)) {
            gr.grad_buffer(ia).noalias() += go * gr.value(ib).transpose();
        }
        if (gr.requires_grad(ib)) {
            gr.grad_buffer(ib).noalias() += gr.value(ia).transpose() * go;
        }
    });
}

/// a * b^T, the layout used for weight matrices stored as [out, in].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    Graph& g = detail::common_graph(a, b);
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: inner dimensions differ " + to_string(a.shape()) + " x " +
                         to_string(b.shape()) + "^T");
    }
    const int ia = a.id(), ib = b.id();
    Matrix out = a.value() * b.value().transpose();
    return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, const Matrix& go) {
        if (gr.requires_grad(ia)) {
            gr.grad_buffer(ia).noalias() += go * gr.value(ib);
        }
        if (gr.requires_grad(ib)) {
            gr.grad_buffer(ib).noalias() += go.transpose() * gr.value(ia);
        }
    });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
    Graph& g = detail::common_graph(a);
    const int ia = a.id();
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return g.record(std::move(out), {ia}, [ia](Graph& gr, const Matrix& go) {
        if (gr.requires_grad(ia)) {
            gr.grad_buffer(ia).array() += go(0, 0);
        }
    });
}

inline Tensor mean(const Tensor& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// Per-row sum, shape [rows, 1].
inline Tensor row_sum(const Tensor& a) {
    Graph& g = detail::common_graph(a);
    const int ia = a.id();
    Matrix out = a.value().rowwise().sum();
    return g.record(std::move(out), {ia}, [ia](Graph& gr, const Matrix& go) {
        if (gr.requires_grad(ia)) {
            gr.grad_buffer(ia).colwise() += go.col(0);
        }
    });
}

/// Per-column mean, shape [1, cols].
inline Tensor col_mean(const Tensor& a) {
    Graph& g = detail::common_graph(a);
    const int ia = a.id();
    const double inv = 1.0 / static_cast<double>(a.rows());
    Matrix out = a.value().colwise().sum() * inv;
    return g.record(std::move(out), {ia}, [ia, inv](Graph& gr, const Matrix& go) {
        if (gr.requires_grad(ia)) {
            gr.grad_buffer(ia).rowwise() += go.row(0) * inv;
        }
    });
}

/// Numerically stable log(sum(exp(row))) for each row, shape [rows, 1].
inline Tensor logsumexp_rows(const Tensor& a) {
    Graph& g = detail::common_graph(a);
    const int ia = a.id();
    const Matrix& x = a.value();
    Matrix out(x.rows(), 1);
    Matrix soft(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        soft.row(r) = (x.row(r).array() - m).exp().matrix();
        const double s = soft.row(r).sum();
        soft.row(r) /= s;
        out(r, 0) = m + std::log(s);
    }
    return g.record(std::move(out), {ia}, [ia, soft = std::move(soft)](Graph& gr, const Matrix& go) {
        if (gr.requires_grad(ia)) {
            gr.grad_buffer(ia) += go.col(0).asDiagonal() * soft;
        }
    });
}

// ---------------------------------------------------------------- row transforms

inline Tensor softmax_rows(const Tensor& a) {
    Graph& g = detail::common_graph(a);
    const int ia = a.id();
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        out.row(r) = (x.row(r).array() - m).exp().matrix();
        out.row(r) /= out.row(r).sum();
    }
    Matrix saved = g.requires_grad(ia) ? out : Matrix{};
    return g.record(std::move(out), {ia}, [ia, s = std::move(saved)](Graph& gr, const Matrix& go) {
        const Matrix inner = go.cwiseProduct(s).rowwise().sum();
        Matrix gx = go;
        gx.colwise() -= inner.col(0);
        gr.grad_buffer(ia) += gx.cwiseProduct(s);
    });
}

/// (x - mean(x)) / (std(x) + eps) per row, using the population standard deviation.
inline Tensor standardize_rows(const Tensor& a, double eps) {
    Graph& g = detail::common_graph(a);
    if (!(eps > 0.0)) {
        throw InvalidArgument("standardize_rows: eps must be positive");
    }
    const int ia = a.id();
    const Matrix& x = a.value();
    const Index n = x.cols();
    Matrix centered = x;
    centered.colwise() -= x.rowwise().mean();
    Eigen::VectorXd sigma = (centered.array().square().rowwise().sum() / static_cast<double>(n)).sqrt();
    Matrix out = (sigma.array() + eps).inverse().matrix().asDiagonal() * centered;
    return g.record(std::move(out), {ia},
                    [ia, n, eps, centered = std::move(centered), sigma = std::move(sigma)](Graph& gr, const Matrix& go) {
                        if (!gr.requires_grad(ia)) {
                            return;
                        }
                        Matrix gd(go.rows(), go.cols());
                        for (Index r = 0; r < go.rows(); ++r) {
                            const double s = sigma(r) + eps;
                            gd.row(r) = go.row(r) / s;
                            if (sigma(r) > 0.0) {
                                const double dot = go.row(r).dot(centered.row(r));
                                gd.row(r) -= centered.row(r) * (dot / (s * s * static_cast<double>(n) * sigma(r)));
                            }
                        }
                        gd.colwise() -= gd.rowwise().mean();
                        gr.grad_buffer(ia) += gd;
                    });
}

// ---------------------------------------------------------------- indexing

/// Rows of `a` selected by `rows`, in order; indices may repeat.
inline Tensor gather_rows(const Tensor& a, std::vector<Index> rows) {
    Graph& g = detail::common_graph(a);
    const Matrix& x = a.value();
    if (rows.empty()) {
        throw ShapeError("gather_rows: empty index set");
    }
    Matrix out(static_cast<Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= x.rows()) {
            throw InvalidArgument("gather_rows: row index " + std::to_string(rows[i]) + " out of range");
        }
        out.row(static_cast<Index>(i)) = x.row(rows[i]);
    }
    const int ia = a.id();
    return g.record(std::move(out), {ia}, [ia, rows = std::move(rows)](Graph& gr, const Matrix& go) {
        if (!gr.requires_grad(ia)) {
            return;
        }
        Matrix& gx = gr.grad_buffer(ia);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            gx.row(rows[i]) += go.row(static_cast<Index>(i));
        }
    });
}

/// Embedding lookup: one row of `table` per id.
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
    std::vector<Index> rows;
    rows.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= table.rows()) {
            throw InvalidArgument("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                                  std::to_string(table.rows()));
        }
        rows.push_back(id);
    }
    return gather_rows(table, std::move(rows));
}

/// Picks a[r, cols[r]] for every row; shape [rows, 1].
inline Tensor pick_per_row(const Tensor& a, std::vector<Index> cols) {
    Graph& g = detail::common_graph(a);
    const Matrix& x = a.value();
    if (static_cast<Index>(cols.size()) != x.rows()) {
        throw ShapeError("pick_per_row: need one column index per row");
    }
    Matrix out(x.rows(), 1);
    for (Index r = 0; r < x.rows(); ++r) {
        const Index c = cols[static_cast<std::size_t>(r)];
        if (c < 0 || c >= x.cols()) {
            throw InvalidArgument("pick_per_row: column index " + std::to_string(c) + " out of range");
        }
        out(r, 0) = x(r, c);
    }
    const int ia = a.id();
    return g.record(std::move(out), {ia}, [ia, cols = std::move(cols)](Graph& gr, const Matrix& go) {
        if (!gr.requires_grad(ia)) {
            return;
        }
        Matrix& gx = gr.grad_buffer(ia);
        for (Index r = 0; r < go.rows(); ++r) {
            gx(r, cols[static_cast<std::size_t>(r)]) += go(r, 0);
        }
    });
}

/// Entries a[rows[i], col] as a column, shape [|rows|, 1].
inline Tensor gather_column(const Tensor& a, std::vector<Index> rows, Index col) {
    Graph& g = detail::common_graph(a);
    const Matrix& x = a.value();
    if (col < 0 || col >= x.cols()) {
        throw InvalidArgument("gather_column: column out of range");
    }
    if (rows.empty()) {
        throw ShapeError("gather_column: empty index set");
    }
    Matrix out(static_cast<Index>(rows.size()), 1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= x.rows()) {
            throw InvalidArgument("gather_column: row index out of range");
        }
        out(static_cast<Index>(i), 0) = x(rows[i], col);
    }
    const int ia = a.id();
    return g.record(std::move(out), {ia}, [ia, col, rows = std::move(rows)](Graph& gr, const Matrix& go) {
        if (!gr.requires_grad(ia)) {
            return;
        }
        Matrix& gx = gr.grad_buffer(ia);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            gx(rows[i], col) += go(static_cast<Index>(i), 0);
        }
    });
}

struct RowBlock {
    std::vector<Index> rows;
    Tensor values;
};

/// Zero matrix of the given shape with each block's rows added at its indices.
inline Tensor scatter_add_rows(Graph& g, Shape shape, std::vector<RowBlock> blocks) {
    Matrix out = Matrix::Zero(shape.rows, shape.cols);
    std::vector<int> parents;
    for (const RowBlock& b : blocks) {
        g.own(b.values);
        if (b.values.cols() != shape.cols || b.values.rows() != static_cast<Index>(b.rows.size())) {
            throw ShapeError("scatter_add_rows: block shape " + to_string(b.values.shape()) +
                             " does not match its index set");
        }
        const Matrix& v = b.values.value();
        for (std::size_t i = 0; i < b.rows.size(); ++i) {
            if (b.rows[i] < 0 || b.rows[i] >= shape.rows) {
                throw InvalidArgument("scatter_add_rows: row index out of range");
            }
            out.row(b.rows[i]) += v.row(static_cast<Index>(i));
        }
        parents.push_back(b.values.id());
    }
    if (blocks.empty()) {
        return g.constant(std::move(out));
    }
    return g.record(std::move(out), std::move(parents), [blocks = std::move(blocks)](Graph& gr, const Matrix& go) {
        for (const RowBlock& b : blocks) {
            const int id = b.values.id();
            if (!gr.requires_grad(id)) {
                continue;
            }
            Matrix& gv = gr.grad_buffer(id);
            for (std::size_t i = 0; i < b.rows.size(); ++i) {
                gv.row(static_cast<Index>(i)) += go.row(b.rows[i]);
            }
        }
    });
}

// ---------------------------------------------------------------- routing support

/// Renormalises each row of `probs` over the entries where `mask` is nonzero;
/// everything else becomes exactly 0. The mask is a constant.
inline Tensor masked_renormalize(const Tensor& probs, const Matrix& mask) {
    Graph& g = detail::common_graph(probs);
    const Matrix& p = probs.value();
    if (mask.rows() != p.rows() || mask.cols() != p.cols()) {
        throw ShapeError("masked_renormalize: mask shape differs from probabilities");
    }
    Matrix out = Matrix::Zero(p.rows(), p.cols());
    Eigen::VectorXd denom(p.rows());
    for (Index r = 0; r < p.rows(); ++r) {
        double s = 0.0;
        for (Index c = 0; c < p.cols(); ++c) {
            if (mask(r, c) != 0.0) {
                s += p(r, c);
            }
        }
        if (!(s > 0.0)) {
            throw InvalidArgument("masked_renormalize: row " + std::to_string(r) + " has no selected mass");
        }
        denom(r) = s;
        for (Index c = 0; c < p.cols(); ++c) {
            if (mask(r, c) != 0.0) {
                out(r, c) = p(r, c) / s;
            }
        }
    }
    const int ip = probs.id();
    Matrix weights = out;
    return g.record(std::move(out), {ip},
                    [ip, mask, denom = std::move(denom), weights = std::move(weights)](Graph& gr, const Matrix& go) {
                        if (!gr.requires_grad(ip)) {
                            return;
                        }
                        Matrix& gp = gr.grad_buffer(ip);
                        for (Index r = 0; r < go.rows(); ++r) {
                            const double inner = go.row(r).dot(weights.row(r));
                            for (Index c = 0; c < go.cols(); ++c) {
                                if (mask(r, c) != 0.0) {
                                    gp(r, c) += (go(r, c) - inner) / denom(r);
                                }
                            }
                        }
                    });
}

/// Single-head causal self-attention over consecutive blocks of `seq_len` rows.
/// q, k, v: [batch * seq_len, d].
inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, Index seq_len) {
    Graph& g = detail::common_graph(q, k);
    g.own(v);
    if (q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeError("causal_attention: q, k, v shapes differ");
    }
    if (seq_len <= 0 || q.rows() % seq_len != 0) {
        throw ShapeError("causal_attention: rows not a multiple of seq_len");
    }
    const Index d = q.cols();
    const Index blocks = q.rows() / seq_len;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Matrix> attn(static_cast<std::size_t>(blocks));
    Matrix out(q.rows(), d);
    for (Index b = 0; b < blocks; ++b) {
        const auto qb = q.value().middleRows(b * seq_len, seq_len);
        const auto kb = k.value().middleRows(b * seq_len, seq_len);
        const auto vb = v.value().middleRows(b * seq_len, seq_len);
        Matrix s = (qb * kb.transpose()) * inv_sqrt;
        Matrix& a = attn[static_cast<std::size_t>(b)];
        a = Matrix::Zero(seq_len, seq_len);
        for (Index i = 0; i < seq_len; ++i) {
            const double m = s.row(i).head(i + 1).maxCoeff();
            a.row(i).head(i + 1) = (s.row(i).head(i + 1).array() - m).exp().matrix();
            a.row(i).head(i + 1) /= a.row(i).head(i + 1).sum();
        }
        out.middleRows(b * seq_len, seq_len).noalias() = a * vb;
    }
    const int iq = q.id(), ik = k.id(), iv = v.id();
    return g.record(std::move(out), {iq, ik, iv},
                    [iq, ik, iv, seq_len, blocks, inv_sqrt, attn = std::move(attn)](Graph& gr, const Matrix& go) {
                        const Matrix& qv = gr.value(iq);
                        const Matrix& kv = gr.value(ik);
                        const Matrix& vv = gr.value(iv);
                        const bool gq = gr.requires_grad(iq), gk = gr.requires_grad(ik), gv = gr.requires_grad(iv);
                        for (Index b = 0; b < blocks; ++b) {
                            const Matrix& a = attn[static_cast<std::size_t>(b)];
                            const auto gob = go.middleRows(b * seq_len, seq_len);
                            if (gv) {
                                gr.grad_buffer(iv).middleRows(b * seq_len, seq_len).noalias() += a.transpose() * gob;
                            }
                            if (!gq && !gk) {
                                continue;
                            }
                            Matrix da = gob * vv.middleRows(b * seq_len, seq_len).transpose();
                            const Eigen::VectorXd inner = da.cwiseProduct(a).rowwise().sum();
                            Matrix ds = a.cwiseProduct(da);
                            ds -= inner.asDiagonal() * a;
                            ds *= inv_sqrt;
                            if (gq) {
                                gr.grad_buffer(iq).middleRows(b * seq_len, seq_len).noalias() +=
                                    ds * kv.middleRows(b * seq_len, seq_len);
                            }
                            if (gk) {
                                gr.grad_buffer(ik).middleRows(b * seq_len, seq_len).noalias() +=
                                    ds.transpose() * qv.middleRows(b * seq_len, seq_len);
                            }
                        }
                    });
}

}  // namespace moelab::ad
