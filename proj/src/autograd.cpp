#include "relvit/autograd.hpp"

#include <cmath>

#include "relvit/errors.hpp"

namespace relvit::ag {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DomainError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
    }
}

Graph& graph_of(Var a, Var b) {
    if (&a.graph() != &b.graph()) {
        throw DomainError("operands belong to different graphs");
    }
    return a.graph();
}

} // namespace

const Matrix& Var::value() const { return graph_->value(id_); }

bool Var::requires_grad() const { return graph_->requires_grad(id_); }

double Var::scalar() const {
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1) {
        throw DomainError("scalar(): variable is not 1x1");
    }
    return v(0, 0);
}

Var Graph::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::constant(Matrix value) { return push(Node{std::move(value), {}, false, {}}); }

Var Graph::variable(Matrix value) { return push(Node{std::move(value), {}, grad_enabled_, {}}); }

Var Graph::param(const Parameter& p) {
    if (auto it = params_.find(&p); it != params_.end()) {
        return Var(this, it->second);
    }
    Var v = push(Node{p.value, {}, grad_enabled_, {}});
    params_.emplace(&p, v.id());
    return v;
}

Var Graph::make(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    return make(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Graph::make(Matrix value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    if (grad_enabled_) {
        for (const Var& in : inputs) {
            if (&in.graph() != this) {
                throw DomainError("operand belongs to a different graph");
            }
            needs = needs || nodes_[in.id()].requires_grad;
        }
    }
    Node node{std::move(value), {}, needs, {}};
    if (needs) {
        node.backward = std::move(backward);
    }
    return push(std::move(node));
}

void Graph::backward(Var out) {
    if (&out.graph() != this) {
        throw DomainError("backward: variable belongs to a different graph");
    }
    const Matrix& v = nodes_[out.id()].value;
    if (v.rows() != 1 || v.cols() != 1) {
        throw DomainError("backward: output must be 1x1");
    }
    if (!nodes_[out.id()].requires_grad) {
        return;
    }
    accumulate(out.id(), Matrix::Ones(1, 1));
    for (int id = out.id(); id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.requires_grad && n.backward && n.grad.size() != 0) {
            n.backward(*this, id);
        }
    }
}

Matrix Graph::gradient(const Parameter& p) const {
    if (auto it = params_.find(&p); it != params_.end()) {
        const Node& n = nodes_[it->second];
        if (n.grad.size() != 0) {
            return n.grad;
        }
    }
    return Matrix::Zero(p.value.rows(), p.value.cols());
}

Matrix Graph::gradient(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() != 0) {
        return n.grad;
    }
    return Matrix::Zero(n.value.rows(), n.value.cols());
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    if (a.cols() != b.rows()) {
        throw DomainError("matmul: inner dimensions differ");
    }
    const int ia = a.id();
    const int ib = b.id();
    return g.make(a.value() * b.value(), {a, b}, [ia, ib](Graph& g, int self) {
        const Matrix& gy = g.grad(self);
        if (g.requires_grad(ia)) {
            g.accumulate(ia, gy * g.value(ib).transpose());
        }
        if (g.requires_grad(ib)) {
            g.accumulate(ib, g.value(ia).transpose() * gy);
        }
    });
}

Var add(Var a, Var b) {
    Graph& g = graph_of(a, b);
    require_same_shape(a.value(), b.value(), "add");
    const int ia = a.id();
    const int ib = b.id();
    return g.make(a.value() + b.value(), {a, b}, [ia, ib](Graph& g, int self) {
        g.accumulate(ia, g.grad(self));
        g.accumulate(ib, g.grad(self));
    });
}

Var sub(Var a, Var b) {
    Graph& g = graph_of(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    const int ia = a.id();
    const int ib = b.id();
    return g.make(a.value() - b.value(), {a, b}, [ia, ib](Graph& g, int self) {
        g.accumulate(ia, g.grad(self));
        g.accumulate(ib, -g.grad(self));
    });
}

Var add_row(Var a, Var row) {
    Graph& g = graph_of(a, row);
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw DomainError("add_row: row must be 1 x cols(a)");
    }
    const int ia = a.id();
    const int ir = row.id();
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return g.make(std::move(out), {a, row}, [ia, ir](Graph& g, int self) {
        g.accumulate(ia, g.grad(self));
        if (g.requires_grad(ir)) {
            g.accumulate(ir, g.grad(self).colwise().sum());
        }
    });
}

Var scale(Var a, double s) {
    const int ia = a.id();
    return a.graph().make(a.value() * s, {a}, [ia, s](Graph& g, int self) { g.accumulate(ia, g.grad(self) * s); });
}

Var transpose(Var a) {
    const int ia = a.id();
    return a.graph().make(a.value().transpose(), {a},
                          [ia](Graph& g, int self) { g.accumulate(ia, g.grad(self).transpose()); });
}

Var gelu(Var a) {
    const int ia = a.id();
    const Matrix& x = a.value();
    Matrix y = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
    return a.graph().make(std::move(y), {a}, [ia](Graph& g, int self) {
        const Matrix& x = g.value(ia);
        const Matrix d = x.unaryExpr([](double v) {
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = std::exp(-0.5 * v * v) * kInvSqrt2Pi;
            return cdf + v * pdf;
        });
        g.accumulate(ia, g.grad(self).cwiseProduct(d));
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Graph& g = graph_of(x, gamma);
    graph_of(x, beta);
    const Eigen::Index cols = x.cols();
    if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
        throw DomainError("layer_norm: gamma/beta must be 1 x cols(x)");
    }
    const Matrix& in = x.value();
    Matrix xhat(in.rows(), cols);
    Eigen::VectorXd inv_std(in.rows());
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
        const double mu = in.row(r).mean();
        const double var = (in.row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (in.row(r).array() - mu) * inv_std(r);
    }
    Matrix out = xhat;
    out.array().rowwise() *= gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    const int ix = x.id();
    const int ig = gamma.id();
    const int ib = beta.id();
    return g.make(std::move(out), {x, gamma, beta},
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, int self) {
                      const Matrix& gy = g.grad(self);
                      if (g.requires_grad(ig)) {
                          g.accumulate(ig, gy.cwiseProduct(xhat).colwise().sum());
                      }
                      if (g.requires_grad(ib)) {
                          g.accumulate(ib, gy.colwise().sum());
                      }
                      if (g.requires_grad(ix)) {
                          Matrix dxhat = gy;
                          dxhat.array().rowwise() *= g.value(ig).row(0).array();
                          const double n = static_cast<double>(dxhat.cols());
                          Matrix dx(dxhat.rows(), dxhat.cols());
                          for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                              const double m1 = dxhat.row(r).sum() / n;
                              const double m2 = dxhat.row(r).dot(xhat.row(r)) / n;
                              dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                          }
                          g.accumulate(ix, dx);
                      }
                  });
}

Var softmax_rows(Var a) {
    const int ia = a.id();
    return a.graph().make(softmax_rows(a.value()), {a}, [ia](Graph& g, int self) {
        const Matrix& y = g.value(self);
        const Matrix& gy = g.grad(self);
        const Eigen::VectorXd dots = gy.cwiseProduct(y).rowwise().sum();
        Matrix d = gy;
        d.colwise() -= dots;
        g.accumulate(ia, d.cwiseProduct(y));
    });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) {
        throw DomainError("slice_cols: range out of bounds");
    }
    const int ia = a.id();
    const Eigen::Index rows = a.rows();
    const Eigen::Index cols = a.cols();
    return a.graph().make(a.value().middleCols(start, count), {a},
                          [ia, start, count, rows, cols](Graph& g, int self) {
                              Matrix d = Matrix::Zero(rows, cols);
                              d.middleCols(start, count) = g.grad(self);
                              g.accumulate(ia, d);
                          });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) {
        throw DomainError("concat_cols: no parts");
    }
    Graph& g = parts.front().graph();
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index total = 0;
    std::vector<int> ids;
    std::vector<Eigen::Index> widths;
    for (const Var& p : parts) {
        if (p.rows() != rows) {
            throw DomainError("concat_cols: row counts differ");
        }
        total += p.cols();
        ids.push_back(p.id());
        widths.push_back(p.cols());
    }
    Matrix out(rows, total);
    Eigen::Index offset = 0;
    for (const Var& p : parts) {
        out.middleCols(offset, p.cols()) = p.value();
        offset += p.cols();
    }
    return g.make(std::move(out), parts, [ids = std::move(ids), widths = std::move(widths)](Graph& g, int self) {
        Eigen::Index offset = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (g.requires_grad(ids[i])) {
                g.accumulate(ids[i], g.grad(self).middleCols(offset, widths[i]));
            }
            offset += widths[i];
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) {
        throw DomainError("concat_rows: no parts");
    }
    Graph& g = parts.front().graph();
    const Eigen::Index cols = parts.front().cols();
    Eigen::Index total = 0;
    std::vector<int> ids;
    std::vector<Eigen::Index> heights;
    for (const Var& p : parts) {
        if (p.cols() != cols) {
            throw DomainError("concat_rows: column counts differ");
        }
        total += p.rows();
        ids.push_back(p.id());
        heights.push_back(p.rows());
    }
    Matrix out(total, cols);
    Eigen::Index offset = 0;
    for (const Var& p : parts) {
        out.middleRows(offset, p.rows()) = p.value();
        offset += p.rows();
    }
    return g.make(std::move(out), parts, [ids = std::move(ids), heights = std::move(heights)](Graph& g, int self) {
        Eigen::Index offset = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (g.requires_grad(ids[i])) {
                g.accumulate(ids[i], g.grad(self).middleRows(offset, heights[i]));
            }
            offset += heights[i];
        }
    });
}

Var gather_rows(Var a, std::vector<int> indices) {
    const Matrix& in = a.value();
    Matrix out(static_cast<Eigen::Index>(indices.size()), in.cols());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] < 0 || indices[r] >= in.rows()) {
            throw DomainError("gather_rows: index out of range");
        }
        out.row(static_cast<Eigen::Index>(r)) = in.row(indices[r]);
    }
    const int ia = a.id();
    const Eigen::Index rows = in.rows();
    const Eigen::Index cols = in.cols();
    return a.graph().make(std::move(out), {a}, [ia, rows, cols, indices = std::move(indices)](Graph& g, int self) {
        Matrix d = Matrix::Zero(rows, cols);
        const Matrix& gy = g.grad(self);
        for (std::size_t r = 0; r < indices.size(); ++r) {
            d.row(indices[r]) += gy.row(static_cast<Eigen::Index>(r));
        }
        g.accumulate(ia, d);
    });
}

Var max_rows(Var a) {
    const Matrix& in = a.value();
    if (in.rows() == 0) {
        throw DomainError("max_rows: empty input");
    }
    Matrix out(1, in.cols());
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(in.cols()));
    for (Eigen::Index c = 0; c < in.cols(); ++c) {
        Eigen::Index best = 0;
        for (Eigen::Index r = 1; r < in.rows(); ++r) {
            if (in(r, c) > in(best, c)) {
                best = r;
            }
        }
        arg[static_cast<std::size_t>(c)] = best;
        out(0, c) = in(best, c);
    }
    const int ia = a.id();
    const Eigen::Index rows = in.rows();
    return a.graph().make(std::move(out), {a}, [ia, rows, arg = std::move(arg)](Graph& g, int self) {
        const Matrix& gy = g.grad(self);
        Matrix d = Matrix::Zero(rows, gy.cols());
        for (Eigen::Index c = 0; c < gy.cols(); ++c) {
            d(arg[static_cast<std::size_t>(c)], c) = gy(0, c);
        }
        g.accumulate(ia, d);
    });
}

Var sum(Var a) {
    const int ia = a.id();
    const Eigen::Index rows = a.rows();
    const Eigen::Index cols = a.cols();
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return a.graph().make(std::move(out), {a}, [ia, rows, cols](Graph& g, int self) {
        g.accumulate(ia, Matrix::Constant(rows, cols, g.grad(self)(0, 0)));
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    if (n == 0) {
        throw DomainError("mean: empty input");
    }
    return scale(sum(a), 1.0 / n);
}

Var soft_cross_entropy(Var logits, const Matrix& targets, double temperature) {
    require_same_shape(logits.value(), targets, "soft_cross_entropy");
    if (!(temperature > 0)) {
        throw DomainError("soft_cross_entropy: temperature must be positive");
    }
    const double inv_t = 1.0 / temperature;
    const Matrix logp = log_softmax_rows(logits.value(), inv_t);
    const double rows = static_cast<double>(logits.rows());
    Matrix out(1, 1);
    out(0, 0) = -(targets.cwiseProduct(logp)).sum() / rows;
    if (!std::isfinite(out(0, 0))) {
        throw NumericError("soft_cross_entropy: non-finite loss");
    }
    const int il = logits.id();
    return logits.graph().make(std::move(out), {logits}, [il, targets, logp, inv_t, rows](Graph& g, int self) {
        const double gy = g.grad(self)(0, 0);
        const Eigen::VectorXd mass = targets.rowwise().sum();
        Matrix p = logp.array().exp().matrix();
        p.array().colwise() *= mass.array();
        g.accumulate(il, (p - targets) * (gy * inv_t / rows));
    });
}

Var bce_with_logits(Var logits, const Matrix& labels) {
    require_same_shape(logits.value(), labels, "bce_with_logits");
    const Matrix& x = logits.value();
    const double n = static_cast<double>(x.size());
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        total += std::max(v, 0.0) - v * labels.data()[i] + std::log1p(std::exp(-std::abs(v)));
    }
    Matrix out(1, 1);
    out(0, 0) = total / n;
    const int il = logits.id();
    return logits.graph().make(std::move(out), {logits}, [il, labels, n](Graph& g, int self) {
        const double gy = g.grad(self)(0, 0);
        const Matrix& x = g.value(il);
        Matrix d = x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); }) - labels;
        g.accumulate(il, d * (gy / n));
    });
}

Var categorical_cross_entropy(Var logits, std::span<const int> labels) {
    const Matrix& x = logits.value();
    if (static_cast<Eigen::Index>(labels.size()) != x.rows()) {
        throw DomainError("categorical_cross_entropy: one label per row required");
    }
    for (int l : labels) {
        if (l < 0 || l >= x.cols()) {
            throw DomainError("categorical_cross_entropy: label out of range");
        }
    }
    const Matrix logp = log_softmax_rows(x);
    const double rows = static_cast<double>(x.rows());
    double total = 0.0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        total -= logp(r, labels[static_cast<std::size_t>(r)]);
    }
    Matrix out(1, 1);
    out(0, 0) = total / rows;
    std::vector<int> owned(labels.begin(), labels.end());
    const int il = logits.id();
    return logits.graph().make(std::move(out), {logits},
                               [il, logp, rows, owned = std::move(owned)](Graph& g, int self) {
                                   const double gy = g.grad(self)(0, 0);
                                   Matrix d = logp.array().exp().matrix();
                                   for (std::size_t r = 0; r < owned.size(); ++r) {
                                       d(static_cast<Eigen::Index>(r), owned[r]) -= 1.0;
                                   }
                                   g.accumulate(il, d * (gy / rows));
                               });
}

// ---------------------------------------------------------------------------

Matrix log_softmax_rows(const Matrix& x, double inv_temperature) {
    Matrix out = x * inv_temperature;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double m = out.row(r).maxCoeff();
        const double lse = m + std::log((out.row(r).array() - m).exp().sum());
        out.row(r).array() -= lse;
    }
    return out;
}

Matrix softmax_rows(const Matrix& x, double inv_temperature) {
    return log_softmax_rows(x, inv_temperature).array().exp().matrix();
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

} // namespace relvit::ag
