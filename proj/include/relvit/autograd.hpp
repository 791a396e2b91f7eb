#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Graph records every operation applied to its variables; nodes are stored
// in creation order, which is a valid topological order for the backward
// sweep. Parameters live outside the graph and are bound as leaves with
// Graph::param; gradients are read back with Graph::gradient.

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace relvit::ag {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

/// A named trainable tensor.
struct Parameter {
    std::string name;
    Matrix value;
    /// Whether decoupled weight decay applies (false for biases, norms, embeddings).
    bool decay = true;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    Graph& graph() const { return *graph_; }
    int id() const { return id_; }
    bool requires_grad() const;

    /// Scalar value of a 1x1 variable.
    double scalar() const;

private:
    friend class Graph;
    Var(Graph* graph, int id) : graph_(graph), id_(id) {}

    Graph* graph_ = nullptr;
    int id_ = -1;
};

class Graph {
public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    /// Leaf that never receives gradient.
    Var constant(Matrix value);
    /// Leaf that receives gradient (when the graph is grad-enabled).
    Var variable(Matrix value);
    /// Leaf bound to a parameter. Binding the same parameter twice returns the same node.
    Var param(const Parameter& p);

    /// Reverse sweep from a 1x1 variable, seeding d(out)/d(out) = 1.
    void backward(Var out);

    /// Gradient accumulated for a bound parameter (zeros if unbound or unreached).
    Matrix gradient(const Parameter& p) const;
    /// Gradient accumulated for any node (zeros if unreached).
    Matrix gradient(Var v) const;

    std::size_t size() const { return nodes_.size(); }

    // -- used by operations -------------------------------------------------
    using Backward = std::function<void(Graph&, int self)>;

    Var make(Matrix value, std::initializer_list<Var> inputs, Backward backward);
    Var make(Matrix value, std::span<const Var> inputs, Backward backward);

    const Matrix& value(int id) const { return nodes_[id].value; }
    const Matrix& grad(int id) const { return nodes_[id].grad; }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }

    template <typename Derived>
    void accumulate(int id, const Eigen::MatrixBase<Derived>& delta) {
        Node& n = nodes_[id];
        if (!n.requires_grad) {
            return;
        }
        if (n.grad.size() == 0) {
            n.grad = delta;
        } else {
            n.grad += delta;
        }
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(Node node);

    bool grad_enabled_;
    std::deque<Node> nodes_;
    std::unordered_map<const Parameter*, int> params_;
};

// ---------------------------------------------------------------------------
// Operations

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// a (R x C) + row (1 x C) broadcast over rows.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
Var transpose(Var a);
/// Exact (erf) GELU.
Var gelu(Var a);
/// Row-wise layer normalization with affine gamma/beta (both 1 x C).
Var layer_norm(Var x, Var gamma, Var beta, double eps);
Var softmax_rows(Var a);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
/// Rows of a selected by index (indices may repeat).
Var gather_rows(Var a, std::vector<int> indices);
/// Column-wise maximum over rows (1 x C). Ties go to the lowest row index.
Var max_rows(Var a);
Var sum(Var a);
Var mean(Var a);

/// Mean over rows of -sum_k target_k * log_softmax(logits / temperature)_k.
Var soft_cross_entropy(Var logits, const Matrix& targets, double temperature);
/// Mean over all entries of the binary cross-entropy with logits.
Var bce_with_logits(Var logits, const Matrix& labels);
/// Mean over rows of the categorical cross-entropy against class indices.
Var categorical_cross_entropy(Var logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Value helpers shared with the loss code

/// Row-wise log_softmax(x * inv_temperature) via log-sum-exp.
Matrix log_softmax_rows(const Matrix& x, double inv_temperature = 1.0);
Matrix softmax_rows(const Matrix& x, double inv_temperature = 1.0);

bool all_finite(const Matrix& m);

} // namespace relvit::ag
