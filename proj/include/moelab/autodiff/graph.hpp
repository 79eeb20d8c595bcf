#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "moelab/error.hpp"

namespace moelab::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Shape {
    Index rows = 0;
    Index cols = 0;

    [[nodiscard]] Index size() const noexcept { return rows * cols; }
    friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(Shape s) {
    return "[" + std::to_string(s.rows) + ", " + std::to_string(s.cols) + "]";
}

/// A trainable array owned outside any graph. Graphs borrow it for one step and
/// add their gradient into `grad` when backward finishes.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    bool decay = true;

    Parameter() = default;
    Parameter(std::string n, Matrix v, bool apply_decay = true)
        : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())), decay(apply_decay) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
class Tensor {
public:
    Tensor() = default;

    [[nodiscard]] Graph* graph() const noexcept { return graph_; }
    [[nodiscard]] int id() const noexcept { return id_; }
    [[nodiscard]] bool valid() const noexcept { return graph_ != nullptr && id_ >= 0; }

    [[nodiscard]] const Matrix& value() const;
    [[nodiscard]] Shape shape() const { return {value().rows(), value().cols()}; }
    [[nodiscard]] Index rows() const { return value().rows(); }
    [[nodiscard]] Index cols() const { return value().cols(); }
    [[nodiscard]] double item() const;

private:
    friend class Graph;
    Tensor(Graph* g, int id) : graph_(g), id_(id) {}

    Graph* graph_ = nullptr;
    int id_ = -1;
};

/// Append-only tape of operations. Nodes are only ever added after their
/// parents, so reverse insertion order is a valid topological order for
/// backward.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, const Matrix& grad_out)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Tensor constant(Matrix value) { return push(std::move(value), {}, nullptr, false); }
    Tensor variable(Matrix value) { return push(std::move(value), {}, nullptr, true); }

    Tensor parameter(Parameter& p) {
        Tensor t = push(p.value, {}, nullptr, true);
        bindings_.emplace_back(t.id(), &p);
        return t;
    }

    /// Adds an operation node. `backward` is only kept if some parent needs a gradient.
    Tensor record(Matrix value, std::vector<int> parents, BackwardFn backward) {
        bool needs = false;
        for (int p : parents) {
            check_id(p);
            needs = needs || nodes_[static_cast<std::size_t>(p)].requires_grad;
        }
        if (!needs) {
            backward = nullptr;
        }
        return push(std::move(value), std::move(parents), std::move(backward), needs);
    }

    [[nodiscard]] const Matrix& value(int id) const {
        check_id(id);
        return nodes_[static_cast<std::size_t>(id)].value;
    }

    [[nodiscard]] bool requires_grad(int id) const {
        check_id(id);
        return nodes_[static_cast<std::size_t>(id)].requires_grad;
    }
    [[nodiscard]] bool requires_grad(const Tensor& t) const { return requires_grad(t.id()); }

    /// Gradient accumulator of a node, zero-initialised on first use.
    Matrix& grad_buffer(int id) {
        check_id(id);
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.has_grad) {
            n.grad.setZero(n.value.rows(), n.value.cols());
            n.has_grad = true;
        }
        return n.grad;
    }

    void backward(const Tensor& loss) {
        own(loss);
        const Node& root = nodes_[static_cast<std::size_t>(loss.id())];
        if (root.value.size() != 1) {
            throw ShapeError("backward: loss must be scalar, got shape " +
                             to_string({root.value.rows(), root.value.cols()}));
        }
        for (Node& n : nodes_) {
            n.has_grad = false;
        }
        grad_buffer(loss.id()).setOnes();
        for (int id = loss.id(); id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.has_grad && n.backward) {
                n.backward(*this, n.grad);
            }
        }
        for (auto& [id, param] : bindings_) {
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.has_grad) {
                param->grad += n.grad;
            }
        }
    }

    /// Gradient of the last backward with respect to `t`; zero if unreached.
    [[nodiscard]] Matrix grad(const Tensor& t) const {
        own(t);
        const Node& n = nodes_[static_cast<std::size_t>(t.id())];
        if (!n.has_grad) {
            return Matrix::Zero(n.value.rows(), n.value.cols());
        }
        return n.grad;
    }

    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

    [[nodiscard]] const std::vector<int>& parents(int id) const {
        check_id(id);
        return nodes_[static_cast<std::size_t>(id)].parents;
    }

    void own(const Tensor& t) const {
        if (t.graph() != this) {
            throw InvalidArgument("tensor belongs to a different graph");
        }
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::vector<int> parents;
        BackwardFn backward;
        bool requires_grad = false;
        bool has_grad = false;
    };

    Tensor push(Matrix value, std::vector<int> parents, BackwardFn backward, bool requires_grad) {
        if (value.size() == 0) {
            throw ShapeError("tensor must have positive dimensions");
        }
        nodes_.push_back(Node{std::move(value), Matrix{}, std::move(parents), std::move(backward), requires_grad, false});
        return Tensor(this, static_cast<int>(nodes_.size()) - 1);
    }

    void check_id(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
            throw InvalidArgument("node id out of range");
        }
    }

    // deque keeps references to node values stable as the tape grows
    std::deque<Node> nodes_;
    std::vector<std::pair<int, Parameter*>> bindings_;
};

inline const Matrix& Tensor::value() const {
    if (!valid()) {
        throw InvalidArgument("use of an empty tensor handle");
    }
    return graph_->value(id_);
}

inline double Tensor::item() const {
    const Matrix& v = value();
    if (v.size() != 1) {
        throw ShapeError("item() requires a scalar tensor, got " + to_string(shape()));
    }
    return v(0, 0);
}

}  // namespace moelab::ad
