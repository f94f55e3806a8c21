#ifndef MYGRAM_TENSOR_HPP
#define MYGRAM_TENSOR_HPP

// Dense 64-bit tensors with a recorded operation graph and a reverse pass.
//
// A Tensor is a cheap handle onto a shared node. Operations evaluated while a
// Recording is active (and with at least one input that requires a gradient)
// append a node carrying its local gradient rule; outside a Recording every
// operation is a plain forward computation.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mygram {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Matrix& g)
    {
        if (grad.size() == 0)
            grad = g;
        else
            grad += g;
    }

    template <class Expr>
    void accumulate_expr(const Expr& g)
    {
        if (grad.size() == 0)
            grad = g;
        else
            grad += g;
    }
};

} // namespace detail

class Tensor;

/// Ordered record of differentiable operations. At most one Recording is active
/// per thread; constructing one makes it active until it is destroyed.
class Recording {
public:
    Recording() : previous_(current()) { current() = this; }
    ~Recording() { current() = previous_; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

    static Recording* active() { return current(); }

    std::size_t size() const { return nodes_.size(); }
    /// Number of records visited by the most recent reverse pass.
    std::size_t last_visit_count() const { return visits_; }

    void append(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }

    bool contains(const detail::Node* node) const
    {
        for (const auto& n : nodes_)
            if (n.get() == node)
                return true;
        return false;
    }

    void run_backward(detail::Node& loss);

private:
    static Recording*& current()
    {
        thread_local Recording* active = nullptr;
        return active;
    }

    Recording* previous_;
    std::vector<std::shared_ptr<detail::Node>> nodes_;
    std::size_t visits_ = 0;
};

class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}
    explicit Tensor(Matrix value, bool requires_grad = false) : node_(std::make_shared<detail::Node>())
    {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Eigen::Index rows, Eigen::Index cols, bool requires_grad = false)
    {
        return Tensor(Matrix::Zero(rows, cols), requires_grad);
    }
    static Tensor scalar(double v, bool requires_grad = false)
    {
        Matrix m(1, 1);
        m(0, 0) = v;
        return Tensor(std::move(m), requires_grad);
    }

    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    double item() const
    {
        if (rows() != 1 || cols() != 1)
            throw Error("item() requires a 1x1 tensor");
        return node_->value(0, 0);
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->grad.size() != 0; }
    /// Gradient, or zeros of the value's shape when none has been accumulated.
    Matrix grad() const
    {
        if (has_grad())
            return node_->grad;
        return Matrix::Zero(rows(), cols());
    }
    void zero_grad() { node_->grad.resize(0, 0); }

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& shared_node() const { return node_; }

private:
    friend Tensor make_result(Matrix, std::vector<Tensor>, std::function<void(detail::Node&)>);
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

    std::shared_ptr<detail::Node> node_;
};

/// Builds an operation result; the gradient rule is kept only when a Recording
/// is active and some input requires a gradient.
inline Tensor make_result(Matrix value, std::vector<Tensor> inputs, std::function<void(detail::Node&)> rule)
{
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    Recording* rec = Recording::active();
    bool needs = false;
    for (const auto& in : inputs)
        needs = needs || in.requires_grad();
    if (needs && rec != nullptr) {
        node->requires_grad = true;
        node->is_leaf = false;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs)
            node->inputs.push_back(in.shared_node());
        node->backward_fn = std::move(rule);
        rec->append(node);
    }
    return Tensor(std::move(node));
}

inline void Recording::run_backward(detail::Node& loss)
{
    for (auto& n : nodes_)
        n->grad.resize(0, 0);
    visits_ = 0;
    loss.accumulate(Matrix::Ones(1, 1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        detail::Node& n = **it;
        ++visits_;
        if (n.grad.size() == 0 || !n.backward_fn)
            continue;
        n.backward_fn(n);
    }
}

/// Reverse pass from a scalar loss. Leaf gradients accumulate across calls.
inline void backward(const Tensor& loss)
{
    if (loss.rows() != 1 || loss.cols() != 1)
        throw Error("backward() requires a 1x1 loss, got " + std::to_string(loss.rows()) + "x" +
                    std::to_string(loss.cols()));
    Recording* rec = Recording::active();
    if (rec == nullptr)
        throw Error("backward() called without an active Recording");
    detail::Node* n = loss.node();
    if (n->is_leaf) {
        if (n->requires_grad)
            n->accumulate(Matrix::Ones(1, 1));
        return;
    }
    if (!rec->contains(n))
        throw Error("backward(): loss was not produced under the active Recording");
    rec->run_backward(*n);
}

} // namespace mygram

#endif // MYGRAM_TENSOR_HPP
