#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vfi {

using Shape = std::vector<int>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Violated preconditions that are not shape related (non-scalar backward,
/// probabilities outside (0,1), missing gradients, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Adjoint callback: reads self.grad and accumulates into parents' grads.
using AdjointFn = std::function<void(Node& self)>;

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    AdjointFn adjoint;  // empty for leaves
    const char* op = "leaf";

    bool is_leaf() const { return !adjoint; }
    std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Shared handle to a node of the computation graph. Copying a Tensor aliases
/// the same storage; values are treated as immutable once an op consumed them.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> values() const;
    // Direct write access; only for leaves being initialised or updated by an optimizer.
    std::span<double> mutable_values();
    double item() const;
    double at(std::size_t flat_index) const { return values()[flat_index]; }
    double at(int n, int c, int y, int x) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// New leaf sharing no graph history (values copied).
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across calls.
    void backward() const;

    const char* op_name() const;
    const detail::NodePtr& node() const { return node_; }

    /// Builds an op result. The adjoint is only recorded when grad mode is on and
    /// at least one parent tracks gradients.
    static Tensor make_result(Shape shape, std::vector<double> values,
                              std::vector<Tensor> parents, detail::AdjointFn adjoint,
                              const char* op);

private:
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
    detail::NodePtr node_;
};

bool grad_mode_enabled();

/// Disables graph recording in its scope (evaluation, optimizer updates).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Ordered record of the nodes reachable from a root, parents before children.
/// Replaying it back to front visits every node exactly once.
class ComputationTape {
public:
    explicit ComputationTape(const Tensor& root);
    const std::vector<detail::Node*>& nodes() const { return order_; }
    std::size_t size() const { return order_.size(); }

private:
    std::vector<detail::Node*> order_;
};

}  // namespace vfi
