#include "vfi/tensor.hpp"

#include <sstream>
#include <unordered_set>
#include <utility>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace vfi {

namespace {
thread_local bool g_grad_enabled = true;

#if defined(__GLIBC__)
// Keeps activation buffers up to 32 MiB on the heap instead of a fresh mmap per allocation.
const bool g_heap_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
}();
#endif
}  // namespace

std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::vector<double>& detail::Node::grad_buffer()
{
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad)
{
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad)
{
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad)
{
    if (shape_numel(shape) != values.size())
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad)
{
    return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const
{
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->shape;
}

int Tensor::dim(std::size_t axis) const
{
    const Shape& s = shape();
    if (axis >= s.size()) throw ShapeError("axis out of range for shape " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::values() const
{
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->value;
}

std::span<double> Tensor::mutable_values()
{
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->value;
}

double Tensor::item() const
{
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

double Tensor::at(int n, int c, int y, int x) const
{
    const Shape& s = shape();
    if (s.size() != 4) throw ShapeError("4-d indexing on shape " + shape_str(s));
    const std::size_t idx =
        ((static_cast<std::size_t>(n) * s[1] + c) * s[2] + y) * static_cast<std::size_t>(s[3]) + x;
    return node_->value.at(idx);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag)
{
    if (!node_) throw ContractError("use of undefined tensor");
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be changed on leaves");
    node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const
{
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return node_->grad;
}

std::span<double> Tensor::mutable_grad()
{
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->grad_buffer();
}

void Tensor::zero_grad()
{
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const
{
    return from(shape(), node_->value, false);
}

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                           detail::AdjointFn adjoint, const char* op)
{
    Tensor out = from(std::move(shape), std::move(values), false);
    out.node_->op = op;
    if (!g_grad_enabled) return out;
    bool track = false;
    for (const Tensor& p : parents) track = track || p.requires_grad();
    if (!track) return out;
    out.node_->requires_grad = true;
    out.node_->adjoint = std::move(adjoint);
    out.node_->parents.reserve(parents.size());
    for (Tensor& p : parents) out.node_->parents.push_back(std::move(p.node_));
    return out;
}

ComputationTape::ComputationTape(const Tensor& root)
{
    if (!root.defined()) return;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS; graphs can be deep.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order_.push_back(node);
            stack.pop_back();
        }
    }
}

void Tensor::backward() const
{
    if (!node_) throw ContractError("backward on undefined tensor");
    if (numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(shape()));
    if (!node_->requires_grad) throw ContractError("loss does not depend on any tracked tensor");

    ComputationTape tape(*this);
    for (detail::Node* n : tape.nodes())
        if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
    node_->grad_buffer()[0] += 1.0;

    const auto& order = tape.nodes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (!n->is_leaf()) n->adjoint(*n);
    }
    for (detail::Node* n : order)
        if (!n->is_leaf()) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
}

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace vfi
