// SPDX-License-Identifier: Apache-2.0
#include "evl/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace evl {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& Node::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
}

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_sequence{1};

void check_shape(const Shape& shape) {
    for (auto e : shape) {
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
}

}  // namespace

std::uint64_t next_sequence_number() { return g_sequence.fetch_add(1, std::memory_order_relaxed); }

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool flag) { g_grad_enabled = flag; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape(shape);
    auto node = std::make_shared<Node>();
    node->value.assign(evl::numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    node->seq = next_sequence_number();
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    if (evl::numel(shape) != data.size()) {
        throw DimensionError("shape " + to_string(shape) + " does not match " + std::to_string(data.size()) +
                             " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    node->seq = next_sequence_number();
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::dim(int axis) const {
    const auto r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    return shape()[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() needs a single-element tensor, got " + to_string(shape()));
    return node_->value[0];
}

void Tensor::set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

Tape Tape::record(const Tensor& root) {
    Tape tape;
    if (!root.defined() || !root.requires_grad()) return tape;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node()};
    seen.insert(root.node());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        tape.ops_.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(tape.ops_.begin(), tape.ops_.end(), [](const Node* a, const Node* b) { return a->seq < b->seq; });
    return tape;
}

void Tape::run_backward(const Tensor& root) const {
    // Interior buffers are allocated when the first gradient reaches them and
    // released once they have been propagated, so the allocator keeps reusing
    // warm memory instead of faulting in a fresh buffer for every node.
    for (Node* n : ops_) {
        if (!n->is_leaf()) std::vector<double>().swap(n->grad);
    }
    auto& g = root.node()->ensure_grad();
    std::fill(g.begin(), g.end(), 1.0);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        Node* n = *it;
        // backward closures are linear in the incoming gradient: none means zero
        if (n->grad.empty()) continue;
        if (n->backward) n->backward(*n);
        if (!n->is_leaf()) std::vector<double>().swap(n->grad);
    }
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got " +
                            (loss.defined() ? to_string(loss.shape()) : std::string("undefined tensor")));
    }
    if (!loss.requires_grad()) throw ContractError("backward() called on a loss that is not on the tape");
    Tape::record(loss).run_backward(loss);
}

}  // namespace evl
