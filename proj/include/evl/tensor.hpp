// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace evl {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Error taxonomy shared by every module.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One recorded operation (or a leaf). `backward` reads this node's grad and
// accumulates into the grads of its parents.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward;

    bool is_leaf() const { return parents.empty(); }
    std::vector<double>& ensure_grad();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    // Negative axes count from the back.
    std::size_t dim(int axis) const;
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> data() const { return node_->value; }
    // Direct mutation is reserved for parameter initialization and optimizer
    // updates; it bypasses the tape.
    std::span<double> mutable_data() { return node_->value; }
    double item() const;
    double operator[](std::size_t flat) const { return node_->value[flat]; }

    bool requires_grad() const { return node_->requires_grad; }
    // A tensor with requires_grad == false is frozen: backward never touches it.
    void set_requires_grad(bool flag);
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad();

    // Value copy with no graph history.
    Tensor detach() const;

    Node* node() const { return node_.get(); }
    const NodePtr& ptr() const { return node_; }

private:
    NodePtr node_;
};

// Thread-local switch for graph recording; inference runs under NoGradGuard.
class GradMode {
public:
    static bool enabled();
    static void set_enabled(bool flag);
};

class NoGradGuard {
public:
    NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(previous_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

std::uint64_t next_sequence_number();

// Ordered record of the operations reachable from a root, in execution order.
class Tape {
public:
    static Tape record(const Tensor& root);

    std::span<Node* const> operations() const { return ops_; }
    std::size_t size() const { return ops_.size(); }

    // Seeds the root gradient with ones and visits every operation once, in
    // reverse execution order. Leaf gradients accumulate; non-leaf gradients
    // exist only while they are being propagated and are empty afterwards.
    void run_backward(const Tensor& root) const;

private:
    std::vector<Node*> ops_;
};

// loss must be a scalar that participates in the graph.
void backward(const Tensor& loss);

}  // namespace evl
