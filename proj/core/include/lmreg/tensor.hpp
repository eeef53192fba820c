// tensor.hpp - dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a shared graph node. Ops create new nodes whose parents are
// the inputs; backward() walks the graph from a scalar loss in reverse topological order.
// Leaf tensors accumulate gradients across backward() calls until zero_grad().

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lmreg::tensor {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape &shape);
std::string shape_string(const Shape &shape);

namespace detail {
template <class T> struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad; // empty until needed
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node &)> backward; // reads this->grad, accumulates into parents
    std::string op = "leaf";

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};
} // namespace detail

template <class T> class Tensor {
  public:
    using Node = detail::Node<T>;

    Tensor();
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    // Builds an op result. `backward` runs with the result node's grad filled; it may assume every
    // parent that requires grad has an allocated grad buffer.
    static Tensor make_op(Shape shape, std::vector<T> values, std::vector<Tensor> parents, std::string op,
                          std::function<void(Node &)> backward);

    const Shape &shape() const { return node_->shape; }
    std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> values() const { return node_->value; }
    std::span<T> values() { return node_->value; }
    std::span<const T> grad() const;
    std::span<T> grad();
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag);
    bool is_leaf() const { return node_->parents.empty(); }
    const std::string &op() const { return node_->op; }
    void zero_grad();

    // Same values and shape, new leaf without history.
    Tensor detach() const;

    Node &node() const { return *node_; }
    const std::shared_ptr<Node> &node_ptr() const { return node_; }

  private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    std::shared_ptr<Node> node_;
};

// While alive, ops on this thread record no graph (results never require grad).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

  private:
    bool previous_;
};
bool grad_enabled();

// Reverse-mode sweep from a scalar loss. Throws NumericError when the loss is not a scalar or
// does not depend on any tensor that requires grad, and when the graph contains a cycle.
template <class T> void backward(const Tensor<T> &loss);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template void backward<float>(const Tensor<float> &);
extern template void backward<double>(const Tensor<double> &);

} // namespace lmreg::tensor
