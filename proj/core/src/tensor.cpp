#include "lmreg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "lmreg/common.hpp"

namespace lmreg::tensor {

std::int64_t shape_numel(const Shape &shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw ConfigError("negative tensor dimension in " + shape_string(shape));
        n *= d;
    }
    return n;
}

std::string shape_string(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t a = 0; a < shape.size(); ++a) os << (a ? "," : "") << shape[a];
    os << ']';
    return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <class T> Tensor<T>::Tensor() : node_(std::make_shared<Node>()) {}

template <class T> Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <class T> Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T> Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
        throw ConfigError("tensor of shape " + shape_string(shape) + " given " + std::to_string(values.size()) +
                          " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
}

template <class T> Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::make_op(Shape shape, std::vector<T> values, std::vector<Tensor> parents, std::string op,
                             std::function<void(Node &)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->op = std::move(op);
    for (const auto &v : node->value) {
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite value produced by " + node->op);
    }
    bool any = false;
    if (g_grad_enabled)
        for (const auto &p : parents) any = any || p.requires_grad();
    node->requires_grad = any;
    if (any) {
        node->parents.reserve(parents.size());
        for (auto &p : parents) node->parents.push_back(p.node_);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

template <class T> std::span<const T> Tensor<T>::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

template <class T> std::span<T> Tensor<T>::grad() {
    node_->ensure_grad();
    return node_->grad;
}

template <class T> T Tensor<T>::item() const {
    if (node_->value.size() != 1) throw ConfigError("item() on tensor of shape " + shape_string(node_->shape));
    return node_->value[0];
}

template <class T> void Tensor<T>::set_requires_grad(bool flag) {
    if (!is_leaf()) throw ConfigError("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = flag;
    if (flag) node_->ensure_grad();
}

template <class T> void Tensor<T>::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

template <class T> Tensor<T> Tensor<T>::detach() const { return from(node_->shape, node_->value, false); }

template <class T> void backward(const Tensor<T> &loss) {
    using Node = detail::Node<T>;
    if (loss.numel() != 1) throw NumericError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
    if (!loss.requires_grad()) throw NumericError("backward(): loss is not connected to any tensor requiring grad");

    // Iterative DFS post-order over nodes that require grad; 1 = on stack, 2 = done.
    std::vector<Node *> order;
    std::unordered_map<Node *, int> state;
    std::vector<std::pair<Node *, std::size_t>> stack{{&loss.node(), 0}};
    state[&loss.node()] = 1;
    while (!stack.empty()) {
        auto &[node, next] = stack.back();
        if (next < node->parents.size()) {
            Node *p = node->parents[next++].get();
            if (!p->requires_grad) continue;
            auto &s = state[p];
            if (s == 1) throw NumericError("backward(): cycle detected at op " + p->op);
            if (s == 0) {
                s = 1;
                stack.emplace_back(p, 0);
            }
        } else {
            state[node] = 2;
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node *n : order) {
        if (n->parents.empty()) {
            n->ensure_grad();
        } else {
            n->grad.assign(n->value.size(), T(0));
        }
    }
    loss.node().grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node *n = *it;
        if (n->backward) n->backward(*n);
    }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float> &);
template void backward<double>(const Tensor<double> &);

} // namespace lmreg::tensor
