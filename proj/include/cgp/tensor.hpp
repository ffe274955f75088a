#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cgp/errors.hpp"

namespace cgp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline std::string& backward_fault() {
    static std::string op;
    return op;
}

}  // namespace detail

// One vertex of the differentiation graph. Node ids increase with creation, so
// every parent has a smaller id than its children and sorting by id descending
// is a valid reverse topological order.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::uint64_t id = detail::next_node_id();
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Flips the sign of the gradient flowing out of every node produced by `op`.
// Used by the gradient-check harness to prove that it catches broken rules.
inline void set_backward_fault(std::string op) { detail::backward_fault() = std::move(op); }
inline void clear_backward_fault() { detail::backward_fault().clear(); }

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                                 std::to_string(shape_numel(shape)) + " values, got " +
                                 std::to_string(values.size()));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
    }

    // Result of an operation: records parents and the backward rule when any
    // parent requires gradients and grad mode is on.
    static Tensor from_op(Shape shape, std::vector<T> values, std::string_view op,
                          std::vector<std::shared_ptr<Node<T>>> parents,
                          std::function<void(Node<T>&)> backward) {
        Tensor out(std::move(shape), std::move(values));
        const bool track =
            grad_enabled() &&
            std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
        out.node_->op = op;
        if (track) {
            out.node_->requires_grad = true;
            out.node_->parents = std::move(parents);
            out.node_->backward = std::move(backward);
        }
        return out;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    // Scalar value of a one-element tensor.
    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    // Same values, no history.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    // Deep copy of values and flags (no history, no gradient).
    Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

    std::string_view op() const { return node_->op; }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Nodes reachable from `root` that participate in differentiation, in
// topological (creation) order.
template <typename T>
std::vector<Node<T>*> topological_order(const Tensor<T>& root) {
    std::vector<Node<T>*> nodes;
    std::vector<Node<T>*> stack{root.node().get()};
    std::vector<std::uint64_t> seen;
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad) continue;
        auto pos = std::lower_bound(seen.begin(), seen.end(), n->id);
        if (pos != seen.end() && *pos == n->id) continue;
        seen.insert(pos, n->id);
        nodes.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
    return nodes;
}

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls; intermediate gradients are released once propagated.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    auto order = topological_order(loss);
    loss.node()->ensure_grad()[0] += T(1);
    const std::string& fault = detail::backward_fault();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>& n = **it;
        if (!n.backward || n.grad.empty()) continue;
        if (!fault.empty() && n.op == fault) {
            for (auto& g : n.grad) g = -g;
        }
        n.backward(n);
        n.grad.clear();
        n.grad.shrink_to_fit();
    }
}

}  // namespace cgp
