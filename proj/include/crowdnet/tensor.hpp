#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "crowdnet/errors.hpp"

namespace crowdnet {

/// NCHW extent of a rank-4 tensor.
struct Shape {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    constexpr std::size_t numel() const { return n * c * h * w; }
    constexpr std::size_t plane() const { return h * w; }
    constexpr bool operator==(const Shape&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + ")";
    }
};

/// Thread-local switch for graph recording. Inference runs under NoGradGuard.
class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

private:
    static bool& flag() {
        thread_local bool on = true;
        return on;
    }
};

class NoGradGuard {
public:
    NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(previous_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    bool consumed = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

}  // namespace detail

/// Shared handle to a node of the recorded computation. Copies alias the same storage.
template <typename T>
class Tensor {
public:
    using Node = detail::Node<T>;
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
        node_->shape = shape;
        node_->data.assign(shape.numel(), fill);
    }

    Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node>()) {
        if (values.size() != shape.numel()) {
            throw UsageError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape.str());
        }
        node_->shape = shape;
        node_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(shape, T(0)); }
    static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& values() { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }

    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        const Shape& s = node_->shape;
        return node_->data[((n * s.c + c) * s.h + h) * s.w + w];
    }
    T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        const Shape& s = node_->shape;
        return node_->data[((n * s.c + c) * s.h + h) * s.w + w];
    }

    T item() const {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + shape().str());
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    /// Fresh leaf holding a copy of the values, cut from the graph.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    /// Reverse-mode sweep from a scalar. Accumulates into every reachable requires_grad leaf.
    void backward();

    const char* op_name() const { return node_->op; }
    Node& node() { return *node_; }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Builds the output of an op: a non-leaf tensor whose backward closure is recorded only when
/// grad mode is on and some input requires grad.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(detail::Node<T>&)> backward_fn) {
    for (const T v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
    Tensor<T> out(shape, std::move(values));
    auto& node = out.node();
    node.op = op;
    bool needs = false;
    if (GradMode::enabled()) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node.requires_grad = true;
        node.is_leaf = false;
        for (auto& in : inputs) node.parents.push_back(in.node_ptr());
        node.backward_fn = std::move(backward_fn);
    }
    return out;
}

template <typename T>
void Tensor<T>::backward() {
    if (numel() != 1) {
        throw UsageError("backward() requires a scalar loss, got shape " + shape().str());
    }
    if (node_->consumed) {
        throw UsageError("backward() called twice on the same graph; rebuild the forward pass");
    }
    if (!node_->requires_grad) {
        throw UsageError("backward() on a tensor that does not require grad");
    }

    // Iterative post-order DFS; parents are visited in argument order so the sweep is fixed.
    // Strong references keep intermediates alive while their parents' links are released below.
    std::vector<std::shared_ptr<Node>> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{node_, 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [cur, next] = stack.back();
        if (next < cur->parents.size()) {
            std::shared_ptr<Node> p = cur->parents[next++];
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.emplace_back(std::move(p), 0);
            }
        } else {
            order.push_back(cur);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = it->get();
        if (n->is_leaf) continue;
        if (n->grad.empty()) n->grad.assign(n->data.size(), T(0));
        for (auto& p : n->parents) {
            if (p->requires_grad) p->ensure_grad();
        }
        n->backward_fn(*n);
        n->backward_fn = nullptr;
        n->parents.clear();
        n->consumed = true;
        if (n != node_.get()) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

}  // namespace crowdnet
