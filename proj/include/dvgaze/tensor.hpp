#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tensor is a shared handle to a Node holding a row-major value buffer and,
// once backward() reaches it, a gradient buffer of the same size. Operations
// record a closure on the result node that scatters the node's gradient into
// its inputs. Graph recording is skipped while a NoGradGuard is alive.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dvgaze/errors.hpp"

namespace dvgaze::nn {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << ')';
    return os.str();
}

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value.assign(shape_numel(shape), 0.0);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (values.size() != shape_numel(shape))
            throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                             shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + rank() : i)); }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    double item() const {
        if (numel() != 1) throw ShapeError("Tensor::item on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    double operator[](std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }
    void zero_grad() { node_->grad.clear(); }

    // Same values, no history.
    Tensor detach() const { return from(shape(), node_->value, false); }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

// Builds the result node and wires the backward closure only when some input
// is tracked and recording is on.
inline Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const Tensor& t : inputs) any = any || (t.defined() && t.requires_grad());
        if (any) {
            n->requires_grad = true;
            for (const Tensor& t : inputs)
                if (t.defined()) n->inputs.push_back(t.node_ptr());
            n->backward_fn = std::move(backward);
        }
    }
    return Tensor(std::move(n));
}

inline Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const Tensor& t : inputs) any = any || t.requires_grad();
        if (any) {
            n->requires_grad = true;
            for (const Tensor& t : inputs) n->inputs.push_back(t.node_ptr());
            n->backward_fn = std::move(backward);
        }
    }
    return Tensor(std::move(n));
}

// Gradient buffer of an input if it takes gradients, else nullptr.
inline double* grad_of(const std::shared_ptr<Node>& n) {
    return n->requires_grad ? n->ensure_grad().data() : nullptr;
}

}  // namespace detail

// Accumulates d(output . seed)/d(leaf) into every tracked leaf. A scalar
// output uses seed = 1.
inline void backward(const Tensor& output, std::span<const double> seed = {}) {
    Node* root = output.node();
    if (!root->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    auto& g = root->ensure_grad();
    if (seed.empty()) {
        if (g.size() != 1) throw ShapeError("backward: non-scalar output needs a seed gradient");
        g[0] += 1.0;
    } else {
        if (seed.size() != g.size()) throw ShapeError("backward: seed size mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    // Interior gradients are no longer needed.
    for (Node* n : order)
        if (n->backward_fn) n->grad.clear();
}

}  // namespace dvgaze::nn
