#include "shapeprior/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace shapeprior {

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<Node>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data.assign(values.begin(), values.end());
}

template <typename T>
T Tensor<T>::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node().data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
    if (!is_leaf()) throw std::logic_error("requires_grad can only be set on leaf tensors");
    node().requires_grad = on;
    return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
    auto& n = const_cast<Node&>(node());
    return n.grad_buffer();
}

template <typename T>
Tensor<T> Tensor<T>::grad_tensor() const {
    auto g = grad();
    return Tensor(shape(), std::vector<T>(g.begin(), g.end()));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    auto node = std::make_shared<Node>();
    node->shape = shape();
    node->data = this->node().data;
    return Tensor(std::move(node));
}

template <typename T>
std::vector<TensorNode<T>*> topological_order(TensorNode<T>& root) {
    std::vector<TensorNode<T>*> order;
    if (!root.requires_grad) return order;
    std::unordered_set<const TensorNode<T>*> visited;
    // Iterative post-order DFS; deep U-Net graphs overflow a recursive walk.
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack{{&root, 0}};
    visited.insert(&root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

template <typename T>
void Tensor<T>::backward() const {
    auto& root = const_cast<Node&>(node());
    if (root.data.size() != 1) {
        throw ShapeError("backward() needs a scalar loss, got " + shape_str(root.shape));
    }
    auto order = topological_order(root);
    if (order.empty()) return;
    for (auto* n : order) {
        if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
    }
    root.grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> values, const std::vector<Tensor<T>>& inputs,
                      typename TensorNode<T>::BackwardFn backward, const char* op) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("tensor shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    Tensor<T> out(std::move(node));
    if (!GradMode::enabled()) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
    if (!any) return out;
    auto& n = out.node();
    n.requires_grad = true;
    n.op = op;
    n.backward = std::move(backward);
    for (const auto& t : inputs) {
        if (t.defined()) n.parents.push_back(t.node_ptr());
    }
    return out;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, Buffer<float>, const std::vector<Tensor<float>>&,
                                   TensorNode<float>::BackwardFn, const char*);
template Tensor<double> make_result(Shape, Buffer<double>, const std::vector<Tensor<double>>&,
                                    TensorNode<double>::BackwardFn, const char*);
template std::vector<TensorNode<float>*> topological_order(TensorNode<float>&);
template std::vector<TensorNode<double>*> topological_order(TensorNode<double>&);

}  // namespace shapeprior
