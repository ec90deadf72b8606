#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace shapeprior {

using Shape = std::vector<std::size_t>;

// Vectorized kernels peel loops up to the first aligned address, which
// changes the summation order. A fixed alignment for every buffer keeps
// results independent of where the heap places it.
constexpr std::size_t kBufferAlignment = 64;

template <typename T>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kBufferAlignment}));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kBufferAlignment}); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Thread-local switch that stops ops from recording backward rules.
class GradMode {
  public:
    static bool enabled();
    static void set_enabled(bool on);
};

class NoGradGuard {
  public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

template <typename T>
struct TensorNode {
    /// Receives the finished node; reads self.grad and self.data, accumulates into parents.
    using BackwardFn = std::function<void(TensorNode& self)>;

    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;  // empty until the first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    BackwardFn backward;  // null for leaves
    const char* op = "leaf";

    bool is_leaf() const { return !backward; }

    std::span<T> grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

/// Dense row-major tensor handle with reverse-mode gradient tracking.
///
/// Copies share storage; use clone() for a deep copy. Spatial tensors are
/// laid out channel-first (C x D x H x W).
template <typename T>
class Tensor {
  public:
    using value_type = T;
    using Node = TensorNode<T>;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, std::vector<T> values);
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
    static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    std::size_t dim(std::size_t i) const { return node().shape.at(i); }
    std::size_t ndim() const { return node().shape.size(); }
    std::size_t size() const { return node().data.size(); }

    std::span<T> data() { return node().data; }
    std::span<const T> data() const { return node().data; }
    T& at(std::size_t i) { return node().data.at(i); }
    T at(std::size_t i) const { return node().data.at(i); }
    T item() const;

    bool requires_grad() const { return node().requires_grad; }
    Tensor& set_requires_grad(bool on = true);
    bool is_leaf() const { return node().is_leaf(); }
    bool has_grad() const { return node().grad.size() == node().data.size() && !node().grad.empty(); }
    /// Gradient view; zeros if nothing has been accumulated yet.
    std::span<const T> grad() const;
    Tensor grad_tensor() const;
    void zero_grad() { node().grad.clear(); }

    /// Same values, no history, no gradient.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
    /// calls; interior gradients are reset at the start of every sweep.
    void backward() const;

    Node& node() {
        if (!node_) throw std::logic_error("use of undefined tensor");
        return *node_;
    }
    const Node& node() const {
        if (!node_) throw std::logic_error("use of undefined tensor");
        return *node_;
    }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Builds the output of a differentiable op. The backward rule is kept only
/// when grad mode is on and some input requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> values, const std::vector<Tensor<T>>& inputs,
                      typename TensorNode<T>::BackwardFn backward, const char* op);

/// Nodes reachable from `root` through gradient-requiring edges, parents
/// before children.
template <typename T>
std::vector<TensorNode<T>*> topological_order(TensorNode<T>& root);

template <typename T, typename U>
Tensor<U> cast(const Tensor<T>& x) {
    std::vector<U> out(x.data().begin(), x.data().end());
    return Tensor<U>(x.shape(), std::move(out));
}

}  // namespace shapeprior
