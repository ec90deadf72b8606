#include "shapeprior/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <new>
#include <numbers>
#include <optional>
#include <string>

namespace shapeprior::ops {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
    if (x.ndim() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
    }
}

template <typename T>
Buffer<T> copy_data(const Tensor<T>& x) {
    return {x.data().begin(), x.data().end()};
}

// Mean that reproduces a constant sequence exactly.
template <typename T, typename Get>
T shifted_mean(std::size_t n, Get get) {
    const T first = get(0);
    T acc = T(0);
    for (std::size_t i = 1; i < n; ++i) acc += get(i) - first;
    return first + acc / static_cast<T>(n);
}

template <typename T, typename F>
Tensor<T> unary(const Tensor<T>& x, F f, const char* name) {
    Buffer<T> out(x.size());
    auto xs = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f.value(xs[i]);
    NodePtr<T> xn = x.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x},
                          [xn, f](TensorNode<T>& self) {
                              auto g = xn->grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  g[i] += self.grad[i] * f.derivative(xn->data[i]);
                          },
                          name);
}

template <typename T>
struct Gelu {
    T value(T x) const { return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>)); }
    T derivative(T x) const {
        const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        return cdf + x * pdf;
    }
};

template <typename T>
struct LeakyRelu {
    T slope;
    T value(T x) const { return x > T(0) ? x : slope * x; }
    T derivative(T x) const { return x > T(0) ? T(1) : slope; }
};

// Per-axis source indices of every output window for pooling.
using WindowTable = std::vector<std::vector<std::size_t>>;

WindowTable window_table(std::size_t extent, std::size_t target, std::size_t factor) {
    WindowTable table(target, std::vector<std::size_t>(factor));
    for (std::size_t o = 0; o < target; ++o)
        for (std::size_t j = 0; j < factor; ++j) table[o][j] = std::min(o * factor + j, extent - 1);
    return table;
}

template <typename T>
Tensor<T> pool_windows(const Tensor<T>& x, const std::array<WindowTable, 3>& tables, const char* name) {
    const std::size_t channels = x.dim(0);
    const Extents3 in = spatial_extents(x);
    const Extents3 out{tables[0].size(), tables[1].size(), tables[2].size()};
    const std::size_t fz = tables[0][0].size(), fy = tables[1][0].size(), fx = tables[2][0].size();
    const std::size_t window = fz * fy * fx;
    const std::size_t in_vol = in[0] * in[1] * in[2];
    const std::size_t out_vol = out[0] * out[1] * out[2];

    auto source = [tables, in, fy, fx](std::size_t oz, std::size_t oy, std::size_t ox, std::size_t j) {
        const std::size_t jz = j / (fy * fx), jy = (j / fx) % fy, jx = j % fx;
        return (tables[0][oz][jz] * in[1] + tables[1][oy][jy]) * in[2] + tables[2][ox][jx];
    };

    Buffer<T> result(channels * out_vol);
    auto xs = x.data();
    for (std::size_t c = 0; c < channels; ++c) {
        const T* base = xs.data() + c * in_vol;
        for (std::size_t oz = 0; oz < out[0]; ++oz)
            for (std::size_t oy = 0; oy < out[1]; ++oy)
                for (std::size_t ox = 0; ox < out[2]; ++ox) {
                    result[c * out_vol + (oz * out[1] + oy) * out[2] + ox] = shifted_mean<T>(
                        window, [&](std::size_t j) { return base[source(oz, oy, ox, j)]; });
                }
    }
    NodePtr<T> xn = x.node_ptr();
    return make_result<T>(
        {channels, out[0], out[1], out[2]}, std::move(result), {x},
        [xn, out, channels, window, in_vol, out_vol, source](TensorNode<T>& self) {
            auto g = xn->grad_buffer();
            const T inv = T(1) / static_cast<T>(window);
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t oz = 0; oz < out[0]; ++oz)
                    for (std::size_t oy = 0; oy < out[1]; ++oy)
                        for (std::size_t ox = 0; ox < out[2]; ++ox) {
                            const T go = self.grad[c * out_vol + (oz * out[1] + oy) * out[2] + ox] * inv;
                            for (std::size_t j = 0; j < window; ++j) g[c * in_vol + source(oz, oy, ox, j)] += go;
                        }
        },
        name);
}

// Linear interpolation stencil along one axis, align_corners = false.
struct LerpAxis {
    std::vector<std::size_t> lo, hi;
    std::vector<double> w;
};

LerpAxis lerp_axis(std::size_t in, std::size_t out) {
    LerpAxis a;
    a.lo.resize(out);
    a.hi.resize(out);
    a.w.resize(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::size_t>(std::floor(src));
        a.lo[o] = lo;
        a.hi[o] = std::min(lo + 1, in - 1);
        a.w[o] = src - static_cast<double>(lo);
    }
    return a;
}

struct ConvGeometry {
    std::size_t cin, cout;
    Extents3 in, k, out;
    Conv3dParams p;
    std::size_t rows() const { return cin * k[0] * k[1] * k[2]; }
    std::size_t cols() const { return out[0] * out[1] * out[2]; }
    bool pointwise() const {
        return k == Extents3{1, 1, 1} && p.stride == Extents3{1, 1, 1} && p.padding == Extents3{0, 0, 0};
    }
};

// Output indices o with 0 <= o * stride + tap - pad < extent form [lo, hi).
struct TapRange {
    std::size_t lo, hi;
    std::ptrdiff_t first;  // input index at o = lo
};

TapRange tap_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t tap, std::size_t pad) {
    const auto s = static_cast<std::ptrdiff_t>(stride), off = static_cast<std::ptrdiff_t>(tap) - static_cast<std::ptrdiff_t>(pad);
    std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
    std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(in) - off + s - 1) / s;
    hi = std::clamp<std::ptrdiff_t>(hi, 0, static_cast<std::ptrdiff_t>(out));
    lo = std::min(lo, hi);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi), lo * s + off};
}

// Every element of the column matrix is written, so it needs no zero fill.
template <typename T>
struct Scratch {
    struct Free {
        void operator()(T* p) const { ::operator delete[](p, std::align_val_t{kBufferAlignment}); }
    };
    std::unique_ptr<T[], Free> data;
    explicit Scratch(std::size_t n)
        : data(static_cast<T*>(::operator new[](n * sizeof(T), std::align_val_t{kBufferAlignment}))) {}
    T* get() const { return data.get(); }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const std::size_t in_vol = g.in[0] * g.in[1] * g.in[2];
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.cin; ++c) {
        const T* xc = x + c * in_vol;
        for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
            const TapRange rz = tap_range(g.out[0], g.in[0], g.p.stride[0], kz, g.p.padding[0]);
            for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
                const TapRange ry = tap_range(g.out[1], g.in[1], g.p.stride[1], ky, g.p.padding[1]);
                for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++row) {
                    const TapRange rx = tap_range(g.out[2], g.in[2], g.p.stride[2], kx, g.p.padding[2]);
                    T* dst = col + row * g.cols();
                    for (std::size_t oz = 0; oz < g.out[0]; ++oz) {
                        T* plane = dst + oz * g.out[1] * g.out[2];
                        if (oz < rz.lo || oz >= rz.hi) {
                            std::fill(plane, plane + g.out[1] * g.out[2], T(0));
                            continue;
                        }
                        const std::size_t iz = rz.first + (oz - rz.lo) * g.p.stride[0];
                        for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
                            T* d = plane + oy * g.out[2];
                            if (oy < ry.lo || oy >= ry.hi) {
                                std::fill(d, d + g.out[2], T(0));
                                continue;
                            }
                            const std::size_t iy = ry.first + (oy - ry.lo) * g.p.stride[1];
                            const T* src = xc + (iz * g.in[1] + iy) * g.in[2] + rx.first;
                            std::fill(d, d + rx.lo, T(0));
                            if (g.p.stride[2] == 1) {
                                std::copy(src, src + (rx.hi - rx.lo), d + rx.lo);
                            } else {
                                for (std::size_t ox = rx.lo, i = 0; ox < rx.hi; ++ox, i += g.p.stride[2]) d[ox] = src[i];
                            }
                            std::fill(d + rx.hi, d + g.out[2], T(0));
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
    const std::size_t in_vol = g.in[0] * g.in[1] * g.in[2];
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.cin; ++c) {
        T* xc = dx + c * in_vol;
        for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
            const TapRange rz = tap_range(g.out[0], g.in[0], g.p.stride[0], kz, g.p.padding[0]);
            for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
                const TapRange ry = tap_range(g.out[1], g.in[1], g.p.stride[1], ky, g.p.padding[1]);
                for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++row) {
                    const TapRange rx = tap_range(g.out[2], g.in[2], g.p.stride[2], kx, g.p.padding[2]);
                    const T* src = col + row * g.cols();
                    for (std::size_t oz = rz.lo; oz < rz.hi; ++oz) {
                        const std::size_t iz = rz.first + (oz - rz.lo) * g.p.stride[0];
                        for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                            const std::size_t iy = ry.first + (oy - ry.lo) * g.p.stride[1];
                            const T* s = src + (oz * g.out[1] + oy) * g.out[2];
                            T* d = xc + (iz * g.in[1] + iy) * g.in[2] + rx.first;
                            for (std::size_t ox = rx.lo, i = 0; ox < rx.hi; ++ox, i += g.p.stride[2]) d[i] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Extents3 spatial_extents(const Tensor<T>& x) {
    require_rank(x, 4, "spatial_extents");
    return {x.dim(1), x.dim(2), x.dim(3)};
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Buffer<T> out(a.size());
    auto as = a.data(), bs = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
    NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
    return make_result<T>(a.shape(), std::move(out), {a, b},
                          [an, bn](TensorNode<T>& self) {
                              for (const auto& n : {an, bn}) {
                                  if (!n->requires_grad) continue;
                                  auto g = n->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                          },
                          "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    Buffer<T> out(a.size());
    auto as = a.data(), bs = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
    NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
    return make_result<T>(a.shape(), std::move(out), {a, b},
                          [an, bn](TensorNode<T>& self) {
                              if (an->requires_grad) {
                                  auto g = an->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                              if (bn->requires_grad) {
                                  auto g = bn->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                              }
                          },
                          "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Buffer<T> out(a.size());
    auto as = a.data(), bs = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
    NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
    return make_result<T>(a.shape(), std::move(out), {a, b},
                          [an, bn](TensorNode<T>& self) {
                              if (an->requires_grad) {
                                  auto g = an->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
                              }
                              if (bn->requires_grad) {
                                  auto g = bn->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
                              }
                          },
                          "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    Buffer<T> out(x.size());
    auto xs = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] * factor;
    NodePtr<T> xn = x.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x},
                          [xn, factor](TensorNode<T>& self) {
                              auto g = xn->grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
                          },
                          "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
    Buffer<T> out(x.size());
    auto xs = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] + value;
    NodePtr<T> xn = x.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x},
                          [xn](TensorNode<T>& self) {
                              auto g = xn->grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          },
                          "add_scalar");
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    return unary(x, Gelu<T>{}, "gelu");
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    return unary(x, LeakyRelu<T>{slope}, "leaky_relu");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T total = T(0);
    for (T v : x.data()) total += v;
    NodePtr<T> xn = x.node_ptr();
    return make_result<T>({1}, {total}, {x},
                          [xn](TensorNode<T>& self) {
                              auto g = xn->grad_buffer();
                              for (auto& v : g) v += self.grad[0];
                          },
                          "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    NodePtr<T> xn = x.node_ptr();
    return make_result<T>(std::move(shape), copy_data(x), {x},
                          [xn](TensorNode<T>& self) {
                              auto g = xn->grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          },
                          "reshape");
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    require_rank(x, 2, "transpose");
    const std::size_t r = x.dim(0), c = x.dim(1);
    Buffer<T> out(x.size());
    MapM<T>(out.data(), c, r) = CMapM<T>(x.data().data(), r, c).transpose();
    NodePtr<T> xn = x.node_ptr();
    return make_result<T>({c, r}, std::move(out), {x},
                          [xn, r, c](TensorNode<T>& self) {
                              MapM<T>(xn->grad_buffer().data(), r, c) +=
                                  CMapM<T>(self.grad.data(), c, r).transpose();
                          },
                          "transpose");
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Buffer<T> out(m * p);
    MapM<T>(out.data(), m, p).noalias() = CMapM<T>(a.data().data(), m, k) * CMapM<T>(b.data().data(), k, p);
    NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
    return make_result<T>({m, p}, std::move(out), {a, b},
                          [an, bn, m, k, p](TensorNode<T>& self) {
                              CMapM<T> g(self.grad.data(), m, p);
                              if (an->requires_grad)
                                  MapM<T>(an->grad_buffer().data(), m, k).noalias() +=
                                      g * CMapM<T>(bn->data.data(), k, p).transpose();
                              if (bn->requires_grad)
                                  MapM<T>(bn->grad_buffer().data(), k, p).noalias() +=
                                      CMapM<T>(an->data.data(), m, k).transpose() * g;
                          },
                          "matmul");
}

namespace {
struct AxisSplit {
    std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}
}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis, "softmax");
    Buffer<T> out(x.size());
    auto xs = x.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            T mx = xs[base];
            for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, xs[base + j * s.inner]);
            T total = T(0);
            for (std::size_t j = 0; j < s.n; ++j) {
                const T e = std::exp(xs[base + j * s.inner] - mx);
                out[base + j * s.inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= total;
        }
    NodePtr<T> xn = x.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x},
                          [xn, s](TensorNode<T>& self) {
                              auto g = xn->grad_buffer();
                              const auto& y = self.data;
                              for (std::size_t o = 0; o < s.outer; ++o)
                                  for (std::size_t in = 0; in < s.inner; ++in) {
                                      const std::size_t base = o * s.n * s.inner + in;
                                      T dot = T(0);
                                      for (std::size_t j = 0; j < s.n; ++j) {
                                          const std::size_t i = base + j * s.inner;
                                          dot += self.grad[i] * y[i];
                                      }
                                      for (std::size_t j = 0; j < s.n; ++j) {
                                          const std::size_t i = base + j * s.inner;
                                          g[i] += y[i] * (self.grad[i] - dot);
                                      }
                                  }
                          },
                          "softmax");
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis, "log_softmax");
    Buffer<T> out(x.size());
    auto xs = x.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            T mx = xs[base];
            for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, xs[base + j * s.inner]);
            T total = T(0);
            for (std::size_t j = 0; j < s.n; ++j) total += std::exp(xs[base + j * s.inner] - mx);
            const T lse = mx + std::log(total);
            for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] = xs[base + j * s.inner] - lse;
        }
    NodePtr<T> xn = x.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x},
                          [xn, s](TensorNode<T>& self) {
                              auto g = xn->grad_buffer();
                              for (std::size_t o = 0; o < s.outer; ++o)
                                  for (std::size_t in = 0; in < s.inner; ++in) {
                                      const std::size_t base = o * s.n * s.inner + in;
                                      T total = T(0);
                                      for (std::size_t j = 0; j < s.n; ++j) total += self.grad[base + j * s.inner];
                                      for (std::size_t j = 0; j < s.n; ++j) {
                                          const std::size_t i = base + j * s.inner;
                                          g[i] += self.grad[i] - std::exp(self.data[i]) * total;
                                      }
                                  }
                          },
                          "log_softmax");
}

namespace {

// Shared body of layer_norm and channel_norm: rows of length n normalized,
// affine either per column (layer norm) or per row (channel norm).
template <typename T>
Tensor<T> row_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                   std::size_t rows, std::size_t n, bool affine_per_row, const char* name) {
    const std::size_t affine = affine_per_row ? rows : n;
    if (gamma.size() != affine || beta.size() != affine) {
        throw ShapeError(std::string(name) + ": affine parameters need " + std::to_string(affine) + " entries");
    }
    Buffer<T> mean_r(rows), rstd(rows);
    Buffer<T> out(x.size());
    auto xs = x.data();
    auto gs = gamma.data();
    auto bs = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xs.data() + r * n;
        const T mu = shifted_mean<T>(n, [row](std::size_t i) { return row[i]; });
        T var = T(0);
        for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<T>(n);
        mean_r[r] = mu;
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t a = affine_per_row ? r : i;
            out[r * n + i] = (row[i] - mu) * rstd[r] * gs[a] + bs[a];
        }
    }
    NodePtr<T> xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
    return make_result<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, mean_r = std::move(mean_r), rstd = std::move(rstd), rows, n, affine_per_row](TensorNode<T>& self) {
            Buffer<T> xhat(n), dxhat(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* go = self.grad.data() + r * n;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t a = affine_per_row ? r : i;
                    xhat[i] = (xn->data[r * n + i] - mean_r[r]) * rstd[r];
                    dxhat[i] = go[i] * gn->data[a];
                    if (gn->requires_grad) gn->grad_buffer()[a] += go[i] * xhat[i];
                    if (bn->requires_grad) bn->grad_buffer()[a] += go[i];
                }
                if (!xn->requires_grad) continue;
                T m1 = T(0), m2 = T(0);
                for (std::size_t i = 0; i < n; ++i) {
                    m1 += dxhat[i];
                    m2 += dxhat[i] * xhat[i];
                }
                m1 /= static_cast<T>(n);
                m2 /= static_cast<T>(n);
                auto g = xn->grad_buffer();
                for (std::size_t i = 0; i < n; ++i) g[r * n + i] += rstd[r] * (dxhat[i] - m1 - xhat[i] * m2);
            }
        },
        name);
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const std::size_t n = x.shape().back();
    return row_norm(x, gamma, beta, eps, x.size() / n, n, false, "layer_norm");
}

template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    require_rank(x, 4, "channel_norm");
    const std::size_t c = x.dim(0);
    return row_norm(x, gamma, beta, eps, c, x.size() / c, true, "channel_norm");
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    const std::size_t r = x.dim(0), k = x.dim(1), p = w.dim(1);
    if (w.dim(0) != k || bias.size() != p) {
        throw ShapeError("linear: weight " + shape_str(w.shape()) + " / bias " + shape_str(bias.shape()) +
                         " do not fit input " + shape_str(x.shape()));
    }
    Buffer<T> out(r * p);
    MapM<T> o(out.data(), r, p);
    o.noalias() = CMapM<T>(x.data().data(), r, k) * CMapM<T>(w.data().data(), k, p);
    o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), p);
    NodePtr<T> xn = x.node_ptr(), wn = w.node_ptr(), bn = bias.node_ptr();
    return make_result<T>({r, p}, std::move(out), {x, w, bias},
                          [xn, wn, bn, r, k, p](TensorNode<T>& self) {
                              CMapM<T> g(self.grad.data(), r, p);
                              if (xn->requires_grad)
                                  MapM<T>(xn->grad_buffer().data(), r, k).noalias() +=
                                      g * CMapM<T>(wn->data.data(), k, p).transpose();
                              if (wn->requires_grad)
                                  MapM<T>(wn->grad_buffer().data(), k, p).noalias() +=
                                      CMapM<T>(xn->data.data(), r, k).transpose() * g;
                              if (bn->requires_grad)
                                  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bn->grad_buffer().data(), p) +=
                                      g.colwise().sum();
                          },
                          "linear");
}

template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const MlpWeights<T>& weights) {
    return linear(gelu(linear(x, weights.w1, weights.b1)), weights.w2, weights.b2);
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, const Conv3dParams& params) {
    require_rank(x, 4, "conv3d");
    require_rank(kernel, 5, "conv3d");
    ConvGeometry geo{};
    geo.cin = x.dim(0);
    geo.cout = kernel.dim(0);
    geo.in = spatial_extents(x);
    geo.k = {kernel.dim(2), kernel.dim(3), kernel.dim(4)};
    geo.p = params;
    if (kernel.dim(1) != geo.cin) {
        throw ShapeError("conv3d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, got " +
                         std::to_string(geo.cin));
    }
    for (int a = 0; a < 3; ++a) {
        if (geo.p.stride[a] == 0) throw ShapeError("conv3d: zero stride");
        if (geo.in[a] + 2 * geo.p.padding[a] < geo.k[a]) throw ShapeError("conv3d: kernel larger than padded input");
        geo.out[a] = (geo.in[a] + 2 * geo.p.padding[a] - geo.k[a]) / geo.p.stride[a] + 1;
    }
    if (bias.defined() && bias.size() != geo.cout) throw ShapeError("conv3d: bias size does not match output channels");

    const std::size_t rows = geo.rows(), cols = geo.cols();
    const T* colp = x.data().data();
    std::optional<Scratch<T>> col;
    if (!geo.pointwise()) {
        col.emplace(rows * cols);
        im2col(x.data().data(), geo, col->get());
        colp = col->get();
    }
    Buffer<T> out(geo.cout * cols);
    MapM<T> o(out.data(), geo.cout, cols);
    o.noalias() = CMapM<T>(kernel.data().data(), geo.cout, rows) * CMapM<T>(colp, rows, cols);
    if (bias.defined())
        o.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.data().data(), geo.cout);
    col.reset();

    NodePtr<T> xn = x.node_ptr(), kn = kernel.node_ptr(), bn = bias.defined() ? bias.node_ptr() : nullptr;
    std::vector<Tensor<T>> inputs{x, kernel};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<T>(
        {geo.cout, geo.out[0], geo.out[1], geo.out[2]}, std::move(out), inputs,
        [xn, kn, bn, geo](TensorNode<T>& self) {
            const std::size_t rows = geo.rows(), cols = geo.cols();
            CMapM<T> g(self.grad.data(), geo.cout, cols);
            if (bn && bn->requires_grad)
                Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bn->grad_buffer().data(), geo.cout) += g.rowwise().sum();
            if (!kn->requires_grad && !xn->requires_grad) return;
            const T* colp = xn->data.data();
            std::optional<Scratch<T>> col;
            if (!geo.pointwise()) {
                col.emplace(rows * cols);
                im2col(xn->data.data(), geo, col->get());
                colp = col->get();
            }
            if (kn->requires_grad)
                MapM<T>(kn->grad_buffer().data(), geo.cout, rows).noalias() += g * CMapM<T>(colp, rows, cols).transpose();
            if (xn->requires_grad) {
                CMapM<T> k(kn->data.data(), geo.cout, rows);
                if (geo.pointwise()) {
                    MapM<T>(xn->grad_buffer().data(), rows, cols).noalias() += k.transpose() * g;
                } else {
                    MapM<T>(col->get(), rows, cols).noalias() = k.transpose() * g;
                    col2im(col->get(), geo, xn->grad_buffer().data());
                }
            }
        },
        "conv3d");
}

template <typename T>
Tensor<T> resize_trilinear(const Tensor<T>& x, const Extents3& out) {
    require_rank(x, 4, "resize_trilinear");
    const Extents3 in = spatial_extents(x);
    for (auto e : out)
        if (e == 0) throw ShapeError("resize_trilinear: zero output extent");
    const std::size_t channels = x.dim(0);
    const std::array<LerpAxis, 3> ax{lerp_axis(in[0], out[0]), lerp_axis(in[1], out[1]), lerp_axis(in[2], out[2])};
    const std::size_t in_vol = in[0] * in[1] * in[2], out_vol = out[0] * out[1] * out[2];
    Buffer<T> result(channels * out_vol);
    auto xs = x.data();
    auto lerp = [](T a, T b, T w) { return a + w * (b - a); };
    for (std::size_t c = 0; c < channels; ++c) {
        const T* v = xs.data() + c * in_vol;
        auto at = [&](std::size_t z, std::size_t y, std::size_t xx) { return v[(z * in[1] + y) * in[2] + xx]; };
        for (std::size_t oz = 0; oz < out[0]; ++oz) {
            const std::size_t z0 = ax[0].lo[oz], z1 = ax[0].hi[oz];
            const T wz = static_cast<T>(ax[0].w[oz]);
            for (std::size_t oy = 0; oy < out[1]; ++oy) {
                const std::size_t y0 = ax[1].lo[oy], y1 = ax[1].hi[oy];
                const T wy = static_cast<T>(ax[1].w[oy]);
                for (std::size_t ox = 0; ox < out[2]; ++ox) {
                    const std::size_t x0 = ax[2].lo[ox], x1 = ax[2].hi[ox];
                    const T wx = static_cast<T>(ax[2].w[ox]);
                    const T a = lerp(lerp(at(z0, y0, x0), at(z0, y0, x1), wx), lerp(at(z0, y1, x0), at(z0, y1, x1), wx), wy);
                    const T b = lerp(lerp(at(z1, y0, x0), at(z1, y0, x1), wx), lerp(at(z1, y1, x0), at(z1, y1, x1), wx), wy);
                    result[c * out_vol + (oz * out[1] + oy) * out[2] + ox] = lerp(a, b, wz);
                }
            }
        }
    }
    NodePtr<T> xn = x.node_ptr();
    return make_result<T>(
        {channels, out[0], out[1], out[2]}, std::move(result), {x},
        [xn, ax, in, out, channels, in_vol, out_vol](TensorNode<T>& self) {
            auto g = xn->grad_buffer();
            for (std::size_t c = 0; c < channels; ++c) {
                T* gc = g.data() + c * in_vol;
                auto put = [&](std::size_t z, std::size_t y, std::size_t xx, T v) { gc[(z * in[1] + y) * in[2] + xx] += v; };
                for (std::size_t oz = 0; oz < out[0]; ++oz) {
                    const T wz = static_cast<T>(ax[0].w[oz]);
                    for (std::size_t oy = 0; oy < out[1]; ++oy) {
                        const T wy = static_cast<T>(ax[1].w[oy]);
                        for (std::size_t ox = 0; ox < out[2]; ++ox) {
                            const T wx = static_cast<T>(ax[2].w[ox]);
                            const T go = self.grad[c * out_vol + (oz * out[1] + oy) * out[2] + ox];
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx) {
                                        const T w = (dz ? wz : T(1) - wz) * (dy ? wy : T(1) - wy) * (dx ? wx : T(1) - wx);
                                        put(dz ? ax[0].hi[oz] : ax[0].lo[oz], dy ? ax[1].hi[oy] : ax[1].lo[oy],
                                            dx ? ax[2].hi[ox] : ax[2].lo[ox], go * w);
                                    }
                        }
                    }
                }
            }
        },
        "resize_trilinear");
}

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, std::size_t factor) {
    if (factor == 0) throw ShapeError("upsample_trilinear: factor must be >= 1");
    const Extents3 in = spatial_extents(x);
    if (factor == 1) return reshape(x, x.shape());
    return resize_trilinear(x, {in[0] * factor, in[1] * factor, in[2] * factor});
}

template <typename T>
Tensor<T> downsample_avg(const Tensor<T>& x, const Extents3& factor) {
    const Extents3 in = spatial_extents(x);
    std::array<WindowTable, 3> tables;
    for (int a = 0; a < 3; ++a) {
        if (factor[a] == 0 || in[a] % factor[a] != 0) {
            throw ShapeError("downsample_avg: extent " + std::to_string(in[a]) + " not divisible by " +
                             std::to_string(factor[a]));
        }
        tables[a] = window_table(in[a], in[a] / factor[a], factor[a]);
    }
    return pool_windows(x, tables, "downsample_avg");
}

template <typename T>
Tensor<T> downsample_avg(const Tensor<T>& x, std::size_t factor) {
    return downsample_avg(x, Extents3{factor, factor, factor});
}

template <typename T>
Tensor<T> pool_to_extents(const Tensor<T>& x, const Extents3& target) {
    const Extents3 in = spatial_extents(x);
    std::array<WindowTable, 3> tables;
    for (int a = 0; a < 3; ++a) {
        if (target[a] == 0 || target[a] > in[a]) {
            throw ShapeError("pool_to_extents: cannot pool extent " + std::to_string(in[a]) + " to " +
                             std::to_string(target[a]));
        }
        const std::size_t f = (in[a] + target[a] - 1) / target[a];
        tables[a] = window_table(in[a], target[a], f);
    }
    return pool_windows(x, tables, "pool_to_extents");
}

template <typename T>
Tensor<T> concat0(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != b.ndim() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
        throw ShapeError("concat0: trailing extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    Buffer<T> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
    const std::size_t na = a.size();
    return make_result<T>(std::move(shape), std::move(out), {a, b},
                          [an, bn, na](TensorNode<T>& self) {
                              if (an->requires_grad) {
                                  auto g = an->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                              if (bn->requires_grad) {
                                  auto g = bn->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
                              }
                          },
                          "concat0");
}

#define SHAPEPRIOR_INSTANTIATE_OPS(T)                                                                  \
    template Extents3 spatial_extents(const Tensor<T>&);                                               \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> scale(const Tensor<T>&, T);                                                     \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                \
    template Tensor<T> gelu(const Tensor<T>&);                                                         \
    template Tensor<T> leaky_relu(const Tensor<T>&, T);                                                \
    template Tensor<T> sum(const Tensor<T>&);                                                          \
    template Tensor<T> mean(const Tensor<T>&);                                                         \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                               \
    template Tensor<T> transpose(const Tensor<T>&);                                                    \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                         \
    template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                     \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);            \
    template Tensor<T> channel_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> mlp(const Tensor<T>&, const MlpWeights<T>&);                                    \
    template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv3dParams&); \
    template Tensor<T> resize_trilinear(const Tensor<T>&, const Extents3&);                            \
    template Tensor<T> upsample_trilinear(const Tensor<T>&, std::size_t);                              \
    template Tensor<T> downsample_avg(const Tensor<T>&, const Extents3&);                              \
    template Tensor<T> downsample_avg(const Tensor<T>&, std::size_t);                                  \
    template Tensor<T> pool_to_extents(const Tensor<T>&, const Extents3&);                             \
    template Tensor<T> concat0(const Tensor<T>&, const Tensor<T>&);

SHAPEPRIOR_INSTANTIATE_OPS(float)
SHAPEPRIOR_INSTANTIATE_OPS(double)

}  // namespace shapeprior::ops
