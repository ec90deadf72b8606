#pragma once

// Straight-line loop implementation of the self- and cross-update blocks.
// Test-only oracle: shares no code with the tensor engine.

#include <cmath>
#include <vector>

#include "shapeprior/shape_prior.hpp"

namespace reference {

using Mat = std::vector<std::vector<double>>;  // rows x cols

inline Mat from_tensor(const shapeprior::Tensord& t, std::size_t rows) {
    const std::size_t cols = t.size() / rows;
    Mat m(rows, std::vector<double>(cols));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) m[r][c] = t.at(r * cols + c);
    return m;
}

// out[o][v] = sum_i w[o][i] x[i][v] + b[o]; w is a 1x1x1 kernel tensor.
inline Mat project(const Mat& x, const shapeprior::Tensord& w, const shapeprior::Tensord& b) {
    const std::size_t out = w.dim(0), in = w.dim(1);
    Mat y(out, std::vector<double>(x[0].size()));
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t v = 0; v < x[0].size(); ++v) {
            double acc = b.at(o);
            for (std::size_t i = 0; i < in; ++i) acc += w.at(o * in + i) * x[i][v];
            y[o][v] = acc;
        }
    return y;
}

inline Mat attention(const Mat& q, const Mat& k, double divisor) {
    Mat a(q.size(), std::vector<double>(k.size()));
    for (std::size_t i = 0; i < q.size(); ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < k.size(); ++j) {
            double dot = 0;
            for (std::size_t v = 0; v < q[i].size(); ++v) dot += q[i][v] * k[j][v];
            a[i][j] = dot / divisor;
            mx = std::max(mx, a[i][j]);
        }
        double total = 0;
        for (auto& e : a[i]) total += (e = std::exp(e - mx));
        for (auto& e : a[i]) e /= total;
    }
    return a;
}

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
    return c;
}

inline Mat layer_norm(const Mat& x, const shapeprior::Tensord& gamma, const shapeprior::Tensord& beta) {
    Mat y = x;
    for (std::size_t r = 0; r < x.size(); ++r) {
        const double n = static_cast<double>(x[r].size());
        double mu = 0;
        for (double v : x[r]) mu += v;
        mu /= n;
        double var = 0;
        for (double v : x[r]) var += (v - mu) * (v - mu);
        var /= n;
        for (std::size_t i = 0; i < x[r].size(); ++i)
            y[r][i] = (x[r][i] - mu) / std::sqrt(var + 1e-5) * gamma.at(i) + beta.at(i);
    }
    return y;
}

inline Mat add(Mat a, const Mat& b) {
    for (std::size_t r = 0; r < a.size(); ++r)
        for (std::size_t c = 0; c < a[r].size(); ++c) a[r][c] += b[r][c];
    return a;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Per-voxel MLP across the class axis of an N x M matrix.
inline Mat class_mlp(const Mat& s, const shapeprior::ops::MlpWeights<double>& w) {
    const std::size_t n = s.size(), hidden = w.b1.size();
    Mat out(n, std::vector<double>(s[0].size()));
    for (std::size_t v = 0; v < s[0].size(); ++v) {
        std::vector<double> h(hidden);
        for (std::size_t j = 0; j < hidden; ++j) {
            double acc = w.b1.at(j);
            for (std::size_t i = 0; i < n; ++i) acc += s[i][v] * w.w1.at(i * hidden + j);
            h[j] = gelu(acc);
        }
        for (std::size_t i = 0; i < n; ++i) {
            double acc = w.b2.at(i);
            for (std::size_t j = 0; j < hidden; ++j) acc += h[j] * w.w2.at(j * n + i);
            out[i][v] = acc;
        }
    }
    return out;
}

inline Mat self_update(const Mat& s, const shapeprior::spm::SelfUpdateWeights<double>& w, double divisor) {
    const Mat affinity = attention(project(s, w.q_w, w.q_b), project(s, w.k_w, w.k_b), divisor);
    const Mat mixed = add(layer_norm(matmul(affinity, project(s, w.v_w, w.v_b)), w.ln1_gamma, w.ln1_beta), s);
    return add(layer_norm(class_mlp(mixed, w.mlp), w.ln2_gamma, w.ln2_beta), mixed);
}

struct CrossResult {
    Mat affinity, enhanced, local;
};

// Features and prior share one spatial grid (no resampling), and the local
// prior pooling factor is 1.
inline CrossResult cross_update_same_grid(const Mat& f, const Mat& g,
                                          const shapeprior::spm::CrossUpdateWeights<double>& w, double divisor) {
    CrossResult r;
    r.affinity = attention(project(f, w.q_w, w.q_b), project(g, w.k_w, w.k_b), divisor);
    r.enhanced = add(matmul(r.affinity, project(g, w.v_w, w.v_b)), f);
    r.local = project(r.enhanced, w.conv_w, w.conv_b);
    return r;
}

}  // namespace reference
