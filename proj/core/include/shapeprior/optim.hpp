#pragma once

#include <cstddef>
#include <vector>

#include "shapeprior/shape_prior.hpp"

namespace shapeprior::harness {

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

/// Adam with decoupled weight decay. Decay applies to tensors of rank >= 2
/// except the shape prior; norms and biases are not decayed.
class AdamW {
  public:
    AdamW(const spm::NamedTensors<float>& params, AdamWOptions options);

    /// One update with learning rate `lr` from the accumulated leaf
    /// gradients. Tensors without a gradient are skipped.
    void step(double lr);
    void zero_grad();
    std::size_t steps() const { return t_; }

  private:
    struct Slot {
        Tensorf param;
        std::vector<float> m, v;
        bool decay;
    };
    std::vector<Slot> slots_;
    AdamWOptions opt_;
    std::size_t t_ = 0;
};

/// Linear warmup from lr/warmup to lr over `warmup` steps, then cosine
/// decay to zero at `total`.
double warmup_cosine(double base_lr, std::size_t step, std::size_t warmup, std::size_t total);

}  // namespace shapeprior::harness
