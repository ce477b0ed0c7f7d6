#pragma once

#include "delta/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace delta {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Global gradient-norm clip; <= 0 disables.
    double clip_norm = 0.0;
};

// Adam with bias correction. Moment buffers are keyed by position in the
// parameter list handed to step(), so the same list must be passed every time.
class Adam {
  public:
    explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

    void step(std::vector<Parameter *> params);
    void set_lr(double lr) { opts_.lr = lr; }
    const AdamOptions &options() const { return opts_; }
    std::int64_t step_count() const { return t_; }

  private:
    AdamOptions opts_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

double global_grad_norm(const std::vector<Parameter *> &params);

} // namespace delta
