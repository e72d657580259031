// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "numerics/autodiff.hpp"

namespace sane::num {

struct AdamWOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// First and second moment buffers for one parameter.
template <typename T>
struct AdamState {
    Tensor<T> m;
    Tensor<T> v;
};

/// Decoupled-weight-decay Adam over a fixed parameter list. State buffers are
/// zero-initialized on the first step.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<Var<T>> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {}

    void set_lr(double lr) { opts_.lr = lr; }
    double lr() const { return opts_.lr; }
    std::size_t steps() const { return t_; }

    void step();
    void zero_grad();

    const std::vector<Var<T>>& params() const { return params_; }

private:
    std::vector<Var<T>> params_;
    AdamWOptions opts_;
    std::vector<AdamState<T>> state_;
    std::size_t t_ = 0;
};

/// Single-tensor AdamW update; `step` is the 1-based step count after this update.
template <typename T>
void adamw_update(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, std::size_t step,
                  const AdamWOptions& opts);

/// Global L2 norm of all parameter gradients, rescaled in place to at most max_norm.
template <typename T>
double clip_grad_norm(const std::vector<Var<T>>& params, double max_norm);

struct OneCycleOptions {
    double lr_max = 1e-3;
    double pct_start = 0.3;
    double div = 25.0;
    double final_div = 1e4;
};

/// Linear warmup from lr_max/div to lr_max over pct_start*total_steps, then
/// cosine annealing to lr_max/final_div at total_steps.
double onecycle_lr(std::size_t step, std::size_t total_steps, const OneCycleOptions& opts);

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace sane::num
