// SPDX-License-Identifier: Apache-2.0

#include "numerics/optim.hpp"

#include <cmath>

namespace sane::num {

template <typename T>
void adamw_update(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, std::size_t step,
                  const AdamWOptions& opts) {
    if (state.m.size() != param.size()) {
        state.m = Tensor<T>(param.shape());
        state.v = Tensor<T>(param.shape());
    }
    const double bc1 = 1.0 - std::pow(opts.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(opts.beta2, static_cast<double>(step));
    const double decay = 1.0 - opts.lr * opts.weight_decay;
    const bool has_grad = grad.size() == param.size();
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = has_grad ? static_cast<double>(grad[i]) : 0.0;
        const double m = opts.beta1 * state.m[i] + (1.0 - opts.beta1) * g;
        const double v = opts.beta2 * state.v[i] + (1.0 - opts.beta2) * g * g;
        state.m[i] = static_cast<T>(m);
        state.v[i] = static_cast<T>(v);
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        double p = static_cast<double>(param[i]);
        if (opts.weight_decay != 0.0) {
            p *= decay;
        }
        p -= opts.lr * m_hat / (std::sqrt(v_hat) + opts.eps);
        param[i] = static_cast<T>(p);
    }
}

template <typename T>
void AdamW<T>::step() {
    ++t_;
    if (state_.size() != params_.size()) {
        state_.resize(params_.size());
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        adamw_update(params_[i]->value, params_[i]->grad, state_[i], t_, opts_);
    }
}

template <typename T>
void AdamW<T>::zero_grad() {
    for (auto& p : params_) {
        p->zero_grad();
    }
}

template <typename T>
double clip_grad_norm(const std::vector<Var<T>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p->has_grad()) {
            continue;
        }
        for (T g : p->grad.storage()) {
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const auto s = static_cast<T>(max_norm / (norm + 1e-12));
        for (const auto& p : params) {
            if (p->has_grad()) {
                for (T& g : p->grad.storage()) {
                    g *= s;
                }
            }
        }
    }
    return norm;
}

double onecycle_lr(std::size_t step, std::size_t total_steps, const OneCycleOptions& opts) {
    if (step > total_steps) {
        fail(ErrorKind::Argument,
             fmt::format("onecycle_lr: step {} outside [0, {}]", step, total_steps));
    }
    const double start = opts.lr_max / opts.div;
    const double end = opts.lr_max / opts.final_div;
    const double warm = opts.pct_start * static_cast<double>(total_steps);
    const auto s = static_cast<double>(step);
    if (s <= warm) {
        if (warm <= 0.0) {
            return opts.lr_max;
        }
        return start + (opts.lr_max - start) * (s / warm);
    }
    const double span = static_cast<double>(total_steps) - warm;
    const double frac = span <= 0.0 ? 1.0 : (s - warm) / span;
    return end + (opts.lr_max - end) * 0.5 * (1.0 + std::cos(M_PI * frac));
}

template void adamw_update<float>(Tensor<float>&, const Tensor<float>&, AdamState<float>&,
                                  std::size_t, const AdamWOptions&);
template void adamw_update<double>(Tensor<double>&, const Tensor<double>&, AdamState<double>&,
                                   std::size_t, const AdamWOptions&);
template double clip_grad_norm<float>(const std::vector<Var<float>>&, double);
template double clip_grad_norm<double>(const std::vector<Var<double>>&, double);

template class AdamW<float>;
template class AdamW<double>;

}  // namespace sane::num
