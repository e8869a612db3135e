#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "pengi/core/error.hpp"
#include "pengi/core/tensor.hpp"

namespace pengi {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 200;
  // Steps over which the rate decays linearly to zero after warmup; 0 keeps it flat.
  std::size_t total_steps = 0;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

/// Linear warmup from 0 to the base rate, then optional linear decay.
inline double warmup_lr(const AdamOptions& o, std::size_t step) {
  const double s = static_cast<double>(step + 1);
  if (o.warmup_steps > 0 && step < o.warmup_steps) return o.lr * s / static_cast<double>(o.warmup_steps);
  if (o.total_steps > o.warmup_steps) {
    const double remain = static_cast<double>(o.total_steps) - s;
    const double span = static_cast<double>(o.total_steps - o.warmup_steps);
    return o.lr * std::max(0.0, remain / span);
  }
  return o.lr;
}

/// Adam over an explicit parameter list. Parameters outside the list are never
/// touched, which is how frozen components stay bit-identical.
template <std::floating_point T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>*> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    for (auto* p : params_) {
      if (!p->requires_grad()) throw ContractError("Adam: parameter does not require grad");
      m_.emplace_back(p->size(), T(0));
      v_.emplace_back(p->size(), T(0));
    }
  }

  std::size_t step_count() const noexcept { return t_; }
  const AdamOptions& options() const noexcept { return opts_; }

  double current_lr() const { return warmup_lr(opts_, t_); }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  /// Applies one update using the accumulated gradients, then clears them.
  /// Returns the learning rate that was used.
  double step() {
    const double lr = warmup_lr(opts_, t_);
    ++t_;
    double clip_scale = 1.0;
    if (opts_.clip_norm > 0) {
      double sq = 0;
      for (auto* p : params_)
        for (T g : p->grad()) sq += double(g) * double(g);
      const double norm = std::sqrt(sq);
      if (norm > opts_.clip_norm) clip_scale = opts_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(opts_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, double(t_));
    const T b1 = T(opts_.beta1), b2 = T(opts_.beta2);
    const T step_size = T(lr / bc1);
    const T inv_bc2 = T(1.0 / bc2);
    const T eps = T(opts_.eps);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T>& p = *params_[k];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      auto w = p.data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T gi = g[i] * T(clip_scale);
        m[i] = b1 * m[i] + (T(1) - b1) * gi;
        v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
        w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
      }
      p.zero_grad();
    }
    return lr;
  }

 private:
  std::vector<Tensor<T>*> params_;
  AdamOptions opts_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace pengi
