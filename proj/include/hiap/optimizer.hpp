#pragma once

#include <cmath>
#include <vector>

#include "hiap/tensor.hpp"

namespace hiap {

/// AdamW with per-group learning-rate multipliers and decoupled weight decay.
class AdamW {
 public:
  struct Group {
    std::vector<Tensor<float>> params;
    double lr_multiplier = 1.0;
    double weight_decay = 0.0;
  };

  AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& g : groups_)
      for (const auto& p : g.params) {
        m_.emplace_back(p.numel(), 0.0f);
        v_.emplace_back(p.numel(), 0.0f);
      }
  }

  /// Applies one update from the parameters' current gradients. Returns false
  /// (and leaves all state untouched) if any gradient is non-finite.
  bool step(double lr) {
    for (const auto& g : groups_)
      for (const auto& p : g.params)
        for (float x : p.grad())
          if (!std::isfinite(x)) {
            ++skipped_;
            return false;
          }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t slot = 0;
    for (const auto& g : groups_) {
      const double glr = lr * g.lr_multiplier;
      for (const auto& cp : g.params) {
        Tensor<float> p = cp;
        auto grad = p.grad();
        auto data = p.data();
        auto& m = m_[slot];
        auto& v = v_[slot];
        ++slot;
        for (std::size_t i = 0; i < data.size(); ++i) {
          const double gi = grad[i];
          m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * gi);
          v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * gi * gi);
          const double mhat = m[i] / bc1, vhat = v[i] / bc2;
          double w = data[i];
          if (g.weight_decay > 0) w -= glr * g.weight_decay * w;
          w -= glr * mhat / (std::sqrt(vhat) + eps_);
          data[i] = static_cast<float>(w);
        }
      }
    }
    return true;
  }

  void zero_grad() const {
    for (const auto& g : groups_)
      for (const auto& p : g.params) p.zero_grad();
  }

  std::size_t steps() const { return t_; }
  std::size_t skipped() const { return skipped_; }

 private:
  std::vector<Group> groups_;
  double beta1_, beta2_, eps_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t t_ = 0;
  std::size_t skipped_ = 0;
};

}  // namespace hiap
