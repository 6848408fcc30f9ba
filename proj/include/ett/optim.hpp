#pragma once

// AdamW with decoupled weight decay:
//   m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
//   p <- p - lr * ( mhat / (sqrt(vhat) + eps) + wd * p )
// Updates run in parameter registration order, in place, between tape
// lifetimes.

#include <cmath>
#include <vector>

#include "ett/tensor.hpp"

namespace ett {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  explicit AdamW(std::vector<Tensor> params, AdamWConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].size(), 0.0);
      v_[i].assign(params_[i].size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      double* val = p.data();
      const double* g = p.grad();
      double* m = m_[i].data();
      double* v = v_[i].data();
      for (size_t j = 0, n = p.size(); j < n; ++j) {
        if (!std::isfinite(g[j])) throw TensorError("AdamW::step: non-finite gradient");
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        val[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * val[j]);
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace ett
