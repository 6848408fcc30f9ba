#pragma once
// Prototype distillation between the class prototypes of clean support
// features and the tuned prefix rows. Both sides are projected by a shared
// linear map; the prototype side becomes a sharpened soft target (centered
// and temperature-scaled, with an EMA-tracked center) that never receives
// gradients, while the prefix side stays differentiable.

#include <string>
#include <utility>
#include <vector>

#include "ett/rng.hpp"
#include "ett/tensor.hpp"

namespace ett::reg {

struct ProjectorPsi {
  Tensor w;  // [d, d_proj]

  static ProjectorPsi init(int width, int proj, Rng& rng) {
    if (width <= 0 || proj <= 0) throw TensorError("ProjectorPsi: dimensions must be positive");
    std::vector<double> v(size_t(width) * size_t(proj), 0.0);
    for (auto& x : v) x = rng.normal(0.0, 0.02);
    ProjectorPsi p;
    p.w = Tensor::from({width, proj}, std::move(v));
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const { return {{"psi.w", w}}; }

  long long param_count() const { return (long long)(w.size()); }
};

struct DistillConfig {
  double tau_teacher = 0.04;
  double tau_student = 0.1;
  double lambda = 0.1;
  double center_momentum = 0.9;
  bool standardize = true;  // center and sharpen the teacher side
};

// mean over rows of the cross entropy between target rows a and probability
// rows b: (1/n) sum_i ( -sum_j a_ij log b_ij )
inline Tensor soft_cross_entropy(const Tensor& targets, const Tensor& probs) {
  if (targets.rank() != 2) throw TensorError("soft_cross_entropy: rank-2 required");
  detail::require_same_shape(targets, probs, "soft_cross_entropy");
  return scale(sum(mul(targets, log_elem(probs))), -1.0 / double(targets.dim(0)));
}

class Distiller {
 public:
  ProjectorPsi psi;
  DistillConfig cfg;

  Distiller(ProjectorPsi p, DistillConfig c) : psi(std::move(p)), cfg(c) {}

  // fix this episode's prototype targets; a detached copy is kept
  void bind(const Tensor& prototypes) {
    Tape::Pause pause;
    prototypes_ = prototypes.clone();
    prototypes_.set_requires_grad(false);
    center_ = Tensor();
    center_ready_ = false;
  }

  bool bound() const { return prototypes_.defined(); }

  const Tensor& bound_prototypes() const { return prototypes_; }

  // center value currently tracked (undefined before the first teacher pass)
  const Tensor& center() const { return center_; }
  bool center_ready() const { return center_ready_; }

  // soft targets from the fixed prototypes; never part of the gradient tape
  Tensor teacher(bool update_center = true) {
    if (!bound()) throw TensorError("Distiller: bind prototypes first");
    Tape::Pause pause;
    Tensor p = matmul(prototypes_, psi.w);
    if (!cfg.standardize) return softmax(scale(p, 1.0 / cfg.tau_student), 1);
    int n = p.dim(0), d = p.dim(1);
    std::vector<double> mu(size_t(d), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) mu[size_t(j)] += p.at({i, j}) / double(n);
    if (!center_ready_) {
      center_ = Tensor::from({1, d}, std::move(mu));
      center_ready_ = true;
    } else if (update_center) {
      double m = cfg.center_momentum;
      for (int j = 0; j < d; ++j)
        center_.data()[j] = m * center_.data()[j] + (1.0 - m) * mu[size_t(j)];
    }
    Tensor shifted = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j)
        shifted.data()[size_t(i) * size_t(d) + size_t(j)] =
            (p.at({i, j}) - center_.data()[j]) / cfg.tau_teacher;
    return softmax(shifted, 1);
  }

  // differentiable student distribution from the prefix rows
  Tensor student(const Tensor& prefix) const {
    return softmax(scale(matmul(prefix, psi.w), 1.0 / cfg.tau_student), 1);
  }

  // distillation term against an already materialized teacher; this is the
  // function whose gradient the tuner follows, so finite-difference checks
  // must difference it with the teacher held fixed
  Tensor loss_with_teacher(const Tensor& teacher_probs, const Tensor& prefix) const {
    return soft_cross_entropy(teacher_probs, student(prefix));
  }

  // distillation term; update_center=false keeps the call side-effect free
  Tensor loss(const Tensor& prefix, bool update_center = true) {
    Tensor t = teacher(update_center);
    return loss_with_teacher(t, prefix);
  }

 private:
  Tensor prototypes_;
  Tensor center_;
  bool center_ready_ = false;
};

}  // namespace ett::reg
