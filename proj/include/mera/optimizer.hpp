#pragma once

#include <cmath>
#include <vector>

#include "mera/error.hpp"
#include "mera/model.hpp"

namespace mera {

struct OptimizerConfig {
  enum class Kind { kSgd, kAdam };
  Kind kind = Kind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// SGD or Adam over every tensor of a ParameterStore, reading `grad` buffers.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, double learning_rate, const ParameterStore& params)
      : cfg_(cfg), lr_(learning_rate) {
    if (learning_rate < 0) throw ValidationError("learning rate must be >= 0");
    if (cfg_.kind == OptimizerConfig::Kind::kAdam) {
      for (const auto& t : params.tensors()) {
        m_.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
        v_.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
      }
    }
  }

  /// Rescales all gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
  static double clip_grad_norm(ParameterStore& params, double max_norm) {
    double sq = 0.0;
    for (const auto& t : params.tensors()) sq += t.grad.squaredNorm();
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
      const double s = max_norm / norm;
      for (auto& t : params.tensors()) t.grad *= s;
    }
    return norm;
  }

  void step(ParameterStore& params) {
    ++t_;
    auto& ts = params.tensors();
    if (cfg_.kind == OptimizerConfig::Kind::kSgd) {
      for (auto& t : ts) t.value -= lr_ * t.grad;
      return;
    }
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      auto& m = m_[i];
      auto& v = v_[i];
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * ts[i].grad;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * ts[i].grad.cwiseAbs2();
      ts[i].value.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
    }
  }

  int steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  double lr_;
  int t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

}  // namespace mera
