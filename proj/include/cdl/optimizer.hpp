#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cdl/autograd.hpp"

namespace cdl {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float clip_norm = 1.0f;  // global gradient-norm clip; <= 0 disables
};

// Adaptive-moment optimizer over one branch's parameter list.
class Adam {
 public:
  Adam() = default;
  Adam(const AdamConfig& config, const std::vector<ag::Parameter>& params) : config_(config) {
    for (const auto& p : params) {
      m_.push_back(ag::Matrix::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(ag::Matrix::Zero(p.value.rows(), p.value.cols()));
    }
  }

  // Clips the gradients in place, then applies one update. Returns the
  // pre-clip gradient norm.
  double step(std::vector<ag::Parameter>& params) {
    if (params.size() != m_.size()) throw std::invalid_argument("optimizer/parameter mismatch");
    double sq = 0.0;
    for (const auto& p : params) sq += static_cast<double>(p.grad.squaredNorm());
    const double norm = std::sqrt(sq);
    if (config_.clip_norm > 0.0f && norm > config_.clip_norm) {
      const float factor = static_cast<float>(config_.clip_norm / norm);
      for (auto& p : params) p.grad *= factor;
    }
    ++steps_;
    const float c1 = 1.0f - std::pow(config_.beta1, static_cast<float>(steps_));
    const float c2 = 1.0f - std::pow(config_.beta2, static_cast<float>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      m_[i] = config_.beta1 * m_[i] + (1.0f - config_.beta1) * p.grad;
      v_[i] = config_.beta2 * v_[i] + (1.0f - config_.beta2) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= config_.lr * (m_[i].array() / c1) /
                         ((v_[i].array() / c2).sqrt() + config_.eps);
    }
    return norm;
  }

  const AdamConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }
  std::vector<ag::Matrix>& first_moments() { return m_; }
  std::vector<ag::Matrix>& second_moments() { return v_; }
  const std::vector<ag::Matrix>& first_moments() const { return m_; }
  const std::vector<ag::Matrix>& second_moments() const { return v_; }
  void set_steps(std::uint64_t steps) { steps_ = steps; }

 private:
  AdamConfig config_;
  std::uint64_t steps_ = 0;
  std::vector<ag::Matrix> m_;
  std::vector<ag::Matrix> v_;
};

}  // namespace cdl
