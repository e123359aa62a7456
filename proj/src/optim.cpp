#include "pqd/optim.hpp"

#include <cmath>
#include <numbers>

#include "pqd/errors.hpp"

namespace pqd {

void validate(const TrainConfig& cfg) {
  if (cfg.total_epochs <= 0) throw ConfigError("total_epochs must be positive");
  if (!(cfg.base_lr > 0.0f)) throw ConfigError("base_lr must be positive");
  if (cfg.momentum < 0.0f || cfg.momentum >= 1.0f) throw ConfigError("momentum must lie in [0, 1)");
  if (cfg.batch_size <= 0) throw ConfigError("batch_size must be positive");
}

float cosine_lr(const TrainConfig& cfg, int epoch) {
  const double t = static_cast<double>(epoch) / cfg.total_epochs;
  return static_cast<float>(cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

void SgdOptimizer::step(std::vector<Parameter>& params, const TrainConfig& cfg, int epoch) {
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    velocity_.reserve(params.size());
    for (const Parameter& p : params) velocity_.emplace_back(p.value.shape());
  }
  const float lr = cosine_lr(cfg, epoch);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = params[pi];
    if (!p.trainable) {
      p.reset_grad();
      continue;
    }
    Tensor& v = velocity_[pi];
    for (std::int64_t i = 0; i < p.value.size(); ++i) {
      v[i] = cfg.momentum * v[i] + p.grad[i];
      p.value[i] -= lr * v[i];
    }
    p.reset_grad();
  }
}

}  // namespace pqd
