#pragma once

#include <cstdint>
#include <vector>

#include "pqd/param.hpp"

namespace pqd {

struct TrainConfig {
  int total_epochs = 1;
  float base_lr = 0.05f;
  float momentum = 0.9f;
  int batch_size = 128;
  std::uint64_t seed = 0;
};

void validate(const TrainConfig& cfg);

/// base_lr * 0.5 * (1 + cos(pi * epoch / total_epochs)); strictly positive
/// for epoch < total_epochs, zero at the endpoint.
float cosine_lr(const TrainConfig& cfg, int epoch);

/// SGD with momentum: v <- momentum * v + g; value <- value - lr * v.
/// Gradients are reset to zero after the step. Velocity buffers are created
/// on first use and keyed by parameter order.
class SgdOptimizer {
 public:
  void step(std::vector<Parameter>& params, const TrainConfig& cfg, int epoch);
  void reset() { velocity_.clear(); }

 private:
  std::vector<Tensor> velocity_;
};

}  // namespace pqd
