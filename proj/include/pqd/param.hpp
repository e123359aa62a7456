#pragma once

#include <string>

#include "pqd/tensor.hpp"

namespace pqd {

/// Trainable value plus its gradient accumulator (same shape, zeroed on reset).
struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;
  bool maskable = false;  // weight matrices yes, biases no
  std::string name;

  Parameter() = default;
  explicit Parameter(Tensor v, std::string n = {}, bool maskable_ = false)
      : value(std::move(v)), grad(value.shape()), maskable(maskable_), name(std::move(n)) {}

  void reset_grad() { grad.fill(0.0f); }
};

}  // namespace pqd
