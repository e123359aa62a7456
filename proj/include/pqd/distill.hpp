#pragma once

#include <vector>

#include "pqd/data.hpp"
#include "pqd/nn.hpp"
#include "pqd/tensor.hpp"

namespace pqd {

/// Distillation loss weights: alpha blends hard-label cross-entropy against
/// the temperature-softened teacher term; alpha = 1 degenerates to pure
/// cross-entropy.
struct KDConfig {
  float alpha = 0.5f;
  float temperature = 4.0f;
};

void validate(const KDConfig& cfg);

/// Frozen dense FP32 teacher. Never receives gradients and always runs the
/// plain float path regardless of the student's quantization state.
class TeacherRef {
 public:
  explicit TeacherRef(Model model);

  Tensor logits(const Tensor& x) const { return model_.forward_eval(x); }
  const Model& model() const { return model_; }

 private:
  Model model_;
};

/// Loss value without a tape (oracle-style evaluation).
float kd_loss_value(const Tensor& student_logits, const Tensor& teacher_logits,
                    const std::vector<int>& labels, const KDConfig& cfg);

/// Mean over probe samples of the L2 norm of the logit difference between
/// two models on the same inputs. Diagnostic metric.
double function_shift(const Model& a, const Model& b, const std::vector<Batch>& probes);

}  // namespace pqd
