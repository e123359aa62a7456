#include "pqd/distill.hpp"

#include <cmath>

#include "pqd/errors.hpp"

namespace pqd {

void validate(const KDConfig& cfg) {
  if (!(cfg.temperature > 0.0f)) throw ConfigError("distillation temperature must be positive");
  if (cfg.alpha < 0.0f || cfg.alpha > 1.0f) throw ConfigError("alpha must lie in [0, 1]");
}

TeacherRef::TeacherRef(Model model) : model_(std::move(model)) {
  for (Parameter& p : model_.params) p.trainable = false;
}

float kd_loss_value(const Tensor& student_logits, const Tensor& teacher_logits,
                    const std::vector<int>& labels, const KDConfig& cfg) {
  Tape tape;
  const Tape::NodeId zs = tape.input(student_logits);
  return tape.value(tape.kd_loss(zs, teacher_logits, labels, cfg))[0];
}

double function_shift(const Model& a, const Model& b, const std::vector<Batch>& probes) {
  double total = 0.0;
  std::int64_t count = 0;
  for (const Batch& batch : probes) {
    const Tensor za = a.converted() ? a.forward_int8(batch.x) : a.forward_eval(batch.x);
    const Tensor zb = b.converted() ? b.forward_int8(batch.x) : b.forward_eval(batch.x);
    check_same_shape(za, zb, "function_shift");
    const int B = za.dim(0), K = za.dim(1);
    for (int i = 0; i < B; ++i) {
      double sq = 0.0;
      for (int k = 0; k < K; ++k) {
        const double d = static_cast<double>(za[static_cast<std::int64_t>(i) * K + k]) -
                         zb[static_cast<std::int64_t>(i) * K + k];
        sq += d * d;
      }
      total += std::sqrt(sq);
      ++count;
    }
  }
  if (count == 0) return 0.0;
  return total / static_cast<double>(count);
}

}  // namespace pqd
