#include "pqd/train.hpp"

#include "pqd/errors.hpp"

namespace pqd {

namespace {

float step_impl(Model& model, const Batch& batch, SgdOptimizer& opt, const TrainConfig& cfg,
                int epoch, bool update_observers, const TeacherRef* teacher, const KDConfig* kd) {
  Tape tape;
  const Tape::NodeId x = tape.input(batch.x);
  const Tape::NodeId logits = model.forward(tape, x, update_observers);
  Tape::NodeId loss;
  if (teacher) {
    const Tensor zt = teacher->logits(batch.x);
    if (zt.dim(1) != tape.value(logits).dim(1))
      throw ConfigError("teacher and student disagree on class count");
    loss = tape.kd_loss(logits, zt, batch.labels, *kd);
  } else {
    loss = tape.cross_entropy(logits, batch.labels);
  }
  const float loss_value = tape.value(loss)[0];
  tape.backward(loss);
  opt.step(model.params, cfg, epoch);
  model.mark_dirty();
  model.reapply_mask();
  return loss_value;
}

}  // namespace

float train_step(Model& model, const Batch& batch, SgdOptimizer& opt, const TrainConfig& cfg,
                 int epoch) {
  return step_impl(model, batch, opt, cfg, epoch, false, nullptr, nullptr);
}

float masked_train_step(Model& model, const Batch& batch, SgdOptimizer& opt,
                        const TrainConfig& cfg, int epoch) {
  return step_impl(model, batch, opt, cfg, epoch, false, nullptr, nullptr);
}

float qat_train_step(Model& model, const Batch& batch, SgdOptimizer& opt, const TrainConfig& cfg,
                     int epoch) {
  return step_impl(model, batch, opt, cfg, epoch, model.quant_active(), nullptr, nullptr);
}

float kd_train_step(Model& student, const TeacherRef& teacher, const Batch& batch,
                    SgdOptimizer& opt, const TrainConfig& cfg, int epoch, const KDConfig& kd) {
  validate(kd);
  return step_impl(student, batch, opt, cfg, epoch, student.quant_active(), &teacher, &kd);
}

void run_epochs(const LabeledImages& data, const TrainConfig& cfg, int epochs, const StepFn& step,
                const EpochHook& hook) {
  validate(cfg);
  for (int e = 0; e < epochs; ++e) {
    const std::vector<Batch> batches = make_batches(data, cfg.batch_size, cfg.seed, e);
    double total = 0.0;
    for (const Batch& b : batches) total += step(b, e);
    if (hook) hook(e, static_cast<float>(total / static_cast<double>(batches.size())));
  }
}

}  // namespace pqd
