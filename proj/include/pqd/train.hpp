#pragma once

#include <functional>
#include <optional>

#include "pqd/data.hpp"
#include "pqd/distill.hpp"
#include "pqd/nn.hpp"
#include "pqd/optim.hpp"

namespace pqd {

/// One plain SGD step: tape forward, cross-entropy, backward, update.
/// Returns the batch loss.
float train_step(Model& model, const Batch& batch, SgdOptimizer& opt, const TrainConfig& cfg,
                 int epoch);

/// train_step followed by mask re-application; pruned coordinates stay
/// exactly zero. With an all-ones mask this is bitwise a plain step.
float masked_train_step(Model& model, const Batch& batch, SgdOptimizer& opt,
                        const TrainConfig& cfg, int epoch);

/// Forward with fake-quant on weights and activations, backward through the
/// straight-through estimator, SGD update, mask re-applied. Reduces to a
/// plain step when quantization is inactive and no mask is attached.
float qat_train_step(Model& model, const Batch& batch, SgdOptimizer& opt, const TrainConfig& cfg,
                     int epoch);

/// Teacher forward off-tape, student forward in its current (masked /
/// fake-quantized) state, distillation loss, update, mask re-applied.
float kd_train_step(Model& student, const TeacherRef& teacher, const Batch& batch,
                    SgdOptimizer& opt, const TrainConfig& cfg, int epoch, const KDConfig& kd);

/// Epoch loop driver shared by the baseline trainer and pipeline stages.
/// step runs one batch and returns its loss; the callback (when set) fires
/// once per epoch with the mean loss.
using StepFn = std::function<float(const Batch&, int epoch)>;
using EpochHook = std::function<void(int epoch, float mean_loss)>;

void run_epochs(const LabeledImages& data, const TrainConfig& cfg, int epochs,
                const StepFn& step, const EpochHook& hook = nullptr);

}  // namespace pqd
