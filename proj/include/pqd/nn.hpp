#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pqd/autograd.hpp"
#include "pqd/int8.hpp"
#include "pqd/param.hpp"
#include "pqd/prune.hpp"
#include "pqd/quant.hpp"

namespace pqd {

enum class Arch : std::uint8_t { Mlp = 0, SmallConv = 1 };

Arch arch_from_name(const std::string& name);
std::string arch_name(Arch a);

/// Fixed reference topologies. SmallConv is
/// conv 3->16 k3 s1 p1, relu, maxpool2, conv 16->32 k3 s1 p1, relu,
/// maxpool2, flatten, linear->K; Mlp is flatten, linear->hidden, relu,
/// linear->K.
struct ModelDesc {
  Arch arch = Arch::SmallConv;
  int in_c = 3;
  int in_h = 16;
  int in_w = 16;
  int num_classes = 10;
  int hidden = 128;  // Mlp only

  bool operator==(const ModelDesc&) const = default;
};

enum class LayerKind : std::uint8_t { Conv = 0, Linear = 1, MaxPool2 = 2, Flatten = 3 };

enum class StageKind : std::uint8_t { Prune = 0, Qat = 1, Kd = 2 };

std::string stage_name(StageKind k);

/// One entry of a model's compression history.
struct StageEvent {
  StageKind kind = StageKind::Prune;
  int epochs = 0;
  float rho = 0.0f;         // Prune
  float alpha = 0.0f;       // Kd
  float temperature = 0.0f; // Kd

  bool operator==(const StageEvent&) const = default;
};

/// Per-layer quantization state: an EMA range observer on the
/// post-activation tensor plus the cached fake-quant nodes for weights and
/// activations. Weight parameters are re-observed fresh on every training
/// step; the cached weight grid is only authoritative while the model sits
/// on it (between a conversion and the next update).
struct LayerQuant {
  Observer act_obs{Observer::Mode::Ema};
  FakeQuantNode weight_fq;
  FakeQuantNode act_fq;
};

struct Layer {
  LayerKind kind = LayerKind::Flatten;
  int weight = -1;  // parameter indices for Conv/Linear
  int bias = -1;
  int stride = 1;
  int pad = 0;
  bool relu_after = false;
  LayerQuant q;
};

/// Integer form of one conv/linear layer: weight codes, bias at scale
/// s_in * s_w, and the activation grids on both sides.
struct Int8Layer {
  QuantTensor weights;
  std::vector<std::int32_t> bias;
  QuantParams in_qp;
  QuantParams out_qp;
};

class Model {
 public:
  static Model build(const ModelDesc& desc, std::uint64_t seed);

  /// Training-path forward on the tape. Applies fake-quant to weights and
  /// post-activation tensors when quantization is active; updates the EMA
  /// range observers when update_observers is set.
  Tape::NodeId forward(Tape& tape, Tape::NodeId x, bool update_observers);

  /// Tape-free float forward (evaluation mode). Honors active fake-quant
  /// state but never updates observers.
  Tensor forward_eval(const Tensor& x, ThreadPool* pool = nullptr) const;

  /// Integer-only forward through the converted layers; returns
  /// dequantized logits. Requires a prior convert_and_snap().
  Tensor forward_int8(const Tensor& x, ThreadPool* pool = nullptr) const;

  /// Enables fake-quant on every conv/linear site. Needs at least one
  /// observer update (a training forward) before conversion.
  void enable_quantization();

  /// Materializes the integer payload from the current weights and frozen
  /// activation ranges, then snaps the float master weights and biases onto
  /// that grid (pruned coordinates quantize to the zero-point and stay
  /// exactly zero). Idempotent while the model remains on the grid.
  void convert_and_snap();

  bool quant_active() const { return quant_active_; }
  bool on_grid() const { return on_grid_; }
  bool converted() const { return on_grid_ && !int8_layers.empty(); }
  /// Called by training steps after touching the weights.
  void mark_dirty() { on_grid_ = false; }

  /// Checkpoint restore path: marks the model on-grid with the stored
  /// input grid after int8_layers and master values have been rebuilt.
  void set_on_grid_restored(const QuantParams& input_qp) {
    input_qp_ = input_qp;
    on_grid_ = true;
  }

  void attach_mask(PruneMask mask);
  void reapply_mask();
  const std::optional<PruneMask>& mask() const { return mask_; }

  std::int64_t weight_count() const;                 // maskable weights
  std::int64_t nonzero_weight_count() const;         // on the current master values
  const QuantParams& input_qp() const { return input_qp_; }

  ModelDesc desc;
  std::vector<Layer> layers;
  std::vector<Parameter> params;
  std::vector<Int8Layer> int8_layers;
  std::vector<StageEvent> history;
  Observer input_obs{Observer::Mode::Ema};

 private:
  QuantParams weight_qparams(const Layer& layer) const;

  std::optional<PruneMask> mask_;
  QuantParams input_qp_;
  bool quant_active_ = false;
  bool on_grid_ = false;
};

}  // namespace pqd
