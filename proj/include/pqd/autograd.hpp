#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "pqd/param.hpp"
#include "pqd/quant.hpp"
#include "pqd/tensor.hpp"

namespace pqd {

struct KDConfig;  // distill.hpp

/// Reverse-mode tape. Forward primitives append nodes in execution order,
/// so the record is already topologically sorted; backward() replays it in
/// reverse, visiting each node exactly once, accumulates into bound
/// Parameter gradients and then clears the tape. Single-threaded by
/// construction and deterministic.
class Tape {
 public:
  using NodeId = std::int32_t;

  NodeId input(Tensor value);        // non-differentiable leaf
  NodeId param(Parameter& p);        // differentiable leaf bound to parameter storage

  /// out[b,o] = sum_i x[b,i] * w[o,i] + bias[o]
  NodeId linear(NodeId x, NodeId w, NodeId bias);
  /// Direct 2-d cross-correlation, x [B,C,H,W], w [F,C,k,k], bias [F].
  NodeId conv2d(NodeId x, NodeId w, NodeId bias, int stride, int pad);
  NodeId relu(NodeId x);
  NodeId maxpool2(NodeId x);  // 2x2 window, stride 2
  NodeId flatten(NodeId x);   // [B,C,H,W] -> [B, C*H*W]

  /// Quantize-dequantize with straight-through backward: gradient passes
  /// where the pre-clip code lies in [0,255], is zero where clipped.
  /// Identity when the node is disabled.
  NodeId fake_quant(NodeId x, const FakeQuantNode& fq);

  /// Mean over the batch of -log softmax(logits)[label]; max-subtraction
  /// stabilized. Scalar output.
  NodeId cross_entropy(NodeId logits, const std::vector<int>& labels);

  /// alpha * CE(student, labels) +
  /// (1 - alpha) * T^2 * KL(softmax(teacher/T) || softmax(student/T)),
  /// KL averaged over the batch. Gradient flows to the student only.
  NodeId kd_loss(NodeId student_logits, const Tensor& teacher_logits,
                 const std::vector<int>& labels, const KDConfig& cfg);

  // Elementwise helpers (tests, diagnostics).
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId sum(NodeId x);  // scalar

  const Tensor& value(NodeId id) const;

  /// Seeds d(loss)/d(loss) = 1, replays the tape in reverse, adds each
  /// bound leaf's gradient into its Parameter, then clears the tape.
  /// Rejects non-scalar roots.
  void backward(NodeId loss);

  void clear();
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* bound = nullptr;
    bool needs_grad = false;
    std::function<void(Tape&, const Node&)> backprop;
  };

  NodeId push(Node n);
  Node& node(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Tensor& grad(NodeId id);

  std::vector<Node> nodes_;
};

/// Row-wise softmax of [B,K] logits, max-subtraction stabilized.
Tensor softmax_rows(const Tensor& logits);

// Tape-free forward kernels shared by the autograd ops and the
// evaluation path.
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
Tensor relu_forward(const Tensor& x);
Tensor maxpool2_forward(const Tensor& x, std::vector<int>* argmax = nullptr);
Tensor flatten_forward(const Tensor& x);
int conv_out_extent(int in, int k, int stride, int pad);

}  // namespace pqd
