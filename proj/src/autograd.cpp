#include "pqd/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "pqd/distill.hpp"
#include "pqd/errors.hpp"

namespace pqd {

int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.ndim() != 2 || w.ndim() != 2 || bias.ndim() != 1 || x.dim(1) != w.dim(1) ||
      bias.dim(0) != w.dim(0)) {
    throw InvariantError("linear: incompatible shapes x " + shape_str(x.shape()) + ", w " +
                         shape_str(w.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const int B = x.dim(0), I = x.dim(1), O = w.dim(0);
  Tensor out({B, O});
  for (int b = 0; b < B; ++b) {
    const float* xr = x.data() + static_cast<std::int64_t>(b) * I;
    float* yr = out.data() + static_cast<std::int64_t>(b) * O;
    for (int o = 0; o < O; ++o) {
      const float* wr = w.data() + static_cast<std::int64_t>(o) * I;
      float acc = bias[o];
      for (int i = 0; i < I; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }
  return out;
}

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4 || bias.ndim() != 1) {
    throw InvariantError("conv2d: expected x [B,C,H,W], w [F,C,k,k], bias [F]; got x " +
                         shape_str(x.shape()) + ", w " + shape_str(w.shape()));
  }
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C || w.dim(2) != w.dim(3) || bias.dim(0) != F) {
    throw InvariantError("conv2d: incompatible shapes x " + shape_str(x.shape()) + ", w " +
                         shape_str(w.shape()) + ", bias " + shape_str(bias.shape()));
  }
  if (stride < 1 || pad < 0) throw InvariantError("conv2d: stride must be >= 1 and pad >= 0");
  const int Ho = conv_out_extent(H, k, stride, pad);
  const int Wo = conv_out_extent(W, k, stride, pad);
  if (Ho <= 0 || Wo <= 0) {
    throw InvariantError("conv2d: non-positive output extent for input " + shape_str(x.shape()) +
                         ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                         ", pad " + std::to_string(pad));
  }
  Tensor out({B, F, Ho, Wo});
  for (int b = 0; b < B; ++b) {
    for (int f = 0; f < F; ++f) {
      float* yp = out.data() + ((static_cast<std::int64_t>(b) * F + f) * Ho) * Wo;
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          float acc = bias[f];
          for (int c = 0; c < C; ++c) {
            const float* xp = x.data() + ((static_cast<std::int64_t>(b) * C + c) * H) * W;
            const float* wp = w.data() + ((static_cast<std::int64_t>(f) * C + c) * k) * k;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= W) continue;
                acc += xp[iy * W + ix] * wp[ky * k + kx];
              }
            }
          }
          yp[oy * Wo + ox] = acc;
        }
      }
    }
  }
  return out;
}

Tensor relu_forward(const Tensor& x) {
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return out;
}

Tensor maxpool2_forward(const Tensor& x, std::vector<int>* argmax) {
  if (x.ndim() != 4) throw InvariantError("maxpool2: expected [B,C,H,W], got " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 2 || W < 2) throw InvariantError("maxpool2: spatial extent below window size");
  const int Ho = H / 2, Wo = W / 2;
  Tensor out({B, C, Ho, Wo});
  if (argmax) argmax->assign(static_cast<std::size_t>(out.size()), 0);
  std::int64_t oi = 0;
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = ((static_cast<std::int64_t>(b) * C + c) * H) * W;
      const float* xp = x.data() + base;
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox, ++oi) {
          int best = (2 * oy) * W + 2 * ox;
          float bv = xp[best];
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = (2 * oy + dy) * W + (2 * ox + dx);
              if (xp[idx] > bv) {
                bv = xp[idx];
                best = idx;
              }
            }
          }
          out[oi] = bv;
          if (argmax) (*argmax)[static_cast<std::size_t>(oi)] = static_cast<int>(base) + best;
        }
      }
    }
  }
  return out;
}

Tensor flatten_forward(const Tensor& x) {
  if (x.ndim() < 2) throw InvariantError("flatten: expected batch dimension, got " + shape_str(x.shape()));
  const int B = x.dim(0);
  const int rest = static_cast<int>(x.size() / B);
  return Tensor({B, rest}, x.vec());
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.ndim() != 2) throw InvariantError("softmax: expected [B,K], got " + shape_str(logits.shape()));
  const int B = logits.dim(0), K = logits.dim(1);
  Tensor out({B, K});
  for (int b = 0; b < B; ++b) {
    const float* z = logits.data() + static_cast<std::int64_t>(b) * K;
    float* p = out.data() + static_cast<std::int64_t>(b) * K;
    float m = z[0];
    for (int k = 1; k < K; ++k) m = std::max(m, z[k]);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(z[k]) - m);
    for (int k = 0; k < K; ++k)
      p[k] = static_cast<float>(std::exp(static_cast<double>(z[k]) - m) / denom);
  }
  return out;
}

Tape::NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Tape::grad(NodeId id) {
  Node& n = node(id);
  if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
  return n.grad;
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

Tape::NodeId Tape::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = false;
  return push(std::move(n));
}

Tape::NodeId Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.bound = &p;
  n.needs_grad = p.trainable;
  return push(std::move(n));
}

Tape::NodeId Tape::linear(NodeId x, NodeId w, NodeId bias) {
  Node n;
  n.value = linear_forward(node(x).value, node(w).value, node(bias).value);
  n.needs_grad = node(x).needs_grad || node(w).needs_grad || node(bias).needs_grad;
  n.backprop = [x, w, bias](Tape& t, const Node& self) {
    const Tensor& xv = t.node(x).value;
    const Tensor& wv = t.node(w).value;
    const int B = xv.dim(0), I = xv.dim(1), O = wv.dim(0);
    const Tensor& gy = self.grad;
    if (t.node(x).needs_grad) {
      Tensor& gx = t.grad(x);
      for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o) {
          const float g = gy[static_cast<std::int64_t>(b) * O + o];
          if (g == 0.0f) continue;
          const float* wr = wv.data() + static_cast<std::int64_t>(o) * I;
          float* gxr = gx.data() + static_cast<std::int64_t>(b) * I;
          for (int i = 0; i < I; ++i) gxr[i] += g * wr[i];
        }
    }
    if (t.node(w).needs_grad) {
      Tensor& gw = t.grad(w);
      for (int b = 0; b < B; ++b) {
        const float* xr = xv.data() + static_cast<std::int64_t>(b) * I;
        for (int o = 0; o < O; ++o) {
          const float g = gy[static_cast<std::int64_t>(b) * O + o];
          if (g == 0.0f) continue;
          float* gwr = gw.data() + static_cast<std::int64_t>(o) * I;
          for (int i = 0; i < I; ++i) gwr[i] += g * xr[i];
        }
      }
    }
    if (t.node(bias).needs_grad) {
      Tensor& gb = t.grad(bias);
      for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o) gb[o] += gy[static_cast<std::int64_t>(b) * O + o];
    }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::conv2d(NodeId x, NodeId w, NodeId bias, int stride, int pad) {
  Node n;
  n.value = conv2d_forward(node(x).value, node(w).value, node(bias).value, stride, pad);
  n.needs_grad = node(x).needs_grad || node(w).needs_grad || node(bias).needs_grad;
  n.backprop = [x, w, bias, stride, pad](Tape& t, const Node& self) {
    const Tensor& xv = t.node(x).value;
    const Tensor& wv = t.node(w).value;
    const Tensor& gy = self.grad;
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int F = wv.dim(0), k = wv.dim(2);
    const int Ho = gy.dim(2), Wo = gy.dim(3);
    const bool need_x = t.node(x).needs_grad;
    const bool need_w = t.node(w).needs_grad;
    const bool need_b = t.node(bias).needs_grad;
    Tensor* gx = need_x ? &t.grad(x) : nullptr;
    Tensor* gw = need_w ? &t.grad(w) : nullptr;
    Tensor* gb = need_b ? &t.grad(bias) : nullptr;
    for (int b = 0; b < B; ++b) {
      for (int f = 0; f < F; ++f) {
        const float* gyp = gy.data() + ((static_cast<std::int64_t>(b) * F + f) * Ho) * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          for (int ox = 0; ox < Wo; ++ox) {
            const float g = gyp[oy * Wo + ox];
            if (g == 0.0f) continue;
            if (gb) (*gb)[f] += g;
            if (!need_x && !need_w) continue;
            for (int c = 0; c < C; ++c) {
              const std::int64_t xoff = ((static_cast<std::int64_t>(b) * C + c) * H) * W;
              const std::int64_t woff = ((static_cast<std::int64_t>(f) * C + c) * k) * k;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= W) continue;
                  if (gx) (*gx)[xoff + iy * W + ix] += g * wv[woff + ky * k + kx];
                  if (gw) (*gw)[woff + ky * k + kx] += g * xv[xoff + iy * W + ix];
                }
              }
            }
          }
        }
      }
    }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::relu(NodeId x) {
  Node n;
  n.value = relu_forward(node(x).value);
  n.needs_grad = node(x).needs_grad;
  n.backprop = [x](Tape& t, const Node& self) {
    if (!t.node(x).needs_grad) return;
    const Tensor& xv = t.node(x).value;
    Tensor& gx = t.grad(x);
    for (std::int64_t i = 0; i < xv.size(); ++i)
      if (xv[i] > 0.0f) gx[i] += self.grad[i];
  };
  return push(std::move(n));
}

Tape::NodeId Tape::maxpool2(NodeId x) {
  auto argmax = std::make_shared<std::vector<int>>();
  Node n;
  n.value = maxpool2_forward(node(x).value, argmax.get());
  n.needs_grad = node(x).needs_grad;
  n.backprop = [x, argmax](Tape& t, const Node& self) {
    if (!t.node(x).needs_grad) return;
    Tensor& gx = t.grad(x);
    for (std::int64_t i = 0; i < self.grad.size(); ++i)
      gx[(*argmax)[static_cast<std::size_t>(i)]] += self.grad[i];
  };
  return push(std::move(n));
}

Tape::NodeId Tape::flatten(NodeId x) {
  Node n;
  n.value = flatten_forward(node(x).value);
  n.needs_grad = node(x).needs_grad;
  n.backprop = [x](Tape& t, const Node& self) {
    if (!t.node(x).needs_grad) return;
    Tensor& gx = t.grad(x);
    for (std::int64_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  };
  return push(std::move(n));
}

Tape::NodeId Tape::fake_quant(NodeId x, const FakeQuantNode& fq) {
  if (!fq.enabled) return x;
  Node n;
  n.value = fake_quant_forward(node(x).value, fq);
  n.needs_grad = node(x).needs_grad;
  const QuantParams qp = fq.qp;
  n.backprop = [x, qp](Tape& t, const Node& self) {
    if (!t.node(x).needs_grad) return;
    const Tensor& xv = t.node(x).value;
    Tensor& gx = t.grad(x);
    for (std::int64_t i = 0; i < xv.size(); ++i)
      if (quant_in_range(xv[i], qp)) gx[i] += self.grad[i];
  };
  return push(std::move(n));
}

Tape::NodeId Tape::cross_entropy(NodeId logits, const std::vector<int>& labels) {
  const Tensor& z = node(logits).value;
  if (z.ndim() != 2) throw InvariantError("cross_entropy: expected [B,K] logits, got " + shape_str(z.shape()));
  const int B = z.dim(0), K = z.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw InvariantError("cross_entropy: label count " + std::to_string(labels.size()) +
                         " does not match batch " + std::to_string(B));
  for (int lab : labels)
    if (lab < 0 || lab >= K)
      throw ConfigError("cross_entropy: label " + std::to_string(lab) + " outside [0, " +
                        std::to_string(K) + ")");
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const float* zr = z.data() + static_cast<std::int64_t>(b) * K;
    float m = zr[0];
    for (int k = 1; k < K; ++k) m = std::max(m, zr[k]);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(zr[k]) - m);
    loss += std::log(denom) - (static_cast<double>(zr[labels[static_cast<std::size_t>(b)]]) - m);
  }
  Node n;
  n.value = Tensor::scalar(static_cast<float>(loss / B));
  n.needs_grad = node(logits).needs_grad;
  auto labs = labels;
  n.backprop = [logits, labs](Tape& t, const Node& self) {
    if (!t.node(logits).needs_grad) return;
    const Tensor& zv = t.node(logits).value;
    const int B = zv.dim(0), K = zv.dim(1);
    const Tensor probs = softmax_rows(zv);
    const float g = self.grad[0] / static_cast<float>(B);
    Tensor& gz = t.grad(logits);
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < K; ++k) {
        const std::int64_t i = static_cast<std::int64_t>(b) * K + k;
        gz[i] += g * (probs[i] - (labs[static_cast<std::size_t>(b)] == k ? 1.0f : 0.0f));
      }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::kd_loss(NodeId student_logits, const Tensor& teacher_logits,
                           const std::vector<int>& labels, const KDConfig& cfg) {
  validate(cfg);
  // Copy, not a reference: pushing the cross-entropy node below may
  // reallocate the node arena.
  const Tensor zs = node(student_logits).value;
  check_same_shape(zs, teacher_logits, "kd_loss");
  const int B = zs.dim(0), K = zs.dim(1);
  const float T = cfg.temperature;

  const NodeId ce = cross_entropy(student_logits, labels);  // validates labels/shape

  Tensor zs_T({B, K});
  Tensor zt_T({B, K});
  for (std::int64_t i = 0; i < zs.size(); ++i) {
    zs_T[i] = zs[i] / T;
    zt_T[i] = teacher_logits[i] / T;
  }
  const Tensor ps = softmax_rows(zs_T);
  const Tensor pt = softmax_rows(zt_T);
  double kl = 0.0;
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k) {
      const std::int64_t i = static_cast<std::int64_t>(b) * K + k;
      if (pt[i] > 0.0f)
        kl += static_cast<double>(pt[i]) *
              (std::log(static_cast<double>(pt[i])) - std::log(static_cast<double>(ps[i])));
    }
  kl /= B;

  const float alpha = cfg.alpha;
  Node n;
  n.value = Tensor::scalar(static_cast<float>(alpha * value(ce)[0] + (1.0f - alpha) * T * T * kl));
  n.needs_grad = node(student_logits).needs_grad;
  n.backprop = [student_logits, ce, ps, pt, alpha, T, B, K](Tape& t, const Node& self) {
    const float g = self.grad[0];
    t.grad(ce)[0] += g * alpha;
    if (!t.node(student_logits).needs_grad) return;
    // d/dz_s of T^2 * KL(p_t || p_s) with p = softmax(z/T): T * (p_s - p_t).
    Tensor& gz = t.grad(student_logits);
    const float c = g * (1.0f - alpha) * T / static_cast<float>(B);
    for (std::int64_t i = 0; i < gz.size(); ++i) gz[i] += c * (ps[i] - pt[i]);
  };
  return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  check_same_shape(node(a).value, node(b).value, "add");
  Node n;
  n.value = Tensor(node(a).value.shape());
  for (std::int64_t i = 0; i < n.value.size(); ++i) n.value[i] = node(a).value[i] + node(b).value[i];
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.backprop = [a, b](Tape& t, const Node& self) {
    for (NodeId src : {a, b}) {
      if (!t.node(src).needs_grad) continue;
      Tensor& g = t.grad(src);
      for (std::int64_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
  check_same_shape(node(a).value, node(b).value, "mul");
  Node n;
  n.value = Tensor(node(a).value.shape());
  for (std::int64_t i = 0; i < n.value.size(); ++i) n.value[i] = node(a).value[i] * node(b).value[i];
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.backprop = [a, b](Tape& t, const Node& self) {
    if (t.node(a).needs_grad) {
      Tensor& ga = t.grad(a);
      const Tensor& bv = t.node(b).value;
      for (std::int64_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * bv[i];
    }
    if (t.node(b).needs_grad) {
      Tensor& gb = t.grad(b);
      const Tensor& av = t.node(a).value;
      for (std::int64_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * av[i];
    }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::sum(NodeId x) {
  double acc = 0.0;
  const Tensor& xv = node(x).value;
  for (std::int64_t i = 0; i < xv.size(); ++i) acc += xv[i];
  Node n;
  n.value = Tensor::scalar(static_cast<float>(acc));
  n.needs_grad = node(x).needs_grad;
  n.backprop = [x](Tape& t, const Node& self) {
    if (!t.node(x).needs_grad) return;
    Tensor& gx = t.grad(x);
    const float g = self.grad[0];
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
  };
  return push(std::move(n));
}

void Tape::backward(NodeId loss) {
  Node& root = node(loss);
  if (root.value.size() != 1)
    throw InvariantError("backward: root must be scalar, got " + shape_str(root.value.shape()));
  grad(loss)[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = *it;
    if (!n.needs_grad || n.grad.size() == 0) continue;  // no downstream contribution
    if (n.backprop) n.backprop(*this, n);
    if (n.bound && n.bound->trainable) {
      Tensor& pg = n.bound->grad;
      for (std::int64_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    }
  }
  clear();
}

void Tape::clear() { nodes_.clear(); }

}  // namespace pqd
