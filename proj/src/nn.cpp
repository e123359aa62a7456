#include "pqd/nn.hpp"

#include <algorithm>
#include <cmath>

#include "pqd/errors.hpp"
#include "pqd/rng.hpp"

namespace pqd {

Arch arch_from_name(const std::string& name) {
  if (name == "mlp") return Arch::Mlp;
  if (name == "smallconv") return Arch::SmallConv;
  throw ConfigError("unknown architecture '" + name + "' (expected mlp or smallconv)");
}

std::string arch_name(Arch a) { return a == Arch::Mlp ? "mlp" : "smallconv"; }

std::string stage_name(StageKind k) {
  switch (k) {
    case StageKind::Prune: return "prune";
    case StageKind::Qat: return "qat";
    case StageKind::Kd: return "kd";
  }
  return "?";
}

namespace {

Tensor kaiming_uniform(const std::vector<int>& shape, int fan_in, Rng& rng) {
  Tensor t(shape);
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_f(-bound, bound);
  return t;
}

}  // namespace

Model Model::build(const ModelDesc& desc, std::uint64_t seed) {
  if (desc.in_c <= 0 || desc.in_h <= 0 || desc.in_w <= 0 || desc.num_classes <= 1)
    throw ConfigError("model input dims must be positive and num_classes > 1");
  Rng rng = substream(seed, "init");
  Model m;
  m.desc = desc;

  auto add_conv = [&](const std::string& name, int in_c, int out_c, int k, int stride, int pad,
                      bool relu) {
    Layer L;
    L.kind = LayerKind::Conv;
    L.stride = stride;
    L.pad = pad;
    L.relu_after = relu;
    L.weight = static_cast<int>(m.params.size());
    m.params.emplace_back(kaiming_uniform({out_c, in_c, k, k}, in_c * k * k, rng),
                          name + ".weight", /*maskable=*/true);
    L.bias = static_cast<int>(m.params.size());
    m.params.emplace_back(Tensor({out_c}), name + ".bias");
    m.layers.push_back(std::move(L));
  };
  auto add_linear = [&](const std::string& name, int in, int out, bool relu) {
    Layer L;
    L.kind = LayerKind::Linear;
    L.relu_after = relu;
    L.weight = static_cast<int>(m.params.size());
    m.params.emplace_back(kaiming_uniform({out, in}, in, rng), name + ".weight",
                          /*maskable=*/true);
    L.bias = static_cast<int>(m.params.size());
    m.params.emplace_back(Tensor({out}), name + ".bias");
    m.layers.push_back(std::move(L));
  };
  auto add_plain = [&](LayerKind kind) {
    Layer L;
    L.kind = kind;
    m.layers.push_back(std::move(L));
  };

  if (desc.arch == Arch::Mlp) {
    add_plain(LayerKind::Flatten);
    add_linear("fc1", desc.in_c * desc.in_h * desc.in_w, desc.hidden, true);
    add_linear("fc2", desc.hidden, desc.num_classes, false);
  } else {
    if (desc.in_h < 4 || desc.in_w < 4)
      throw ConfigError("smallconv needs spatial extent >= 4");
    add_conv("conv1", desc.in_c, 16, 3, 1, 1, true);
    add_plain(LayerKind::MaxPool2);
    add_conv("conv2", 16, 32, 3, 1, 1, true);
    add_plain(LayerKind::MaxPool2);
    add_plain(LayerKind::Flatten);
    const int flat = 32 * (desc.in_h / 2 / 2) * (desc.in_w / 2 / 2);
    add_linear("fc", flat, desc.num_classes, false);
  }
  return m;
}

QuantParams Model::weight_qparams(const Layer& layer) const {
  if (on_grid_) return layer.q.weight_fq.qp;  // grid pinned by the last conversion
  Observer obs;  // fresh min/max on the current weights
  obs.update(params[static_cast<std::size_t>(layer.weight)].value);
  return obs.qparams();
}

Tape::NodeId Model::forward(Tape& tape, Tape::NodeId x, bool update_observers) {
  if (quant_active_) {
    if (update_observers) input_obs.update(tape.value(x));
    if (!input_obs.seen) throw InvariantError("quantized forward before any observer update");
    input_qp_ = input_obs.qparams();
    x = tape.fake_quant(x, FakeQuantNode{input_qp_, true});
  }
  for (Layer& L : layers) {
    switch (L.kind) {
      case LayerKind::Conv:
      case LayerKind::Linear: {
        Tape::NodeId w = tape.param(params[static_cast<std::size_t>(L.weight)]);
        if (quant_active_) {
          L.q.weight_fq = FakeQuantNode{weight_qparams(L), true};
          w = tape.fake_quant(w, L.q.weight_fq);
        }
        const Tape::NodeId b = tape.param(params[static_cast<std::size_t>(L.bias)]);
        x = L.kind == LayerKind::Conv ? tape.conv2d(x, w, b, L.stride, L.pad)
                                      : tape.linear(x, w, b);
        if (L.relu_after) x = tape.relu(x);
        if (quant_active_) {
          if (update_observers) L.q.act_obs.update(tape.value(x));
          L.q.act_fq = FakeQuantNode{L.q.act_obs.qparams(), true};
          x = tape.fake_quant(x, L.q.act_fq);
        }
        break;
      }
      case LayerKind::MaxPool2:
        x = tape.maxpool2(x);
        break;
      case LayerKind::Flatten:
        x = tape.flatten(x);
        break;
    }
  }
  return x;
}

namespace {

Tensor eval_linear(const Tensor& x, const Tensor& w, const Tensor& bias, ThreadPool* pool) {
  if (!pool) return linear_forward(x, w, bias);
  const int B = x.dim(0), I = x.dim(1), O = w.dim(0);
  if (x.dim(1) != w.dim(1) || bias.dim(0) != O)
    throw InvariantError("linear: incompatible shapes " + shape_str(x.shape()) + " vs " +
                         shape_str(w.shape()));
  Tensor out({B, O});
  pool->parallel_for(0, B, [&](int b0, int b1) {
    for (int b = b0; b < b1; ++b) {
      const float* xr = x.data() + static_cast<std::int64_t>(b) * I;
      float* yr = out.data() + static_cast<std::int64_t>(b) * O;
      for (int o = 0; o < O; ++o) {
        const float* wr = w.data() + static_cast<std::int64_t>(o) * I;
        float acc = bias[o];
        for (int i = 0; i < I; ++i) acc += xr[i] * wr[i];
        yr[o] = acc;
      }
    }
  });
  return out;
}

Tensor eval_conv(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad,
                 ThreadPool* pool) {
  if (!pool || x.dim(0) == 1) return conv2d_forward(x, w, bias, stride, pad);
  const int B = x.dim(0);
  Tensor out;
  std::vector<Tensor> parts(static_cast<std::size_t>(B));
  // Partition over images; each slice is an independent direct convolution.
  const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  pool->parallel_for(0, B, [&](int b0, int b1) {
    for (int b = b0; b < b1; ++b) {
      Tensor xi({1, C, H, W});
      std::copy_n(x.data() + static_cast<std::int64_t>(b) * C * H * W, xi.size(), xi.data());
      parts[static_cast<std::size_t>(b)] = conv2d_forward(xi, w, bias, stride, pad);
    }
  });
  const Tensor& p0 = parts[0];
  out = Tensor({B, p0.dim(1), p0.dim(2), p0.dim(3)});
  const std::int64_t per = p0.size();
  for (int b = 0; b < B; ++b)
    std::copy_n(parts[static_cast<std::size_t>(b)].data(), per, out.data() + b * per);
  return out;
}

}  // namespace

Tensor Model::forward_eval(const Tensor& x, ThreadPool* pool) const {
  Tensor cur = x;
  if (quant_active_) {
    if (!input_obs.seen) throw InvariantError("quantized forward before any observer update");
    cur = fake_quant_forward(cur, FakeQuantNode{input_obs.qparams(), true});
  }
  for (const Layer& L : layers) {
    switch (L.kind) {
      case LayerKind::Conv:
      case LayerKind::Linear: {
        const Tensor& w0 = params[static_cast<std::size_t>(L.weight)].value;
        const Tensor& b = params[static_cast<std::size_t>(L.bias)].value;
        Tensor w = quant_active_ ? fake_quant_forward(w0, FakeQuantNode{weight_qparams(L), true})
                                 : w0;
        cur = L.kind == LayerKind::Conv ? eval_conv(cur, w, b, L.stride, L.pad, pool)
                                        : eval_linear(cur, w, b, pool);
        if (L.relu_after) cur = relu_forward(cur);
        if (quant_active_)
          cur = fake_quant_forward(cur, FakeQuantNode{L.q.act_obs.qparams(), true});
        break;
      }
      case LayerKind::MaxPool2:
        cur = maxpool2_forward(cur);
        break;
      case LayerKind::Flatten:
        cur = flatten_forward(cur);
        break;
    }
  }
  return cur;
}

Tensor Model::forward_int8(const Tensor& x, ThreadPool* pool) const {
  if (!converted()) throw InvariantError("integer forward requires a converted model");
  QuantTensor q = quantize_tensor(x, input_qp_);
  std::size_t qi = 0;
  for (const Layer& L : layers) {
    switch (L.kind) {
      case LayerKind::Conv:
      case LayerKind::Linear: {
        const Int8Layer& il = int8_layers[qi++];
        q = L.kind == LayerKind::Conv
                ? int8_conv2d(q, il.weights, il.bias, L.stride, L.pad, il.out_qp, pool)
                : int8_linear(q, il.weights, il.bias, il.out_qp, pool);
        if (L.relu_after) int8_relu_inplace(q);
        break;
      }
      case LayerKind::MaxPool2:
        q = int8_maxpool2(q);
        break;
      case LayerKind::Flatten:
        q = int8_flatten(q);
        break;
    }
  }
  return dequantize_tensor(q);
}

void Model::enable_quantization() { quant_active_ = true; }

void Model::convert_and_snap() {
  if (!quant_active_) throw InvariantError("conversion requires active quantization");
  if (!input_obs.seen) throw InvariantError("conversion before any observer update");
  input_qp_ = input_obs.qparams();
  std::vector<Int8Layer> converted;
  QuantParams cur = input_qp_;
  for (Layer& L : layers) {
    if (L.kind != LayerKind::Conv && L.kind != LayerKind::Linear) continue;
    Parameter& wp = params[static_cast<std::size_t>(L.weight)];
    Parameter& bp = params[static_cast<std::size_t>(L.bias)];
    const QuantParams wqp = weight_qparams(L);
    L.q.weight_fq = FakeQuantNode{wqp, true};

    Int8Layer il;
    il.in_qp = cur;
    il.weights = quantize_tensor(wp.value, wqp);
    wp.value = dequantize_tensor(il.weights);  // master weights now on the grid

    if (!L.q.act_obs.seen) throw InvariantError("conversion before activation calibration");
    il.out_qp = L.q.act_obs.qparams();
    L.q.act_fq = FakeQuantNode{il.out_qp, true};

    const double bscale = static_cast<double>(il.in_qp.scale) * wqp.scale;
    il.bias.resize(static_cast<std::size_t>(bp.value.size()));
    for (std::int64_t i = 0; i < bp.value.size(); ++i) {
      const double code = round_even(static_cast<double>(bp.value[i]) / bscale);
      il.bias[static_cast<std::size_t>(i)] =
          static_cast<std::int32_t>(std::clamp<double>(code, INT32_MIN, INT32_MAX));
      bp.value[i] = static_cast<float>(bscale * il.bias[static_cast<std::size_t>(i)]);
    }
    cur = il.out_qp;
    converted.push_back(std::move(il));
  }
  int8_layers = std::move(converted);
  on_grid_ = true;
  reapply_mask();
}

void Model::attach_mask(PruneMask mask) {
  if (mask.per_param.size() != params.size())
    throw InvariantError("mask does not match the parameter set");
  mask_ = std::move(mask);
  reapply_mask();
}

void Model::reapply_mask() {
  if (mask_) apply_mask(params, *mask_);
}

std::int64_t Model::weight_count() const {
  std::int64_t n = 0;
  for (const Parameter& p : params)
    if (p.maskable) n += p.value.size();
  return n;
}

std::int64_t Model::nonzero_weight_count() const {
  std::int64_t n = 0;
  for (const Parameter& p : params) {
    if (!p.maskable) continue;
    for (std::int64_t i = 0; i < p.value.size(); ++i)
      if (p.value[i] != 0.0f) ++n;
  }
  return n;
}

}  // namespace pqd
