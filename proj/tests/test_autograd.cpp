#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "pqd/autograd.hpp"
#include "pqd/data.hpp"
#include "pqd/errors.hpp"
#include "pqd/nn.hpp"
#include "pqd/optim.hpp"
#include "pqd/rng.hpp"
#include "pqd/train.hpp"

using namespace pqd;

// ---------------------------------------------------------------------------
// Double-precision reference implementations, independent of the engine.
// Used both directly and as the loss evaluator for central differences.
// ---------------------------------------------------------------------------
namespace ref {

std::vector<double> linear(const std::vector<double>& x, int B, int I,
                           const std::vector<double>& w, int O, const std::vector<double>& b) {
  std::vector<double> y(static_cast<std::size_t>(B) * O, 0.0);
  for (int bi = 0; bi < B; ++bi)
    for (int o = 0; o < O; ++o) {
      double acc = b[static_cast<std::size_t>(o)];
      for (int i = 0; i < I; ++i)
        acc += x[static_cast<std::size_t>(bi) * I + i] * w[static_cast<std::size_t>(o) * I + i];
      y[static_cast<std::size_t>(bi) * O + o] = acc;
    }
  return y;
}

std::vector<double> conv2d(const std::vector<double>& x, int B, int C, int H, int W,
                           const std::vector<double>& w, int F, int k,
                           const std::vector<double>& bias, int stride, int pad, int& Ho, int& Wo) {
  Ho = (H + 2 * pad - k) / stride + 1;
  Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(B) * F * Ho * Wo, 0.0);
  for (int b = 0; b < B; ++b)
    for (int f = 0; f < F; ++f)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = bias[static_cast<std::size_t>(f)];
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride + ky - pad;
                const int ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x[((static_cast<std::size_t>(b) * C + c) * H + iy) * W + ix] *
                       w[((static_cast<std::size_t>(f) * C + c) * k + ky) * k + kx];
              }
          y[((static_cast<std::size_t>(b) * F + f) * Ho + oy) * Wo + ox] = acc;
        }
  return y;
}

std::vector<double> relu(std::vector<double> x) {
  for (double& v : x) v = v > 0.0 ? v : 0.0;
  return x;
}

std::vector<double> maxpool2(const std::vector<double>& x, int B, int C, int H, int W) {
  const int Ho = H / 2, Wo = W / 2;
  std::vector<double> y(static_cast<std::size_t>(B) * C * Ho * Wo);
  std::size_t oi = 0;
  for (int bc = 0; bc < B * C; ++bc)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox, ++oi) {
        const std::size_t base = static_cast<std::size_t>(bc) * H * W;
        double m = x[base + (2 * oy) * W + 2 * ox];
        m = std::max(m, x[base + (2 * oy) * W + 2 * ox + 1]);
        m = std::max(m, x[base + (2 * oy + 1) * W + 2 * ox]);
        m = std::max(m, x[base + (2 * oy + 1) * W + 2 * ox + 1]);
        y[oi] = m;
      }
  return y;
}

double cross_entropy(const std::vector<double>& z, int B, int K, const std::vector<int>& labels) {
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    double m = z[static_cast<std::size_t>(b) * K];
    for (int k = 1; k < K; ++k) m = std::max(m, z[static_cast<std::size_t>(b) * K + k]);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) denom += std::exp(z[static_cast<std::size_t>(b) * K + k] - m);
    loss += std::log(denom) -
            (z[static_cast<std::size_t>(b) * K + labels[static_cast<std::size_t>(b)]] - m);
  }
  return loss / B;
}

}  // namespace ref

namespace {

Tensor random_tensor(const std::vector<int>& shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_f(lo, hi);
  return t;
}

std::vector<double> widen(const Tensor& t) {
  std::vector<double> v(static_cast<std::size_t>(t.size()));
  for (std::int64_t i = 0; i < t.size(); ++i) v[static_cast<std::size_t>(i)] = t[i];
  return v;
}

}  // namespace

TEST_CASE("linear forward matches hand examples") {
  Tape t;
  // Identity weights pass the input through.
  const auto x = t.input(Tensor({1, 2}, {1, 2}));
  const auto w = t.input(Tensor({2, 2}, {1, 0, 0, 1}));
  const auto b = t.input(Tensor({2}, {0, 0}));
  const auto y = t.linear(x, w, b);
  CHECK(t.value(y)[0] == 1.0f);
  CHECK(t.value(y)[1] == 2.0f);

  const auto x2 = t.input(Tensor({1, 2}, {1, 1}));
  const auto w2 = t.input(Tensor({1, 2}, {2, 3}));
  const auto b2 = t.input(Tensor({1}, {1}));
  CHECK(t.value(t.linear(x2, w2, b2))[0] == 6.0f);
}

TEST_CASE("linear forward matches the triple-loop reference") {
  Rng rng(11);
  const Tensor x = random_tensor({4, 8}, rng);
  const Tensor w = random_tensor({3, 8}, rng);
  const Tensor b = random_tensor({3}, rng);
  Tape t;
  const Tensor& y = t.value(t.linear(t.input(x), t.input(w), t.input(b)));
  const std::vector<double> want = ref::linear(widen(x), 4, 8, widen(w), 3, widen(b));
  for (std::int64_t i = 0; i < y.size(); ++i)
    CHECK(std::fabs(y[i] - want[static_cast<std::size_t>(i)]) < 1e-6);
}

TEST_CASE("linear rejects shape mismatches with a dimension report") {
  Tape t;
  const auto x = t.input(Tensor({1, 3}));
  const auto w = t.input(Tensor({2, 2}));
  const auto b = t.input(Tensor({2}));
  CHECK_THROWS_WITH_AS(t.linear(x, w, b), doctest::Contains("[1x3]"), InvariantError);
}

TEST_CASE("conv2d: all-ones 3x3 kernel sums the window") {
  Tape t;
  const auto x = t.input(Tensor::full({1, 1, 3, 3}, 1.0f));
  const auto w = t.input(Tensor::full({1, 1, 3, 3}, 1.0f));
  const auto b = t.input(Tensor({1}));
  const Tensor& y = t.value(t.conv2d(x, w, b, 1, 0));
  CHECK(y.size() == 1);
  CHECK(y[0] == 9.0f);
}

TEST_CASE("conv2d: delta kernel with pad 1 is the identity") {
  Rng rng(5);
  const Tensor x = random_tensor({2, 1, 4, 4}, rng);
  Tensor w({1, 1, 3, 3});
  w[4] = 1.0f;  // center tap
  Tape t;
  const Tensor& y = t.value(t.conv2d(t.input(x), t.input(w), t.input(Tensor({1})), 1, 1));
  REQUIRE(y.same_shape(x));
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv2d matches the seven-loop reference") {
  Rng rng(17);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng);
  const Tensor w = random_tensor({4, 3, 3, 3}, rng);
  const Tensor b = random_tensor({4}, rng);
  for (const auto& [stride, pad] : std::vector<std::pair<int, int>>{{1, 0}, {1, 1}, {2, 1}}) {
    Tape t;
    const Tensor& y = t.value(t.conv2d(t.input(x), t.input(w), t.input(b), stride, pad));
    int Ho = 0, Wo = 0;
    const std::vector<double> want =
        ref::conv2d(widen(x), 2, 3, 8, 8, widen(w), 4, 3, widen(b), stride, pad, Ho, Wo);
    REQUIRE(y.dim(2) == Ho);
    REQUIRE(y.dim(3) == Wo);
    for (std::int64_t i = 0; i < y.size(); ++i)
      CHECK(std::fabs(y[i] - want[static_cast<std::size_t>(i)]) < 1e-5);
  }
}

TEST_CASE("conv2d rejects a non-positive output extent") {
  Tape t;
  const auto x = t.input(Tensor({1, 1, 2, 2}));
  const auto w = t.input(Tensor({1, 1, 3, 3}));
  const auto b = t.input(Tensor({1}));
  CHECK_THROWS_AS(t.conv2d(x, w, b, 1, 0), InvariantError);
}

TEST_CASE("cross entropy on uniform logits is ln K") {
  Tape t;
  const auto z = t.input(Tensor::full({2, 10}, 0.7f));
  const float loss = t.value(t.cross_entropy(z, {3, 9}))[0];
  CHECK(loss == doctest::Approx(std::log(10.0)).epsilon(1e-6));
}

TEST_CASE("cross entropy saturates to ~0 on a confident correct logit") {
  Tape t;
  Tensor z({1, 2});
  z[0] = 100.0f;
  z[1] = 0.0f;
  CHECK(t.value(t.cross_entropy(t.input(z), {0}))[0] < 1e-6f);
}

TEST_CASE("cross entropy matches the direct reference and rejects bad labels") {
  Rng rng(23);
  const Tensor z = random_tensor({3, 4}, rng, -2.0f, 2.0f);
  const std::vector<int> labels{1, 0, 3};
  Tape t;
  const float loss = t.value(t.cross_entropy(t.input(z), labels))[0];
  CHECK(std::fabs(loss - ref::cross_entropy(widen(z), 3, 4, labels)) < 1e-6);

  Tape t2;
  CHECK_THROWS_AS(t2.cross_entropy(t2.input(z), {1, 0, 4}), ConfigError);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(31);
  const Tensor z = random_tensor({8, 5}, rng, -10.0f, 10.0f);
  const Tensor p = softmax_rows(z);
  for (int b = 0; b < 8; ++b) {
    double row = 0.0;
    for (int k = 0; k < 5; ++k) row += p[static_cast<std::int64_t>(b) * 5 + k];
    CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("backward: sum gives all-ones, squared sum gives 2w") {
  Parameter w(Tensor({2, 3}, {1, -2, 3, 0.5f, 4, -1}), "w");
  {
    Tape t;
    t.backward(t.sum(t.param(w)));
    for (std::int64_t i = 0; i < w.grad.size(); ++i) CHECK(w.grad[i] == 1.0f);
    CHECK(t.node_count() == 0);  // tape cleared
  }
  w.reset_grad();
  {
    Parameter v(Tensor({1}, {3.0f}), "v");
    Tape t;
    const auto n = t.param(v);
    t.backward(t.sum(t.mul(n, n)));
    CHECK(v.grad[0] == 6.0f);
  }
}

TEST_CASE("backward rejects a non-scalar root") {
  Parameter w(Tensor({2}, {1, 2}), "w");
  Tape t;
  const auto n = t.param(w);
  CHECK_THROWS_AS(t.backward(n), InvariantError);
}

// Central-difference gradient check. The loss is re-evaluated by the
// double-precision reference stack so the difference quotient is not
// drowned by float32 rounding.
namespace {

struct FdNet {
  bool with_conv = false;
  int B = 2, C = 1, H = 4, W = 4, F = 4, k = 3, hidden = 6, K = 3;
  Tensor x;
  std::vector<int> labels;

  double ref_loss(const std::vector<Parameter>& params) const {
    std::vector<double> cur = widen(x);
    int c = C, h = H, w = W;
    std::size_t pi = 0;
    if (with_conv) {
      int Ho = 0, Wo = 0;
      cur = ref::conv2d(cur, B, c, h, w, widen(params[pi].value), F, k,
                        widen(params[pi + 1].value), 1, 1, Ho, Wo);
      pi += 2;
      cur = ref::relu(std::move(cur));
      cur = ref::maxpool2(cur, B, F, Ho, Wo);
      c = F;
      h = Ho / 2;
      w = Wo / 2;
    }
    const int flat = c * h * w;
    cur = ref::linear(cur, B, flat, widen(params[pi].value), hidden, widen(params[pi + 1].value));
    pi += 2;
    cur = ref::relu(std::move(cur));
    cur = ref::linear(cur, B, hidden, widen(params[pi].value), K, widen(params[pi + 1].value));
    return ref::cross_entropy(cur, B, K, labels);
  }

  float engine_loss_and_grads(std::vector<Parameter>& params) const {
    Tape t;
    auto cur = t.input(x);
    std::size_t pi = 0;
    if (with_conv) {
      cur = t.conv2d(cur, t.param(params[pi]), t.param(params[pi + 1]), 1, 1);
      pi += 2;
      cur = t.relu(cur);
      cur = t.maxpool2(cur);
    }
    cur = t.flatten(cur);
    cur = t.linear(cur, t.param(params[pi]), t.param(params[pi + 1]));
    pi += 2;
    cur = t.relu(cur);
    cur = t.linear(cur, t.param(params[pi]), t.param(params[pi + 1]));
    const auto loss = t.cross_entropy(cur, labels);
    const float v = t.value(loss)[0];
    t.backward(loss);
    return v;
  }
};

double gradient_check(FdNet& net, std::vector<Parameter>& params, double h = 1e-3) {
  for (Parameter& p : params) p.reset_grad();
  net.engine_loss_and_grads(params);
  double worst = 0.0;
  for (Parameter& p : params) {
    for (std::int64_t i = 0; i < p.value.size(); ++i) {
      const float keep = p.value[i];
      p.value[i] = keep + static_cast<float>(h);
      const double up = net.ref_loss(params);
      p.value[i] = keep - static_cast<float>(h);
      const double down = net.ref_loss(params);
      p.value[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double an = p.grad[i];
      const double err =
          std::fabs(an) < 1e-6 ? std::fabs(fd - an) : std::fabs(fd - an) / std::fabs(an);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

FdNet make_fd_net(bool with_conv, std::uint64_t seed, std::vector<Parameter>& params) {
  Rng rng(seed);
  FdNet net;
  net.with_conv = with_conv;
  net.C = with_conv ? 2 : 1;
  net.H = with_conv ? 6 : 4;
  net.W = with_conv ? 6 : 4;
  net.x = random_tensor({net.B, net.C, net.H, net.W}, rng);
  net.labels.resize(static_cast<std::size_t>(net.B));
  for (int b = 0; b < net.B; ++b)
    net.labels[static_cast<std::size_t>(b)] = static_cast<int>(rng.below(net.K));
  int c = net.C, hh = net.H, ww = net.W;
  if (with_conv) {
    params.emplace_back(random_tensor({net.F, c, net.k, net.k}, rng, -0.5f, 0.5f), "conv.w");
    params.emplace_back(random_tensor({net.F}, rng, -0.1f, 0.1f), "conv.b");
    c = net.F;
    hh /= 2;
    ww /= 2;
  }
  params.emplace_back(random_tensor({net.hidden, c * hh * ww}, rng, -0.5f, 0.5f), "fc1.w");
  params.emplace_back(random_tensor({net.hidden}, rng, -0.1f, 0.1f), "fc1.b");
  params.emplace_back(random_tensor({net.K, net.hidden}, rng, -0.5f, 0.5f), "fc2.w");
  params.emplace_back(random_tensor({net.K}, rng, -0.1f, 0.1f), "fc2.b");
  return net;
}

}  // namespace

TEST_CASE("analytic gradients match central differences on an mlp") {
  std::vector<Parameter> params;
  FdNet net = make_fd_net(false, 41, params);
  CHECK(gradient_check(net, params) < 1e-3);
}

TEST_CASE("analytic gradients match central differences on a small cnn") {
  std::vector<Parameter> params;
  FdNet net = make_fd_net(true, 43, params);
  CHECK(gradient_check(net, params) < 1e-3);
}

TEST_CASE("sgd: single step without momentum") {
  std::vector<Parameter> params;
  params.emplace_back(Tensor({1}, {1.0f}), "w");
  params[0].grad[0] = 2.0f;
  TrainConfig cfg;
  cfg.total_epochs = 2;  // lr(0) = base_lr
  cfg.base_lr = 0.1f;
  cfg.momentum = 0.0f;
  SgdOptimizer opt;
  opt.step(params, cfg, 0);
  CHECK(params[0].value[0] == doctest::Approx(0.8f));
  CHECK(params[0].grad[0] == 0.0f);  // reset after the step
}

TEST_CASE("sgd: cosine schedule endpoint freezes the weights") {
  TrainConfig cfg;
  cfg.total_epochs = 10;
  cfg.base_lr = 0.5f;
  CHECK(cosine_lr(cfg, 10) == doctest::Approx(0.0f).epsilon(1e-7));
  for (int e = 0; e < 10; ++e) CHECK(cosine_lr(cfg, e) > 0.0f);
  for (int e = 0; e < 10; ++e) CHECK(cosine_lr(cfg, e) >= cosine_lr(cfg, e + 1));

  std::vector<Parameter> params;
  params.emplace_back(Tensor({1}, {1.0f}), "w");
  params[0].grad[0] = 5.0f;
  SgdOptimizer opt;
  opt.step(params, cfg, 10);
  CHECK(params[0].value[0] == 1.0f);
}

TEST_CASE("sgd: two momentum steps follow the hand recurrence") {
  const float lr = 0.1f, mu = 0.9f, g1 = 2.0f, g2 = -1.0f;
  float v = 0.0f, w = 1.0f;
  v = mu * v + g1;
  w -= lr * v;
  v = mu * v + g2;
  w -= lr * v;

  std::vector<Parameter> params;
  params.emplace_back(Tensor({1}, {1.0f}), "w");
  TrainConfig cfg;
  cfg.total_epochs = 1000000;  // lr(0) ~= base_lr for both steps
  cfg.base_lr = lr;
  cfg.momentum = mu;
  SgdOptimizer opt;
  params[0].grad[0] = g1;
  opt.step(params, cfg, 0);
  params[0].grad[0] = g2;
  opt.step(params, cfg, 0);
  CHECK(params[0].value[0] == doctest::Approx(w).epsilon(1e-6));
}

TEST_CASE("training is bitwise deterministic under a fixed seed") {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.train_per_class = 8;
  spec.test_per_class = 4;
  spec.image_size = 8;
  spec.seed = 5;
  const Dataset data = synth_generate(spec);
  TrainConfig cfg;
  cfg.total_epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 99;

  auto run = [&] {
    ModelDesc desc;
    desc.arch = Arch::Mlp;
    desc.in_c = 3;
    desc.in_h = 8;
    desc.in_w = 8;
    desc.num_classes = 3;
    Model m = Model::build(desc, cfg.seed);
    SgdOptimizer opt;
    run_epochs(data.train, cfg, 3,
               [&](const Batch& b, int e) { return train_step(m, b, opt, cfg, e); });
    return m;
  };
  const Model a = run();
  const Model b = run();
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    const Tensor& va = a.params[i].value;
    const Tensor& vb = b.params[i].value;
    REQUIRE(va.size() == vb.size());
    CHECK(std::memcmp(va.data(), vb.data(), static_cast<std::size_t>(va.size()) * 4) == 0);
  }
}

TEST_CASE("forward pass values stay finite") {
  ModelDesc desc;
  desc.arch = Arch::SmallConv;
  desc.in_c = 3;
  desc.in_h = 8;
  desc.in_w = 8;
  desc.num_classes = 4;
  Model m = Model::build(desc, 3);
  Rng rng(8);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng, 0.0f, 1.0f);
  const Tensor y = m.forward_eval(x);
  CHECK(y.all_finite());
  CHECK(y.dim(1) == 4);
}
