#include <doctest.h>

#include <cmath>
#include <vector>

#include "pqd/autograd.hpp"
#include "pqd/errors.hpp"
#include "pqd/optim.hpp"
#include "pqd/quant.hpp"
#include "pqd/rng.hpp"

using namespace pqd;

TEST_CASE("quantize: hand cases") {
  CHECK(quantize(3.4f, {1.0f, 0}) == 3);
  CHECK(quantize(300.0f, {1.0f, 0}) == 255);   // clipped high
  CHECK(quantize(-300.0f, {1.0f, 0}) == 0);    // clipped low
  // round(-1.7 / 0.5) = round(-3.4) = -3; -3 + 10 = 7
  CHECK(quantize(-1.7f, {0.5f, 10}) == 7);
}

TEST_CASE("dequantize: hand cases and zero-point") {
  CHECK(dequantize(10, {0.5f, 10}) == 0.0f);
  CHECK(dequantize(7, {0.5f, 10}) == -1.5f);
}

TEST_CASE("round-trip of on-grid in-range values is exact") {
  const QuantParams qp{0.037f, 77};
  for (int k = 0; k < 256; k += 5) {
    const float x = dequantize(static_cast<std::uint8_t>(k), qp);
    CHECK(quantize(x, qp) == k);
    CHECK(dequantize(quantize(x, qp), qp) == x);
  }
}

TEST_CASE("round-trip error is bounded by half a step for in-range values") {
  Rng rng(7);
  const QuantParams qp = qparams_from_range(-2.0f, 3.0f);
  const float lo = qp.scale * (0.0f - qp.zero_point);
  const float hi = qp.scale * (255.0f - qp.zero_point);
  int violations = 0;
  for (int i = 0; i < 100000; ++i) {
    const float x = rng.uniform_f(lo, hi);
    const int q = quantize(x, qp);
    // The map itself obeys the half-step bound exactly; evaluate it in
    // double so the check is not confused by the final float32 store,
    // which can cost up to half an ulp on top.
    const double back = static_cast<double>(qp.scale) * (q - qp.zero_point);
    if (std::fabs(back - x) > static_cast<double>(qp.scale) / 2.0) ++violations;
    // The stored float stays within half an ulp of that.
    CHECK(std::fabs(dequantize(static_cast<std::uint8_t>(q), qp) - back) <=
          std::fabs(back) * 1e-7 + 1e-12);
  }
  CHECK(violations == 0);
}

TEST_CASE("quantize is monotone in x") {
  Rng rng(13);
  const QuantParams qp = qparams_from_range(-1.0f, 4.0f);
  float prev_x = -10.0f;
  int prev_q = quantize(prev_x, qp);
  for (int i = 0; i < 10000; ++i) {
    const float x = prev_x + rng.uniform_f(0.0f, 0.01f);
    const int q = quantize(x, qp);
    CHECK(q >= prev_q);
    prev_x = x;
    prev_q = q;
  }
}

TEST_CASE("calibration formula: reference ranges") {
  {
    const QuantParams qp = qparams_from_range(0.0f, 255.0f);
    CHECK(qp.scale == doctest::Approx(1.0f));
    CHECK(qp.zero_point == 0);
  }
  {
    // (1 - (-1)) / 255, zero point from round-half-even(127.5) = 128
    const QuantParams qp = qparams_from_range(-1.0f, 1.0f);
    CHECK(qp.scale == doctest::Approx(2.0f / 255.0f));
    CHECK(qp.zero_point == 128);
  }
}

TEST_CASE("degenerate constant ranges keep the constant representable") {
  {
    const QuantParams qp = qparams_from_range(0.0f, 0.0f);
    CHECK(qp.scale == doctest::Approx(1.0f / 255.0f));
    CHECK(qp.zero_point == 128);
    CHECK(dequantize(quantize(0.0f, qp), qp) == 0.0f);
  }
  for (float v : {0.37f, -0.8f, 5.0f, -3.75f, 1.0f}) {
    const QuantParams qp = qparams_from_range(v, v);
    CHECK(qp.valid());
    const float back = dequantize(quantize(v, qp), qp);
    CHECK(back == doctest::Approx(v).epsilon(1e-6));
  }
}

TEST_CASE("observer modes: min-max expands, ema tracks") {
  Observer mm;
  mm.update(Tensor({2}, {1.0f, 2.0f}));
  mm.update(Tensor({2}, {-1.0f, 0.5f}));
  CHECK(mm.min == -1.0f);
  CHECK(mm.max == 2.0f);
  mm.update(Tensor({2}, {0.0f, 0.1f}));
  CHECK(mm.min == -1.0f);  // never shrinks
  CHECK(mm.max == 2.0f);

  Observer ema{Observer::Mode::Ema};
  ema.update(Tensor({2}, {0.0f, 1.0f}));
  ema.update(Tensor({2}, {0.0f, 2.0f}));
  CHECK(ema.max == doctest::Approx(0.99f * 1.0f + 0.01f * 2.0f));
  CHECK_THROWS_AS(Observer{}.qparams(), InvariantError);
}

TEST_CASE("fake quant: disabled is identity, enabled lands on the grid") {
  Rng rng(3);
  Tensor x({100});
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform_f(-1.5f, 1.5f);

  const Tensor same = fake_quant_forward(x, FakeQuantNode{{0.01f, 10}, false});
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(same[i] == x[i]);

  const QuantParams qp = qparams_from_range(-1.5f, 1.5f);
  const Tensor q = fake_quant_forward(x, FakeQuantNode{qp, true});
  for (std::int64_t i = 0; i < x.size(); ++i) {
    CHECK(std::fabs(q[i] - x[i]) <= qp.scale / 2.0f);  // in-range input
    CHECK(dequantize(quantize(q[i], qp), qp) == q[i]);  // on the grid
  }
  // Grid idempotence.
  const Tensor qq = fake_quant_forward(q, FakeQuantNode{qp, true});
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(qq[i] == q[i]);
}

TEST_CASE("straight-through estimator passes in-range, blocks clipped") {
  const QuantParams qp = qparams_from_range(-1.0f, 1.0f);
  Parameter w(Tensor({3}, {0.5f, 30.0f, -30.0f}), "w");
  Tape t;
  const auto wq = t.fake_quant(t.param(w), FakeQuantNode{qp, true});
  t.backward(t.sum(wq));
  CHECK(w.grad[0] == 1.0f);  // in range: gradient flows unchanged
  CHECK(w.grad[1] == 0.0f);  // clipped above
  CHECK(w.grad[2] == 0.0f);  // clipped below
}

TEST_CASE("fake-quant training drives a toy regression loss down") {
  // min (w - 1)^2 with fake-quant on w; the straight-through gradient
  // still points the optimizer at the target.
  std::vector<Parameter> params;
  params.emplace_back(Tensor({1}, {0.1f}), "w");
  TrainConfig cfg;
  cfg.total_epochs = 1000;
  cfg.base_lr = 0.05f;
  cfg.momentum = 0.0f;
  SgdOptimizer opt;
  const QuantParams qp = qparams_from_range(-2.0f, 2.0f);
  std::vector<float> losses;
  for (int step = 0; step < 20; ++step) {
    Tape t;
    const auto wq = t.fake_quant(t.param(params[0]), FakeQuantNode{qp, true});
    const auto err = t.add(wq, t.input(Tensor({1}, {-1.0f})));
    const auto loss = t.sum(t.mul(err, err));
    losses.push_back(t.value(loss)[0]);
    t.backward(loss);
    opt.step(params, cfg, 0);
  }
  CHECK(losses.back() < losses.front());
}

TEST_CASE("compression estimate follows the closed form") {
  CHECK(compression_estimate(0.5) == doctest::Approx(8.0));
  CHECK(compression_estimate(0.0) == doctest::Approx(4.0));
  CHECK(compression_estimate(0.9) == doctest::Approx(40.0));
  CHECK_THROWS_AS(compression_estimate(1.0), ConfigError);
  CHECK_THROWS_AS(compression_estimate(-0.1), ConfigError);
}

TEST_CASE("quantization noise bound: closed form and Monte Carlo") {
  CHECK(quant_noise_bound(0, 1.0) == 0.0);
  CHECK(quant_noise_bound(12, 1.0) == doctest::Approx(1.0));

  // E||eps||^2 with eps ~ U(-delta/2, delta/2) over n coordinates must
  // stay at or below (delta^2/12) n; halving n halves the value.
  Rng rng(77);
  const double delta = 0.25;
  auto mc = [&](int n) {
    const int draws = 100000 / n;
    double total = 0.0;
    for (int d = 0; d < draws; ++d) {
      double sq = 0.0;
      for (int i = 0; i < n; ++i) {
        const double e = rng.uniform(-delta / 2.0, delta / 2.0);
        sq += e * e;
      }
      total += sq;
    }
    return total / draws;
  };
  const double full = mc(64);
  const double half = mc(32);
  CHECK(full <= quant_noise_bound(64, delta) * 1.02);
  CHECK(half / full == doctest::Approx(0.5).epsilon(0.10));
}

TEST_CASE("requantizer matches double arithmetic within one unit") {
  Rng rng(19);
  for (int trial = 0; trial < 2000; ++trial) {
    const double ratio = std::pow(2.0, rng.uniform(-12.0, 2.0)) * rng.uniform(0.5, 1.5);
    const Requantizer rq = Requantizer::from_ratio(ratio);
    const auto acc = static_cast<std::int32_t>(rng.below(1u << 24)) - (1 << 23);
    const double want = round_even(acc * ratio);
    const double got = rq.apply(acc);
    CHECK(std::fabs(got - want) <= 1.0);
  }
}
