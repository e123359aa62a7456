#include <doctest.h>

#include <cmath>
#include <vector>

#include "pqd/autograd.hpp"
#include "pqd/data.hpp"
#include "pqd/distill.hpp"
#include "pqd/errors.hpp"
#include "pqd/nn.hpp"
#include "pqd/rng.hpp"

using namespace pqd;

namespace {

// Direct double-precision evaluation of the distillation loss.
double ref_kd_loss(const std::vector<double>& zs, const std::vector<double>& zt, int B, int K,
                   const std::vector<int>& labels, double alpha, double T) {
  auto softmax = [&](const std::vector<double>& z, int row, double temp) {
    std::vector<double> p(static_cast<std::size_t>(K));
    double m = z[static_cast<std::size_t>(row) * K];
    for (int k = 1; k < K; ++k) m = std::max(m, z[static_cast<std::size_t>(row) * K + k]);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) {
      p[static_cast<std::size_t>(k)] = std::exp((z[static_cast<std::size_t>(row) * K + k] - m) / temp);
      denom += p[static_cast<std::size_t>(k)];
    }
    for (double& v : p) v /= denom;
    return p;
  };
  double ce = 0.0, kl = 0.0;
  for (int b = 0; b < B; ++b) {
    const std::vector<double> ps1 = softmax(zs, b, 1.0);
    ce += -std::log(ps1[static_cast<std::size_t>(labels[static_cast<std::size_t>(b)])]);
    const std::vector<double> psT = softmax(zs, b, T);
    const std::vector<double> ptT = softmax(zt, b, T);
    for (int k = 0; k < K; ++k)
      kl += ptT[static_cast<std::size_t>(k)] *
            (std::log(ptT[static_cast<std::size_t>(k)]) - std::log(psT[static_cast<std::size_t>(k)]));
  }
  return alpha * ce / B + (1.0 - alpha) * T * T * kl / B;
}

}  // namespace

TEST_CASE("kd loss: identical logits leave only the hard-label term") {
  const Tensor z({2, 3}, {1.0f, 2.0f, 0.0f, -1.0f, 0.5f, 0.25f});
  const std::vector<int> labels{1, 2};
  for (float T : {1.0f, 2.0f, 4.0f, 10.0f}) {
    const float loss = kd_loss_value(z, z, labels, KDConfig{0.3f, T});
    Tape t;
    const float ce = t.value(t.cross_entropy(t.input(z), labels))[0];
    // Exactly alpha * CE, independent of the temperature.
    CHECK(loss == 0.3f * ce);
  }
}

TEST_CASE("kd loss: alpha one reduces to plain cross entropy") {
  Rng rng(3);
  Tensor zs({4, 5}), zt({4, 5});
  for (std::int64_t i = 0; i < zs.size(); ++i) {
    zs[i] = rng.uniform_f(-2.0f, 2.0f);
    zt[i] = rng.uniform_f(-2.0f, 2.0f);
  }
  const std::vector<int> labels{0, 4, 2, 1};
  const float loss = kd_loss_value(zs, zt, labels, KDConfig{1.0f, 4.0f});
  Tape t;
  const float ce = t.value(t.cross_entropy(t.input(zs), labels))[0];
  CHECK(loss == ce);
}

TEST_CASE("kd loss: hand case against the direct reference") {
  const Tensor zt({1, 2}, {1.0f, 0.0f});
  const Tensor zs({1, 2}, {0.0f, 1.0f});
  const std::vector<int> labels{0};
  const KDConfig cfg{0.5f, 2.0f};
  const float loss = kd_loss_value(zs, zt, labels, cfg);
  const double want = ref_kd_loss({0.0, 1.0}, {1.0, 0.0}, 1, 2, labels, 0.5, 2.0);
  CHECK(std::fabs(loss - want) < 1e-6);
}

TEST_CASE("kd loss: random case against the direct reference") {
  Rng rng(17);
  const int B = 3, K = 4;
  Tensor zs({B, K}), zt({B, K});
  std::vector<double> zsd, ztd;
  for (std::int64_t i = 0; i < zs.size(); ++i) {
    zs[i] = rng.uniform_f(-3.0f, 3.0f);
    zt[i] = rng.uniform_f(-3.0f, 3.0f);
    zsd.push_back(zs[i]);
    ztd.push_back(zt[i]);
  }
  const std::vector<int> labels{2, 0, 3};
  for (const KDConfig cfg : {KDConfig{0.5f, 4.0f}, KDConfig{0.2f, 1.0f}, KDConfig{0.9f, 8.0f}}) {
    const float loss = kd_loss_value(zs, zt, labels, cfg);
    const double want = ref_kd_loss(zsd, ztd, B, K, labels, cfg.alpha, cfg.temperature);
    CHECK(std::fabs(loss - want) < 1e-5);
  }
}

TEST_CASE("kd loss rejects a non-positive temperature") {
  const Tensor z({1, 2}, {0.0f, 1.0f});
  CHECK_THROWS_AS(kd_loss_value(z, z, {0}, KDConfig{0.5f, 0.0f}), ConfigError);
  CHECK_THROWS_AS(kd_loss_value(z, z, {0}, KDConfig{0.5f, -1.0f}), ConfigError);
}

TEST_CASE("kl term is non-negative and vanishes only at equality") {
  Rng rng(29);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor zs({1, 4}), zt({1, 4});
    for (std::int64_t i = 0; i < 4; ++i) {
      zs[i] = rng.uniform_f(-4.0f, 4.0f);
      zt[i] = rng.uniform_f(-4.0f, 4.0f);
    }
    // alpha = 0 isolates the softened term.
    const float kl_term = kd_loss_value(zs, zt, {0}, KDConfig{0.0f, 3.0f});
    CHECK(kl_term >= -1e-8f);
  }
  const Tensor z({1, 4}, {0.5f, -1.0f, 2.0f, 0.0f});
  CHECK(std::fabs(kd_loss_value(z, z, {0}, KDConfig{0.0f, 3.0f})) < 1e-8f);
}

TEST_CASE("kd gradient: zero at equality, flows to the student only") {
  const Tensor zt({1, 3}, {0.5f, -0.5f, 1.0f});
  Parameter student(Tensor({1, 3}, {0.5f, -0.5f, 1.0f}), "z");
  {
    Tape t;
    const auto zs = t.param(student);
    // alpha = 0: pure softened term; its gradient vanishes when z_s == z_t.
    t.backward(t.kd_loss(zs, zt, {0}, KDConfig{0.0f, 2.0f}));
    for (std::int64_t i = 0; i < 3; ++i) CHECK(std::fabs(student.grad[i]) < 1e-6f);
  }
  student.reset_grad();
  {
    Parameter diverged(Tensor({1, 3}, {1.0f, 0.0f, -1.0f}), "z2");
    Tape t;
    t.backward(t.kd_loss(t.param(diverged), zt, {0}, KDConfig{0.5f, 2.0f}));
    float total = 0.0f;
    for (std::int64_t i = 0; i < 3; ++i) total += std::fabs(diverged.grad[i]);
    CHECK(total > 0.0f);
  }
}

TEST_CASE("kd loss rejects shape mismatches") {
  Tape t;
  const auto zs = t.input(Tensor({1, 3}));
  CHECK_THROWS_AS(t.kd_loss(zs, Tensor({1, 4}), {0}, KDConfig{}), InvariantError);
}

TEST_CASE("teacher parameters are frozen") {
  ModelDesc desc;
  desc.arch = Arch::Mlp;
  desc.in_c = 1;
  desc.in_h = 4;
  desc.in_w = 4;
  desc.num_classes = 3;
  TeacherRef teacher(Model::build(desc, 7));
  for (const Parameter& p : teacher.model().params) CHECK(!p.trainable);
}

TEST_CASE("function shift: self is zero, hand case, symmetry in magnitude") {
  ModelDesc desc;
  desc.arch = Arch::Mlp;
  desc.in_c = 3;
  desc.in_h = 8;
  desc.in_w = 8;
  desc.num_classes = 3;
  Model a = Model::build(desc, 5);
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.train_per_class = 4;
  spec.test_per_class = 4;
  spec.image_size = 8;
  spec.seed = 2;
  const Dataset data = synth_generate(spec);
  const std::vector<Batch> probes = {full_batch(data.test)};
  CHECK(function_shift(a, a, probes) == 0.0);

  Model b = Model::build(desc, 6);
  const double ab = function_shift(a, b, probes);
  CHECK(ab > 0.0);
  CHECK(function_shift(b, a, probes) == doctest::Approx(ab));
}

TEST_CASE("function shift: one-logit hand case") {
  // Two constant single-logit models: bias-only difference of 2.
  ModelDesc desc;
  desc.arch = Arch::Mlp;
  desc.in_c = 1;
  desc.in_h = 4;
  desc.in_w = 4;
  desc.num_classes = 2;
  Model a = Model::build(desc, 1);
  Model b = Model::build(desc, 1);
  // Zero every weight; set output biases so logits differ by (2, 0).
  for (Model* m : {&a, &b})
    for (Parameter& p : m->params) p.value.fill(0.0f);
  a.params.back().value[0] = 3.0f;
  b.params.back().value[0] = 1.0f;
  Batch probe;
  probe.x = Tensor({1, 1, 4, 4});
  probe.labels = {0};
  CHECK(function_shift(a, b, {probe}) == doctest::Approx(2.0));
}
