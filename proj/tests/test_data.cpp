#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "pqd/data.hpp"
#include "pqd/errors.hpp"
#include "pqd/metrics.hpp"
#include "pqd/nn.hpp"
#include "pqd/optim.hpp"
#include "pqd/train.hpp"

using namespace pqd;
namespace fs = std::filesystem;

TEST_CASE("synthetic generation is deterministic and sized as requested") {
  SyntheticSpec spec;
  spec.num_classes = 2;
  spec.train_per_class = 10;
  spec.test_per_class = 5;
  spec.image_size = 8;
  spec.seed = 77;
  const Dataset a = synth_generate(spec);
  const Dataset b = synth_generate(spec);
  CHECK(a.train.n == 20);
  CHECK(a.test.n == 10);
  CHECK(a.train.pixels == b.train.pixels);
  CHECK(a.train.labels == b.train.labels);
  CHECK(a.test.pixels == b.test.pixels);
  // Train and test draw from different noise streams.
  CHECK(a.train.pixels != a.test.pixels);

  spec.seed = 78;
  const Dataset c = synth_generate(spec);
  CHECK(a.train.pixels != c.train.pixels);
}

TEST_CASE("a linear probe separates the synthetic classes at a wide margin") {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.train_per_class = 48;
  spec.test_per_class = 24;
  spec.image_size = 8;
  spec.margin = 3.0f;
  spec.seed = 11;
  const Dataset data = synth_generate(spec);

  // Logistic regression on raw pixels, trained with the engine.
  ModelDesc desc;
  desc.arch = Arch::Mlp;
  desc.in_c = 3;
  desc.in_h = 8;
  desc.in_w = 8;
  desc.num_classes = 3;
  desc.hidden = 8;
  Model probe = Model::build(desc, 123);
  TrainConfig cfg;
  cfg.total_epochs = 30;
  cfg.base_lr = 0.1f;
  cfg.batch_size = 36;
  cfg.seed = 5;
  SgdOptimizer opt;
  run_epochs(data.train, cfg, 30,
             [&](const Batch& b, int e) { return train_step(probe, b, opt, cfg, e); });
  CHECK(evaluate_accuracy(probe, data.test) > 95.0);
}

TEST_CASE("batches: permutation coverage and normalization") {
  SyntheticSpec spec;
  spec.num_classes = 2;
  spec.train_per_class = 13;  // odd total (26) exercises the partial batch
  spec.test_per_class = 2;
  spec.image_size = 8;
  spec.seed = 3;
  const Dataset data = synth_generate(spec);

  const std::vector<Batch> batches = make_batches(data.train, 8, 42, 0);
  REQUIRE(batches.size() == 4);  // 8 + 8 + 8 + 2
  CHECK(batches.back().x.dim(0) == 2);
  for (const Batch& b : batches)
    for (std::int64_t i = 0; i < b.x.size(); ++i) {
      CHECK(b.x[i] >= 0.0f);
      CHECK(b.x[i] <= 1.0f);
    }

  // Per-epoch permutations cover every index exactly once. Batch tensors
  // are reconstructed into a label multiset per index via pixel matching.
  auto epoch_label_counts = [&](int epoch) {
    std::vector<int> counts(static_cast<std::size_t>(data.train.num_classes), 0);
    int total = 0;
    for (const Batch& b : make_batches(data.train, 8, 42, epoch))
      for (int lab : b.labels) {
        ++counts[static_cast<std::size_t>(lab)];
        ++total;
      }
    CHECK(total == data.train.n);
    return counts;
  };
  const auto c0 = epoch_label_counts(0);
  const auto c1 = epoch_label_counts(1);
  CHECK(c0 == c1);  // same multiset of labels each epoch
  CHECK(c0[0] == 13);
  CHECK(c0[1] == 13);

  // Different epochs shuffle differently; the same (seed, epoch) reproduces.
  const std::vector<Batch> e0 = make_batches(data.train, 26, 42, 0);
  const std::vector<Batch> e1 = make_batches(data.train, 26, 42, 1);
  const std::vector<Batch> e0b = make_batches(data.train, 26, 42, 0);
  CHECK(e0[0].labels != e1[0].labels);
  CHECK(e0[0].labels == e0b[0].labels);

  CHECK_THROWS_AS(make_batches(data.train, 0, 1, 0), ConfigError);
  CHECK_THROWS_AS(make_batches(data.train, data.train.n + 1, 1, 0), ConfigError);
}

namespace {

constexpr std::size_t kRecord = 3073;
constexpr std::size_t kPerFile = 10000;

std::vector<std::uint8_t> patterned_file(int file_index) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(kRecord * kPerFile);
  for (std::size_t r = 0; r < kPerFile; ++r) {
    bytes.push_back(static_cast<std::uint8_t>((r + file_index) % 10));
    for (std::size_t i = 0; i < 3072; ++i)
      bytes.push_back(static_cast<std::uint8_t>((r * 31 + i * 7 + file_index) & 0xFF));
  }
  return bytes;
}

void write_file(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

struct FixtureDir {
  fs::path dir;
  explicit FixtureDir(const std::string& name) : dir(fs::temp_directory_path() / name) {
    fs::create_directories(dir);
  }
  ~FixtureDir() { fs::remove_all(dir); }
};

}  // namespace

TEST_CASE("cifar loader: fixture round-trips byte-exactly") {
  FixtureDir fixture("pqd_cifar_fixture");
  std::vector<std::uint8_t> train_concat;
  for (int i = 1; i <= 5; ++i) {
    const auto bytes = patterned_file(i);
    write_file(fixture.dir / ("data_batch_" + std::to_string(i) + ".bin"), bytes);
    train_concat.insert(train_concat.end(), bytes.begin(), bytes.end());
  }
  const auto test_bytes = patterned_file(6);
  write_file(fixture.dir / "test_batch.bin", test_bytes);

  const Dataset ds = load_cifar10_binary(fixture.dir);
  CHECK(ds.train.n == 50000);
  CHECK(ds.test.n == 10000);
  CHECK(ds.train.num_classes == 10);
  CHECK(ds.train.c == 3);
  CHECK(ds.train.h == 32);

  // First record: exact pixel round-trip against the written pattern.
  CHECK(ds.train.labels[0] == 1);
  for (std::size_t i = 0; i < 3072; ++i)
    CHECK(ds.train.pixels[i] == static_cast<std::uint8_t>((i * 7 + 1) & 0xFF));

  // Loader byte-exactness: re-serialization reproduces the input bytes.
  CHECK(to_cifar_records(ds.train) == train_concat);
  CHECK(to_cifar_records(ds.test) == test_bytes);
}

TEST_CASE("cifar loader: truncation and bad labels are reported with context") {
  FixtureDir fixture("pqd_cifar_bad");
  {
    auto bytes = patterned_file(1);
    bytes.resize(kRecord * 100 + 17);  // truncated mid-record
    write_file(fixture.dir / "data_batch_1.bin", bytes);
    for (int i = 2; i <= 5; ++i) write_file(fixture.dir / ("data_batch_" + std::to_string(i) + ".bin"), patterned_file(i));
    write_file(fixture.dir / "test_batch.bin", patterned_file(6));
    try {
      load_cifar10_binary(fixture.dir);
      FAIL("expected a truncation error");
    } catch (const IoError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("data_batch_1.bin") != std::string::npos);
      CHECK(msg.find(std::to_string(kRecord * 100)) != std::string::npos);
    }
  }
  {
    auto bytes = patterned_file(1);
    bytes[kRecord * 3] = 17;  // label byte out of range in record 3
    write_file(fixture.dir / "data_batch_1.bin", bytes);
    try {
      load_cifar10_binary(fixture.dir);
      FAIL("expected a label error");
    } catch (const IoError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("17") != std::string::npos);
      CHECK(msg.find(std::to_string(kRecord * 3)) != std::string::npos);
    }
  }
  CHECK_THROWS_AS(load_cifar10_binary(fixture.dir / "missing"), IoError);
}

TEST_CASE("dataset checksum distinguishes datasets") {
  SyntheticSpec spec;
  spec.num_classes = 2;
  spec.train_per_class = 4;
  spec.test_per_class = 2;
  spec.image_size = 8;
  spec.seed = 1;
  const Dataset a = synth_generate(spec);
  spec.seed = 2;
  const Dataset b = synth_generate(spec);
  CHECK(dataset_checksum(a) == dataset_checksum(a));
  CHECK(dataset_checksum(a) != dataset_checksum(b));
}
