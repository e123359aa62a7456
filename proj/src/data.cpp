#include "pqd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <zlib.h>

#include "pqd/errors.hpp"
#include "pqd/rng.hpp"

namespace pqd {

namespace {

constexpr int kCifarDim = 32;
constexpr int kCifarChannels = 3;
constexpr std::size_t kCifarRecord = 1 + 3072;
constexpr std::size_t kCifarPerFile = 10000;

void load_cifar_file(const std::filesystem::path& file, LabeledImages& out) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != kCifarRecord * kCifarPerFile) {
    const std::size_t full = bytes.size() / kCifarRecord;
    throw IoError(file.string() + ": expected " + std::to_string(kCifarRecord * kCifarPerFile) +
                  " bytes, got " + std::to_string(bytes.size()) + " (truncated at byte offset " +
                  std::to_string(full * kCifarRecord) + ")");
  }
  for (std::size_t r = 0; r < kCifarPerFile; ++r) {
    const std::size_t off = r * kCifarRecord;
    const auto label = static_cast<std::uint8_t>(bytes[off]);
    if (label > 9)
      throw IoError(file.string() + ": label byte " + std::to_string(int(label)) +
                    " out of range at byte offset " + std::to_string(off));
    out.labels.push_back(label);
    const auto* px = reinterpret_cast<const std::uint8_t*>(bytes.data()) + off + 1;
    out.pixels.insert(out.pixels.end(), px, px + 3072);
  }
  out.n += static_cast<int>(kCifarPerFile);
}

}  // namespace

Dataset load_cifar10_binary(const std::filesystem::path& dir) {
  Dataset ds;
  for (LabeledImages* split : {&ds.train, &ds.test}) {
    split->c = kCifarChannels;
    split->h = kCifarDim;
    split->w = kCifarDim;
    split->num_classes = 10;
  }
  for (int i = 1; i <= 5; ++i)
    load_cifar_file(dir / ("data_batch_" + std::to_string(i) + ".bin"), ds.train);
  load_cifar_file(dir / "test_batch.bin", ds.test);
  return ds;
}

std::vector<std::uint8_t> to_cifar_records(const LabeledImages& data) {
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(data.n) * (1 + data.bytes_per_image()));
  for (int i = 0; i < data.n; ++i) {
    out.push_back(static_cast<std::uint8_t>(data.labels[static_cast<std::size_t>(i)]));
    const std::uint8_t* px = data.pixels.data() + static_cast<std::size_t>(i) * data.bytes_per_image();
    out.insert(out.end(), px, px + data.bytes_per_image());
  }
  return out;
}

namespace {

void synth_fill(LabeledImages& out, const SyntheticSpec& spec, int per_class, Rng& rng) {
  const int S = spec.image_size;
  const int C = spec.channels;
  out.c = C;
  out.h = S;
  out.w = S;
  out.num_classes = spec.num_classes;
  out.n = spec.num_classes * per_class;
  out.pixels.reserve(static_cast<std::size_t>(out.n) * C * S * S);
  out.labels.reserve(static_cast<std::size_t>(out.n));
  constexpr float kNoiseAmp = 24.0f;
  for (int k = 0; k < spec.num_classes; ++k) {
    // Distinct orientation/frequency per class. The grating phase is fixed
    // per class (small per-sample jitter only) so class means stay apart
    // and a linear probe can separate wide-margin data.
    const double theta = std::numbers::pi * k / spec.num_classes;
    const double freq = 2.0 + k % 3;
    const double cx = std::cos(theta), sx = std::sin(theta);
    for (int s = 0; s < per_class; ++s) {
      out.labels.push_back(k);
      const double jitter = rng.uniform(-0.3, 0.3);
      for (int c = 0; c < C; ++c) {
        const double phase = jitter + 2.0 * std::numbers::pi * c / C;
        for (int y = 0; y < S; ++y) {
          for (int x = 0; x < S; ++x) {
            const double u = (cx * x + sx * y) / S;
            const double signal = std::sin(2.0 * std::numbers::pi * freq * u + phase);
            const double noise = (rng.uniform() - 0.5) * 2.0 * kNoiseAmp;
            const double v = 128.0 + spec.margin * 64.0 * signal + noise;
            out.pixels.push_back(static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0)));
          }
        }
      }
    }
  }
}

}  // namespace

Dataset synth_generate(const SyntheticSpec& spec) {
  if (spec.num_classes < 2 || spec.train_per_class < 1 || spec.test_per_class < 1 ||
      spec.image_size < 4 || spec.channels < 1 || !(spec.margin > 0.0f))
    throw ConfigError("invalid synthetic dataset spec");
  Dataset ds;
  Rng train_rng = substream(spec.seed, "synth/train");
  Rng test_rng = substream(spec.seed, "synth/test");
  synth_fill(ds.train, spec, spec.train_per_class, train_rng);
  synth_fill(ds.test, spec, spec.test_per_class, test_rng);
  return ds;
}

std::vector<Batch> make_batches(const LabeledImages& data, int batch_size, std::uint64_t seed,
                                int epoch) {
  if (batch_size <= 0 || batch_size > data.n)
    throw ConfigError("batch_size must lie in [1, " + std::to_string(data.n) + "]");
  std::vector<int> order(static_cast<std::size_t>(data.n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = substream(seed ^ (static_cast<std::uint64_t>(epoch) * 0x9e3779b97f4a7c15ULL), "data");
  rng.shuffle(order);

  const std::size_t img = data.bytes_per_image();
  std::vector<Batch> batches;
  for (int at = 0; at < data.n; at += batch_size) {
    const int B = std::min(batch_size, data.n - at);
    Batch batch;
    batch.x = Tensor({B, data.c, data.h, data.w});
    batch.labels.resize(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      const int idx = order[static_cast<std::size_t>(at + b)];
      batch.labels[static_cast<std::size_t>(b)] = data.labels[static_cast<std::size_t>(idx)];
      const std::uint8_t* px = data.pixels.data() + static_cast<std::size_t>(idx) * img;
      float* dst = batch.x.data() + static_cast<std::int64_t>(b) * static_cast<std::int64_t>(img);
      for (std::size_t i = 0; i < img; ++i) dst[i] = static_cast<float>(px[i]) / 255.0f;
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

Batch full_batch(const LabeledImages& data) {
  Batch batch;
  batch.x = Tensor({data.n, data.c, data.h, data.w});
  batch.labels = data.labels;
  for (std::size_t i = 0; i < data.pixels.size(); ++i)
    batch.x[static_cast<std::int64_t>(i)] = static_cast<float>(data.pixels[i]) / 255.0f;
  return batch;
}

std::uint32_t dataset_checksum(const Dataset& data) {
  std::uint32_t crc = static_cast<std::uint32_t>(crc32(0L, Z_NULL, 0));
  auto feed = [&crc](const LabeledImages& split) {
    crc = static_cast<std::uint32_t>(
        crc32(crc, split.pixels.data(), static_cast<uInt>(split.pixels.size())));
    for (int lab : split.labels) {
      const auto b = static_cast<std::uint8_t>(lab);
      crc = static_cast<std::uint32_t>(crc32(crc, &b, 1));
    }
  };
  feed(data.train);
  feed(data.test);
  return crc;
}

}  // namespace pqd
