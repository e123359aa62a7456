#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pqd/tensor.hpp"

namespace pqd {

/// Label-annotated u8 image set, [N x C x H x W] row-major pixel bytes.
struct LabeledImages {
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  int n = 0, c = 0, h = 0, w = 0;
  int num_classes = 0;

  std::size_t bytes_per_image() const { return static_cast<std::size_t>(c) * h * w; }
};

struct Dataset {
  LabeledImages train;
  LabeledImages test;
};

/// Standard CIFAR-10 binary layout: data_batch_{1..5}.bin + test_batch.bin,
/// 10000 records each, one record = 1 label byte + 3072 pixel bytes
/// (1024 R, 1024 G, 1024 B, row-major). Loaded in file order, no shuffling.
Dataset load_cifar10_binary(const std::filesystem::path& dir);

/// Serializes images back to the CIFAR-10 record layout (fixture round-trip
/// and checksum support).
std::vector<std::uint8_t> to_cifar_records(const LabeledImages& data);

/// Seeded synthetic image-classification task: each class is a distinct
/// oriented sinusoidal grating, margin scales the signal over the seeded
/// pixel noise. Train and test draw from disjoint noise sub-streams.
struct SyntheticSpec {
  int num_classes = 4;
  int train_per_class = 64;
  int test_per_class = 32;
  int channels = 3;
  int image_size = 16;
  float margin = 1.0f;
  std::uint64_t seed = 0;
};

Dataset synth_generate(const SyntheticSpec& spec);

struct Batch {
  Tensor x;                 // [B,C,H,W] floats in [0,1]
  std::vector<int> labels;  // size B
};

/// Deterministic shuffled batches for one epoch: the permutation is a pure
/// function of (seed, epoch), the last partial batch is kept, and u8 pixels
/// are normalized to [0,1] floats at batch time.
std::vector<Batch> make_batches(const LabeledImages& data, int batch_size, std::uint64_t seed,
                                int epoch);

/// Whole split as a single normalized batch in stored order.
Batch full_batch(const LabeledImages& data);

/// CRC32 of pixels and labels; identifies the dataset in run manifests.
std::uint32_t dataset_checksum(const Dataset& data);

}  // namespace pqd
