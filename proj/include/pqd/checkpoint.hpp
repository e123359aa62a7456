#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "pqd/errors.hpp"
#include "pqd/nn.hpp"
#include "pqd/prune.hpp"
#include "pqd/quant.hpp"

namespace pqd {

/// On-disk model container. Little-endian, magic "PQDK", version u16, then
/// a section table (topology / masks / payloads / qparams / history /
/// metrics) followed by a trailing CRC32 over everything before it.
/// Serialization is byte-deterministic: save(load(file)) == file.

enum class PayloadKind : std::uint8_t {
  DenseF32 = 0,       // full float values
  MaskedF32 = 1,      // kept float values only; mask supplies positions
  QuantU8 = 2,        // full 8-bit codes + affine params
  MaskedQuantU8 = 3,  // kept 8-bit codes only; pruned positions read as zero-point
  BiasI32 = 4,        // 32-bit integer bias codes at scale bias_scale
};

struct ParamPayload {
  PayloadKind kind = PayloadKind::DenseF32;
  std::vector<int> shape;
  std::vector<float> fvalues;
  QuantParams qp;
  std::vector<std::uint8_t> codes;
  std::vector<std::int32_t> ivalues;
  double bias_scale = 0.0;
};

struct ObserverState {
  std::uint8_t mode = 0;  // 0 MinMax, 1 Ema
  float decay = 0.99f;
  float min = 0.0f;
  float max = 0.0f;
  bool seen = false;
};

struct SiteQuant {
  ObserverState obs;
  QuantParams qp;
};

struct MetricsSnapshot {
  bool has_accuracy = false;
  double accuracy_pct = 0.0;
  std::int64_t nonzeros = 0;
};

struct Checkpoint {
  ModelDesc desc;
  bool quant_active = false;
  bool on_grid = false;
  std::optional<PruneMask> mask;
  std::vector<ParamPayload> payloads;
  SiteQuant input_site;
  std::vector<SiteQuant> act_sites;  // one per conv/linear layer
  std::vector<StageEvent> history;
  MetricsSnapshot metrics;

  std::int64_t ft_epochs() const;
};

/// Load-failure kinds are distinct so callers can tell a wrong file from a
/// damaged one.
class CheckpointError : public IoError {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, ChecksumMismatch, Malformed };

  CheckpointError(Kind kind, const std::string& msg) : IoError(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

Checkpoint snapshot(const Model& model, MetricsSnapshot metrics = {});
Model restore(const Checkpoint& ckpt);

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Non-zero parameter count: dense payloads count values != 0, quantized
/// payloads count codes != zero-point.
std::int64_t count_nonzero(const Checkpoint& ckpt);

}  // namespace pqd
