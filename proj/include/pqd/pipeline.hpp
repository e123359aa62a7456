#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pqd/checkpoint.hpp"
#include "pqd/data.hpp"
#include "pqd/distill.hpp"
#include "pqd/metrics.hpp"
#include "pqd/nn.hpp"
#include "pqd/optim.hpp"
#include "pqd/train.hpp"

namespace pqd {

/// One compression stage with its epoch budget and stage-specific config.
struct Stage {
  StageKind kind = StageKind::Prune;
  int epochs = 0;
  float rho = 0.5f;  // Prune
  KDConfig kd;       // Kd
};

/// Ordered stage recipe. Each stage kind appears at most once; the sum of
/// stage epochs may not exceed total_budget when one is set.
struct StagePlan {
  std::vector<Stage> stages;
  int total_budget = -1;  // -1: unconstrained
  std::uint64_t seed = 0;
  std::optional<double> latency_budget_ms;
  TrainConfig train;  // lr / momentum / batch size shared by stages
};

void validate(const StagePlan& plan);

/// Parses the order grammar `stage[:param...]:epochs`, comma separated:
/// prune:<rho>:<epochs> | qat:<epochs> | kd:<epochs> |
/// kd:<alpha>:<temperature>:<epochs>. Reports the character position of
/// the offending token on error.
std::vector<Stage> parse_order(const std::string& text);
std::string order_name(const std::vector<Stage>& stages);

/// Trains a dense FP32 baseline (the teacher / reference point).
Model train_baseline(const ModelDesc& desc, const LabeledImages& train, const TrainConfig& cfg,
                     const EpochHook& hook = nullptr);

/// Executes one stage in place: Prune builds and attaches the global
/// magnitude mask then fine-tunes under it; Qat enables fake-quant, trains,
/// and converts; Kd distills from the teacher in the model's current
/// compressed state. Models that are already on the integer grid are
/// re-converted at the end of any stage that touched the weights.
void run_stage(Model& model, const Stage& stage, const LabeledImages& train_data,
               const TrainConfig& base_cfg, const TeacherRef* teacher,
               const EpochHook& hook = nullptr);

/// Post-training calibration: swaps every range observer to min/max mode
/// and feeds the calibration batches through the forward path. Rejects an
/// empty batch set. Follow with convert_and_snap() for a training-free
/// integer model.
void calibrate_minmax(Model& model, const std::vector<Batch>& batches);

struct PipelineOptions {
  ThreadPool* pool = nullptr;
  int bench_warmups = 10;
  int bench_repeats = 100;
  int bench_batch = 128;
  bool measure_latency = true;
  std::filesystem::path out_dir;  // when set: ckpt.pqdk, manifest.txt, metrics.csv
  std::string method_name;
};

struct PipelineResult {
  Checkpoint final_ckpt;
  TradeoffRecord record;
  TradeoffRecord baseline_record;
};

/// Runs the stages of `plan` over a trained baseline and evaluates the
/// result in the accuracy-size-latency space. An empty plan returns the
/// baseline unchanged. A latency budget violation sets a flag on the
/// record; it is not an error.
PipelineResult run_pipeline(const StagePlan& plan, const Checkpoint& baseline, const Dataset& data,
                            const PipelineOptions& opts = {});

struct AblationRun {
  std::string order;
  std::uint64_t seed = 0;
  TradeoffRecord record;
};

struct AblationSummary {
  std::string order;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  double mean_lat_ms = 0.0;
  double min_lat_ms = 0.0;
  double max_lat_ms = 0.0;
  std::uint64_t size_bytes = 0;
  bool sizes_identical = true;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<AblationSummary> summaries;  // one per order, input order
  bool sizes_identical_across_orders = true;
};

/// The four stage orders of the reference ablation.
std::vector<std::string> default_ablation_orders();
/// All six permutations.
std::vector<std::string> all_ablation_orders();

/// Runs every (order, seed) combination with identical stage configs and
/// budgets. Orders must be permutations of the same stage set. Training may
/// fan out over `jobs` workers; latency is measured sequentially afterwards
/// so timed sections never share the machine.
AblationResult ablate_orderings(const Checkpoint& baseline, const std::vector<std::string>& orders,
                                const std::vector<Stage>& stage_configs,
                                const std::vector<std::uint64_t>& seeds, const Dataset& data,
                                const TrainConfig& train_cfg, const PipelineOptions& opts = {},
                                int jobs = 1);

/// Plain key = value text, one pair per line, deterministic order.
void write_manifest(const std::filesystem::path& path,
                    const std::vector<std::pair<std::string, std::string>>& entries);

inline constexpr const char* kArtifactVersion = "1.0.0";

}  // namespace pqd
