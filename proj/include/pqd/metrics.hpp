#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pqd/checkpoint.hpp"
#include "pqd/data.hpp"
#include "pqd/nn.hpp"
#include "pqd/threadpool.hpp"

namespace pqd {

/// Wall-time statistics of repeated forward passes on one fixed batch.
struct LatencyReport {
  std::vector<double> samples_ms;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double cv = 0.0;
  int warmup_count = 0;
  int repeat_count = 0;
  int thread_count = 1;
  std::string batch_desc;
};

/// One evaluated model in the joint accuracy-size-latency space.
struct TradeoffRecord {
  std::string method;
  double accuracy_pct = 0.0;
  std::int64_t nonzero_params = 0;
  std::uint64_t size_bytes = 0;
  LatencyReport latency;
  double compression_x = 1.0;
  double speedup_x = 1.0;
  double rel_bops_pct = 100.0;
  bool budget_violation = false;  // measured latency above the plan's budget

  double size_mb() const { return static_cast<double>(size_bytes) / (1024.0 * 1024.0); }
};

/// Runs `warmups` untimed forwards then `repeats` timed ones on the same
/// pre-materialized batch, reading a monotonic nanosecond clock around each
/// call. Rejects repeats < 2 (no variance estimate).
LatencyReport measure_latency(const std::function<void()>& forward, int warmups, int repeats,
                              int threads, const std::string& batch_desc);

/// Latency of a model forward on one batch; uses the integer path when the
/// model is converted, the plain float path otherwise.
LatencyReport measure_model_latency(const Model& model, const Tensor& batch, int warmups,
                                    int repeats, ThreadPool* pool);

/// Top-1 accuracy (%) over the whole split in deterministic order.
double evaluate_accuracy(const Model& model, const LabeledImages& data, ThreadPool* pool = nullptr,
                         int batch_size = 256);

/// 100 * (w_bits * a_bits) / baseline_bits^2 * (1 - sparsity).
double rel_bops(int w_bits, int a_bits, double sparsity, int baseline_bits = 32);

/// One-vs-rest ROC and precision-recall curves per class from probability
/// scores, trapezoidal AUC; classes absent from the labels report
/// defined = false. A micro-averaged summary pools every (score, hit) pair.
struct CurvePoint {
  double x = 0.0;  // ROC: FPR, PR: recall
  double y = 0.0;  // ROC: TPR, PR: precision
};

struct ClassCurves {
  bool defined = true;
  std::vector<CurvePoint> roc;
  std::vector<CurvePoint> pr;
  double roc_auc = 0.0;
  double pr_auc = 0.0;
};

struct RocPrReport {
  std::vector<ClassCurves> per_class;
  ClassCurves micro;
};

RocPrReport roc_pr_curves(const Tensor& scores, const std::vector<int>& labels);

/// Records not dominated in (accuracy up, size down, latency down); input
/// order preserved.
std::vector<TradeoffRecord> pareto_frontier(const std::vector<TradeoffRecord>& records);

enum class ReportFormat { Csv, Json };

/// Deterministic column order: method, acc_pct, nonzeros, size_mb, compr_x,
/// lat_ms_mean, lat_ms_std, speedup_x, rel_bops_pct. CSV rounds floats to
/// two decimals; JSON keeps full precision. Refuses to merge records
/// measured under different thread counts.
void emit_report(const std::vector<TradeoffRecord>& records, ReportFormat format,
                 const std::filesystem::path& path);
std::string render_report(const std::vector<TradeoffRecord>& records, ReportFormat format);

/// Whitespace-separated x/y curve file (plotting).
void write_curve(const std::vector<CurvePoint>& points, const std::filesystem::path& path);

}  // namespace pqd
