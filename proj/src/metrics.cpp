#include "pqd/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "pqd/errors.hpp"

namespace pqd {

namespace {

template <typename T>
inline void do_not_optimize(const T& value) {
  asm volatile("" : : "g"(value) : "memory");
}

}  // namespace

LatencyReport measure_latency(const std::function<void()>& forward, int warmups, int repeats,
                              int threads, const std::string& batch_desc) {
  if (repeats < 2) throw ConfigError("latency measurement needs repeats >= 2");
  if (warmups < 0) throw ConfigError("warmups must be non-negative");
  LatencyReport rep;
  rep.warmup_count = warmups;
  rep.repeat_count = repeats;
  rep.thread_count = threads;
  rep.batch_desc = batch_desc;
  for (int i = 0; i < warmups; ++i) forward();
  rep.samples_ms.reserve(static_cast<std::size_t>(repeats));
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = clock::now();
    forward();
    const auto t1 = clock::now();
    rep.samples_ms.push_back(
        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count() / 1e6);
  }
  double mean = 0.0;
  for (double s : rep.samples_ms) mean += s;
  mean /= repeats;
  double var = 0.0;
  for (double s : rep.samples_ms) var += (s - mean) * (s - mean);
  var /= (repeats - 1);
  rep.mean_ms = mean;
  rep.std_ms = std::sqrt(var);
  rep.cv = mean > 0.0 ? rep.std_ms / mean : 0.0;
  return rep;
}

LatencyReport measure_model_latency(const Model& model, const Tensor& batch, int warmups,
                                    int repeats, ThreadPool* pool) {
  std::ostringstream desc;
  desc << shape_str(batch.shape()) << (model.converted() ? " int8" : " fp32");
  const int threads = pool ? pool->thread_count() : 1;
  float sink = 0.0f;
  auto forward = [&] {
    const Tensor out = model.converted() ? model.forward_int8(batch, pool)
                                         : model.forward_eval(batch, pool);
    sink += out[0];
    do_not_optimize(sink);
  };
  return measure_latency(forward, warmups, repeats, threads, desc.str());
}

double evaluate_accuracy(const Model& model, const LabeledImages& data, ThreadPool* pool,
                         int batch_size) {
  if (data.n == 0) throw ConfigError("cannot evaluate accuracy on an empty dataset");
  std::int64_t correct = 0;
  const std::size_t img = data.bytes_per_image();
  for (int at = 0; at < data.n; at += batch_size) {
    const int B = std::min(batch_size, data.n - at);
    Tensor x({B, data.c, data.h, data.w});
    for (int b = 0; b < B; ++b) {
      const std::uint8_t* px = data.pixels.data() + static_cast<std::size_t>(at + b) * img;
      float* dst = x.data() + static_cast<std::int64_t>(b) * static_cast<std::int64_t>(img);
      for (std::size_t i = 0; i < img; ++i) dst[i] = static_cast<float>(px[i]) / 255.0f;
    }
    const Tensor logits = model.converted() ? model.forward_int8(x, pool)
                                            : model.forward_eval(x, pool);
    const int K = logits.dim(1);
    for (int b = 0; b < B; ++b) {
      const float* row = logits.data() + static_cast<std::int64_t>(b) * K;
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (row[k] > row[best]) best = k;
      if (best == data.labels[static_cast<std::size_t>(at + b)]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.n);
}

double rel_bops(int w_bits, int a_bits, double sparsity, int baseline_bits) {
  if (w_bits <= 0 || a_bits <= 0 || baseline_bits <= 0)
    throw ConfigError("bit widths must be positive");
  if (sparsity < 0.0 || sparsity >= 1.0) throw ConfigError("sparsity must lie in [0, 1)");
  return 100.0 * (static_cast<double>(w_bits) * a_bits) /
         (static_cast<double>(baseline_bits) * baseline_bits) * (1.0 - sparsity);
}

namespace {

ClassCurves binary_curves(std::vector<std::pair<float, bool>>& items) {
  ClassCurves out;
  std::int64_t P = 0;
  for (const auto& [s, pos] : items)
    if (pos) ++P;
  const std::int64_t N = static_cast<std::int64_t>(items.size()) - P;
  if (P == 0 || N == 0) {
    out.defined = false;
    return out;
  }
  std::sort(items.begin(), items.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  out.roc.push_back({0.0, 0.0});
  std::int64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < items.size();) {
    // Consume every item sharing this score: thresholds sweep unique values.
    const float threshold = items[i].first;
    while (i < items.size() && items[i].first == threshold) {
      if (items[i].second)
        ++tp;
      else
        ++fp;
      ++i;
    }
    const double tpr = static_cast<double>(tp) / static_cast<double>(P);
    const double fpr = static_cast<double>(fp) / static_cast<double>(N);
    const double prec = static_cast<double>(tp) / static_cast<double>(tp + fp);
    out.roc.push_back({fpr, tpr});
    out.pr.push_back({tpr, prec});
  }
  // Anchor the PR curve at recall 0 with the precision of the first cut.
  out.pr.insert(out.pr.begin(), {0.0, out.pr.front().y});
  auto trapezoid = [](const std::vector<CurvePoint>& pts) {
    double auc = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i)
      auc += (pts[i].x - pts[i - 1].x) * (pts[i].y + pts[i - 1].y) * 0.5;
    return auc;
  };
  out.roc_auc = trapezoid(out.roc);
  out.pr_auc = trapezoid(out.pr);
  return out;
}

}  // namespace

RocPrReport roc_pr_curves(const Tensor& scores, const std::vector<int>& labels) {
  if (scores.ndim() != 2) throw InvariantError("scores must be [N,K]");
  const int N = scores.dim(0), K = scores.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw InvariantError("label count does not match score rows");
  for (int i = 0; i < N; ++i) {
    double row = 0.0;
    for (int k = 0; k < K; ++k) row += scores[static_cast<std::int64_t>(i) * K + k];
    if (std::fabs(row - 1.0) > 1e-5)
      throw InvariantError("score row " + std::to_string(i) + " sums to " + std::to_string(row) +
                           ", expected probabilities");
  }
  RocPrReport rep;
  std::vector<std::pair<float, bool>> pooled;
  pooled.reserve(static_cast<std::size_t>(N) * K);
  for (int k = 0; k < K; ++k) {
    std::vector<std::pair<float, bool>> items;
    items.reserve(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
      const bool pos = labels[static_cast<std::size_t>(i)] == k;
      items.emplace_back(scores[static_cast<std::int64_t>(i) * K + k], pos);
      pooled.emplace_back(scores[static_cast<std::int64_t>(i) * K + k], pos);
    }
    rep.per_class.push_back(binary_curves(items));
  }
  rep.micro = binary_curves(pooled);
  return rep;
}

std::vector<TradeoffRecord> pareto_frontier(const std::vector<TradeoffRecord>& records) {
  if (records.empty()) throw ConfigError("pareto frontier of an empty record set");
  auto dominates = [](const TradeoffRecord& a, const TradeoffRecord& b) {
    const bool geq = a.accuracy_pct >= b.accuracy_pct && a.size_bytes <= b.size_bytes &&
                     a.latency.mean_ms <= b.latency.mean_ms;
    const bool strict = a.accuracy_pct > b.accuracy_pct || a.size_bytes < b.size_bytes ||
                        a.latency.mean_ms < b.latency.mean_ms;
    return geq && strict;
  };
  std::vector<TradeoffRecord> front;
  for (std::size_t i = 0; i < records.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < records.size() && !dominated; ++j)
      if (j != i && dominates(records[j], records[i])) dominated = true;
    if (!dominated) front.push_back(records[i]);
  }
  return front;
}

namespace {

void check_same_threads(const std::vector<TradeoffRecord>& records) {
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].latency.thread_count != records[0].latency.thread_count)
      throw ConfigError("refusing to merge records measured under different thread counts (" +
                        std::to_string(records[0].latency.thread_count) + " vs " +
                        std::to_string(records[i].latency.thread_count) + ")");
  }
}

std::string fixed2(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << v;
  return os.str();
}

}  // namespace

std::string render_report(const std::vector<TradeoffRecord>& records, ReportFormat format) {
  check_same_threads(records);
  if (format == ReportFormat::Csv) {
    std::ostringstream os;
    os << "method,acc_pct,nonzeros,size_mb,compr_x,lat_ms_mean,lat_ms_std,speedup_x,rel_bops_pct\n";
    for (const TradeoffRecord& r : records) {
      os << r.method << ',' << fixed2(r.accuracy_pct) << ',' << r.nonzero_params << ','
         << fixed2(r.size_mb()) << ',' << fixed2(r.compression_x) << ','
         << fixed2(r.latency.mean_ms) << ',' << fixed2(r.latency.std_ms) << ','
         << fixed2(r.speedup_x) << ',' << fixed2(r.rel_bops_pct) << '\n';
    }
    return os.str();
  }
  nlohmann::json arr = nlohmann::json::array();
  for (const TradeoffRecord& r : records) {
    arr.push_back({{"method", r.method},
                   {"acc_pct", r.accuracy_pct},
                   {"nonzeros", r.nonzero_params},
                   {"size_mb", r.size_mb()},
                   {"size_bytes", r.size_bytes},
                   {"compr_x", r.compression_x},
                   {"lat_ms_mean", r.latency.mean_ms},
                   {"lat_ms_std", r.latency.std_ms},
                   {"lat_cv", r.latency.cv},
                   {"speedup_x", r.speedup_x},
                   {"rel_bops_pct", r.rel_bops_pct},
                   {"threads", r.latency.thread_count},
                   {"budget_violation", r.budget_violation}});
  }
  return arr.dump(2) + "\n";
}

void emit_report(const std::vector<TradeoffRecord>& records, ReportFormat format,
                 const std::filesystem::path& path) {
  const std::string text = render_report(records, format);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write report to " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void write_curve(const std::vector<CurvePoint>& points, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write curve to " + path.string());
  for (const CurvePoint& p : points) out << p.x << ' ' << p.y << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace pqd
