#include "pqd/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "pqd/errors.hpp"
#include "pqd/prune.hpp"
#include "pqd/rng.hpp"

namespace pqd {

void validate(const StagePlan& plan) {
  validate(plan.train);
  int total = 0;
  bool seen[3] = {false, false, false};
  for (const Stage& s : plan.stages) {
    if (s.epochs < 0) throw ConfigError("stage epochs must be non-negative");
    const auto k = static_cast<std::size_t>(s.kind);
    if (seen[k]) throw ConfigError("stage kind '" + stage_name(s.kind) + "' appears twice");
    seen[k] = true;
    if (s.kind == StageKind::Prune && (s.rho < 0.0f || s.rho >= 1.0f))
      throw ConfigError("prune sparsity must lie in [0, 1)");
    if (s.kind == StageKind::Kd) validate(s.kd);
    total += s.epochs;
  }
  if (plan.total_budget >= 0 && total > plan.total_budget)
    throw ConfigError("stage epochs sum to " + std::to_string(total) +
                      ", exceeding the total budget " + std::to_string(plan.total_budget));
}

namespace {

[[noreturn]] void parse_fail(std::size_t pos, const std::string& msg) {
  throw ConfigError("order string position " + std::to_string(pos) + ": " + msg);
}

double parse_number(const std::string& tok, std::size_t pos, const char* what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    parse_fail(pos, std::string("expected ") + what + ", got '" + tok + "'");
  }
  if (used != tok.size()) parse_fail(pos, std::string("trailing junk after ") + what + " in '" + tok + "'");
  return v;
}

int parse_epochs(const std::string& tok, std::size_t pos) {
  const double v = parse_number(tok, pos, "an epoch count");
  if (v < 0 || v != std::floor(v)) parse_fail(pos, "epoch count must be a non-negative integer");
  return static_cast<int>(v);
}

}  // namespace

std::vector<Stage> parse_order(const std::string& text) {
  std::vector<Stage> stages;
  std::size_t at = 0;
  while (at <= text.size()) {
    const std::size_t comma = std::min(text.find(',', at), text.size());
    const std::string token = text.substr(at, comma - at);
    if (token.empty()) parse_fail(at, "empty stage token");
    std::vector<std::string> parts;
    std::size_t p = 0;
    while (p <= token.size()) {
      const std::size_t colon = std::min(token.find(':', p), token.size());
      parts.push_back(token.substr(p, colon - p));
      p = colon + 1;
    }
    Stage s;
    if (parts[0] == "prune") {
      if (parts.size() != 3) parse_fail(at, "prune takes prune:<rho>:<epochs>");
      s.kind = StageKind::Prune;
      const double rho = parse_number(parts[1], at, "a sparsity");
      if (rho < 0.0 || rho >= 1.0) parse_fail(at, "sparsity must lie in [0, 1)");
      s.rho = static_cast<float>(rho);
      s.epochs = parse_epochs(parts[2], at);
    } else if (parts[0] == "qat") {
      if (parts.size() != 2) parse_fail(at, "qat takes qat:<epochs>");
      s.kind = StageKind::Qat;
      s.epochs = parse_epochs(parts[1], at);
    } else if (parts[0] == "kd") {
      s.kind = StageKind::Kd;
      if (parts.size() == 2) {
        s.epochs = parse_epochs(parts[1], at);
      } else if (parts.size() == 4) {
        s.kd.alpha = static_cast<float>(parse_number(parts[1], at, "an alpha"));
        s.kd.temperature = static_cast<float>(parse_number(parts[2], at, "a temperature"));
        validate(s.kd);
        s.epochs = parse_epochs(parts[3], at);
      } else {
        parse_fail(at, "kd takes kd:<epochs> or kd:<alpha>:<temperature>:<epochs>");
      }
    } else {
      parse_fail(at, "unknown stage '" + parts[0] + "' (expected prune, qat or kd)");
    }
    for (const Stage& prev : stages)
      if (prev.kind == s.kind) parse_fail(at, "stage '" + parts[0] + "' appears twice");
    stages.push_back(s);
    if (comma == text.size()) break;
    at = comma + 1;
  }
  if (stages.empty()) throw ConfigError("order string is empty");
  return stages;
}

std::string order_name(const std::vector<Stage>& stages) {
  std::string name;
  for (const Stage& s : stages) {
    if (!name.empty()) name += "-";
    name += stage_name(s.kind);
  }
  return name;
}

Model train_baseline(const ModelDesc& desc, const LabeledImages& train, const TrainConfig& cfg,
                     const EpochHook& hook) {
  validate(cfg);
  Model model = Model::build(desc, cfg.seed);
  SgdOptimizer opt;
  run_epochs(train, cfg, cfg.total_epochs,
             [&](const Batch& b, int e) { return train_step(model, b, opt, cfg, e); }, hook);
  return model;
}

namespace {

void calibration_forward(Model& model, const Batch& batch) {
  Tape tape;
  model.forward(tape, tape.input(batch.x), /*update_observers=*/true);
  tape.clear();
}

void check_stage_invariants(const Model& model) {
  if (model.mask()) {
    const PruneMask& mask = *model.mask();
    for (std::size_t pi = 0; pi < model.params.size(); ++pi) {
      const BitMask& m = mask.per_param[pi];
      if (m.empty()) continue;
      const Parameter& p = model.params[pi];
      for (std::int64_t i = 0; i < p.value.size(); ++i)
        if (!m.get(i) && p.value[i] != 0.0f)
          throw InvariantError("pruned coordinate drifted from zero in " + p.name);
    }
  }
  if (model.on_grid()) {
    for (const Layer& L : model.layers) {
      if (L.kind != LayerKind::Conv && L.kind != LayerKind::Linear) continue;
      const Parameter& w = model.params[static_cast<std::size_t>(L.weight)];
      const FakeQuantNode& fq = L.q.weight_fq;
      for (std::int64_t i = 0; i < w.value.size(); ++i) {
        const float snapped = dequantize(quantize(w.value[i], fq.qp), fq.qp);
        if (snapped != w.value[i])
          throw InvariantError("weight left the quantization grid in " + w.name);
      }
    }
  }
}

}  // namespace

void run_stage(Model& model, const Stage& stage, const LabeledImages& train_data,
               const TrainConfig& base_cfg, const TeacherRef* teacher, const EpochHook& hook) {
  if (stage.epochs < 0) throw ConfigError("stage epochs must be non-negative");
  TrainConfig cfg = base_cfg;
  cfg.total_epochs = std::max(stage.epochs, 1);
  SgdOptimizer opt;
  StageEvent ev;
  ev.kind = stage.kind;
  ev.epochs = stage.epochs;

  switch (stage.kind) {
    case StageKind::Prune: {
      if (stage.rho < 0.0f || stage.rho >= 1.0f) throw ConfigError("prune sparsity must lie in [0, 1)");
      ev.rho = stage.rho;
      // On an integer-grid model the master weights are the dequantized
      // values, so the global threshold already ranks dequantized magnitudes.
      const GlobalThreshold th = compute_global_threshold(model.params, stage.rho);
      model.attach_mask(build_mask(model.params, th, stage.rho));
      run_epochs(train_data, cfg, stage.epochs,
                 [&](const Batch& b, int e) {
                   return model.quant_active() ? qat_train_step(model, b, opt, cfg, e)
                                               : masked_train_step(model, b, opt, cfg, e);
                 },
                 hook);
      if (model.quant_active()) model.convert_and_snap();
      break;
    }
    case StageKind::Qat: {
      if (model.quant_active())
        throw InvariantError("quantization stage rejected: conversion already done");
      model.enable_quantization();
      if (stage.epochs == 0)
        calibration_forward(model, make_batches(train_data, cfg.batch_size, cfg.seed, 0).front());
      run_epochs(train_data, cfg, stage.epochs,
                 [&](const Batch& b, int e) { return qat_train_step(model, b, opt, cfg, e); },
                 hook);
      model.convert_and_snap();
      break;
    }
    case StageKind::Kd: {
      if (!teacher) throw ConfigError("distillation stage requires a teacher checkpoint");
      if (teacher->model().desc.num_classes != model.desc.num_classes)
        throw ConfigError("teacher and student disagree on class count");
      validate(stage.kd);
      ev.alpha = stage.kd.alpha;
      ev.temperature = stage.kd.temperature;
      run_epochs(train_data, cfg, stage.epochs,
                 [&](const Batch& b, int e) {
                   return kd_train_step(model, *teacher, b, opt, cfg, e, stage.kd);
                 },
                 hook);
      if (model.quant_active()) model.convert_and_snap();
      break;
    }
  }
  model.history.push_back(ev);
  check_stage_invariants(model);
}

void calibrate_minmax(Model& model, const std::vector<Batch>& batches) {
  if (batches.empty()) throw ConfigError("calibration needs at least one batch");
  if (!model.quant_active()) model.enable_quantization();
  model.input_obs = Observer{Observer::Mode::MinMax};
  for (Layer& L : model.layers) {
    if (L.kind != LayerKind::Conv && L.kind != LayerKind::Linear) continue;
    L.q.act_obs = Observer{Observer::Mode::MinMax};
  }
  for (const Batch& b : batches) calibration_forward(model, b);
}

namespace {

Tensor bench_batch_from(const LabeledImages& data, int batch) {
  const int B = std::min(batch, data.n);
  Tensor x({B, data.c, data.h, data.w});
  const std::size_t img = data.bytes_per_image();
  for (int b = 0; b < B; ++b) {
    const std::uint8_t* px = data.pixels.data() + static_cast<std::size_t>(b) * img;
    float* dst = x.data() + static_cast<std::int64_t>(b) * static_cast<std::int64_t>(img);
    for (std::size_t i = 0; i < img; ++i) dst[i] = static_cast<float>(px[i]) / 255.0f;
  }
  return x;
}

TradeoffRecord evaluate_model(Model& model, const Checkpoint& ckpt, const Dataset& data,
                              const PipelineOptions& opts, const std::string& method) {
  TradeoffRecord rec;
  rec.method = method;
  rec.accuracy_pct = ckpt.metrics.has_accuracy ? ckpt.metrics.accuracy_pct
                                               : evaluate_accuracy(model, data.test, opts.pool);
  rec.nonzero_params = count_nonzero(ckpt);
  rec.size_bytes = serialize(ckpt).size();
  const double sparsity = model.mask() ? static_cast<double>(model.mask()->achieved_sparsity()) : 0.0;
  const int bits = model.on_grid() ? 8 : 32;
  rec.rel_bops_pct = rel_bops(bits, bits, sparsity);
  if (opts.measure_latency) {
    const Tensor batch = bench_batch_from(data.test, opts.bench_batch);
    rec.latency = measure_model_latency(model, batch, opts.bench_warmups, opts.bench_repeats,
                                        opts.pool);
  } else {
    rec.latency.thread_count = opts.pool ? opts.pool->thread_count() : 1;
  }
  return rec;
}

}  // namespace

PipelineResult run_pipeline(const StagePlan& plan, const Checkpoint& baseline, const Dataset& data,
                            const PipelineOptions& opts) {
  validate(plan);
  Model model = restore(baseline);
  std::optional<TeacherRef> teacher;
  for (const Stage& s : plan.stages)
    if (s.kind == StageKind::Kd && !teacher) teacher.emplace(restore(baseline));

  std::ostringstream epoch_csv;
  epoch_csv << "stage,epoch,mean_loss\n";
  for (const Stage& s : plan.stages) {
    TrainConfig cfg = plan.train;
    // Named sub-stream per stage kind: stages reproduce independently of
    // their position in the order.
    cfg.seed = substream_seed(plan.seed, "stage/" + stage_name(s.kind));
    run_stage(model, s, data.train, cfg, teacher ? &*teacher : nullptr,
              [&](int e, float loss) {
                epoch_csv << stage_name(s.kind) << ',' << e << ',' << loss << '\n';
              });
  }

  MetricsSnapshot ms;
  ms.has_accuracy = true;
  ms.accuracy_pct = evaluate_accuracy(model, data.test, opts.pool);
  ms.nonzeros = count_nonzero(snapshot(model));
  Checkpoint final_ckpt = snapshot(model, ms);

  PipelineResult res;
  const std::string method =
      opts.method_name.empty() ? (plan.stages.empty() ? "baseline" : order_name(plan.stages))
                               : opts.method_name;
  res.record = evaluate_model(model, final_ckpt, data, opts, method);

  Model base_model = restore(baseline);
  res.baseline_record = evaluate_model(base_model, baseline, data, opts, "baseline");
  res.baseline_record.compression_x = 1.0;
  res.baseline_record.speedup_x = 1.0;

  res.record.compression_x =
      static_cast<double>(res.baseline_record.size_bytes) / static_cast<double>(res.record.size_bytes);
  if (opts.measure_latency && res.record.latency.mean_ms > 0.0)
    res.record.speedup_x = res.baseline_record.latency.mean_ms / res.record.latency.mean_ms;
  if (plan.latency_budget_ms && opts.measure_latency)
    res.record.budget_violation = res.record.latency.mean_ms > *plan.latency_budget_ms;

  res.final_ckpt = std::move(final_ckpt);

  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    save_checkpoint(res.final_ckpt, opts.out_dir / "ckpt.pqdk");
    std::ofstream mcsv(opts.out_dir / "metrics.csv", std::ios::trunc);
    if (!mcsv) throw IoError("cannot write " + (opts.out_dir / "metrics.csv").string());
    mcsv << epoch_csv.str();
  }
  return res;
}

std::vector<std::string> default_ablation_orders() {
  return {"prune-qat-kd", "prune-kd-qat", "qat-prune-kd", "qat-kd-prune"};
}

std::vector<std::string> all_ablation_orders() {
  return {"prune-qat-kd", "prune-kd-qat", "qat-prune-kd",
          "qat-kd-prune", "kd-prune-qat", "kd-qat-prune"};
}

namespace {

std::vector<Stage> stages_for_order(const std::string& order, const std::vector<Stage>& configs) {
  std::vector<Stage> stages;
  std::size_t at = 0;
  while (at <= order.size()) {
    const std::size_t dash = std::min(order.find('-', at), order.size());
    const std::string name = order.substr(at, dash - at);
    StageKind kind;
    if (name == "prune")
      kind = StageKind::Prune;
    else if (name == "qat")
      kind = StageKind::Qat;
    else if (name == "kd")
      kind = StageKind::Kd;
    else
      throw ConfigError("unknown stage '" + name + "' in order '" + order + "'");
    for (const Stage& s : stages)
      if (s.kind == kind) throw ConfigError("order '" + order + "' repeats stage '" + name + "'");
    const auto it = std::find_if(configs.begin(), configs.end(),
                                 [&](const Stage& s) { return s.kind == kind; });
    if (it == configs.end())
      throw ConfigError("no stage config provided for '" + name + "'");
    stages.push_back(*it);
    if (dash == order.size()) break;
    at = dash + 1;
  }
  if (stages.size() != configs.size())
    throw ConfigError("order '" + order + "' does not use every configured stage");
  return stages;
}

}  // namespace

AblationResult ablate_orderings(const Checkpoint& baseline, const std::vector<std::string>& orders,
                                const std::vector<Stage>& stage_configs,
                                const std::vector<std::uint64_t>& seeds, const Dataset& data,
                                const TrainConfig& train_cfg, const PipelineOptions& opts,
                                int jobs) {
  if (orders.empty()) throw ConfigError("no orders to ablate");
  if (seeds.empty()) throw ConfigError("need at least one seed");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");

  struct Task {
    std::string order;
    std::uint64_t seed;
    StagePlan plan;
    PipelineResult result;
    Model model;  // kept for the sequential latency phase
  };
  std::vector<Task> tasks;
  for (const std::string& order : orders) {
    const std::vector<Stage> stages = stages_for_order(order, stage_configs);
    for (std::uint64_t seed : seeds) {
      Task t;
      t.order = order;
      t.seed = seed;
      t.plan.stages = stages;
      t.plan.seed = seed;
      t.plan.train = train_cfg;
      tasks.push_back(std::move(t));
    }
  }
  // Training phase: runs share nothing and may fan out; latency measurement
  // stays off here so timed sections never overlap.
  PipelineOptions train_opts = opts;
  train_opts.measure_latency = false;
  train_opts.pool = nullptr;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      Task& t = tasks[i];
      PipelineOptions run_opts = train_opts;
      if (!opts.out_dir.empty())
        run_opts.out_dir = opts.out_dir / t.order / std::to_string(t.seed);
      run_opts.method_name = t.order;
      t.result = run_pipeline(t.plan, baseline, data, run_opts);
      t.model = restore(t.result.final_ckpt);
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }

  // Exclusive latency phase.
  if (opts.measure_latency) {
    const Tensor batch = bench_batch_from(data.test, opts.bench_batch);
    Model base_model = restore(baseline);
    const LatencyReport base_lat = measure_model_latency(base_model, batch, opts.bench_warmups,
                                                         opts.bench_repeats, opts.pool);
    for (Task& t : tasks) {
      t.result.record.latency = measure_model_latency(t.model, batch, opts.bench_warmups,
                                                      opts.bench_repeats, opts.pool);
      t.result.record.speedup_x = base_lat.mean_ms / t.result.record.latency.mean_ms;
      t.result.baseline_record.latency = base_lat;
    }
  }

  AblationResult out;
  for (Task& t : tasks)
    out.runs.push_back(AblationRun{t.order, t.seed, t.result.record});

  for (const std::string& order : orders) {
    AblationSummary s;
    s.order = order;
    std::vector<double> accs, lats;
    std::uint64_t size0 = 0;
    bool first = true;
    for (const AblationRun& r : out.runs) {
      if (r.order != order) continue;
      accs.push_back(r.record.accuracy_pct);
      lats.push_back(r.record.latency.mean_ms);
      if (first) {
        size0 = r.record.size_bytes;
        first = false;
      } else if (r.record.size_bytes != size0) {
        s.sizes_identical = false;
      }
    }
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(accs.size());
    double var = 0.0;
    for (double a : accs) var += (a - mean) * (a - mean);
    s.mean_acc = mean;
    s.std_acc = accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) : 0.0;
    s.mean_lat_ms = 0.0;
    s.min_lat_ms = lats.empty() ? 0.0 : *std::min_element(lats.begin(), lats.end());
    s.max_lat_ms = lats.empty() ? 0.0 : *std::max_element(lats.begin(), lats.end());
    for (double l : lats) s.mean_lat_ms += l;
    if (!lats.empty()) s.mean_lat_ms /= static_cast<double>(lats.size());
    s.size_bytes = size0;
    out.summaries.push_back(s);
  }
  for (std::size_t i = 1; i < out.summaries.size(); ++i)
    if (out.summaries[i].size_bytes != out.summaries[0].size_bytes ||
        !out.summaries[i].sizes_identical || !out.summaries[0].sizes_identical)
      out.sizes_identical_across_orders = false;
  return out;
}

void write_manifest(const std::filesystem::path& path,
                    const std::vector<std::pair<std::string, std::string>>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest to " + path.string());
  for (const auto& [key, value] : entries) out << key << " = " << value << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace pqd
