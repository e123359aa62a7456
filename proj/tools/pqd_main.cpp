// Command-line surface for the compression toolkit: baseline training, the
// ordered prune/quantize/distill pipeline, the stage-order ablation runner,
// the CPU latency harness and report aggregation.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pqd/checkpoint.hpp"
#include "pqd/data.hpp"
#include "pqd/errors.hpp"
#include "pqd/metrics.hpp"
#include "pqd/pipeline.hpp"
#include "pqd/rng.hpp"

namespace fs = std::filesystem;
using namespace pqd;

namespace {

struct DataOptions {
  std::string source = "synth";  // "synth" or a CIFAR-10 binary directory
  int classes = 4;
  int train_per_class = 64;
  int test_per_class = 32;
  int image_size = 16;
  float margin = 1.5f;
  std::uint64_t data_seed = 42;
};

void add_data_flags(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--data", d.source,
                  "'synth' or a directory with CIFAR-10 binary batches");
  cmd->add_option("--classes", d.classes, "synthetic: number of classes");
  cmd->add_option("--train-per-class", d.train_per_class, "synthetic: training samples per class");
  cmd->add_option("--test-per-class", d.test_per_class, "synthetic: test samples per class");
  cmd->add_option("--image-size", d.image_size, "synthetic: square image extent");
  cmd->add_option("--margin", d.margin, "synthetic: class separation margin");
  cmd->add_option("--data-seed", d.data_seed, "synthetic: dataset seed");
}

Dataset load_data(const DataOptions& d) {
  if (d.source == "synth") {
    SyntheticSpec spec;
    spec.num_classes = d.classes;
    spec.train_per_class = d.train_per_class;
    spec.test_per_class = d.test_per_class;
    spec.image_size = d.image_size;
    spec.margin = d.margin;
    spec.seed = d.data_seed;
    return synth_generate(spec);
  }
  return load_cifar10_binary(d.source);
}

int resolve_threads(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("PQD_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 1;
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

using ManifestEntries = std::vector<std::pair<std::string, std::string>>;

ManifestEntries base_manifest(const std::string& command_line, std::uint64_t seed, int threads,
                              const Dataset* data) {
  ManifestEntries m;
  m.emplace_back("artifact_version", kArtifactVersion);
  m.emplace_back("command", command_line);
  m.emplace_back("seed", std::to_string(seed));
  m.emplace_back("threads", std::to_string(threads));
  if (data) m.emplace_back("dataset_checksum", hex32(dataset_checksum(*data)));
  return m;
}

void append_train_config(ManifestEntries& m, const TrainConfig& cfg) {
  m.emplace_back("epochs", std::to_string(cfg.total_epochs));
  m.emplace_back("base_lr", std::to_string(cfg.base_lr));
  m.emplace_back("momentum", std::to_string(cfg.momentum));
  m.emplace_back("batch_size", std::to_string(cfg.batch_size));
}

void append_data_config(ManifestEntries& m, const DataOptions& d) {
  m.emplace_back("data", d.source);
  if (d.source == "synth") {
    m.emplace_back("classes", std::to_string(d.classes));
    m.emplace_back("train_per_class", std::to_string(d.train_per_class));
    m.emplace_back("test_per_class", std::to_string(d.test_per_class));
    m.emplace_back("image_size", std::to_string(d.image_size));
    m.emplace_back("margin", std::to_string(d.margin));
    m.emplace_back("data_seed", std::to_string(d.data_seed));
  }
}

TradeoffRecord record_from_json(const nlohmann::json& j) {
  TradeoffRecord r;
  r.method = j.at("method").get<std::string>();
  r.accuracy_pct = j.at("acc_pct").get<double>();
  r.nonzero_params = j.at("nonzeros").get<std::int64_t>();
  r.size_bytes = j.at("size_bytes").get<std::uint64_t>();
  r.latency.mean_ms = j.at("lat_ms_mean").get<double>();
  r.latency.std_ms = j.at("lat_ms_std").get<double>();
  r.latency.cv = j.value("lat_cv", 0.0);
  r.latency.thread_count = j.at("threads").get<int>();
  r.compression_x = j.at("compr_x").get<double>();
  r.speedup_x = j.at("speedup_x").get<double>();
  r.rel_bops_pct = j.at("rel_bops_pct").get<double>();
  r.budget_violation = j.value("budget_violation", false);
  return r;
}

void write_single_record_json(const TradeoffRecord& rec, const fs::path& path) {
  emit_report({rec}, ReportFormat::Json, path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural-network compression toolkit: ordered pruning, INT8 "
               "quantization-aware training and distillation with measured-latency reporting"};
  app.require_subcommand(1);
  const std::string command_line = join_args(argc, argv);

  // ---- train-baseline ----
  auto* cmd_train = app.add_subcommand("train-baseline", "Train the dense FP32 teacher");
  DataOptions train_data;
  std::string train_arch = "smallconv";
  TrainConfig train_cfg;
  train_cfg.total_epochs = 8;
  std::uint64_t train_seed = 1;
  std::string train_out;
  int train_threads = 0;
  add_data_flags(cmd_train, train_data);
  cmd_train->add_option("--arch", train_arch, "mlp | smallconv");
  cmd_train->add_option("--epochs", train_cfg.total_epochs, "training epochs (0: save init only)");
  cmd_train->add_option("--lr", train_cfg.base_lr, "base learning rate (cosine decayed)");
  cmd_train->add_option("--momentum", train_cfg.momentum, "SGD momentum");
  cmd_train->add_option("--batch", train_cfg.batch_size, "batch size");
  cmd_train->add_option("--seed", train_seed, "run seed");
  cmd_train->add_option("--threads", train_threads, "worker threads (env PQD_THREADS fallback)");
  cmd_train->add_option("--out", train_out, "output checkpoint path")->required();

  // ---- pipeline ----
  auto* cmd_pipe = app.add_subcommand("pipeline", "Run an ordered compression stage plan");
  DataOptions pipe_data;
  std::string pipe_baseline, pipe_order = "prune:0.5:20,qat:40,kd:40", pipe_out;
  std::uint64_t pipe_seed = 1;
  int pipe_threads = 0, pipe_budget = -1;
  double pipe_latency_budget = 0.0;
  TrainConfig pipe_cfg;
  int pipe_bench_repeats = 100, pipe_bench_warmups = 10, pipe_bench_batch = 128;
  add_data_flags(cmd_pipe, pipe_data);
  cmd_pipe->add_option("--baseline", pipe_baseline, "baseline (teacher) checkpoint")->required();
  cmd_pipe->add_option("--order", pipe_order,
                       "stage plan, e.g. prune:0.5:20,qat:40,kd:40");
  cmd_pipe->add_option("--seed", pipe_seed, "run seed");
  cmd_pipe->add_option("--budget", pipe_budget, "total epoch budget (-1: unconstrained)");
  cmd_pipe->add_option("--latency-budget-ms", pipe_latency_budget,
                       "flag the record when measured latency exceeds this");
  cmd_pipe->add_option("--lr", pipe_cfg.base_lr, "base learning rate per stage");
  cmd_pipe->add_option("--momentum", pipe_cfg.momentum, "SGD momentum");
  cmd_pipe->add_option("--batch", pipe_cfg.batch_size, "batch size");
  cmd_pipe->add_option("--threads", pipe_threads, "worker threads (env PQD_THREADS fallback)");
  cmd_pipe->add_option("--repeats", pipe_bench_repeats, "latency repeats");
  cmd_pipe->add_option("--warmups", pipe_bench_warmups, "latency warm-up runs");
  cmd_pipe->add_option("--bench-batch", pipe_bench_batch, "latency batch size");
  cmd_pipe->add_option("--out", pipe_out, "output run directory")->required();

  // ---- ablate ----
  auto* cmd_ablate = app.add_subcommand("ablate", "Stage-order permutation study");
  DataOptions abl_data;
  std::string abl_baseline, abl_orders = "default4", abl_out;
  int abl_seeds = 5, abl_threads = 0, abl_jobs = 1;
  float abl_rho = 0.5f;
  int abl_prune_epochs = 2, abl_qat_epochs = 4, abl_kd_epochs = 4;
  float abl_alpha = 0.5f, abl_temp = 4.0f;
  std::uint64_t abl_seed0 = 1;
  TrainConfig abl_cfg;
  int abl_bench_repeats = 100, abl_bench_warmups = 10, abl_bench_batch = 128;
  add_data_flags(cmd_ablate, abl_data);
  cmd_ablate->add_option("--baseline", abl_baseline, "baseline checkpoint")->required();
  cmd_ablate->add_option("--orders", abl_orders,
                         "default4 | all6 | comma list like prune-qat-kd,qat-kd-prune");
  cmd_ablate->add_option("--seeds", abl_seeds, "number of seeds (seed0, seed0+1, ...)");
  cmd_ablate->add_option("--seed0", abl_seed0, "first seed");
  cmd_ablate->add_option("--rho", abl_rho, "prune sparsity");
  cmd_ablate->add_option("--prune-epochs", abl_prune_epochs, "prune stage budget");
  cmd_ablate->add_option("--qat-epochs", abl_qat_epochs, "quantization stage budget");
  cmd_ablate->add_option("--kd-epochs", abl_kd_epochs, "distillation stage budget");
  cmd_ablate->add_option("--kd-alpha", abl_alpha, "distillation alpha");
  cmd_ablate->add_option("--kd-temp", abl_temp, "distillation temperature");
  cmd_ablate->add_option("--lr", abl_cfg.base_lr, "base learning rate per stage");
  cmd_ablate->add_option("--batch", abl_cfg.batch_size, "batch size");
  cmd_ablate->add_option("--jobs", abl_jobs, "parallel training workers");
  cmd_ablate->add_option("--threads", abl_threads, "worker threads for measurement");
  cmd_ablate->add_option("--repeats", abl_bench_repeats, "latency repeats");
  cmd_ablate->add_option("--warmups", abl_bench_warmups, "latency warm-up runs");
  cmd_ablate->add_option("--bench-batch", abl_bench_batch, "latency batch size");
  cmd_ablate->add_option("--out", abl_out, "output directory")->required();

  // ---- bench ----
  auto* cmd_bench = app.add_subcommand("bench", "Measure checkpoint latency");
  DataOptions bench_data;
  std::string bench_ckpt, bench_ref, bench_out;
  int bench_batch = 128, bench_threads = 0, bench_warmups = 10, bench_repeats = 100;
  add_data_flags(cmd_bench, bench_data);
  cmd_bench->add_option("--ckpt", bench_ckpt, "checkpoint to measure")->required();
  cmd_bench->add_option("--baseline", bench_ref, "reference checkpoint for speedup/compression");
  cmd_bench->add_option("--batch", bench_batch, "batch size");
  cmd_bench->add_option("--threads", bench_threads, "worker threads (env PQD_THREADS fallback)");
  cmd_bench->add_option("--warmups", bench_warmups, "warm-up runs");
  cmd_bench->add_option("--repeats", bench_repeats, "timed repeats");
  cmd_bench->add_option("--out", bench_out, "output csv path")->required();

  // ---- report ----
  auto* cmd_report = app.add_subcommand("report", "Aggregate run records");
  std::string rep_runs, rep_format = "csv", rep_out;
  bool rep_pareto = false;
  cmd_report->add_option("--runs", rep_runs, "directory scanned for record.json files")->required();
  cmd_report->add_option("--format", rep_format, "csv | json");
  cmd_report->add_flag("--pareto", rep_pareto, "keep only the accuracy/size/latency frontier");
  cmd_report->add_option("--out", rep_out, "output path")->required();

  try {
    app.parse(argc, argv);

    if (*cmd_train) {
      const int threads = resolve_threads(train_threads);
      train_cfg.seed = train_seed;
      const Dataset data = load_data(train_data);
      ModelDesc desc;
      desc.arch = arch_from_name(train_arch);
      desc.in_c = data.train.c;
      desc.in_h = data.train.h;
      desc.in_w = data.train.w;
      desc.num_classes = data.train.num_classes;
      Model model = Model::build(desc, train_cfg.seed);
      if (train_cfg.total_epochs > 0) {
        TrainConfig cfg = train_cfg;
        SgdOptimizer opt;
        run_epochs(data.train, cfg, cfg.total_epochs,
                   [&](const Batch& b, int e) { return train_step(model, b, opt, cfg, e); },
                   [&](int e, float loss) {
                     std::cout << "epoch " << e << " mean_loss " << loss << '\n';
                   });
      }
      MetricsSnapshot ms;
      ms.has_accuracy = true;
      ms.accuracy_pct = evaluate_accuracy(model, data.test);
      ms.nonzeros = count_nonzero(snapshot(model));
      const fs::path out_path(train_out);
      if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
      save_checkpoint(snapshot(model, ms), out_path);
      ManifestEntries m = base_manifest(command_line, train_cfg.seed, threads, &data);
      m.emplace_back("arch", train_arch);
      append_train_config(m, train_cfg);
      append_data_config(m, train_data);
      write_manifest(out_path.string() + ".manifest.txt", m);
      std::cout << "baseline accuracy " << ms.accuracy_pct << "% -> " << train_out << '\n';
      return 0;
    }

    if (*cmd_pipe) {
      const int threads = resolve_threads(pipe_threads);
      ThreadPool pool(threads);
      const Dataset data = load_data(pipe_data);
      const Checkpoint baseline = load_checkpoint(pipe_baseline);
      StagePlan plan;
      plan.stages = parse_order(pipe_order);
      plan.seed = pipe_seed;
      plan.total_budget = pipe_budget;
      plan.train = pipe_cfg;
      plan.train.seed = pipe_seed;
      if (pipe_latency_budget > 0.0) plan.latency_budget_ms = pipe_latency_budget;
      PipelineOptions opts;
      opts.pool = &pool;
      opts.bench_repeats = pipe_bench_repeats;
      opts.bench_warmups = pipe_bench_warmups;
      opts.bench_batch = pipe_bench_batch;
      opts.out_dir = pipe_out;
      const PipelineResult res = run_pipeline(plan, baseline, data, opts);
      emit_report({res.baseline_record, res.record}, ReportFormat::Csv,
                  fs::path(pipe_out) / "records.csv");
      write_single_record_json(res.record, fs::path(pipe_out) / "record.json");
      ManifestEntries m = base_manifest(command_line, pipe_seed, threads, &data);
      m.emplace_back("baseline", pipe_baseline);
      m.emplace_back("order", pipe_order);
      m.emplace_back("total_budget", std::to_string(pipe_budget));
      append_train_config(m, plan.train);
      append_data_config(m, pipe_data);
      write_manifest(fs::path(pipe_out) / "manifest.txt", m);
      std::cout << render_report({res.baseline_record, res.record}, ReportFormat::Csv);
      if (res.record.budget_violation)
        std::cout << "note: measured latency exceeded the latency budget\n";
      return 0;
    }

    if (*cmd_ablate) {
      const int threads = resolve_threads(abl_threads);
      ThreadPool pool(threads);
      const Dataset data = load_data(abl_data);
      const Checkpoint baseline = load_checkpoint(abl_baseline);
      std::vector<std::string> orders;
      if (abl_orders == "default4")
        orders = default_ablation_orders();
      else if (abl_orders == "all6")
        orders = all_ablation_orders();
      else {
        std::stringstream ss(abl_orders);
        std::string tok;
        while (std::getline(ss, tok, ','))
          if (!tok.empty()) orders.push_back(tok);
      }
      std::vector<Stage> configs(3);
      configs[0].kind = StageKind::Prune;
      configs[0].rho = abl_rho;
      configs[0].epochs = abl_prune_epochs;
      configs[1].kind = StageKind::Qat;
      configs[1].epochs = abl_qat_epochs;
      configs[2].kind = StageKind::Kd;
      configs[2].epochs = abl_kd_epochs;
      configs[2].kd = KDConfig{abl_alpha, abl_temp};
      std::vector<std::uint64_t> seeds;
      for (int i = 0; i < abl_seeds; ++i) seeds.push_back(abl_seed0 + static_cast<std::uint64_t>(i));
      PipelineOptions opts;
      opts.pool = &pool;
      opts.bench_repeats = abl_bench_repeats;
      opts.bench_warmups = abl_bench_warmups;
      opts.bench_batch = abl_bench_batch;
      opts.out_dir = abl_out;
      const AblationResult res =
          ablate_orderings(baseline, orders, configs, seeds, data, abl_cfg, opts, abl_jobs);

      std::vector<TradeoffRecord> all;
      for (const AblationRun& r : res.runs) {
        TradeoffRecord rec = r.record;
        rec.method = r.order + "/seed" + std::to_string(r.seed);
        all.push_back(rec);
      }
      emit_report(all, ReportFormat::Csv, fs::path(abl_out) / "records.csv");
      std::ofstream summary(fs::path(abl_out) / "summary.csv", std::ios::trunc);
      if (!summary) throw IoError("cannot write " + (fs::path(abl_out) / "summary.csv").string());
      summary << "order,mean_acc,std_acc,size_bytes,sizes_identical,lat_ms_mean,lat_ms_min,lat_ms_max\n";
      for (const AblationSummary& s : res.summaries) {
        summary << s.order << ',' << s.mean_acc << ',' << s.std_acc << ',' << s.size_bytes << ','
                << (s.sizes_identical ? 1 : 0) << ',' << s.mean_lat_ms << ',' << s.min_lat_ms
                << ',' << s.max_lat_ms << '\n';
      }
      summary.close();
      ManifestEntries m = base_manifest(command_line, abl_seed0, threads, &data);
      m.emplace_back("baseline", abl_baseline);
      m.emplace_back("orders", abl_orders);
      m.emplace_back("seeds", std::to_string(abl_seeds));
      m.emplace_back("rho", std::to_string(abl_rho));
      m.emplace_back("budgets", std::to_string(abl_prune_epochs) + "/" +
                                    std::to_string(abl_qat_epochs) + "/" +
                                    std::to_string(abl_kd_epochs));
      append_data_config(m, abl_data);
      write_manifest(fs::path(abl_out) / "manifest.txt", m);
      for (const AblationSummary& s : res.summaries)
        std::cout << s.order << " mean_acc " << s.mean_acc << " std " << s.std_acc << " size "
                  << s.size_bytes << (res.sizes_identical_across_orders ? "" : " (size mismatch!)")
                  << '\n';
      return 0;
    }

    if (*cmd_bench) {
      const int threads = resolve_threads(bench_threads);
      ThreadPool pool(threads);
      const Dataset data = load_data(bench_data);
      const Checkpoint ckpt = load_checkpoint(bench_ckpt);
      Model model = restore(ckpt);
      Tensor batch;
      {
        const int B = std::min(bench_batch, data.test.n);
        const std::size_t img = data.test.bytes_per_image();
        batch = Tensor({B, data.test.c, data.test.h, data.test.w});
        for (int b = 0; b < B; ++b) {
          const std::uint8_t* px = data.test.pixels.data() + static_cast<std::size_t>(b) * img;
          for (std::size_t i = 0; i < img; ++i)
            batch[static_cast<std::int64_t>(b * img + i)] = static_cast<float>(px[i]) / 255.0f;
        }
      }
      TradeoffRecord rec;
      rec.method = fs::path(bench_ckpt).stem().string();
      rec.accuracy_pct = evaluate_accuracy(model, data.test, &pool);
      rec.nonzero_params = count_nonzero(ckpt);
      rec.size_bytes = serialize(ckpt).size();
      rec.latency = measure_model_latency(model, batch, bench_warmups, bench_repeats, &pool);
      const double sparsity =
          model.mask() ? static_cast<double>(model.mask()->achieved_sparsity()) : 0.0;
      rec.rel_bops_pct = rel_bops(model.on_grid() ? 8 : 32, model.on_grid() ? 8 : 32, sparsity);
      std::vector<TradeoffRecord> rows;
      if (!bench_ref.empty()) {
        const Checkpoint refc = load_checkpoint(bench_ref);
        Model ref = restore(refc);
        TradeoffRecord ref_rec;
        ref_rec.method = fs::path(bench_ref).stem().string();
        ref_rec.accuracy_pct = evaluate_accuracy(ref, data.test, &pool);
        ref_rec.nonzero_params = count_nonzero(refc);
        ref_rec.size_bytes = serialize(refc).size();
        ref_rec.latency = measure_model_latency(ref, batch, bench_warmups, bench_repeats, &pool);
        ref_rec.rel_bops_pct = rel_bops(ref.on_grid() ? 8 : 32, ref.on_grid() ? 8 : 32, 0.0);
        rec.speedup_x = ref_rec.latency.mean_ms / rec.latency.mean_ms;
        rec.compression_x =
            static_cast<double>(ref_rec.size_bytes) / static_cast<double>(rec.size_bytes);
        rows.push_back(ref_rec);
      }
      rows.push_back(rec);
      const fs::path out_path(bench_out);
      if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
      emit_report(rows, ReportFormat::Csv, out_path);
      ManifestEntries m = base_manifest(command_line, 0, threads, &data);
      m.emplace_back("ckpt", bench_ckpt);
      m.emplace_back("batch", std::to_string(bench_batch));
      m.emplace_back("warmups", std::to_string(bench_warmups));
      m.emplace_back("repeats", std::to_string(bench_repeats));
      write_manifest(out_path.string() + ".manifest.txt", m);
      std::cout << render_report(rows, ReportFormat::Csv);
      std::cout << "cv " << rec.latency.cv << '\n';
      return 0;
    }

    if (*cmd_report) {
      std::vector<TradeoffRecord> records;
      if (!fs::exists(rep_runs)) throw IoError("runs directory not found: " + rep_runs);
      std::vector<fs::path> files;
      for (const auto& entry : fs::recursive_directory_iterator(rep_runs))
        if (entry.is_regular_file() && entry.path().filename() == "record.json")
          files.push_back(entry.path());
      std::sort(files.begin(), files.end());
      for (const fs::path& f : files) {
        std::ifstream in(f);
        if (!in) throw IoError("cannot read " + f.string());
        nlohmann::json j = nlohmann::json::parse(in);
        for (const auto& item : j) records.push_back(record_from_json(item));
      }
      if (rep_pareto && !records.empty()) records = pareto_frontier(records);
      const ReportFormat format = rep_format == "json" ? ReportFormat::Json : ReportFormat::Csv;
      if (rep_format != "json" && rep_format != "csv")
        throw ConfigError("format must be csv or json");
      const fs::path out_path(rep_out);
      if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
      emit_report(records, format, out_path);
      ManifestEntries m = base_manifest(command_line, 0, 1, nullptr);
      m.emplace_back("runs", rep_runs);
      m.emplace_back("format", rep_format);
      m.emplace_back("pareto", rep_pareto ? "true" : "false");
      write_manifest(out_path.string() + ".manifest.txt", m);
      std::cout << "aggregated " << records.size() << " records -> " << rep_out << '\n';
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the parse diagnostic
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 3;
  } catch (const InvariantError& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
