// SPDX-License-Identifier: Apache-2.0
//
// tlora: command-line driver for data generation, calibration, adapter
// initialization, training, analysis and the ablation matrix.
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tlora/analysis.hpp"
#include "tlora/config.hpp"
#include "tlora/experiment.hpp"
#include "tlora/io.hpp"

namespace fs = std::filesystem;
using namespace tlora;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

io::Meta meta_for(const RunConfig& cfg, std::uint64_t seed) {
  return {seed, config_hash(cfg), io::kFormatVersion};
}

void ensure_parent(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::ofstream open_out(const std::string& path) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kInvalidInput, "cannot write '" + path + "'");
  return out;
}

void write_json(const std::string& path, const io::Json& j) {
  ensure_parent(path);
  io::write_json_file(path, j);
}

GeneratedTask load_task(const std::string& path) { return io::dataset_from_json(io::read_json_file(path)); }

int cmd_gen_data(const RunConfig& cfg, const std::string& out) {
  const GeneratedTask task = gen_task(cfg.task);
  write_json(out, io::dataset_to_json(task, cfg, meta_for(cfg, cfg.task.seed)));
  std::cout << "wrote " << out << " (" << task.train.x.rows() << " train rows, " << task.calib.size()
            << " calibration samples)\n";
  return kExitOk;
}

int cmd_calibrate(const RunConfig& cfg, const std::string& data, const std::string& out) {
  const GeneratedTask task = load_task(data);
  const CalibrationStats stats = calibrate_task(task, cfg);
  write_json(out, io::stats_to_json(stats, meta_for(cfg, cfg.task.seed)));
  for (const auto& m : stats.modules) std::cout << m.name << " S=" << io::format_double(m.importance) << "\n";
  return kExitOk;
}

int cmd_init(const RunConfig& cfg, const std::string& data, const std::string& stats_path,
             const std::string& out, const std::string& plan_out) {
  const GeneratedTask task = load_task(data);
  const VariantSpec variant = variant_from_config(cfg);
  std::optional<CalibrationStats> stats;
  if (!stats_path.empty()) {
    stats = io::stats_from_json(io::read_json_file(stats_path));
  } else if (needs_calibration(variant)) {
    stats = calibrate_task(task, cfg);
  }
  const InitResult init = init_variant(task, stats ? &*stats : nullptr, cfg, variant, cfg.train.seed);
  io::Checkpoint ckpt{meta_for(cfg, cfg.train.seed), task.base, init.adapters};
  write_json(out, io::checkpoint_to_json(ckpt));
  if (!plan_out.empty()) write_json(plan_out, io::plan_to_json(init.plan));
  std::cout << "wrote " << out << ", trainable params " << trainable_params(init.adapters) << "\n";
  for (const auto& m : init.plan.modules) {
    std::cout << "  " << m.name << " r=" << m.rank << " alpha=" << io::format_double(m.alpha) << "\n";
  }
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, const std::string& data, const std::string& ckpt_path,
              const std::string& metrics, const std::string& out) {
  const GeneratedTask task = load_task(data);
  io::Checkpoint ckpt = io::checkpoint_from_json(io::read_json_file(ckpt_path));
  TrainResult tr = train_loop(ckpt.net, ckpt.adapters, task.train, cfg.train);
  const std::string hash = config_hash(cfg);
  {
    std::ofstream m = open_out(metrics);
    io::write_metrics_csv(m, tr.history, hash);
  }
  ckpt.meta = meta_for(cfg, cfg.train.seed);
  write_json(out, io::checkpoint_to_json(ckpt));
  if (tr.failure) {
    std::cerr << "numerical failure: " << *tr.failure << " (partial outputs written)\n";
    return kExitNumerical;
  }
  const AdapterSet* ad = cfg.train.mode == TrainMode::kFullFt ? nullptr : &ckpt.adapters;
  std::cout << "final train-batch loss " << io::format_double(tr.history.back().loss) << ", test loss "
            << io::format_double(evaluate(ckpt.net, ad, task.test)) << "\n";
  return kExitOk;
}

int cmd_analyze(const RunConfig& cfg, const std::string& data, const std::string& stats_path,
                const std::string& diff_path, const std::string& prefix) {
  const GeneratedTask task = load_task(data);
  const CalibrationStats stats = stats_path.empty()
                                     ? calibrate_task(task, cfg)
                                     : io::stats_from_json(io::read_json_file(stats_path));
  // Full fine-tuning on the calibration samples defines the reference update.
  Batch calib_data;
  const std::size_t n = std::min(cfg.calib.n_samples, task.calib.size());
  std::size_t rows = 0;
  for (std::size_t i = 0; i < n; ++i) rows += static_cast<std::size_t>(task.calib[i].x.rows());
  calib_data.x.resize(static_cast<Eigen::Index>(rows), task.calib[0].x.cols());
  calib_data.y.resize(static_cast<Eigen::Index>(rows), task.calib[0].y.cols());
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto h = task.calib[i].x.rows();
    calib_data.x.middleRows(at, h) = task.calib[i].x;
    calib_data.y.middleRows(at, h) = task.calib[i].y;
    at += h;
  }
  const std::vector<Matrix> deltas = full_finetune_delta(task.base, calib_data, cfg.train);
  analysis::AlignmentReport report =
      analysis::alignment_report(task.base, stats, deltas, cfg.adapter.r_init, cfg.adapter.eps);
  report.delta_source = "full_ft on " + std::to_string(n) + " calibration samples (" +
                        std::to_string(rows) + " rows), steps=" + std::to_string(cfg.train.steps) +
                        ", optimizer=" + std::string(to_string(cfg.train.optimizer.kind)) +
                        ", lr=" + io::format_double(cfg.train.lr);
  const std::string hash = config_hash(cfg);
  {
    std::ofstream csv = open_out(prefix + ".csv");
    io::write_report_csv(csv, report, hash);
  }
  write_json(prefix + ".json", io::report_to_json(report, meta_for(cfg, cfg.task.seed)));
  if (!diff_path.empty()) {
    const CalibrationStats other = io::stats_from_json(io::read_json_file(diff_path));
    std::ofstream csv = open_out(prefix + ".importance_diff.csv");
    csv << "# config_hash=" << hash << "\nmodule,importance_diff\n";
    for (const auto& [name, d] : analysis::importance_diff(stats, other)) {
      csv << name << ',' << io::format_double(d) << "\n";
    }
  }
  for (const auto& l : report.layers) {
    std::cout << l.layer << " phi(proxy,delta)=" << io::format_double(l.phi_proxy_delta)
              << " phi(WC,WC^1/2)=" << io::format_double(l.phi_approx_theory)
              << (l.near_degenerate ? " [near-degenerate]" : "") << "\n";
  }
  return kExitOk;
}

int cmd_compare(const RunConfig& cfg, std::string out_dir) {
  if (out_dir.empty()) out_dir = cfg.output.dir;
  const std::string hash = config_hash(cfg);
  const std::vector<VariantOutcome> outcomes = run_compare(cfg);
  fs::create_directories(fs::path(out_dir) / "runs");
  std::vector<io::CompareRow> rows;
  bool failed = false;
  for (const auto& o : outcomes) {
    rows.push_back(o.row);
    const std::string stem = (fs::path(out_dir) / "runs" /
                              (variant_slug(o.row.variant) + "_seed" + std::to_string(o.row.seed)))
                                 .string();
    {
      std::ofstream m = open_out(stem + ".metrics.csv");
      io::write_metrics_csv(m, o.history, hash);
    }
    write_json(stem + ".ckpt.json", io::checkpoint_to_json(o.final_checkpoint));
    if (o.failure) {
      failed = true;
      std::cerr << o.row.variant << " seed " << o.row.seed << ": " << *o.failure << "\n";
    }
  }
  const std::string summary = (fs::path(out_dir) / "compare.csv").string();
  {
    std::ofstream s = open_out(summary);
    io::write_compare_csv(s, rows, hash);
  }
  io::write_compare_csv(std::cout, rows, hash);
  return failed ? kExitNumerical : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-aware low-rank adaptation laboratory"};
  app.require_subcommand(1);
  std::string config_path, data_path, stats_path, out_path, ckpt_path, metrics_path, plan_path,
      diff_path, out_dir;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic task and dataset");
  gen->add_option("--config", config_path)->required();
  gen->add_option("--out", out_path)->required();

  auto* cal = app.add_subcommand("calibrate", "Run the calibration pass and write stats JSON");
  cal->add_option("--config", config_path)->required();
  cal->add_option("--data", data_path)->required();
  cal->add_option("--out", out_path)->required();

  auto* init = app.add_subcommand("init", "Allocate ranks/scales and write an initial checkpoint");
  init->add_option("--config", config_path)->required();
  init->add_option("--data", data_path)->required();
  init->add_option("--stats", stats_path, "Calibration stats (computed when omitted)");
  init->add_option("--out", out_path)->required();
  init->add_option("--plan", plan_path, "Also write the allocation plan");

  auto* train = app.add_subcommand("train", "Train adapters from a checkpoint");
  train->add_option("--config", config_path)->required();
  train->add_option("--data", data_path)->required();
  train->add_option("--checkpoint", ckpt_path)->required();
  train->add_option("--metrics", metrics_path)->required();
  train->add_option("--out", out_path)->required();

  auto* analyze = app.add_subcommand("analyze", "Subspace alignment report");
  analyze->add_option("--config", config_path)->required();
  analyze->add_option("--data", data_path)->required();
  analyze->add_option("--stats", stats_path);
  analyze->add_option("--diff-stats", diff_path, "Second stats file for an importance diff");
  analyze->add_option("--out-prefix", out_path)->required();

  auto* compare = app.add_subcommand("compare", "Run the ablation matrix");
  compare->add_option("--config", config_path)->required();
  compare->add_option("--out-dir", out_dir, "Defaults to output.dir from the config");

  CLI11_PARSE(app, argc, argv);

  RunConfig cfg;
  try {
    cfg = load_config(config_path);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(cfg, out_path);
    if (*cal) return cmd_calibrate(cfg, data_path, out_path);
    if (*init) return cmd_init(cfg, data_path, stats_path, out_path, plan_path);
    if (*train) return cmd_train(cfg, data_path, ckpt_path, metrics_path, out_path);
    if (*analyze) return cmd_analyze(cfg, data_path, stats_path, diff_path, out_path);
    if (*compare) return cmd_compare(cfg, out_dir);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    switch (e.code()) {
      case ErrorCode::kNumericalFailure: return kExitNumerical;
      case ErrorCode::kInvalidConfig:
      case ErrorCode::kInvalidRank:
      case ErrorCode::kInfeasibleBudget:
      case ErrorCode::kMissingCovariance: return kExitConfig;
      default: return kExitError;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
