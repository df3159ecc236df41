// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "tlora/config.hpp"
#include "tlora/experiment.hpp"
#include "tlora/io.hpp"
#include "tlora/task.hpp"

using namespace tlora;
using oracle::max_abs;
namespace fs = std::filesystem;

namespace {

TaskSpec small_spec() {
  TaskSpec s;
  s.dims = {8, 10, 6};
  s.n_train = 128;
  s.n_test = 64;
  s.n_calib = 4;
  s.calib_rows = 8;
  return s;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(TLORA_TEST_SCRATCH) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TLORA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

const char* kSmallConfig = R"({
  "task": {"dims": [8, 10, 6], "n_train": 128, "n_test": 64, "n_calib": 4, "calib_rows": 8},
  "adapter": {"mode": "tlora", "r_init": 2, "alpha": 4},
  "calib": {"n_samples": 4},
  "train": {"steps": 5, "batch_size": 32, "lr": 0.01}
})";

}  // namespace

TEST_CASE("gen_task: noiseless zero teacher is fit exactly by the base network") {
  TaskSpec s = small_spec();
  s.noise_var = 0.0;
  s.teacher.scale = 0.0;
  const GeneratedTask t = gen_task(s);
  for (const auto& d : t.delta_star) CHECK(max_abs(d) == 0.0);
  CHECK(evaluate(t.base, nullptr, t.train) < 1e-28);
  CHECK(evaluate(t.base, nullptr, t.test) < 1e-28);
}

TEST_CASE("gen_task: identity covariance sample estimate") {
  TaskSpec s = small_spec();
  s.covariance.kind = CovarianceKind::kIdentity;
  s.n_train = 100000;
  s.n_test = 1;
  const GeneratedTask t = gen_task(s);
  CHECK(max_abs(t.population_c - Matrix::Identity(8, 8)) == 0.0);
  const Matrix est = t.train.x.transpose() * t.train.x / static_cast<double>(t.train.x.rows());
  CHECK(max_abs(est - Matrix::Identity(8, 8)) < 0.02);
}

TEST_CASE("gen_task: logspace covariance is returned exactly") {
  const TaskSpec s = small_spec();
  const GeneratedTask t = gen_task(s);
  const Matrix expected = linalg::logspace_covariance(8, s.covariance.lambda_max, s.covariance.lambda_min,
                                                      s.covariance.rotation_seed);
  CHECK(max_abs(t.population_c - expected) == 0.0);
  CHECK(max_abs(t.layer_covariance[0] - expected) == 0.0);
}

TEST_CASE("gen_task: aligned teacher lies in the top-k right singular subspace of W0 C") {
  TaskSpec s = small_spec();
  s.teacher.rank = 2;
  s.teacher.alignment = TeacherAlignment::kAligned;
  const GeneratedTask t = gen_task(s);
  for (std::size_t k = 0; k < t.base.layers.size(); ++k) {
    const Matrix wc = t.base.layers[k].w * t.layer_covariance[k];
    const Matrix p = linalg::rowspace_projector(linalg::top_r_right(wc, 2));
    const Matrix& d = t.delta_star[k];
    CHECK((d - d * p).norm() < 1e-10 * std::max(1.0, d.norm()));
    CHECK(d.norm() > 0.0);
  }
  s.teacher.alignment = TeacherAlignment::kRandom;
  const GeneratedTask r = gen_task(s);
  const Matrix p = linalg::rowspace_projector(linalg::top_r_right(r.base.layers[0].w * r.population_c, 2));
  CHECK((r.delta_star[0] - r.delta_star[0] * p).norm() > 1e-3);
}

TEST_CASE("gen_task: determinism and validation") {
  const GeneratedTask a = gen_task(small_spec());
  const GeneratedTask b = gen_task(small_spec());
  CHECK(max_abs(a.train.x - b.train.x) == 0.0);
  CHECK(max_abs(a.train.y - b.train.y) == 0.0);
  TaskSpec bad = small_spec();
  bad.teacher.rank = 20;
  CHECK_THROWS_AS(gen_task(bad), Error);
  bad = small_spec();
  bad.covariance.lambda_min = 2.0;
  CHECK_THROWS_AS(gen_task(bad), Error);
  bad = small_spec();
  bad.noise_var = -1.0;
  CHECK_THROWS_AS(gen_task(bad), Error);
}

TEST_CASE("gen_task: classification labels are class indices") {
  TaskSpec s = small_spec();
  s.kind = TaskKind::kClassification;
  const GeneratedTask t = gen_task(s);
  REQUIRE(t.train.y.cols() == 1);
  CHECK(t.base.loss == LossKind::kCrossEntropy);
  for (Eigen::Index i = 0; i < t.train.y.rows(); ++i) {
    const double v = t.train.y(i, 0);
    CHECK(v == std::floor(v));
    CHECK(v >= 0);
    CHECK(v < 6);
  }
}

TEST_CASE("config: defaults, normalization and hashing") {
  const RunConfig def = parse_config("{}");
  CHECK(def.train.seed == 42);
  CHECK(def.calib.n_samples == 32);
  CHECK(def.adapter.eps == 1e-6);
  const RunConfig a = parse_config(kSmallConfig);
  CHECK(a.task.dims == std::vector<std::size_t>{8, 10, 6});
  CHECK(a.adapter.r_init == 2);
  const RunConfig again = parse_config(to_json(a).dump());
  CHECK(to_json(again).dump() == to_json(a).dump());
  CHECK(config_hash(again) == config_hash(a));
  CHECK(config_hash(a).size() == 16);
  RunConfig moved = a;
  moved.output.dir = "elsewhere";
  CHECK(config_hash(moved) == config_hash(a));
  moved.train.lr = 0.02;
  CHECK(config_hash(moved) != config_hash(a));
}

TEST_CASE("config: compare variants") {
  CHECK(RunConfig{}.compare.variants.size() == 8);
  CHECK(parse_config("{}").compare.variants.size() == 8);
  CHECK(parse_config(R"({"compare": {"preset": "init_ablation"}})").compare.variants.size() == 3);
  const RunConfig custom = parse_config(
      R"({"compare": {"variants": [{"name": "mine", "init": "w_svd", "adapt_ra": false, "adapt_sa": false, "freeze_a": true}]}})");
  REQUIRE(custom.compare.variants.size() == 1);
  CHECK(custom.compare.preset == "custom");
  const RunConfig again = parse_config(to_json(RunConfig{}).dump());
  CHECK(again.compare.variants.size() == 8);
  CHECK_THROWS_AS(parse_config(R"({"compare": {"variants": []}})"), ConfigError);
}

TEST_CASE("config: errors carry line, column and path") {
  const auto message = [](const std::string& text) -> std::string {
    try {
      parse_config(text, "cfg.json");
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  };
  const std::string unknown = message("{\n  \"train\": {\n    \"lrr\": 0.1\n  }\n}");
  CHECK(unknown.find("cfg.json:3:") == 0);
  CHECK(unknown.find("/train/lrr") != std::string::npos);
  CHECK(message("{\"train\": {\"lr\": \"fast\"}}").find("/train/lr") != std::string::npos);
  CHECK(message("{\"adapter\": {\"mode\": \"dora\"}}").find("/adapter/mode") != std::string::npos);
  CHECK(message("{\"task\": {\"dims\": [4]}}") != "");
  CHECK(message("{ \"train\": ") .find("cfg.json:1:") == 0);
  CHECK(message("{\"adapter\": {\"r_init\": 0}}") != "");
}

TEST_CASE("checkpoint JSON round trip is byte exact and forward-exact") {
  const RunConfig cfg = parse_config(kSmallConfig);
  const GeneratedTask task = gen_task(cfg.task);
  const CalibrationStats stats = calibrate_task(task, cfg);
  VariantOutcome out = run_variant(task, cfg, variant_from_config(cfg), 7);
  const io::Checkpoint& ck = out.final_checkpoint;
  const std::string first = io::checkpoint_to_json(ck).dump(1);
  const io::Checkpoint back = io::checkpoint_from_json(io::Json::parse(first));
  CHECK(io::checkpoint_to_json(back).dump(1) == first);
  const Matrix before = predict(ck.net, task.test.x, &ck.adapters);
  const Matrix after = predict(back.net, task.test.x, &back.adapters);
  CHECK(std::memcmp(before.data(), after.data(), sizeof(double) * before.size()) == 0);

  const io::Json sj = io::stats_to_json(stats, {1, "abc", io::kFormatVersion});
  const CalibrationStats sb = io::stats_from_json(sj);
  CHECK(io::stats_to_json(sb, {1, "abc", io::kFormatVersion}).dump() == sj.dump());
  CHECK(sj.contains("fc1"));
  CHECK(sj["fc1"].contains("s"));
  CHECK(sj["fc1"]["c"].contains("shape"));
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0}) {
    CHECK(std::stod(io::format_double(v)) == v);
  }
}

TEST_CASE("compare: component ablation rows and parameter accounting") {
  RunConfig cfg = parse_config(kSmallConfig);
  cfg.task.dims = {8, 8, 8};
  cfg.compare.seeds = {0, 1};
  const std::vector<VariantOutcome> outs = run_compare(cfg);
  REQUIRE(outs.size() == 16);
  const std::vector<std::string> names{"lora", "+RA", "+SA", "+Init", "+Init+RA", "+Init+SA", "+RA+SA", "tlora"};
  for (std::size_t i = 0; i < outs.size(); ++i) {
    CHECK(outs[i].row.variant == names[i % 8]);
    CHECK(outs[i].row.steps == 5);
  }
  for (std::size_t base = 0; base < outs.size(); base += 8) {
    const auto& lora = outs[base];
    const auto& tl = outs[base + 7];
    std::size_t expected = 0;
    for (const auto& m : tl.plan.modules) expected += 8 * m.rank;
    CHECK(tl.row.trainable_params == expected);
    CHECK(lora.row.trainable_params == 2 * (8 + 8) * 2);  // two layers, r = 2
    CHECK(2 * tl.row.trainable_params == lora.row.trainable_params);
  }
}

TEST_CASE("lora baseline parameter count is the sum of (d_out + d_in) r") {
  RunConfig cfg = parse_config(kSmallConfig);
  cfg.adapter.mode = AdapterMode::kLora;
  cfg.adapter.freeze_a = false;
  cfg.adapter.adapt_ra = false;
  cfg.adapter.adapt_sa = false;
  const GeneratedTask task = gen_task(cfg.task);
  const VariantOutcome out = run_variant(task, cfg, variant_from_config(cfg), 42);
  CHECK(out.row.trainable_params == (10 + 8) * 2 + (6 + 10) * 2);
}

TEST_CASE("CLI pipeline and exit codes") {
  const fs::path dir = scratch("cli");
  const fs::path cfg = dir / "cfg.json";
  write_text(cfg, kSmallConfig);
  const std::string c = " --config " + cfg.string();
  CHECK(run_cli("gen-data" + c + " --out " + (dir / "data.json").string()) == 0);
  CHECK(run_cli("calibrate" + c + " --data " + (dir / "data.json").string() + " --out " +
                (dir / "stats.json").string()) == 0);
  CHECK(run_cli("init" + c + " --data " + (dir / "data.json").string() + " --stats " +
                (dir / "stats.json").string() + " --out " + (dir / "init.ckpt.json").string()) == 0);
  CHECK(run_cli("train" + c + " --data " + (dir / "data.json").string() + " --checkpoint " +
                (dir / "init.ckpt.json").string() + " --metrics " + (dir / "m.csv").string() +
                " --out " + (dir / "final.ckpt.json").string()) == 0);
  CHECK(run_cli("analyze" + c + " --data " + (dir / "data.json").string() + " --stats " +
                (dir / "stats.json").string() + " --diff-stats " + (dir / "stats.json").string() +
                " --out-prefix " + (dir / "report").string()) == 0);
  CHECK(fs::exists(dir / "report.csv"));
  CHECK(fs::exists(dir / "report.json"));
  CHECK(fs::exists(dir / "report.importance_diff.csv"));

  // Checkpoint: load and re-save is byte identical.
  const std::string saved = io::read_text_file((dir / "init.ckpt.json").string());
  const io::Checkpoint ck = io::checkpoint_from_json(io::read_json_file((dir / "init.ckpt.json").string()));
  io::write_json_file((dir / "resaved.json").string(), io::checkpoint_to_json(ck));
  CHECK(io::read_text_file((dir / "resaved.json").string()) == saved);

  // Every output carries the config hash.
  const std::string hash = config_hash(load_config(cfg.string()));
  CHECK(ck.meta.config_hash == hash);
  const std::string metrics = io::read_text_file((dir / "m.csv").string());
  CHECK(metrics.rfind("# config_hash=" + hash + "\nstep,loss,grad_norm,grad_norm_B,lr\n", 0) == 0);
  CHECK(io::read_json_file((dir / "stats.json").string())["meta"]["config_hash"] == hash);
  CHECK(io::read_json_file((dir / "report.json").string())["meta"]["config_hash"] == hash);

  // Malformed config -> 2.
  write_text(dir / "bad.json", "{\"train\": {\"nope\": 1}}");
  CHECK(run_cli("gen-data --config " + (dir / "bad.json").string() + " --out " + (dir / "x.json").string()) == 2);
  write_text(dir / "broken.json", "{\"train\": ");
  CHECK(run_cli("gen-data --config " + (dir / "broken.json").string() + " --out " + (dir / "x.json").string()) == 2);

  // Divergent training -> 3 with partial metrics flushed.
  write_text(dir / "diverge.json", R"({
    "task": {"dims": [8, 10, 6], "n_train": 128, "n_test": 64, "n_calib": 4, "calib_rows": 8},
    "adapter": {"mode": "tlora", "r_init": 2, "alpha": 4},
    "calib": {"n_samples": 4},
    "train": {"steps": 400, "batch_size": 32, "lr": 1e8, "optimizer": "sgd"}
  })");
  CHECK(run_cli("train --config " + (dir / "diverge.json").string() + " --data " + (dir / "data.json").string() +
                " --checkpoint " + (dir / "init.ckpt.json").string() + " --metrics " + (dir / "dm.csv").string() +
                " --out " + (dir / "dfinal.json").string()) == 3);
  CHECK(fs::exists(dir / "dm.csv"));
}

TEST_CASE("CLI compare writes the summary and per-run artifacts") {
  const fs::path dir = scratch("compare");
  write_text(dir / "cfg.json", R"({
    "task": {"dims": [8, 10, 6], "n_train": 128, "n_test": 64, "n_calib": 4, "calib_rows": 8},
    "adapter": {"r_init": 2, "alpha": 4},
    "calib": {"n_samples": 4},
    "train": {"steps": 3, "batch_size": 32},
    "compare": {"seeds": [0, 1], "preset": "init_ablation"}
  })");
  CHECK(run_cli("compare --config " + (dir / "cfg.json").string() + " --out-dir " + (dir / "out").string()) == 0);
  std::ifstream in(dir / "out" / "compare.csv");
  const auto rows = io::read_compare_csv(in);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].variant == "random_gaussian");
  CHECK(rows[2].variant == "wc_svd");
  CHECK(rows[3].seed == 1);
  CHECK(fs::exists(dir / "out" / "runs" / "wc_svd_seed1.metrics.csv"));
  CHECK(fs::exists(dir / "out" / "runs" / "wc_svd_seed1.ckpt.json"));
}
