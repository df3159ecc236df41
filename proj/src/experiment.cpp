// SPDX-License-Identifier: Apache-2.0
#include "tlora/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <future>

#include "tlora/rng.hpp"

namespace tlora {

namespace {
constexpr std::uint64_t kInitStream = 101;
constexpr std::uint64_t kTrainStream = 202;
}  // namespace

double evaluate(const Network& net, const AdapterSet* adapters, const Batch& data) {
  return forward(net, data, adapters).loss;
}

CalibrationStats calibrate_task(const GeneratedTask& task, const RunConfig& cfg) {
  const std::size_t n = std::min(cfg.calib.n_samples, task.calib.size());
  return run_calibration(task.base, std::span<const Batch>(task.calib.data(), n));
}

VariantSpec variant_from_config(const RunConfig& cfg) {
  return {std::string(to_string(cfg.adapter.mode)), init_kind_for(cfg.adapter.mode),
          cfg.adapter.adapt_ra, cfg.adapter.adapt_sa, cfg.adapter.freeze_a};
}

bool needs_calibration(const VariantSpec& v) {
  return v.adapt_ra || v.adapt_sa || v.init == InitKind::kWcSvd || v.init == InitKind::kTheoretical;
}

InitResult init_variant(const GeneratedTask& task, const CalibrationStats* stats,
                        const RunConfig& cfg, const VariantSpec& variant, std::uint64_t init_seed) {
  if (needs_calibration(variant) && !stats) {
    throw Error(ErrorCode::kInvalidConfig, "variant '" + variant.name + "' needs calibration stats");
  }
  AllocationOptions opts;
  opts.r_init = cfg.adapter.r_init;
  opts.alpha = cfg.adapter.alpha;
  opts.r_min = cfg.adapter.r_min;
  opts.adapt_ranks = variant.adapt_ra;
  opts.adapt_alphas = variant.adapt_sa;
  InitResult out;
  out.plan = plan_allocation(task.base, stats, opts);
  InitOptions init;
  init.kind = variant.init;
  init.gaussian_std = cfg.adapter.gaussian_std;
  init.seed = init_seed;
  init.frozen_a = variant.freeze_a;
  out.adapters = build_adapters(task.base, stats, out.plan, init, cfg.adapter.eps);
  return out;
}

VariantOutcome run_variant(const GeneratedTask& task, const RunConfig& cfg,
                           const VariantSpec& variant, std::uint64_t seed,
                           std::optional<TrainMode> mode_override) {
  std::optional<CalibrationStats> stats;
  if (needs_calibration(variant)) stats = calibrate_task(task, cfg);
  InitResult init = init_variant(task, stats ? &*stats : nullptr, cfg, variant,
                                 derive_seed(seed, kInitStream));

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, kTrainStream);
  tc.mode = mode_override.value_or(variant.freeze_a ? TrainMode::kBOnly : TrainMode::kAAndB);

  Network net = task.base;
  TrainResult tr = train_loop(net, init.adapters, task.train, tc);

  VariantOutcome out;
  out.plan = std::move(init.plan);
  out.failure = tr.failure;
  out.history = std::move(tr.history);
  out.row.variant = variant.name;
  out.row.seed = seed;
  out.row.trainable_params = trainable_params(init.adapters);
  out.row.steps = out.history.size();
  out.row.final_loss = out.failure ? std::nan("") : evaluate(net, &init.adapters, task.test);
  out.final_checkpoint.meta = {seed, config_hash(cfg), io::kFormatVersion};
  out.final_checkpoint.net = std::move(net);
  out.final_checkpoint.adapters = std::move(init.adapters);
  return out;
}

std::vector<VariantOutcome> run_compare(const RunConfig& cfg) {
  std::vector<VariantOutcome> rows;
  for (std::uint64_t seed : cfg.compare.seeds) {
    TaskSpec spec = cfg.task;
    spec.seed = seed;
    const GeneratedTask task = gen_task(spec);
    if (cfg.compare.parallel) {
      std::vector<std::future<VariantOutcome>> jobs;
      for (const auto& v : cfg.compare.variants) {
        jobs.push_back(std::async(std::launch::async,
                                  [&task, &cfg, v, seed] { return run_variant(task, cfg, v, seed); }));
      }
      for (auto& j : jobs) rows.push_back(j.get());
    } else {
      for (const auto& v : cfg.compare.variants) rows.push_back(run_variant(task, cfg, v, seed));
    }
  }
  return rows;
}

std::string variant_slug(const std::string& name) {
  std::string out;
  for (char ch : name) {
    if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-') {
      out += ch;
    } else if (!out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "variant" : out;
}

}  // namespace tlora
