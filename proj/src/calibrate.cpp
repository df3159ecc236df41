// SPDX-License-Identifier: Apache-2.0
#include "tlora/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "tlora/rng.hpp"

namespace tlora {

const ModuleStats& CalibrationStats::module(std::string_view name) const {
  for (const auto& m : modules)
    if (m.name == name) return m;
  throw Error(ErrorCode::kInvalidInput, "no calibration stats for '" + std::string(name) + "'");
}

CalibrationStats run_calibration(const Network& net, std::span<const Batch> samples) {
  if (samples.empty()) throw Error(ErrorCode::kInvalidInput, "calibration dataset is empty");
  net.validate();
  const double inv_n = 1.0 / static_cast<double>(samples.size());

  CalibrationStats stats;
  stats.n_samples = samples.size();
  std::vector<std::size_t> index;
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const auto& l = net.layers[k];
    if (!l.adaptable) continue;
    index.push_back(k);
    const auto n = static_cast<Eigen::Index>(l.d_in());
    stats.modules.push_back({l.name, 0.0, Matrix::Zero(n, n)});
  }
  if (stats.modules.empty()) throw Error(ErrorCode::kInvalidInput, "no adaptable layers");

  for (const Batch& sample : samples) {
    const ForwardTrace trace = forward(net, sample);
    const GradientSet grads = backward(trace);
    for (std::size_t m = 0; m < index.size(); ++m) {
      const std::size_t k = index[m];
      const Matrix& w = net.layers[k].w;
      const double avg = (w.array() * grads.layers[k].dw.array()).abs().mean();
      if (!std::isfinite(avg)) throw Error(ErrorCode::kNumericalFailure, "non-finite importance");
      stats.modules[m].importance += inv_n * avg;
      const Matrix& x = trace.inputs[k];
      stats.modules[m].covariance.noalias() += inv_n * (x.transpose() * x);
    }
  }
  for (auto& m : stats.modules) m.covariance = 0.5 * (m.covariance + m.covariance.transpose());
  return stats;
}

namespace {

// Importance normalized by its maximum, so equal scores become exactly 1 and
// shares are computed from small exact sums in the uniform case.
std::vector<double> normalized_weights(std::span<const double> importance) {
  if (importance.empty()) throw Error(ErrorCode::kInvalidInput, "no modules to allocate");
  double mx = 0.0;
  for (double s : importance) {
    if (!(s >= 0.0) || !std::isfinite(s)) {
      throw Error(ErrorCode::kInvalidInput, "importance scores must be finite and >= 0");
    }
    mx = std::max(mx, s);
  }
  if (mx <= 0.0) throw Error(ErrorCode::kDegenerateImportance, "all importance scores are zero");
  std::vector<double> w(importance.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = importance[i] / mx;
  return w;
}

// Shares within a few ulps of a multiple of 1/2 are treated as exact, so
// rounding and remainder order do not depend on division noise.
double snap_half(double x) {
  const double h = std::round(2.0 * x) / 2.0;
  return std::abs(x - h) <= 1e-12 * std::max(1.0, std::abs(x)) ? h : x;
}

double round_half_even(double x) {
  const double fl = std::floor(x);
  const double diff = x - fl;
  if (diff < 0.5) return fl;
  if (diff > 0.5) return fl + 1.0;
  return std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
}

// Moves `ranks` one unit at a time until they sum to target. Each module's
// adjustment count is the primary key so that a second unit is taken from a
// module only after every eligible module has given one.
void repair(std::vector<long long>& ranks, const std::vector<double>& remainder,
            const std::vector<bool>& eligible, const std::vector<long long>& lo,
            const std::vector<long long>& hi, long long target) {
  const std::size_t n = ranks.size();
  std::vector<long long> moved(n, 0);
  long long sum = std::accumulate(ranks.begin(), ranks.end(), 0LL);
  while (sum != target) {
    const bool over = sum > target;
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!eligible[i]) continue;
      if (over ? ranks[i] <= lo[i] : ranks[i] >= hi[i]) continue;
      if (pick == n) {
        pick = i;
        continue;
      }
      if (moved[i] != moved[pick]) {
        if (moved[i] < moved[pick]) pick = i;
        continue;
      }
      if (over) {
        // Smallest remainder; ties go to the larger index.
        if (remainder[i] <= remainder[pick]) pick = i;
      } else {
        // Largest remainder; ties stay with the smaller index.
        if (remainder[i] > remainder[pick]) pick = i;
      }
    }
    if (pick == n) {
      throw Error(ErrorCode::kInfeasibleBudget,
                  "cannot reach rank budget " + std::to_string(target) + " within bounds");
    }
    ranks[pick] += over ? -1 : 1;
    ++moved[pick];
    sum += over ? -1 : 1;
  }
}

}  // namespace

std::vector<std::size_t> allocate_ranks(std::span<const double> importance, std::size_t r_total,
                                        std::size_t r_min, std::span<const std::size_t> caps) {
  const std::size_t n = importance.size();
  if (caps.size() != n) throw Error(ErrorCode::kInvalidInput, "caps size != module count");
  const std::vector<double> w = normalized_weights(importance);
  if (r_total < n * r_min) {
    throw Error(ErrorCode::kInfeasibleBudget, "budget " + std::to_string(r_total) +
                                                  " below L * r_min = " + std::to_string(n * r_min));
  }
  std::size_t cap_sum = 0;
  for (std::size_t c : caps) {
    if (c < r_min) throw Error(ErrorCode::kInfeasibleBudget, "module cap below r_min");
    cap_sum += c;
  }
  if (cap_sum < r_total) {
    throw Error(ErrorCode::kInfeasibleBudget, "budget exceeds the sum of module caps");
  }

  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  const auto total = static_cast<long long>(r_total);
  std::vector<long long> ranks(n);
  std::vector<double> remainder(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = snap_half(static_cast<double>(r_total) * w[i] / wsum);
    ranks[i] = static_cast<long long>(round_half_even(raw));
    remainder[i] = raw - std::floor(raw);
  }
  const std::vector<bool> all(n, true);
  const std::vector<long long> zero(n, 0);
  const std::vector<long long> unbounded(n, total);
  repair(ranks, remainder, all, zero, unbounded, total);

  std::vector<bool> free_module(n, true);
  std::vector<long long> lo(n), hi(n);
  for (std::size_t i = 0; i < n; ++i) {
    lo[i] = static_cast<long long>(r_min);
    hi[i] = static_cast<long long>(caps[i]);
    if (ranks[i] < lo[i]) {
      ranks[i] = lo[i];
      free_module[i] = false;
    } else if (ranks[i] > hi[i]) {
      ranks[i] = hi[i];
      free_module[i] = false;
    }
  }
  repair(ranks, remainder, free_module, lo, hi, total);

  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::size_t>(ranks[i]);
  return out;
}

std::vector<double> allocate_alphas(std::span<const double> importance,
                                    std::span<const std::size_t> ranks, double alpha_total,
                                    std::size_t r_init) {
  if (ranks.size() != importance.size()) {
    throw Error(ErrorCode::kInvalidInput, "ranks and importance differ in length");
  }
  if (!(alpha_total > 0.0) || r_init == 0) {
    throw Error(ErrorCode::kInvalidInput, "alpha_total and r_init must be positive");
  }
  const std::vector<double> w = normalized_weights(importance);
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<double> alphas(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    alphas[i] = (alpha_total * static_cast<double>(ranks[i]) * w[i]) /
                (static_cast<double>(r_init) * wsum);
  }
  return alphas;
}

AllocationPlan plan_allocation(const Network& net, const CalibrationStats* stats,
                               const AllocationOptions& options) {
  if (options.r_init == 0 || !(options.alpha > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "r_init and alpha must be positive");
  }
  if ((options.adapt_ranks || options.adapt_alphas) && !stats) {
    throw Error(ErrorCode::kInvalidConfig, "rank/alpha adaptation needs calibration stats");
  }
  std::vector<std::string> names;
  std::vector<std::size_t> caps;
  std::vector<double> importance;
  for (const auto& l : net.layers) {
    if (!l.adaptable) continue;
    names.push_back(l.name);
    caps.push_back(std::min(l.d_out(), l.d_in()));
    if (stats) importance.push_back(stats->module(l.name).importance);
  }
  if (names.empty()) throw Error(ErrorCode::kInvalidInput, "no adaptable layers");

  const std::size_t layers = names.size();
  AllocationPlan plan;
  plan.r_init = options.r_init;
  plan.r_min = options.r_min;
  plan.r_total = layers * options.r_init;
  plan.alpha_total = static_cast<double>(layers) * options.alpha;

  std::vector<std::size_t> ranks(layers, options.r_init);
  if (options.adapt_ranks) {
    ranks = allocate_ranks(importance, plan.r_total, options.r_min, caps);
  } else {
    for (std::size_t i = 0; i < layers; ++i) {
      if (ranks[i] > caps[i]) {
        throw Error(ErrorCode::kInvalidRank, "r_init exceeds the size of '" + names[i] + "'");
      }
    }
  }
  std::vector<double> alphas(layers, options.alpha);
  if (options.adapt_alphas) {
    alphas = allocate_alphas(importance, ranks, plan.alpha_total, options.r_init);
  }
  for (std::size_t i = 0; i < layers; ++i) {
    plan.modules.push_back({names[i], ranks[i], ranks[i] ? alphas[i] : 0.0});
  }
  return plan;
}

AdapterSet build_adapters(const Network& net, const CalibrationStats* stats,
                          const AllocationPlan& plan, const InitOptions& init, double eps) {
  AdapterSet set;
  for (std::size_t i = 0; i < plan.modules.size(); ++i) {
    const ModuleAllocation& m = plan.modules[i];
    // A zero-importance module keeps its floor rank in the plan but gets
    // alpha 0, i.e. no adapter.
    if (m.rank == 0 || !(m.alpha > 0.0)) continue;
    const LinearLayer& layer = net.layer(m.name);
    InitOptions opts = init;
    opts.seed = derive_seed(init.seed, i);
    const Matrix* c = stats ? &stats->module(m.name).covariance : nullptr;
    set.push_back(init_adapter(layer, m.rank, m.alpha, opts, c, eps));
  }
  return set;
}

AdapterSet build_tlora_adapters(const Network& net, const CalibrationStats& stats,
                                const AllocationPlan& plan, double eps) {
  InitOptions init;
  init.kind = InitKind::kWcSvd;
  init.frozen_a = true;
  return build_adapters(net, &stats, plan, init, eps);
}

}  // namespace tlora
