// SPDX-License-Identifier: Apache-2.0
#include "tlora/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "tlora/rng.hpp"

namespace tlora {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adamw"; }

std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kBOnly: return "b_only";
    case TrainMode::kAAndB: return "a_and_b";
    case TrainMode::kFullFt: return "full_ft";
  }
  return "?";
}

std::string_view to_string(Schedule s) { return s == Schedule::kConstant ? "constant" : "cosine"; }

OptimizerKind optimizer_from_string(std::string_view name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adamw") return OptimizerKind::kAdamW;
  throw Error(ErrorCode::kInvalidConfig, "unknown optimizer '" + std::string(name) + "'");
}

TrainMode train_mode_from_string(std::string_view name) {
  if (name == "b_only") return TrainMode::kBOnly;
  if (name == "a_and_b") return TrainMode::kAAndB;
  if (name == "full_ft") return TrainMode::kFullFt;
  throw Error(ErrorCode::kInvalidConfig, "unknown train mode '" + std::string(name) + "'");
}

Schedule schedule_from_string(std::string_view name) {
  if (name == "constant") return Schedule::kConstant;
  if (name == "cosine") return Schedule::kCosine;
  throw Error(ErrorCode::kInvalidConfig, "unknown schedule '" + std::string(name) + "'");
}

void optimizer_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                    OptimizerState& state, const OptimizerConfig& cfg, double lr) {
  if (params.size() != grads.size()) {
    throw Error(ErrorCode::kInvalidInput, "parameter and gradient counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != grads[i]->rows() || params[i]->cols() != grads[i]->cols()) {
      throw Error(ErrorCode::kInvalidInput, "gradient shape mismatch");
    }
    if (!grads[i]->allFinite()) throw Error(ErrorCode::kNumericalFailure, "non-finite gradient");
  }

  if (cfg.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) *params[i] -= lr * *grads[i];
    ++state.t;
    return;
  }

  if (state.m.empty()) {
    for (const Matrix* p : params) {
      state.m.push_back(Matrix::Zero(p->rows(), p->cols()));
      state.v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  } else if (state.m.size() != params.size()) {
    throw Error(ErrorCode::kInvalidInput, "optimizer state does not match parameters");
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = *grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseAbs2();
    if (cfg.weight_decay != 0.0) p *= 1.0 - lr * cfg.weight_decay;
    const auto m_hat = state.m[i].array() / bc1;
    const auto v_hat = state.v[i].array() / bc2;
    p.array() -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
  }
}

double scheduled_lr(const TrainConfig& cfg, std::size_t step) {
  if (cfg.schedule == Schedule::kConstant || cfg.steps <= 1) return cfg.lr;
  const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

class MinibatchStream {
 public:
  MinibatchStream(const Batch& data, std::size_t batch_size, std::uint64_t seed)
      : data_(data), batch_size_(batch_size), rng_(seed) {
    if (data.x.rows() == 0 || data.x.rows() != data.y.rows()) {
      throw Error(ErrorCode::kInvalidInput, "training data is empty or inconsistent");
    }
    if (batch_size == 0) throw Error(ErrorCode::kInvalidConfig, "batch_size must be positive");
  }

  Batch next() {
    const auto n = static_cast<std::size_t>(data_.x.rows());
    if (batch_size_ >= n) return data_;
    Batch out;
    out.x.resize(static_cast<Eigen::Index>(batch_size_), data_.x.cols());
    out.y.resize(static_cast<Eigen::Index>(batch_size_), data_.y.cols());
    for (std::size_t i = 0; i < batch_size_; ++i) {
      if (cursor_ == order_.size()) {
        order_ = rng_.permutation(n);
        cursor_ = 0;
      }
      const auto src = static_cast<Eigen::Index>(order_[cursor_++]);
      out.x.row(static_cast<Eigen::Index>(i)) = data_.x.row(src);
      out.y.row(static_cast<Eigen::Index>(i)) = data_.y.row(src);
    }
    return out;
  }

 private:
  const Batch& data_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace

TrainResult train_loop(Network& net, AdapterSet& adapters, const Batch& data,
                       const TrainConfig& cfg, const StepObserver& observer) {
  net.validate();
  if (!(cfg.lr >= 0.0)) throw Error(ErrorCode::kInvalidConfig, "learning rate must be >= 0");
  const bool full = cfg.mode == TrainMode::kFullFt;
  if (!full) {
    if (adapters.empty()) {
      throw Error(ErrorCode::kInvalidConfig, "no trainable tensors: adapter set is empty");
    }
    for (const auto& ad : adapters) {
      net.layer(ad.layer_name);  // existence check
      if (cfg.mode == TrainMode::kBOnly && !ad.frozen_a) {
        throw Error(ErrorCode::kInvalidConfig,
                    "b_only mode needs frozen A, adapter '" + ad.layer_name + "' is unfrozen");
      }
    }
  }

  std::vector<Matrix> w0;
  if (full) {
    for (const auto& l : net.layers) w0.push_back(l.w);
  }

  std::vector<Matrix*> params;
  if (full) {
    for (auto& l : net.layers) params.push_back(&l.w);
  } else {
    for (auto& ad : adapters) params.push_back(&ad.b);
    if (cfg.mode == TrainMode::kAAndB) {
      for (auto& ad : adapters)
        if (!ad.frozen_a) params.push_back(&ad.a);
    }
  }

  const AdapterSet* active = full ? nullptr : &adapters;
  MinibatchStream stream(data, cfg.batch_size, cfg.seed);
  OptimizerState state;
  TrainResult result;
  result.history.reserve(cfg.steps);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Batch batch = stream.next();
    const ForwardTrace trace = forward(net, batch, active);
    if (!std::isfinite(trace.loss)) {
      result.failure = "non-finite loss at step " + std::to_string(step);
      break;
    }
    GradientSet grads;
    try {
      grads = backward(trace);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNumericalFailure) throw;
      result.failure = "non-finite gradient at step " + std::to_string(step);
      break;
    }

    std::vector<const Matrix*> gptr;
    MetricsRow row;
    row.step = step;
    row.loss = trace.loss;
    row.lr = scheduled_lr(cfg, step);
    if (full) {
      for (const auto& lg : grads.layers) gptr.push_back(&lg.dw);
    } else {
      double b_sq = 0.0;
      for (const auto& ag : grads.adapters) {
        gptr.push_back(&ag.db);
        const double sq = ag.db.squaredNorm();
        row.grad_norm_b_per_adapter.push_back(std::sqrt(sq));
        b_sq += sq;
      }
      row.grad_norm_b = std::sqrt(b_sq);
      if (cfg.mode == TrainMode::kAAndB) {
        for (std::size_t j = 0; j < adapters.size(); ++j)
          if (!adapters[j].frozen_a) gptr.push_back(&grads.adapters[j].da);
      }
    }
    double sq = 0.0;
    for (const Matrix* g : gptr) sq += g->squaredNorm();
    row.grad_norm = std::sqrt(sq);
    if (!std::isfinite(row.grad_norm)) {
      result.failure = "non-finite gradient norm at step " + std::to_string(step);
      break;
    }

    std::vector<Matrix> before;
    before.reserve(params.size());
    for (const Matrix* p : params) before.push_back(*p);
    optimizer_step(params, gptr, state, cfg.optimizer, row.lr);
    bool finite = true;
    for (const Matrix* p : params) finite = finite && linalg::all_finite(*p);
    if (!finite) {
      for (std::size_t i = 0; i < params.size(); ++i) *params[i] = std::move(before[i]);
      result.failure = "non-finite parameters after the update at step " + std::to_string(step);
      break;
    }
    result.history.push_back(std::move(row));
    if (observer) observer(step, net, adapters);
  }

  if (full) {
    for (std::size_t k = 0; k < net.layers.size(); ++k) result.deltas.push_back(net.layers[k].w - w0[k]);
  }
  return result;
}

std::vector<Matrix> full_finetune_delta(const Network& net, const Batch& data, TrainConfig cfg) {
  cfg.mode = TrainMode::kFullFt;
  Network copy = net;
  AdapterSet none;
  if (cfg.steps == 0) {
    std::vector<Matrix> zeros;
    for (const auto& l : net.layers) zeros.push_back(Matrix::Zero(l.w.rows(), l.w.cols()));
    return zeros;
  }
  TrainResult r = train_loop(copy, none, data, cfg);
  if (r.failure) throw Error(ErrorCode::kNumericalFailure, "full fine-tune diverged: " + *r.failure);
  return std::move(r.deltas);
}

}  // namespace tlora
