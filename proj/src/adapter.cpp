// SPDX-License-Identifier: Apache-2.0
#include "tlora/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tlora/rng.hpp"

namespace tlora {

const AdapterState* find_adapter(const AdapterSet& set, std::string_view layer_name) {
  auto it = std::find_if(set.begin(), set.end(),
                         [&](const AdapterState& a) { return a.layer_name == layer_name; });
  return it == set.end() ? nullptr : &*it;
}

AdapterState* find_adapter(AdapterSet& set, std::string_view layer_name) {
  return const_cast<AdapterState*>(find_adapter(std::as_const(set), layer_name));
}

std::string_view to_string(InitKind kind) {
  switch (kind) {
    case InitKind::kRandomGaussian: return "random_gaussian";
    case InitKind::kWSvd: return "w_svd";
    case InitKind::kWcSvd: return "wc_svd";
    case InitKind::kTheoretical: return "theoretical";
  }
  return "?";
}

InitKind init_kind_from_string(std::string_view name) {
  if (name == "random_gaussian") return InitKind::kRandomGaussian;
  if (name == "w_svd") return InitKind::kWSvd;
  if (name == "wc_svd") return InitKind::kWcSvd;
  if (name == "theoretical") return InitKind::kTheoretical;
  throw Error(ErrorCode::kInvalidConfig, "unknown init kind '" + std::string(name) + "'");
}

AdapterState init_adapter(const LinearLayer& layer, std::size_t r, double alpha,
                          const InitOptions& options, const Matrix* covariance, double eps) {
  const std::size_t d_out = layer.d_out();
  const std::size_t d_in = layer.d_in();
  if (r < 1 || r > std::min(d_out, d_in)) {
    throw Error(ErrorCode::kInvalidRank, "rank " + std::to_string(r) + " invalid for " +
                                             std::to_string(d_out) + "x" + std::to_string(d_in) +
                                             " layer '" + layer.name + "'");
  }
  if (!(alpha > 0.0)) throw Error(ErrorCode::kInvalidInput, "alpha must be positive");

  const bool needs_c =
      options.kind == InitKind::kWcSvd || options.kind == InitKind::kTheoretical;
  if (needs_c) {
    if (!covariance) {
      throw Error(ErrorCode::kMissingCovariance,
                  std::string(to_string(options.kind)) + " init of '" + layer.name +
                      "' needs an input covariance");
    }
    if (static_cast<std::size_t>(covariance->rows()) != d_in ||
        static_cast<std::size_t>(covariance->cols()) != d_in) {
      throw Error(ErrorCode::kInvalidInput, "covariance shape does not match layer input");
    }
  }

  AdapterState st;
  st.layer_name = layer.name;
  st.r = r;
  st.alpha = alpha;
  st.frozen_a = options.frozen_a;
  st.b = Matrix::Zero(static_cast<Eigen::Index>(d_out), static_cast<Eigen::Index>(r));

  switch (options.kind) {
    case InitKind::kRandomGaussian: {
      const double stddev = options.gaussian_std.value_or(1.0 / std::sqrt(static_cast<double>(d_in)));
      if (!(stddev > 0.0)) throw Error(ErrorCode::kInvalidInput, "gaussian_std must be positive");
      Rng rng(options.seed);
      st.a = rng.gaussian(r, d_in, stddev);
      break;
    }
    case InitKind::kWSvd:
      st.a = linalg::top_r_right(layer.w, r);
      break;
    case InitKind::kWcSvd:
      st.a = linalg::top_r_right(layer.w * *covariance, r);
      break;
    case InitKind::kTheoretical: {
      const Matrix reg = *covariance + eps * Matrix::Identity(covariance->rows(), covariance->cols());
      const Matrix v = linalg::top_r_right(layer.w * linalg::psd_sqrt(reg), r);
      st.a = v * linalg::psd_inv_sqrt_reg(*covariance, eps);
      break;
    }
  }
  return st;
}

Matrix merge(const AdapterState& adapter, const Matrix& w0) {
  if (adapter.b.rows() != w0.rows() || adapter.a.cols() != w0.cols() ||
      adapter.a.rows() != adapter.b.cols()) {
    throw Error(ErrorCode::kInvalidInput, "adapter shape does not match weight");
  }
  return w0 + adapter.scale() * (adapter.b * adapter.a);
}

std::size_t trainable_params(const AdapterState& adapter) {
  const std::size_t b_count = adapter.d_out() * adapter.r;
  return adapter.frozen_a ? b_count : b_count + adapter.r * adapter.d_in();
}

std::size_t trainable_params(const AdapterSet& set) {
  std::size_t total = 0;
  for (const auto& a : set) total += trainable_params(a);
  return total;
}

}  // namespace tlora
