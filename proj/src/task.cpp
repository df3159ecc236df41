// SPDX-License-Identifier: Apache-2.0
#include "tlora/task.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tlora/rng.hpp"

namespace tlora {

std::string_view to_string(TaskKind k) {
  return k == TaskKind::kTeacherStudent ? "teacher_student" : "classification";
}
std::string_view to_string(CovarianceKind k) {
  return k == CovarianceKind::kIdentity ? "identity" : "logspace";
}
std::string_view to_string(TeacherAlignment a) {
  return a == TeacherAlignment::kAligned ? "aligned" : "random";
}

TaskKind task_kind_from_string(std::string_view s) {
  if (s == "teacher_student") return TaskKind::kTeacherStudent;
  if (s == "classification") return TaskKind::kClassification;
  throw Error(ErrorCode::kInvalidConfig, "unknown task kind '" + std::string(s) + "'");
}
CovarianceKind covariance_kind_from_string(std::string_view s) {
  if (s == "identity") return CovarianceKind::kIdentity;
  if (s == "logspace") return CovarianceKind::kLogspace;
  throw Error(ErrorCode::kInvalidConfig, "unknown covariance kind '" + std::string(s) + "'");
}
TeacherAlignment alignment_from_string(std::string_view s) {
  if (s == "aligned") return TeacherAlignment::kAligned;
  if (s == "random") return TeacherAlignment::kRandom;
  throw Error(ErrorCode::kInvalidConfig, "unknown teacher alignment '" + std::string(s) + "'");
}

void TaskSpec::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidConfig, m); };
  if (dims.size() < 2) fail("task.dims needs at least input and output widths");
  for (std::size_t d : dims)
    if (d == 0) fail("task.dims entries must be positive");
  if (covariance.kind == CovarianceKind::kLogspace &&
      !(covariance.lambda_max >= covariance.lambda_min && covariance.lambda_min > 0.0)) {
    fail("task.covariance needs lambda_max >= lambda_min > 0");
  }
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    if (teacher.rank > std::min(dims[k], dims[k + 1])) fail("task.teacher.rank exceeds a layer size");
  }
  if (!(noise_var >= 0.0)) fail("task.noise_var must be >= 0");
  if (!(teacher.scale >= 0.0)) fail("task.teacher.scale must be >= 0");
  if (!(pretrain_alignment >= 0.0 && pretrain_alignment <= 1.0)) {
    fail("task.pretrain_alignment must lie in [0, 1]");
  }
  if (n_train == 0 || n_test == 0 || n_calib == 0 || calib_rows == 0) {
    fail("task sample counts must be positive");
  }
}

namespace {

// Orthonormal columns spanning the columns of m (Householder QR, sign-fixed).
Matrix orthonormal_columns(const Matrix& m) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr{Eigen::MatrixXd(m)};
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), m.cols());
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

Vector logspace(std::size_t n, double hi, double lo) {
  Vector v(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    v(static_cast<Eigen::Index>(i)) = std::pow(10.0, std::log10(hi) + t * (std::log10(lo) - std::log10(hi)));
  }
  return v;
}

Matrix draw_inputs(Rng& rng, std::size_t n, const Matrix& half) {
  return rng.gaussian(n, static_cast<std::size_t>(half.rows())) * half;
}

}  // namespace

GeneratedTask gen_task(const TaskSpec& spec) {
  spec.validate();
  const std::size_t d_in = spec.dims.front();
  Rng rng(derive_seed(spec.seed, 0));
  Rng data_rng(derive_seed(spec.seed, 1));

  GeneratedTask task;
  task.population_c =
      spec.covariance.kind == CovarianceKind::kIdentity
          ? Matrix(Matrix::Identity(static_cast<Eigen::Index>(d_in), static_cast<Eigen::Index>(d_in)))
          : linalg::logspace_covariance(d_in, spec.covariance.lambda_max, spec.covariance.lambda_min,
                                        spec.covariance.rotation_seed);
  const Matrix c_half = linalg::psd_sqrt(task.population_c);

  // Base ("pretrained") weights W = U diag(sigma) V^T with a decaying spectrum.
  task.base.activation = spec.activation;
  task.base.loss = spec.kind == TaskKind::kTeacherStudent ? LossKind::kMse : LossKind::kCrossEntropy;
  for (std::size_t k = 0; k + 1 < spec.dims.size(); ++k) {
    const std::size_t n_in = spec.dims[k];
    const std::size_t n_out = spec.dims[k + 1];
    const std::size_t q = std::min(n_in, n_out);
    const Matrix u = orthonormal_columns(rng.gaussian(n_out, q));
    Matrix v_seed = rng.gaussian(n_in, q);
    if (k == 0 && spec.pretrain_alignment > 0.0) {
      const EighResult e = linalg::eigh_psd(task.population_c);
      const double a = spec.pretrain_alignment;
      v_seed = a * e.eigvecs.leftCols(static_cast<Eigen::Index>(q)) * std::sqrt(static_cast<double>(n_in)) +
               (1.0 - a) * v_seed;
    }
    const Matrix v = orthonormal_columns(v_seed);
    const double gain = std::sqrt(static_cast<double>(n_in) / static_cast<double>(q));
    const Vector sigma = gain * logspace(q, 1.0, 0.1);
    LinearLayer layer;
    layer.name = "fc" + std::to_string(k + 1);
    layer.w = u * sigma.asDiagonal() * v.transpose();
    layer.b = rng.gaussian(n_out, 1, 0.05).col(0);
    task.base.layers.push_back(std::move(layer));
  }

  // Per-layer input covariance of the base network: exact for the first
  // layer, estimated from a large independent sample deeper in.
  {
    Rng est_rng(derive_seed(spec.seed, 2));
    const std::size_t n_est = 8192;
    Matrix h = draw_inputs(est_rng, n_est, c_half);
    for (std::size_t k = 0; k < task.base.layers.size(); ++k) {
      if (k == 0) {
        task.layer_covariance.push_back(task.population_c);
      } else {
        Matrix c = (h.transpose() * h) / static_cast<double>(n_est);
        task.layer_covariance.push_back(0.5 * (c + c.transpose()));
      }
      const LinearLayer& l = task.base.layers[k];
      Matrix z = h * l.w.transpose();
      z.rowwise() += l.b->transpose();
      h = k + 1 < task.base.layers.size()
              ? (spec.activation == Activation::kRelu    ? Matrix(z.cwiseMax(0.0))
                 : spec.activation == Activation::kTanh ? Matrix(z.array().tanh().matrix())
                                                        : z)
              : z;
    }
  }

  // Task perturbation per layer: rank-k, rows aligned with the top right
  // singular directions of W0 C (aligned) or a random subspace.
  Network teacher = task.base;
  for (std::size_t k = 0; k < task.base.layers.size(); ++k) {
    const LinearLayer& l = task.base.layers[k];
    const std::size_t kk = spec.teacher.rank;
    Matrix rows;
    if (spec.teacher.alignment == TeacherAlignment::kAligned) {
      rows = linalg::top_r_right(l.w * task.layer_covariance[k], kk);
    } else {
      rows = orthonormal_columns(rng.gaussian(l.d_in(), kk)).transpose();
    }
    const Matrix left = orthonormal_columns(rng.gaussian(l.d_out(), kk));
    Vector g(static_cast<Eigen::Index>(kk));
    for (Eigen::Index j = 0; j < g.size(); ++j) g(j) = 0.5 + 0.5 * rng.uniform();
    const double smax = linalg::svd_thin(l.w).s(0);
    task.delta_star.push_back(spec.teacher.scale * smax * left * g.asDiagonal() * rows);
    teacher.layers[k].w += task.delta_star.back();
  }

  auto make_batch = [&](std::size_t n) {
    Batch b;
    b.x = draw_inputs(data_rng, n, c_half);
    const Matrix out = predict(teacher, b.x);
    if (spec.kind == TaskKind::kTeacherStudent) {
      b.y = out;
      if (spec.noise_var > 0.0) b.y += data_rng.gaussian(n, out.cols(), std::sqrt(spec.noise_var));
    } else {
      Matrix noisy = out;
      if (spec.noise_var > 0.0) noisy += data_rng.gaussian(n, out.cols(), std::sqrt(spec.noise_var));
      b.y.resize(static_cast<Eigen::Index>(n), 1);
      for (Eigen::Index i = 0; i < noisy.rows(); ++i) {
        Eigen::Index arg;
        noisy.row(i).maxCoeff(&arg);
        b.y(i, 0) = static_cast<double>(arg);
      }
    }
    return b;
  };
  task.train = make_batch(spec.n_train);
  task.test = make_batch(spec.n_test);
  for (std::size_t i = 0; i < spec.n_calib; ++i) task.calib.push_back(make_batch(spec.calib_rows));
  return task;
}

}  // namespace tlora
