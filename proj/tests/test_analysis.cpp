// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tlora/analysis.hpp"
#include "tlora/calibrate.hpp"
#include "tlora/rng.hpp"

using namespace tlora;
using namespace tlora::analysis;
using oracle::max_abs;

namespace {

Matrix diag(std::initializer_list<double> v) {
  Vector d(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) d(i++) = x;
  return d.asDiagonal();
}

Matrix e_row(Eigen::Index n, Eigen::Index k) {
  Matrix m = Matrix::Zero(1, n);
  m(0, k) = 1.0;
  return m;
}

// Orthonormal basis of the top-r eigenspace of M_delta mapped back through C^{-1/2}.
Matrix oracle_optimal_rows(const Matrix& c, const Matrix& delta, std::size_t r) {
  const Matrix m = (delta * oracle::sqrt_spd(c, 0.5)).transpose() * (delta * oracle::sqrt_spd(c, 0.5));
  return oracle::top_eigen_rows(m, r) * oracle::sqrt_spd(c, -0.5);
}

double top_sum(const Matrix& m, std::size_t r) {
  const auto e = oracle::jacobi_eigh(m);
  double s = 0.0;
  for (std::size_t i = 0; i < r; ++i) s += e.values[i];
  return s;
}

}  // namespace

TEST_CASE("target_matrix") {
  const Matrix c = Matrix::Identity(2, 2);
  CHECK(max_abs(target_matrix(TargetKind::kMDelta, diag({2, 1}), c, 0.0).matrix - diag({4, 1})) < 1e-15);
  CHECK(max_abs(target_matrix(TargetKind::kMDelta, Matrix::Zero(2, 2), c, 1e-6).matrix) == 0.0);

  Rng rng(1);
  const Matrix d = rng.gaussian(5, 7);
  const Matrix cc = oracle::random_psd(rng, 7, 9);
  const double eps = 1e-6;
  const TargetMatrix t = target_matrix(TargetKind::kMDelta, d, cc, eps, "fc1");
  CHECK(t.layer == "fc1");
  const Matrix half = d * oracle::sqrt_spd(cc + eps * Matrix::Identity(7, 7), 0.5);
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(half);
  const auto e = oracle::jacobi_eigh(t.matrix);
  for (Eigen::Index i = 0; i < 5; ++i) {
    CHECK(std::abs(e.values[static_cast<std::size_t>(i)] - svd.singularValues()(i) * svd.singularValues()(i)) < 1e-9);
  }
  CHECK(max_abs(t.matrix - t.matrix.transpose()) == 0.0);
}

TEST_CASE("objective_J: examples") {
  const Matrix c = Matrix::Identity(2, 2);
  const Matrix d = diag({2, 1});
  CHECK(std::abs(objective_J(e_row(2, 0), c, d) - 4.0) < 1e-14);
  CHECK(std::abs(objective_J(e_row(2, 1), c, d) - 1.0) < 1e-14);
  try {
    objective_J(Matrix::Zero(1, 2), c, d);
    FAIL("expected SingularGram");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kSingularGram);
  }
  // Two identical rows.
  Matrix dup(2, 2);
  dup << 1, 0, 1, 0;
  CHECK_THROWS_AS(objective_J(dup, c, d), Error);
}

TEST_CASE("objective_J: optimum attains the top-r eigenvalue sum and dominates random A") {
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    Rng rng(seed);
    const Matrix delta = rng.gaussian(8, 6);
    const Matrix c = oracle::random_psd(rng, 6, 10) + 1e-3 * Matrix::Identity(6, 6);
    const std::size_t r = 3;
    const Matrix m = (delta * oracle::sqrt_spd(c, 0.5)).transpose() * (delta * oracle::sqrt_spd(c, 0.5));
    const double bound = top_sum(m, r);

    const Matrix a_oracle = oracle_optimal_rows(c, delta, r);
    CHECK(std::abs(objective_J(a_oracle, c, delta) - bound) < 1e-8 * std::max(1.0, bound));
    const Matrix a_star = optimal_projection(c, delta, r);
    CHECK(std::abs(objective_J(a_star, c, delta) - bound) < 1e-8 * std::max(1.0, bound));

    for (int t = 0; t < 100; ++t) {
      const Matrix a = rng.gaussian(r, 6);
      CHECK(objective_J(a, c, delta) <= bound + 1e-8);
    }
  }
}

TEST_CASE("von Neumann bound over random whitened subspaces") {
  Rng rng(6);
  const Matrix delta = rng.gaussian(7, 9);
  const Matrix c = oracle::random_psd(rng, 9, 12);
  const TargetMatrix m = target_matrix(TargetKind::kMDelta, delta, c, 1e-6);
  for (std::size_t r : {1u, 3u, 5u}) {
    const double bound = top_sum(m.matrix, r);
    for (int t = 0; t < 100; ++t) {
      const Matrix u = oracle::random_orthonormal_rows(rng, r, 9);
      CHECK((u * m.matrix * u.transpose()).trace() <= bound + 1e-8);
    }
  }
}

TEST_CASE("objective_J is invariant under row re-basing") {
  Rng rng(7);
  const Matrix delta = rng.gaussian(5, 6);
  const Matrix c = oracle::random_psd(rng, 6, 8) + 0.1 * Matrix::Identity(6, 6);
  const Matrix a = rng.gaussian(3, 6);
  const double j = objective_J(a, c, delta);
  for (int t = 0; t < 20; ++t) {
    Matrix q = rng.gaussian(3, 3);
    q += 2.0 * Matrix::Identity(3, 3);
    CHECK(std::abs(objective_J(q * a, c, delta) - j) < 1e-9 * std::max(1.0, j));
  }
}

TEST_CASE("optimal_B_and_loss: examples") {
  const Matrix c = Matrix::Identity(2, 2);
  const OptimalB ob = optimal_B_and_loss(e_row(2, 0), c, diag({2, 1}), 0.0, 2, 1.0);
  REQUIRE(ob.b.rows() == 2);
  REQUIRE(ob.b.cols() == 1);
  CHECK(std::abs(ob.b(0, 0) - 2.0) < 1e-15);
  CHECK(std::abs(ob.b(1, 0)) < 1e-15);
  CHECK(std::abs(ob.expected_loss - 1.0) < 1e-14);

  const OptimalB zero = optimal_B_and_loss(e_row(2, 1), c, Matrix::Zero(2, 2), 0.25, 2, 3.0);
  CHECK(max_abs(zero.b) == 0.0);
  CHECK(std::abs(zero.expected_loss - 0.5) < 1e-15);
}

TEST_CASE("optimal_B_and_loss agrees with direct population risk") {
  for (std::uint64_t seed : {8u, 9u, 10u, 11u}) {
    Rng rng(seed);
    const Matrix delta = rng.gaussian(5, 7);
    const Matrix c = oracle::random_psd(rng, 7, 10);
    const Matrix a = rng.gaussian(3, 7);
    const double s = 0.5 + rng.uniform();
    const double noise = 0.1 * rng.uniform();
    const OptimalB ob = optimal_B_and_loss(a, c, delta, noise, 5, s);
    const double direct = oracle::population_risk(a, ob.b, c, delta, noise, s);
    CHECK(std::abs(direct - ob.expected_loss) < 1e-9);
    // B* is a stationary point: perturbing it only increases the risk.
    for (int t = 0; t < 10; ++t) {
      const Matrix pert = ob.b + 1e-3 * rng.gaussian(5, 3);
      CHECK(oracle::population_risk(a, pert, c, delta, noise, s) >= direct - 1e-12);
    }
  }
}

TEST_CASE("alignment_report: trivial cases") {
  Rng rng(12);
  const Network net = make_mlp({6, 8, 5}, Activation::kRelu, LossKind::kMse, 13);
  CalibrationStats st;
  st.n_samples = 1;
  for (const auto& l : net.layers) {
    st.modules.push_back({l.name, 1.0, oracle::random_psd(rng, l.d_in(), l.d_in() + 3)});
  }
  std::vector<Matrix> deltas;
  for (const auto& l : net.layers) deltas.push_back(l.w);
  const AlignmentReport rep = alignment_report(net, st, deltas, 2, 1e-6);
  REQUIRE(rep.layers.size() == 2);
  for (const auto& la : rep.layers) CHECK(std::abs(la.phi_proxy_delta - 1.0) < 1e-12);

  for (auto& m : st.modules) m.covariance.setIdentity();
  for (const auto& la : alignment_report(net, st, deltas, 2, 1e-6).layers) {
    CHECK(std::abs(la.phi_approx_theory - 1.0) < 1e-12);
    CHECK(std::abs(la.cond_c - 1.0) < 1e-15);
  }
}

TEST_CASE("alignment_report matches an independent recomputation") {
  Rng rng(14);
  const Network net = make_mlp({7, 9, 6, 4}, Activation::kTanh, LossKind::kMse, 15);
  std::vector<Batch> samples;
  for (int i = 0; i < 3; ++i) samples.push_back({rng.gaussian(10, 7), rng.gaussian(10, 4)});
  const CalibrationStats st = run_calibration(net, samples);
  std::vector<Matrix> deltas;
  for (const auto& l : net.layers) deltas.push_back(rng.gaussian(l.d_out(), l.d_in()));
  const double eps = 1e-6;
  const std::size_t r = 3;
  const AlignmentReport rep = alignment_report(net, st, deltas, r, eps);
  REQUIRE(rep.layers.size() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& la = rep.layers[k];
    const Matrix& w = net.layers[k].w;
    const Matrix& c = st.modules[k].covariance;
    const Eigen::Index n = c.rows();
    const Matrix half = oracle::sqrt_spd(c + eps * Matrix::Identity(n, n), 0.5);
    const Matrix mp = (w * half).transpose() * (w * half);
    const Matrix md = (deltas[k] * half).transpose() * (deltas[k] * half);
    const std::size_t rr = std::min<std::size_t>(r, std::min(w.rows(), w.cols()));
    CHECK(la.r == rr);
    const double phi_pd =
        (oracle::top_eigen_projector(mp, rr) * oracle::top_eigen_projector(md, rr)).trace() / rr;
    const Matrix wc = w * c;
    const double phi_at =
        (oracle::top_eigen_projector(wc.transpose() * wc, rr) * oracle::top_eigen_projector(mp, rr)).trace() /
        rr;
    CHECK(std::abs(la.phi_proxy_delta - phi_pd) < 1e-9);
    CHECK(std::abs(la.phi_approx_theory - phi_at) < 1e-9);
    CHECK(la.phi_proxy_delta >= 0.0);
    CHECK(la.phi_proxy_delta <= 1.0 + 1e-12);
    CHECK(la.phi_approx_theory <= 1.0 + 1e-12);
    const auto ep = oracle::jacobi_eigh(mp);
    const auto ed = oracle::jacobi_eigh(md);
    for (std::size_t i = 0; i < rr; ++i) {
      CHECK(std::abs(la.top_eig_proxy[i] - ep.values[i]) < 1e-9 * std::max(1.0, ep.values[0]));
      CHECK(std::abs(la.top_eig_delta[i] - ed.values[i]) < 1e-9 * std::max(1.0, ed.values[0]));
    }
    const auto ec = oracle::jacobi_eigh(c);
    CHECK(std::abs(la.cond_c - (ec.values[0] + eps) / (ec.values.back() + eps)) < 1e-9 * la.cond_c);
    CHECK_FALSE(la.near_degenerate);
  }
}

TEST_CASE("importance_diff") {
  CalibrationStats a, b;
  a.modules = {{"fc1", 0.5, {}}, {"fc2", 0.25, {}}};
  b.modules = {{"fc1", 0.125, {}}, {"fc2", 1.0, {}}};
  for (const auto& [name, v] : importance_diff(a, a)) CHECK(v == 0.0);
  const auto ab = importance_diff(a, b);
  const auto ba = importance_diff(b, a);
  REQUIRE(ab.size() == 2);
  CHECK(ab[0].first == "fc1");
  CHECK(ab[0].second == 0.375);
  CHECK(ab[1].second == -0.75);
  for (std::size_t i = 0; i < 2; ++i) CHECK(ab[i].second == -ba[i].second);
  b.modules[1].name = "fc3";
  CHECK_THROWS_AS(importance_diff(a, b), Error);
}

TEST_CASE("stability_probe") {
  Rng rng(16);
  SUBCASE("inverse square root condition number on a long-tailed spectrum") {
    const double expected = std::sqrt(1.0 / (1e-8 + 1e-6)) / std::sqrt(1.0 / (1.0 + 1e-6));
    CHECK(std::abs(inv_sqrt_condition(1.0, 1e-8, 1e-6) - expected) < 1e-9 * expected);
    CHECK(std::abs(expected - 9.95e2) < 0.05 * 9.95e2);
    const Matrix c = linalg::logspace_covariance(32, 1.0, 1e-8, 0);
    const StabilityReport rep = stability_probe(rng.gaussian(16, 32), c, 4, 1e-6);
    CHECK(std::abs(rep.cond_inv_sqrt_factor - expected) < 0.05 * expected);
  }
  SUBCASE("C = I makes both inits coincide") {
    const Matrix w = rng.gaussian(10, 12);
    const Matrix c = Matrix::Identity(12, 12);
    // Theoretical A carries a factor (1+eps)^{-1/2}, so norms differ by about eps/2.
    const StabilityReport tight = stability_probe(w, c, 3, 1e-12);
    CHECK(std::abs(tight.grad_norm_theoretical - tight.grad_norm_approx) < 1e-9);
    const StabilityReport dflt = stability_probe(w, c, 3, 1e-6);
    CHECK(std::abs(dflt.grad_norm_theoretical - dflt.grad_norm_approx) <= 1e-6 * dflt.grad_norm_approx);
  }
  SUBCASE("long tail: ordering of gradient norms and conditioning") {
    const Matrix c = linalg::logspace_covariance(32, 1.0, 1e-8, 7);
    const StabilityReport rep = stability_probe(rng.gaussian(16, 32), c, 4, 1e-6);
    CHECK(rep.grad_norm_theoretical > rep.grad_norm_approx);
    CHECK(rep.cond_theoretical_A > rep.cond_approx_A);
    CHECK(rep.loss_approx.size() == 10);
    CHECK_FALSE(rep.diverged_approx);
  }
}
