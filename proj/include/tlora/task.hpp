// SPDX-License-Identifier: Apache-2.0
//
// Synthetic teacher-student tasks: a "pretrained" base network, a low-rank
// perturbation of its weights that defines the downstream task, and data
// drawn from a known input covariance.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "tlora/model.hpp"

namespace tlora {

enum class TaskKind { kTeacherStudent, kClassification };
enum class CovarianceKind { kIdentity, kLogspace };
enum class TeacherAlignment { kAligned, kRandom };

std::string_view to_string(TaskKind k);
std::string_view to_string(CovarianceKind k);
std::string_view to_string(TeacherAlignment a);
TaskKind task_kind_from_string(std::string_view s);
CovarianceKind covariance_kind_from_string(std::string_view s);
TeacherAlignment alignment_from_string(std::string_view s);

struct CovarianceSpec {
  CovarianceKind kind = CovarianceKind::kLogspace;
  double lambda_max = 1.0;
  double lambda_min = 1e-3;
  std::uint64_t rotation_seed = 7;
};

struct TeacherSpec {
  std::size_t rank = 2;
  TeacherAlignment alignment = TeacherAlignment::kAligned;
  /// Singular values of each perturbation are scale * sigma_max(W0) * g,
  /// g uniform in [0.5, 1].
  double scale = 0.5;
};

struct TaskSpec {
  TaskKind kind = TaskKind::kTeacherStudent;
  std::vector<std::size_t> dims{32, 64, 64, 16};
  Activation activation = Activation::kRelu;
  CovarianceSpec covariance;
  TeacherSpec teacher;
  /// Right singular vectors of the first base layer are a blend of the input
  /// covariance eigenbasis and a random basis; 0 = fully random.
  double pretrain_alignment = 0.5;
  double noise_var = 0.01;
  std::size_t n_train = 2048;
  std::size_t n_test = 1024;
  std::size_t n_calib = 32;
  std::size_t calib_rows = 16;  // rows per calibration sample
  std::uint64_t seed = 42;

  /// Throws kInvalidConfig on infeasible settings.
  void validate() const;
};

struct GeneratedTask {
  Network base;
  Batch train;
  Batch test;
  std::vector<Batch> calib;
  std::vector<Matrix> delta_star;  // one per layer
  Matrix population_c;             // exact input covariance
  std::vector<Matrix> layer_covariance;  // per layer, large-sample estimate (exact for layer 1)
};

GeneratedTask gen_task(const TaskSpec& spec);

}  // namespace tlora
