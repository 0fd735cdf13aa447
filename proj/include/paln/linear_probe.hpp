#pragma once

#include "paln/types.hpp"

#include <span>
#include <string>
#include <vector>

namespace paln {

struct ProbeConfig {
  std::vector<double> c_grid{1e0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6};
  std::size_t folds = 10;
  std::size_t max_iter = 1000;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const;
};

/// Multinomial logistic regression; weight is classes x d.
struct LogisticModel {
  Matrix weight;
  Vector bias;
  std::size_t iterations = 0;
  double grad_norm = 0.0;

  int predict(const Eigen::Ref<const RowVector>& x) const;
};

/// Minimizes mean cross-entropy + ||W||^2 / (2 c n) (bias unpenalized) with
/// accelerated full-batch gradient descent until the gradient norm drops below
/// `tol` or `max_iter` iterations.
LogisticModel fit_logistic(const Matrix& x, std::span<const int> y, int classes, double c, std::size_t max_iter,
                           double tol);

/// Fold id per sample: each class's members are shuffled and dealt round-robin.
std::vector<std::size_t> stratified_folds(std::span<const int> y, std::size_t folds, std::uint64_t seed);

struct ProbeResult {
  double best_c = 0.0;
  double val_accuracy = 0.0;
  /// Pooled cross-validation accuracy, aligned with the c grid.
  std::vector<double> cv_accuracy;
  std::vector<std::string> classes;
};

/// Picks c by k-fold CV accuracy on train (ties: smaller c), refits on all of
/// train and scores the validation split.
ProbeResult linear_probe_classify(const Matrix& train_x, const std::vector<std::string>& train_y,
                                  const Matrix& val_x, const std::vector<std::string>& val_y,
                                  const ProbeConfig& config);

}  // namespace paln
