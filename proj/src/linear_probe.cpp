#include "paln/linear_probe.hpp"

#include "paln/error.hpp"
#include "paln/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace paln {

namespace {

// Mean cross-entropy gradient plus L2 on the weight columns. theta is C x (d+1), last column bias.
Matrix objective_grad(const Matrix& xb, const Matrix& onehot, const Matrix& theta, double l2) {
  Matrix z = xb * theta.transpose();
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  const double n = static_cast<double>(xb.rows());
  Matrix g = (z - onehot).transpose() * xb / n;
  const auto d = theta.cols() - 1;
  g.leftCols(d) += l2 * theta.leftCols(d);
  return g;
}

}  // namespace

void ProbeConfig::validate() const {
  if (c_grid.empty()) throw InvalidArgument("c grid must be non-empty");
  for (double c : c_grid)
    if (!(c > 0.0)) throw InvalidArgument("c values must be positive");
  if (folds < 2) throw InvalidArgument("need at least 2 folds");
}

int LogisticModel::predict(const Eigen::Ref<const RowVector>& x) const {
  Eigen::Index best;
  (weight * x.transpose() + bias).maxCoeff(&best);
  return static_cast<int>(best);
}

LogisticModel fit_logistic(const Matrix& x, std::span<const int> y, int classes, double c, std::size_t max_iter,
                           double tol) {
  const auto n = x.rows(), d = x.cols();
  if (n == 0 || static_cast<std::size_t>(n) != y.size()) throw ShapeError("one label per row required");
  if (!(c > 0.0)) throw InvalidArgument("c must be positive");
  Matrix xb(n, d + 1);
  xb << x, Matrix::Ones(n, 1);
  Matrix onehot = Matrix::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, y[static_cast<std::size_t>(i)]) = 1.0;

  const double l2 = 1.0 / (c * static_cast<double>(n));
  const Matrix gram = xb.transpose() * xb / static_cast<double>(n);
  const double lambda_max = Eigen::SelfAdjointEigenSolver<Matrix>(gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
  const double step = 1.0 / (0.5 * lambda_max + l2);

  Matrix theta = Matrix::Zero(classes, d + 1);
  Matrix ahead = theta;
  double t = 1.0;
  LogisticModel model;
  for (model.iterations = 0; model.iterations < max_iter; ++model.iterations) {
    const Matrix g = objective_grad(xb, onehot, ahead, l2);
    model.grad_norm = g.norm();
    if (model.grad_norm < tol) {
      theta = ahead;
      break;
    }
    const Matrix next = ahead - step * g;
    // Gradient-based restart keeps the momentum from overshooting.
    if ((g.array() * (next - theta).array()).sum() > 0.0) t = 1.0;
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    ahead = next + ((t - 1.0) / t_next) * (next - theta);
    theta = next;
    t = t_next;
  }
  model.weight = theta.leftCols(d);
  model.bias = theta.col(d);
  return model;
}

std::vector<std::size_t> stratified_folds(std::span<const int> y, std::size_t folds, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < y.size(); ++i) members[y[i]].push_back(i);
  auto rng = make_rng(seed, 0x666f6c64ULL);
  std::vector<std::size_t> fold(y.size());
  std::size_t offset = 0;
  for (auto& [label, idx] : members) {
    if (idx.size() < folds)
      throw InvalidArgument("class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                            " members, fewer than " + std::to_string(folds) + " folds");
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < idx.size(); ++j) fold[idx[j]] = (offset + j) % folds;
    offset += idx.size();
  }
  return fold;
}

ProbeResult linear_probe_classify(const Matrix& train_x, const std::vector<std::string>& train_y,
                                  const Matrix& val_x, const std::vector<std::string>& val_y,
                                  const ProbeConfig& config) {
  config.validate();
  if (static_cast<std::size_t>(train_x.rows()) != train_y.size() ||
      static_cast<std::size_t>(val_x.rows()) != val_y.size())
    throw ShapeError("one label per feature row required");
  if (val_y.empty()) throw InvalidArgument("validation split is empty");
  if (train_x.cols() != val_x.cols()) throw ShapeError("train and validation dimensions differ");

  ProbeResult result;
  result.classes = train_y;
  std::sort(result.classes.begin(), result.classes.end());
  result.classes.erase(std::unique(result.classes.begin(), result.classes.end()), result.classes.end());
  if (result.classes.size() < 2) throw InvalidArgument("linear probe needs >= 2 classes");
  std::map<std::string, int> class_of;
  for (std::size_t c = 0; c < result.classes.size(); ++c) class_of[result.classes[c]] = static_cast<int>(c);
  const int classes = static_cast<int>(result.classes.size());

  std::vector<int> y(train_y.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = class_of.at(train_y[i]);
  const auto fold = stratified_folds(y, config.folds, config.seed);

  // One job per (c, fold); each writes its own correct-count slot.
  const std::size_t jobs = config.c_grid.size() * config.folds;
  std::vector<std::size_t> correct(jobs, 0);
  parallel_for(jobs, config.threads, [&](std::size_t job) {
    const double c = config.c_grid[job / config.folds];
    const std::size_t f = job % config.folds;
    std::vector<Eigen::Index> tr, te;
    for (std::size_t i = 0; i < y.size(); ++i) (fold[i] == f ? te : tr).push_back(static_cast<Eigen::Index>(i));
    Matrix xtr(static_cast<Eigen::Index>(tr.size()), train_x.cols());
    std::vector<int> ytr;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      xtr.row(static_cast<Eigen::Index>(i)) = train_x.row(tr[i]);
      ytr.push_back(y[static_cast<std::size_t>(tr[i])]);
    }
    const auto model = fit_logistic(xtr, ytr, classes, c, config.max_iter, config.tol);
    for (auto i : te) correct[job] += model.predict(train_x.row(i)) == y[static_cast<std::size_t>(i)];
  });

  double best = -1.0;
  for (std::size_t ci = 0; ci < config.c_grid.size(); ++ci) {
    std::size_t sum = 0;
    for (std::size_t f = 0; f < config.folds; ++f) sum += correct[ci * config.folds + f];
    const double acc = static_cast<double>(sum) / static_cast<double>(y.size());
    result.cv_accuracy.push_back(acc);
    const double c = config.c_grid[ci];
    if (acc > best || (acc == best && c < result.best_c)) {
      best = acc;
      result.best_c = c;
    }
  }

  const auto model = fit_logistic(train_x, y, classes, result.best_c, config.max_iter, config.tol);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < val_y.size(); ++i) {
    const auto it = class_of.find(val_y[i]);
    if (it != class_of.end() && model.predict(val_x.row(static_cast<Eigen::Index>(i))) == it->second) ++hits;
  }
  result.val_accuracy = static_cast<double>(hits) / static_cast<double>(val_y.size());
  return result;
}

}  // namespace paln
