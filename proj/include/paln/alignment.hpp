#pragma once

#include "paln/backbone.hpp"
#include "paln/error.hpp"
#include "paln/manifest.hpp"
#include "paln/optim.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace paln {

/// 1 - <u, v> / (|u| |v|). Zero-norm inputs are rejected.
template <typename DerivedU, typename DerivedV>
double cosine_distance(const Eigen::MatrixBase<DerivedU>& u, const Eigen::MatrixBase<DerivedV>& v) {
  if (u.size() != v.size()) throw ShapeError("cosine distance needs equal lengths");
  const double nu = u.template cast<double>().norm();
  const double nv = v.template cast<double>().norm();
  if (nu == 0.0 || nv == 0.0) throw DegenerateInput("cosine distance of a zero-norm vector");
  return 1.0 - u.template cast<double>().dot(v.template cast<double>()) / (nu * nv);
}

/// Gradients of cosine_distance(u, v) with respect to u and v.
struct CosineGrad {
  Vector du;
  Vector dv;
};

CosineGrad cosine_distance_grad(const Vector& u, const Vector& v);

/// Maps y in {0,1} to {-1,+1}.
inline double judgment_sign(int y) { return 2.0 * y - 1.0; }

/// Hinge on the distance gap: max(0, m - (d0 - d1) * (2y - 1)).
inline double alignment_loss(double d0, double d1, int y, double margin) {
  return std::max(0.0, margin - (d0 - d1) * judgment_sign(y));
}

struct AlignmentConfig {
  double margin = 0.05;
  double lr = 3e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 8;
  FeatureMode feature_mode = FeatureMode::ClsOnly;
  std::uint64_t seed = 0;
  AdamConfig adam;
  /// When nonzero, training stops after exactly this many optimizer steps.
  std::size_t max_steps = 0;
  unsigned threads = 1;

  void validate() const;
};

struct BatchResult {
  double loss = 0.0;
  GradSet grads;
};

/// Mean hinge loss over `batch` and its gradient with respect to every adapter.
BatchResult batch_loss_and_grads(const Backbone& backbone, std::span<const Triplet> batch,
                                 const AlignmentConfig& config, Rng* dropout_rng = nullptr);

/// Adam step over every adapter's A and B.
void adam_step(AdapterSet& adapters, AdamState& state, const GradSet& grads, double lr, const AdamConfig& config);
AdamState make_adam_state(AdapterSet& adapters);

struct TripletEval {
  double mean_loss = 0.0;
  double two_afc = 0.0;
};

/// Evaluation-mode loss and 2AFC agreement; features of each id are computed once.
TripletEval evaluate_triplets(const Backbone& backbone, const TripletManifest& manifest, FeatureMode mode,
                              double margin, unsigned threads = 1);

/// Fraction of triplets where the closer variation matches y; exact ties score 0.5.
double two_afc_accuracy(const Backbone& backbone, const TripletManifest& manifest, FeatureMode mode,
                        unsigned threads = 1);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_2afc = 0.0;
};

struct TrainResult {
  AdapterSet best;
  std::vector<EpochRecord> history;
  /// Validation loss of the untouched adapters, before any step.
  double initial_val_loss = 0.0;
  double initial_val_2afc = 0.0;
  double best_val_loss = 0.0;
  /// 0 when no epoch ran.
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
};

/// Mini-batch Adam on the hinge objective, keeping the adapters with the lowest
/// validation loss (earliest epoch on ties). On return the backbone holds them.
TrainResult train_alignment(Backbone& backbone, const TripletManifest& train, const TripletManifest& val,
                            const AlignmentConfig& config);

/// One JSON object per line: {"epoch", "train_loss", "val_loss", "val_2afc"}.
std::string history_to_jsonl(const std::vector<EpochRecord>& history);

}  // namespace paln
