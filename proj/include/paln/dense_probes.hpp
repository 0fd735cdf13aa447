#pragma once

#include "paln/backbone.hpp"
#include "paln/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace paln {

using ArrayXXb = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

enum class DenseKind : std::uint8_t { seg = 0, depth = 1 };

/// Per-pixel supervision with a validity mask. Only the field matching `kind` is used.
struct DenseTarget {
  DenseKind kind = DenseKind::seg;
  Eigen::ArrayXXi labels;
  Eigen::ArrayXXd depth;
  ArrayXXb valid;

  static DenseTarget segmentation(Eigen::ArrayXXi labels, ArrayXXb valid);
  static DenseTarget depth_map(Eigen::ArrayXXd depth, ArrayXXb valid);

  Eigen::Index height() const { return valid.rows(); }
  Eigen::Index width() const { return valid.cols(); }
  std::size_t valid_count() const { return static_cast<std::size_t>(valid.count()); }
};

/// `PALT` sidecar: u32 H, u32 W, u8 kind, u16 ids or f32 meters, packed mask bits.
void save_target(const DenseTarget& target, const std::filesystem::path& path);
DenseTarget load_target(const std::filesystem::path& path);

enum class BinSpacing { uniform, log_uniform };

struct DepthBinning {
  double d_min = 0.001;
  double d_max = 10.0;
  int n_bins = 256;
  BinSpacing spacing = BinSpacing::uniform;

  void validate() const;
  double center(int bin) const;
  Vector centers() const;
  /// Clamps to [d_min, d_max] and floors into its bin.
  int encode(double depth) const;
};

Eigen::ArrayXXi depth_encode(const Eigen::ArrayXXd& depth, const DepthBinning& binning);

/// Probability-weighted bin centers; `probs` is one distribution per row.
Vector depth_decode(const Matrix& probs, const DepthBinning& binning);

/// 1 - mean soft Jaccard over classes with a non-empty union. `probs` is
/// (H*W) x C with pixels in row-major order.
double jaccard_loss(const Matrix& probs, const DenseTarget& target);
Matrix jaccard_loss_grad(const Matrix& probs, const DenseTarget& target);

enum class SilogSign { paper, classic };

struct SilogParams {
  double eps = 0.001;
  double lambda = 0.15;
  /// `paper` adds the squared-mean term, `classic` subtracts it.
  SilogSign sign = SilogSign::paper;
};

/// (1/N) sum d^2 +/- lambda (1/N^2) (sum d)^2 with d = log(A + eps) - log(B + eps) on valid pixels.
double silog_loss(const Eigen::ArrayXXd& pred, const DenseTarget& target, const SilogParams& params = {});
Eigen::ArrayXXd silog_loss_grad(const Eigen::ArrayXXd& pred, const DenseTarget& target,
                                const SilogParams& params = {});

struct SegHead {
  Matrix weight;  ///< classes x d
  Vector bias;

  int classes() const { return static_cast<int>(weight.rows()); }
};

struct DepthHead {
  Matrix weight;  ///< bins x d
  Vector bias;
  DepthBinning binning;
};

enum class ResolutionRule { upsample_predictions, downsample_targets };

struct HeadTrainConfig {
  double lr = 3e-4;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  ResolutionRule rule = ResolutionRule::upsample_predictions;
  SilogParams silog;
  AdamConfig adam;
  double init_std = 0.01;

  static HeadTrainConfig seg_preset();
  static HeadTrainConfig depth_preset();
};

/// Row-major cell index that pixel (i, j) of an H x W map reads from an s x s grid.
Eigen::Index nearest_cell(Eigen::Index i, Eigen::Index j, Eigen::Index height, Eigen::Index width, Eigen::Index side);

/// Majority label (ties: smallest id) / mean depth over the valid pixels of each cell.
DenseTarget downsample_target(const DenseTarget& target, Eigen::Index side);

SegHead train_seg_head(std::span<const FeatureBundle> features, std::span<const DenseTarget> targets, int classes,
                       const HeadTrainConfig& config, std::vector<double>* epoch_losses = nullptr);
DepthHead train_depth_head(std::span<const FeatureBundle> features, std::span<const DenseTarget> targets,
                           const DepthBinning& binning, const HeadTrainConfig& config,
                           std::vector<double>* epoch_losses = nullptr);

Eigen::ArrayXXi predict_seg(const SegHead& head, const FeatureBundle& features, Eigen::Index height,
                            Eigen::Index width);
Eigen::ArrayXXd predict_depth(const DepthHead& head, const FeatureBundle& features, Eigen::Index height,
                              Eigen::Index width);

struct SegMetrics {
  double miou = 0.0;
  double pixel_accuracy = 0.0;
  int classes_counted = 0;
};

/// Confusion-matrix metrics over all valid pixels; mIoU averages the classes
/// present in target or prediction.
SegMetrics seg_metrics(std::span<const Eigen::ArrayXXi> predictions, std::span<const DenseTarget> targets);
SegMetrics eval_seg(const SegHead& head, std::span<const FeatureBundle> features,
                    std::span<const DenseTarget> targets);

struct DepthMetrics {
  double rmse = 0.0;
  double abs_rel = 0.0;
  double log10 = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
};

DepthMetrics depth_metrics(std::span<const Eigen::ArrayXXd> predictions, std::span<const DenseTarget> targets);
DepthMetrics eval_depth(const DepthHead& head, std::span<const FeatureBundle> features,
                        std::span<const DenseTarget> targets);

/// Dense probing data with a hidden linear head: Gaussian patch tokens, labels
/// from the argmax of planted class scores, or depths log-linear in a planted
/// projection and confined to [max(d_min, 0.5), d_max]. About 5% of pixels are masked.
struct PlantedDense {
  std::vector<std::string> ids;
  std::vector<FeatureBundle> features;
  std::vector<DenseTarget> targets;
};

PlantedDense make_planted_dense(DenseKind kind, std::size_t images, int dim, int side, int height, int width,
                                int classes, const DepthBinning& range, std::uint64_t seed);

}  // namespace paln
