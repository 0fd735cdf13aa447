#include "paln/dense_probes.hpp"

#include "paln/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace paln {

PlantedDense make_planted_dense(DenseKind kind, std::size_t images, int dim, int side, int height, int width,
                                int classes, const DepthBinning& range, std::uint64_t seed) {
  if (dim < 1 || side < 1 || height < 1 || width < 1) throw InvalidArgument("planted dense shapes must be positive");
  if (kind == DenseKind::seg && classes < 2) throw InvalidArgument("segmentation needs >= 2 classes");
  range.validate();

  auto rng = make_rng(seed, 0x706c616eULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution masked(0.05);
  auto gaussian = [&](Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
    return m;
  };

  const Eigen::Index cells = static_cast<Eigen::Index>(side) * side;
  const Matrix planted = gaussian(kind == DenseKind::seg ? classes : 1, dim) / std::sqrt(static_cast<double>(dim));
  const double lo = std::log(std::max(range.d_min, 0.5));
  const double hi = std::log(range.d_max);
  if (!(hi > lo)) throw InvalidArgument("planted depth range is empty");

  PlantedDense out;
  for (std::size_t n = 0; n < images; ++n) {
    char id[32];
    std::snprintf(id, sizeof id, "img%06zu", n);
    FeatureBundle f;
    f.side = static_cast<std::uint32_t>(side);
    f.patch = gaussian(cells, dim);
    f.cls = f.patch.colwise().mean().transpose();
    const Matrix scores = f.patch * planted.transpose();

    ArrayXXb valid(height, width);
    for (Eigen::Index j = 0; j < width; ++j)
      for (Eigen::Index i = 0; i < height; ++i) valid(i, j) = !masked(rng);
    valid(0, 0) = true;

    if (kind == DenseKind::seg) {
      Eigen::ArrayXXi labels(height, width);
      for (Eigen::Index i = 0; i < height; ++i)
        for (Eigen::Index j = 0; j < width; ++j) {
          Eigen::Index best;
          scores.row(nearest_cell(i, j, height, width, side)).maxCoeff(&best);
          labels(i, j) = static_cast<int>(best);
        }
      out.targets.push_back(DenseTarget::segmentation(std::move(labels), std::move(valid)));
    } else {
      Eigen::ArrayXXd depth(height, width);
      for (Eigen::Index i = 0; i < height; ++i)
        for (Eigen::Index j = 0; j < width; ++j) {
          const double t = 1.0 / (1.0 + std::exp(-2.0 * scores(nearest_cell(i, j, height, width, side), 0)));
          depth(i, j) = std::exp(lo + t * (hi - lo));
        }
      out.targets.push_back(DenseTarget::depth_map(std::move(depth), std::move(valid)));
    }
    out.ids.emplace_back(id);
    out.features.push_back(std::move(f));
  }
  return out;
}

}  // namespace paln
