#include "paln/dense_probes.hpp"

#include "paln/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace paln {

namespace {

void softmax_rows(Matrix& z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

// For each pixel of an H x W map, the grid cell it reads from.
std::vector<Eigen::Index> cell_map(Eigen::Index height, Eigen::Index width, Eigen::Index side) {
  std::vector<Eigen::Index> map(static_cast<std::size_t>(height * width));
  for (Eigen::Index i = 0; i < height; ++i)
    for (Eigen::Index j = 0; j < width; ++j)
      map[static_cast<std::size_t>(i * width + j)] = nearest_cell(i, j, height, width, side);
  return map;
}

Matrix gather_rows(const Matrix& cells, const std::vector<Eigen::Index>& map) {
  Matrix out(static_cast<Eigen::Index>(map.size()), cells.cols());
  for (std::size_t p = 0; p < map.size(); ++p) out.row(static_cast<Eigen::Index>(p)) = cells.row(map[p]);
  return out;
}

Matrix scatter_rows(const Matrix& pixels, const std::vector<Eigen::Index>& map, Eigen::Index cells) {
  Matrix out = Matrix::Zero(cells, pixels.cols());
  for (std::size_t p = 0; p < map.size(); ++p) out.row(map[p]) += pixels.row(static_cast<Eigen::Index>(p));
  return out;
}

void require_valid_pixels(const DenseTarget& target) {
  if (target.valid_count() == 0) throw InvalidArgument("dense target has an empty valid mask");
}

void check_patch_features(const FeatureBundle& f) {
  if (!f.has_patch() || f.patch.rows() != static_cast<Eigen::Index>(f.side) * f.side)
    throw InvalidArgument("dense heads need patch tokens");
}

Matrix init_weight(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix w(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) w(i, j) = n(rng);
  return w;
}

// Targets after applying the resolution rule; also validates shapes.
std::vector<DenseTarget> effective_targets(std::span<const FeatureBundle> features,
                                           std::span<const DenseTarget> targets, ResolutionRule rule,
                                           DenseKind kind) {
  if (features.size() != targets.size()) throw ShapeError("feature and target counts differ");
  if (features.empty()) throw InvalidArgument("no training samples");
  std::vector<DenseTarget> out;
  out.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    check_patch_features(features[i]);
    if (targets[i].kind != kind) throw InvalidArgument("target kind does not match the head");
    if (features[i].dim() != features[0].dim()) throw ShapeError("feature dimension differs across samples");
    out.push_back(rule == ResolutionRule::downsample_targets ? downsample_target(targets[i], features[i].side)
                                                              : targets[i]);
  }
  return out;
}

// Shared mini-batch Adam loop. `sample_grad` returns the loss of one sample and
// adds its weight/bias gradient (unscaled) into the provided accumulators.
template <typename SampleGrad>
std::pair<Matrix, Vector> train_linear(Eigen::Index outputs, Eigen::Index dim, std::size_t samples,
                                       const HeadTrainConfig& config, SampleGrad&& sample_grad,
                                       std::vector<double>* epoch_losses) {
  auto rng = make_rng(config.seed, 0x68656164ULL);
  Matrix weight = init_weight(outputs, dim, config.init_std, rng);
  Matrix bias = Matrix::Zero(outputs, 1);
  if (config.batch_size < 1) throw InvalidArgument("batch size must be >= 1");

  std::vector<Matrix*> params{&weight, &bias};
  auto state = make_adam_state(params);
  Matrix gw(outputs, dim), gb(outputs, 1);
  std::vector<std::size_t> order(samples);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = make_rng(config.seed, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < samples; start += config.batch_size) {
      const std::size_t end = std::min(samples, start + config.batch_size);
      gw.setZero();
      gb.setZero();
      for (std::size_t k = start; k < end; ++k) epoch_loss += sample_grad(order[k], weight, bias, gw, gb);
      const double inv = 1.0 / static_cast<double>(end - start);
      gw *= inv;
      gb *= inv;
      const std::vector<const Matrix*> grads{&gw, &gb};
      adam_update(params, grads, state, config.lr, config.adam);
    }
    if (epoch_losses) epoch_losses->push_back(epoch_loss / static_cast<double>(samples));
  }
  return {weight, bias.col(0)};
}

Matrix head_logits(const Matrix& weight, const Vector& bias, const FeatureBundle& f) {
  Matrix z = f.patch * weight.transpose();
  z.rowwise() += bias.transpose();
  return z;
}

}  // namespace

DenseTarget DenseTarget::segmentation(Eigen::ArrayXXi labels, ArrayXXb valid) {
  if (labels.rows() != valid.rows() || labels.cols() != valid.cols()) throw ShapeError("label/mask shape mismatch");
  DenseTarget t;
  t.kind = DenseKind::seg;
  t.labels = std::move(labels);
  t.valid = std::move(valid);
  return t;
}

DenseTarget DenseTarget::depth_map(Eigen::ArrayXXd depth, ArrayXXb valid) {
  if (depth.rows() != valid.rows() || depth.cols() != valid.cols()) throw ShapeError("depth/mask shape mismatch");
  DenseTarget t;
  t.kind = DenseKind::depth;
  t.depth = std::move(depth);
  t.valid = std::move(valid);
  return t;
}

void DepthBinning::validate() const {
  if (!(d_min > 0.0) || !(d_max > d_min)) throw InvalidArgument("depth binning needs 0 < d_min < d_max");
  if (n_bins < 2) throw InvalidArgument("depth binning needs >= 2 bins");
}

double DepthBinning::center(int bin) const {
  const double t = (static_cast<double>(bin) + 0.5) / n_bins;
  if (spacing == BinSpacing::uniform) return d_min + t * (d_max - d_min);
  return std::exp(std::log(d_min) + t * (std::log(d_max) - std::log(d_min)));
}

Vector DepthBinning::centers() const {
  Vector c(n_bins);
  for (int k = 0; k < n_bins; ++k) c[k] = center(k);
  return c;
}

int DepthBinning::encode(double depth) const {
  const double x = std::clamp(depth, d_min, d_max);
  const double t = spacing == BinSpacing::uniform
                       ? (x - d_min) / (d_max - d_min)
                       : (std::log(x) - std::log(d_min)) / (std::log(d_max) - std::log(d_min));
  return std::min(n_bins - 1, static_cast<int>(std::floor(t * n_bins)));
}

Eigen::ArrayXXi depth_encode(const Eigen::ArrayXXd& depth, const DepthBinning& binning) {
  binning.validate();
  return depth.unaryExpr([&](double v) { return binning.encode(v); });
}

Vector depth_decode(const Matrix& probs, const DepthBinning& binning) {
  binning.validate();
  if (probs.cols() != binning.n_bins) throw ShapeError("bin distribution width does not match binning");
  return probs * binning.centers();
}

double jaccard_loss(const Matrix& probs, const DenseTarget& target) {
  require_valid_pixels(target);
  const auto h = target.height(), w = target.width();
  if (probs.rows() != h * w) throw ShapeError("probability map does not match target size");
  const auto classes = probs.cols();
  Vector inter = Vector::Zero(classes), uni = Vector::Zero(classes);
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < w; ++j) {
      if (!target.valid(i, j)) continue;
      const int label = target.labels(i, j);
      if (label < 0 || label >= classes) throw InvalidArgument("target class id out of range");
      const auto p = probs.row(i * w + j);
      for (Eigen::Index c = 0; c < classes; ++c) {
        const double t = c == label ? 1.0 : 0.0;
        inter[c] += p[c] * t;
        uni[c] += p[c] + t - p[c] * t;
      }
    }
  }
  double sum = 0.0;
  int counted = 0;
  for (Eigen::Index c = 0; c < classes; ++c) {
    if (uni[c] <= 0.0) continue;
    sum += inter[c] / uni[c];
    ++counted;
  }
  return counted == 0 ? 0.0 : 1.0 - sum / counted;
}

Matrix jaccard_loss_grad(const Matrix& probs, const DenseTarget& target) {
  require_valid_pixels(target);
  const auto h = target.height(), w = target.width();
  if (probs.rows() != h * w) throw ShapeError("probability map does not match target size");
  const auto classes = probs.cols();
  Vector inter = Vector::Zero(classes), uni = Vector::Zero(classes);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) {
      if (!target.valid(i, j)) continue;
      const int label = target.labels(i, j);
      const auto p = probs.row(i * w + j);
      for (Eigen::Index c = 0; c < classes; ++c) {
        const double t = c == label ? 1.0 : 0.0;
        inter[c] += p[c] * t;
        uni[c] += p[c] + t - p[c] * t;
      }
    }
  int counted = 0;
  for (Eigen::Index c = 0; c < classes; ++c) counted += uni[c] > 0.0;
  Matrix grad = Matrix::Zero(probs.rows(), classes);
  if (counted == 0) return grad;
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) {
      if (!target.valid(i, j)) continue;
      const int label = target.labels(i, j);
      for (Eigen::Index c = 0; c < classes; ++c) {
        if (uni[c] <= 0.0) continue;
        const double t = c == label ? 1.0 : 0.0;
        // dJ/dp = (t U - I (1 - t)) / U^2
        grad(i * w + j, c) = -(t * uni[c] - inter[c] * (1.0 - t)) / (uni[c] * uni[c]) / counted;
      }
    }
  return grad;
}

namespace {

struct SilogTerms {
  Eigen::ArrayXXd d;
  double sum = 0.0;
  double sum_sq = 0.0;
  double n = 0.0;
};

SilogTerms silog_terms(const Eigen::ArrayXXd& pred, const DenseTarget& target, const SilogParams& p) {
  require_valid_pixels(target);
  if (pred.rows() != target.height() || pred.cols() != target.width())
    throw ShapeError("depth prediction does not match target size");
  SilogTerms s;
  s.d = Eigen::ArrayXXd::Zero(pred.rows(), pred.cols());
  for (Eigen::Index j = 0; j < pred.cols(); ++j)
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
      if (!target.valid(i, j)) continue;
      if (pred(i, j) < 0.0 || target.depth(i, j) < 0.0) throw InvalidArgument("depths must be non-negative");
      const double di = std::log(pred(i, j) + p.eps) - std::log(target.depth(i, j) + p.eps);
      s.d(i, j) = di;
      s.sum += di;
      s.sum_sq += di * di;
      s.n += 1.0;
    }
  return s;
}

double silog_sign(const SilogParams& p) { return p.sign == SilogSign::paper ? 1.0 : -1.0; }

}  // namespace

double silog_loss(const Eigen::ArrayXXd& pred, const DenseTarget& target, const SilogParams& params) {
  const auto s = silog_terms(pred, target, params);
  return s.sum_sq / s.n + silog_sign(params) * params.lambda * (s.sum * s.sum) / (s.n * s.n);
}

Eigen::ArrayXXd silog_loss_grad(const Eigen::ArrayXXd& pred, const DenseTarget& target, const SilogParams& params) {
  const auto s = silog_terms(pred, target, params);
  const double shared = silog_sign(params) * 2.0 * params.lambda * s.sum / (s.n * s.n);
  Eigen::ArrayXXd g = Eigen::ArrayXXd::Zero(pred.rows(), pred.cols());
  for (Eigen::Index j = 0; j < pred.cols(); ++j)
    for (Eigen::Index i = 0; i < pred.rows(); ++i)
      if (target.valid(i, j)) g(i, j) = (2.0 * s.d(i, j) / s.n + shared) / (pred(i, j) + params.eps);
  return g;
}

HeadTrainConfig HeadTrainConfig::seg_preset() { return {}; }

HeadTrainConfig HeadTrainConfig::depth_preset() {
  HeadTrainConfig c;
  c.batch_size = 128;
  return c;
}

Eigen::Index nearest_cell(Eigen::Index i, Eigen::Index j, Eigen::Index height, Eigen::Index width, Eigen::Index side) {
  return (i * side / height) * side + (j * side / width);
}

DenseTarget downsample_target(const DenseTarget& target, Eigen::Index side) {
  const auto h = target.height(), w = target.width();
  if (side < 1 || h % side != 0 || w % side != 0)
    throw ShapeError("target " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible into a " +
                     std::to_string(side) + "x" + std::to_string(side) + " grid");
  const auto bh = h / side, bw = w / side;
  DenseTarget out;
  out.kind = target.kind;
  out.valid = ArrayXXb::Constant(side, side, false);
  if (target.kind == DenseKind::seg) out.labels = Eigen::ArrayXXi::Zero(side, side);
  else out.depth = Eigen::ArrayXXd::Zero(side, side);
  for (Eigen::Index ci = 0; ci < side; ++ci)
    for (Eigen::Index cj = 0; cj < side; ++cj) {
      std::map<int, int> votes;
      double depth_sum = 0.0;
      int count = 0;
      for (Eigen::Index i = ci * bh; i < (ci + 1) * bh; ++i)
        for (Eigen::Index j = cj * bw; j < (cj + 1) * bw; ++j) {
          if (!target.valid(i, j)) continue;
          ++count;
          if (target.kind == DenseKind::seg) ++votes[target.labels(i, j)];
          else depth_sum += target.depth(i, j);
        }
      if (count == 0) continue;
      out.valid(ci, cj) = true;
      if (target.kind == DenseKind::seg) {
        out.labels(ci, cj) =
            std::max_element(votes.begin(), votes.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
      } else {
        out.depth(ci, cj) = depth_sum / count;
      }
    }
  return out;
}

SegHead train_seg_head(std::span<const FeatureBundle> features, std::span<const DenseTarget> targets, int classes,
                       const HeadTrainConfig& config, std::vector<double>* epoch_losses) {
  if (classes < 2) throw InvalidArgument("segmentation needs >= 2 classes");
  const auto eff = effective_targets(features, targets, config.rule, DenseKind::seg);
  std::vector<std::vector<Eigen::Index>> maps;
  for (std::size_t i = 0; i < eff.size(); ++i) maps.push_back(cell_map(eff[i].height(), eff[i].width(), features[i].side));

  auto sample = [&](std::size_t i, const Matrix& weight, const Matrix& bias, Matrix& gw, Matrix& gb) {
    const auto& f = features[i];
    Matrix probs = head_logits(weight, bias.col(0), f);
    softmax_rows(probs);
    const Matrix pixel_probs = gather_rows(probs, maps[i]);
    const double loss = jaccard_loss(pixel_probs, eff[i]);
    const Matrix dcell = scatter_rows(jaccard_loss_grad(pixel_probs, eff[i]), maps[i], probs.rows());
    const Vector row_dot = dcell.cwiseProduct(probs).rowwise().sum();
    const Matrix dz = probs.cwiseProduct(dcell.colwise() - row_dot);
    gw.noalias() += dz.transpose() * f.patch;
    gb += dz.colwise().sum().transpose();
    return loss;
  };
  auto [w, b] = train_linear(classes, features[0].dim(), eff.size(), config, sample, epoch_losses);
  return {std::move(w), std::move(b)};
}

DepthHead train_depth_head(std::span<const FeatureBundle> features, std::span<const DenseTarget> targets,
                           const DepthBinning& binning, const HeadTrainConfig& config,
                           std::vector<double>* epoch_losses) {
  binning.validate();
  const auto eff = effective_targets(features, targets, config.rule, DenseKind::depth);
  std::vector<std::vector<Eigen::Index>> maps;
  for (std::size_t i = 0; i < eff.size(); ++i) maps.push_back(cell_map(eff[i].height(), eff[i].width(), features[i].side));
  const Vector centers = binning.centers();

  auto sample = [&](std::size_t i, const Matrix& weight, const Matrix& bias, Matrix& gw, Matrix& gb) {
    const auto& f = features[i];
    const auto& t = eff[i];
    Matrix probs = head_logits(weight, bias.col(0), f);
    softmax_rows(probs);
    const Vector cell_depth = probs * centers;
    Eigen::ArrayXXd pred(t.height(), t.width());
    for (Eigen::Index r = 0; r < t.height(); ++r)
      for (Eigen::Index c = 0; c < t.width(); ++c)
        pred(r, c) = cell_depth[maps[i][static_cast<std::size_t>(r * t.width() + c)]];
    const double loss = silog_loss(pred, t, config.silog);
    const Eigen::ArrayXXd dpred = silog_loss_grad(pred, t, config.silog);
    Vector dcell = Vector::Zero(cell_depth.size());
    for (Eigen::Index r = 0; r < t.height(); ++r)
      for (Eigen::Index c = 0; c < t.width(); ++c)
        dcell[maps[i][static_cast<std::size_t>(r * t.width() + c)]] += dpred(r, c);
    // dA/dz_k = p_k (c_k - A)
    Matrix dz = probs;
    for (Eigen::Index r = 0; r < dz.rows(); ++r)
      dz.row(r) = probs.row(r).cwiseProduct((centers.array() - cell_depth[r]).matrix().transpose()) * dcell[r];
    gw.noalias() += dz.transpose() * f.patch;
    gb += dz.colwise().sum().transpose();
    return loss;
  };
  auto [w, b] = train_linear(binning.n_bins, features[0].dim(), eff.size(), config, sample, epoch_losses);
  return {std::move(w), std::move(b), binning};
}

Eigen::ArrayXXi predict_seg(const SegHead& head, const FeatureBundle& f, Eigen::Index height, Eigen::Index width) {
  check_patch_features(f);
  const Matrix z = head_logits(head.weight, head.bias, f);
  Eigen::ArrayXXi out(height, width);
  for (Eigen::Index i = 0; i < height; ++i)
    for (Eigen::Index j = 0; j < width; ++j) {
      Eigen::Index best;
      z.row(nearest_cell(i, j, height, width, f.side)).maxCoeff(&best);
      out(i, j) = static_cast<int>(best);
    }
  return out;
}

Eigen::ArrayXXd predict_depth(const DepthHead& head, const FeatureBundle& f, Eigen::Index height,
                              Eigen::Index width) {
  check_patch_features(f);
  Matrix probs = head_logits(head.weight, head.bias, f);
  softmax_rows(probs);
  const Vector cell_depth = depth_decode(probs, head.binning);
  Eigen::ArrayXXd out(height, width);
  for (Eigen::Index i = 0; i < height; ++i)
    for (Eigen::Index j = 0; j < width; ++j) out(i, j) = cell_depth[nearest_cell(i, j, height, width, f.side)];
  return out;
}

SegMetrics seg_metrics(std::span<const Eigen::ArrayXXi> predictions, std::span<const DenseTarget> targets) {
  if (predictions.size() != targets.size()) throw ShapeError("prediction and target counts differ");
  int classes = 0;
  std::size_t valid = 0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto& t = targets[k];
    if (predictions[k].rows() != t.height() || predictions[k].cols() != t.width())
      throw ShapeError("prediction does not match target size");
    valid += t.valid_count();
    for (Eigen::Index j = 0; j < t.width(); ++j)
      for (Eigen::Index i = 0; i < t.height(); ++i) {
        if (!t.valid(i, j)) continue;
        if (t.labels(i, j) < 0 || predictions[k](i, j) < 0) throw InvalidArgument("negative class id");
        classes = std::max({classes, t.labels(i, j) + 1, predictions[k](i, j) + 1});
      }
  }
  if (valid == 0) throw InvalidArgument("no valid pixels to evaluate");

  // confusion(target, predicted)
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> confusion =
      Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(classes, classes);
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto& t = targets[k];
    for (Eigen::Index j = 0; j < t.width(); ++j)
      for (Eigen::Index i = 0; i < t.height(); ++i)
        if (t.valid(i, j)) ++confusion(t.labels(i, j), predictions[k](i, j));
  }
  SegMetrics m;
  double iou_sum = 0.0;
  for (int c = 0; c < classes; ++c) {
    const auto tp = confusion(c, c);
    const auto uni = confusion.row(c).sum() + confusion.col(c).sum() - tp;
    if (uni == 0) continue;
    iou_sum += static_cast<double>(tp) / static_cast<double>(uni);
    ++m.classes_counted;
  }
  m.miou = iou_sum / m.classes_counted;
  m.pixel_accuracy = static_cast<double>(confusion.trace()) / static_cast<double>(valid);
  return m;
}

SegMetrics eval_seg(const SegHead& head, std::span<const FeatureBundle> features, std::span<const DenseTarget> targets) {
  if (features.size() != targets.size()) throw ShapeError("feature and target counts differ");
  std::vector<Eigen::ArrayXXi> preds;
  for (std::size_t i = 0; i < features.size(); ++i)
    preds.push_back(predict_seg(head, features[i], targets[i].height(), targets[i].width()));
  return seg_metrics(preds, targets);
}

DepthMetrics depth_metrics(std::span<const Eigen::ArrayXXd> predictions, std::span<const DenseTarget> targets) {
  if (predictions.size() != targets.size()) throw ShapeError("prediction and target counts differ");
  DepthMetrics m;
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto& t = targets[k];
    const auto& a = predictions[k];
    if (a.rows() != t.height() || a.cols() != t.width()) throw ShapeError("prediction does not match target size");
    for (Eigen::Index j = 0; j < t.width(); ++j)
      for (Eigen::Index i = 0; i < t.height(); ++i) {
        if (!t.valid(i, j)) continue;
        const double b = t.depth(i, j);
        const double p = a(i, j);
        if (!(b > 0.0)) throw InvalidArgument("target depth must be positive on valid pixels");
        if (!(p > 0.0)) throw InvalidArgument("predicted depth must be positive");
        sq += (p - b) * (p - b);
        m.abs_rel += std::abs(p - b) / b;
        m.log10 += std::abs(std::log10(p) - std::log10(b));
        const double ratio = std::max(p / b, b / p);
        m.delta1 += ratio < 1.25;
        m.delta2 += ratio < 1.25 * 1.25;
        m.delta3 += ratio < 1.25 * 1.25 * 1.25;
        ++n;
      }
  }
  if (n == 0) throw InvalidArgument("no valid pixels to evaluate");
  const double dn = static_cast<double>(n);
  m.rmse = std::sqrt(sq / dn);
  m.abs_rel /= dn;
  m.log10 /= dn;
  m.delta1 /= dn;
  m.delta2 /= dn;
  m.delta3 /= dn;
  return m;
}

DepthMetrics eval_depth(const DepthHead& head, std::span<const FeatureBundle> features,
                        std::span<const DenseTarget> targets) {
  if (features.size() != targets.size()) throw ShapeError("feature and target counts differ");
  std::vector<Eigen::ArrayXXd> preds;
  for (std::size_t i = 0; i < features.size(); ++i)
    preds.push_back(predict_depth(head, features[i], targets[i].height(), targets[i].width()));
  return depth_metrics(preds, targets);
}

}  // namespace paln
