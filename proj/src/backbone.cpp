#include "paln/backbone.hpp"

#include <cmath>
#include <memory>

namespace paln {

FeatureMode parse_feature_mode(const std::string& text) {
  if (text == "cls") return FeatureMode::ClsOnly;
  if (text == "patch") return FeatureMode::ClsPlusPooledPatch;
  throw InvalidArgument("feature mode must be 'cls' or 'patch', got '" + text + "'");
}

const char* to_string(FeatureMode mode) { return mode == FeatureMode::ClsOnly ? "cls" : "patch"; }

LoraAdapter LoraAdapter::init(Eigen::Index d_in, Eigen::Index d_out, Eigen::Index rank, double alpha,
                              double dropout, Rng& rng, double a_std) {
  if (rank < 1) throw InvalidArgument("LoRA rank must be >= 1");
  if (a_std < 0.0) a_std = 1.0 / std::sqrt(static_cast<double>(d_in));
  std::normal_distribution<double> n(0.0, a_std);
  LoraAdapter ad;
  ad.a.resize(rank, d_in);
  for (Eigen::Index j = 0; j < d_in; ++j)
    for (Eigen::Index i = 0; i < rank; ++i) ad.a(i, j) = n(rng);
  ad.b = Matrix::Zero(d_out, rank);
  ad.alpha = alpha;
  ad.dropout = dropout;
  ad.validate();
  return ad;
}

void LoraAdapter::validate() const {
  if (a.rows() < 1) throw InvalidArgument("LoRA rank must be >= 1");
  if (b.cols() != a.rows()) throw ShapeError("LoRA B must have r columns");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("LoRA dropout must be in [0, 1)");
}

GradSet zero_grads(const AdapterSet& adapters) {
  GradSet g;
  g.reserve(adapters.size());
  for (const auto& na : adapters)
    g.push_back({Matrix::Zero(na.adapter.a.rows(), na.adapter.a.cols()),
                 Matrix::Zero(na.adapter.b.rows(), na.adapter.b.cols())});
  return g;
}

Vector assemble_features(const FeatureBundle& bundle, FeatureMode mode) {
  if (mode == FeatureMode::ClsOnly) return bundle.cls;
  if (!bundle.has_patch() || bundle.patch.rows() == 0)
    throw InvalidArgument("patch feature mode requires patch tokens");
  const auto d = bundle.dim();
  Vector out(2 * d);
  out.head(d) = bundle.cls;
  out.tail(d) = bundle.patch.colwise().mean().transpose();
  return out;
}

FeatureBundle assemble_features_pullback(const Vector& grad, const FeatureBundle& bundle, FeatureMode mode) {
  FeatureBundle g;
  g.side = bundle.side;
  const auto d = bundle.dim();
  g.cls = grad.head(d);
  if (mode == FeatureMode::ClsOnly) {
    g.patch = Matrix::Zero(bundle.patch.rows(), bundle.patch.cols());
  } else {
    const auto cells = bundle.patch.rows();
    g.patch = (grad.tail(d) / static_cast<double>(cells)).transpose().replicate(cells, 1);
  }
  return g;
}

FeatureBundle lookup_features(const EmbeddingStore& store, const std::string& id) {
  const auto& r = store.at(id);
  FeatureBundle b;
  b.cls = r.cls.cast<double>();
  b.side = store.patch_side();
  if (b.side > 0) b.patch = r.patch.cast<double>();
  return b;
}

Traced FrozenLookup::trace(const std::string& id, Rng*) const {
  return {extract(id), [](const FeatureBundle&, GradSet&) {}};
}

ProjectionBackbone::ProjectionBackbone(const EmbeddingStore& store, LoraAdapter adapter) : store_(&store) {
  adapter.validate();
  const auto d = static_cast<Eigen::Index>(store.dim());
  if (adapter.a.cols() != d || adapter.b.rows() != d)
    throw ShapeError("projection adapter must be d x d for d=" + std::to_string(d));
  adapters_.push_back({"proj", std::move(adapter)});
}

ProjectionBackbone ProjectionBackbone::with_fresh_adapter(const EmbeddingStore& store, Eigen::Index rank,
                                                          double alpha, double dropout, std::uint64_t seed) {
  auto rng = make_rng(seed, 0x6c6f7261ULL);
  const auto d = static_cast<Eigen::Index>(store.dim());
  return ProjectionBackbone(store, LoraAdapter::init(d, d, rank, alpha, dropout, rng));
}

Matrix ProjectionBackbone::project_rows(const Matrix& rows) const {
  const auto& ad = adapters_.front().adapter;
  Matrix out = rows;
  out.noalias() += ad.scale() * ((rows * ad.a.transpose()) * ad.b.transpose());
  return out;
}

FeatureBundle ProjectionBackbone::extract(const std::string& id) const {
  FeatureBundle b = lookup_features(*store_, id);
  b.cls = project_rows(b.cls.transpose()).transpose();
  if (b.has_patch()) b.patch = project_rows(b.patch);
  return b;
}

Traced ProjectionBackbone::trace(const std::string& id, Rng* dropout_rng) const {
  const FeatureBundle in = lookup_features(*store_, id);
  const auto& ad = adapters_.front().adapter;
  const auto cells = in.has_patch() ? in.patch.rows() : 0;

  // Row 0 is the CLS token, rows 1.. are patch cells.
  auto rows = std::make_shared<Matrix>(1 + cells, in.dim());
  rows->row(0) = in.cls.transpose();
  if (cells > 0) rows->bottomRows(cells) = in.patch;

  auto dropped = rows;
  if (dropout_rng != nullptr && ad.dropout > 0.0) {
    std::bernoulli_distribution keep(1.0 - ad.dropout);
    auto masked = std::make_shared<Matrix>(*rows);
    for (Eigen::Index j = 0; j < masked->cols(); ++j)
      for (Eigen::Index i = 0; i < masked->rows(); ++i)
        (*masked)(i, j) = keep(*dropout_rng) ? (*masked)(i, j) / (1.0 - ad.dropout) : 0.0;
    dropped = masked;
  }
  auto hidden = std::make_shared<Matrix>(*dropped * ad.a.transpose());
  Matrix out = *rows;
  out.noalias() += ad.scale() * (*hidden * ad.b.transpose());

  Traced t;
  t.features.side = in.side;
  t.features.cls = out.row(0).transpose();
  if (cells > 0) t.features.patch = out.bottomRows(cells);

  const double scale = ad.scale();
  t.pullback = [dropped, hidden, cells, scale, b = ad.b](const FeatureBundle& cot, GradSet& grads) {
    Matrix g(1 + cells, cot.cls.size());
    g.row(0) = cot.cls.transpose();
    if (cells > 0) g.bottomRows(cells) = cot.patch;
    grads[0].b.noalias() += scale * (g.transpose() * *hidden);
    grads[0].a.noalias() += scale * ((g * b).transpose() * *dropped);
  };
  return t;
}

}  // namespace paln
