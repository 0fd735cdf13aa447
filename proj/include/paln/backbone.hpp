#pragma once

#include "paln/error.hpp"
#include "paln/store.hpp"
#include "paln/types.hpp"

#include <functional>
#include <string>
#include <vector>

namespace paln {

/// Final-layer features of one image. `patch` is (s*s) x d, one cell per row.
struct FeatureBundle {
  Vector cls;
  Matrix patch;
  std::uint32_t side = 0;

  bool has_patch() const { return side > 0; }
  Eigen::Index dim() const { return cls.size(); }
};

enum class FeatureMode { ClsOnly, ClsPlusPooledPatch };

FeatureMode parse_feature_mode(const std::string& text);
const char* to_string(FeatureMode mode);

/// Low-rank update (alpha / r) * B * A on a d_out x d_in projection.
struct LoraAdapter {
  Matrix a;  ///< r x d_in
  Matrix b;  ///< d_out x r
  double alpha = 0.5;
  double dropout = 0.0;

  Eigen::Index rank() const { return a.rows(); }
  double scale() const { return alpha / static_cast<double>(rank()); }

  /// B = 0, A ~ N(0, a_std^2): the adapted layer starts equal to the frozen one.
  /// A negative a_std selects 1 / sqrt(d_in).
  static LoraAdapter init(Eigen::Index d_in, Eigen::Index d_out, Eigen::Index rank, double alpha, double dropout,
                          Rng& rng, double a_std = -1.0);

  void validate() const;
};

/// base + (alpha / r) B A. The base is not modified.
template <typename Derived>
Matrix lora_effective_weight(const Eigen::MatrixBase<Derived>& base, const LoraAdapter& adapter) {
  adapter.validate();
  if (adapter.a.cols() != base.cols() || adapter.b.rows() != base.rows())
    throw ShapeError("LoRA adapter shape does not match base weight");
  Matrix w = base;
  w.noalias() += adapter.scale() * (adapter.b * adapter.a);
  return w;
}

struct NamedAdapter {
  std::string name;
  LoraAdapter adapter;
};

using AdapterSet = std::vector<NamedAdapter>;

/// Gradient with respect to one adapter's A and B.
struct AdapterGrad {
  Matrix a;
  Matrix b;
};

using GradSet = std::vector<AdapterGrad>;

GradSet zero_grads(const AdapterSet& adapters);

/// [cls] or [cls | spatial mean of patch tokens].
Vector assemble_features(const FeatureBundle& bundle, FeatureMode mode);

/// Spreads a cotangent of assemble_features back onto the bundle it came from.
FeatureBundle assemble_features_pullback(const Vector& grad, const FeatureBundle& bundle, FeatureMode mode);

/// Features plus a closure that accumulates adapter gradients for a cotangent on them.
struct Traced {
  FeatureBundle features;
  std::function<void(const FeatureBundle& cotangent, GradSet& grads)> pullback;
};

/// A feature extractor whose only trainable parameters are its LoRA adapters.
class Backbone {
 public:
  virtual ~Backbone() = default;

  /// Evaluation-mode forward pass (dropout off).
  virtual FeatureBundle extract(const std::string& id) const = 0;

  /// Training-mode forward pass. `dropout_rng` may be null, which disables dropout.
  virtual Traced trace(const std::string& id, Rng* dropout_rng) const = 0;

  virtual AdapterSet& adapters() = 0;
  virtual const AdapterSet& adapters() const = 0;

  virtual bool has_id(const std::string& id) const = 0;
};

FeatureBundle lookup_features(const EmbeddingStore& store, const std::string& id);

/// Precomputed embeddings used as-is. No trainable parameters.
class FrozenLookup final : public Backbone {
 public:
  explicit FrozenLookup(const EmbeddingStore& store) : store_(&store) {}

  FeatureBundle extract(const std::string& id) const override { return lookup_features(*store_, id); }
  Traced trace(const std::string& id, Rng*) const override;
  AdapterSet& adapters() override { return adapters_; }
  const AdapterSet& adapters() const override { return adapters_; }
  bool has_id(const std::string& id) const override { return store_->contains(id); }

 private:
  const EmbeddingStore* store_;
  AdapterSet adapters_;
};

/// Precomputed embeddings passed through a frozen identity projection carrying
/// one LoRA adapter. CLS and every patch token share the projection.
class ProjectionBackbone final : public Backbone {
 public:
  ProjectionBackbone(const EmbeddingStore& store, LoraAdapter adapter);

  /// Builds the adapter with LoraAdapter::init for the store's dimension.
  static ProjectionBackbone with_fresh_adapter(const EmbeddingStore& store, Eigen::Index rank, double alpha,
                                               double dropout, std::uint64_t seed);

  FeatureBundle extract(const std::string& id) const override;
  Traced trace(const std::string& id, Rng* dropout_rng) const override;
  AdapterSet& adapters() override { return adapters_; }
  const AdapterSet& adapters() const override { return adapters_; }
  bool has_id(const std::string& id) const override { return store_->contains(id); }

  /// Applies the adapted projection to arbitrary row vectors (one per row).
  Matrix project_rows(const Matrix& rows) const;

 private:
  const EmbeddingStore* store_;
  AdapterSet adapters_;
};

}  // namespace paln
