#pragma once

#include "paln/manifest.hpp"
#include "paln/store.hpp"
#include "paln/types.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace paln {

/// Parameters of the desk-scale synthetic world.
///
/// Every image has a content latent [semantic centroid | mid-level factors] plus
/// an image-specific nuisance vector that carries no similarity information.
/// Embeddings are a fixed random linear map of all three, plus isotropic noise.
/// `world_seed` fixes the maps and class centroids; `seed` drives sampling, so
/// datasets drawn with the same world_seed live in one embedding space.
struct SyntheticFactorSpec {
  std::size_t n_triplets = 1000;
  std::uint32_t d = 64;
  std::uint32_t s = 0;
  std::uint32_t factor_count = 8;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  std::uint64_t world_seed = 0;
  std::uint32_t semantic_dims = 8;
  std::uint32_t classes = 10;
  std::uint32_t nuisance_dims = 4;
  double nuisance_scale = 1.0;

  void validate() const;
};

class SyntheticWorld {
 public:
  explicit SyntheticWorld(const SyntheticFactorSpec& spec);

  const SyntheticFactorSpec& spec() const { return spec_; }
  std::uint32_t content_dim() const { return spec_.semantic_dims + spec_.factor_count; }

  /// Content latent [centroid(cls) | factors].
  Vector content(std::uint32_t cls, const Vector& factors) const;

  /// Embeds a content latent with a freshly drawn nuisance vector and noise.
  EmbeddingRecord render(std::string id, const Vector& content, Rng& rng) const;

  Vector sample_factors(Rng& rng) const;
  std::uint32_t sample_class(Rng& rng) const;

  /// Perturbation supported on `subset`, orthogonal to `factors`, with the given norm.
  Vector perturbation(const Vector& factors, const std::vector<std::uint32_t>& subset, double norm, Rng& rng) const;

 private:
  SyntheticFactorSpec spec_;
  Matrix semantic_map_;
  Matrix factor_map_;
  Matrix nuisance_map_;
  Matrix centroids_;
  Matrix patch_pattern_;
};

struct SyntheticNights {
  EmbeddingStore store;
  TripletManifest manifest;
  /// Which variation the construction made closer (equals manifest y).
  std::vector<int> ground_truth;
  /// Content latents keyed by store order.
  Matrix latents;
};

SyntheticNights make_synthetic_nights(const SyntheticFactorSpec& spec);

struct SyntheticLabeled {
  EmbeddingStore store;
  LabelList labels;
};

/// `per_class` images for each of spec.classes classes with random factors.
SyntheticLabeled make_synthetic_labeled(const SyntheticFactorSpec& spec, std::size_t per_class);

struct SyntheticRetrieval {
  EmbeddingStore store;
  /// (query id, matching gallery id).
  std::vector<std::pair<std::string, std::string>> truth;
  std::vector<std::string> gallery_ids;
};

/// One query and one gallery view per instance; views differ by a small
/// mid-level perturbation and independent nuisance.
SyntheticRetrieval make_synthetic_retrieval(const SyntheticFactorSpec& spec, std::size_t instances);

/// Fraction of triplets whose content-latent cosine ranking agrees with y.
double latent_agreement(const SyntheticNights& data);

}  // namespace paln
