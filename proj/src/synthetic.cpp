#include "paln/synthetic.hpp"

#include "paln/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace paln {

namespace {

std::string make_id(const char* prefix, std::size_t index, const char* suffix = "") {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%06zu%s", prefix, index, suffix);
  return buf;
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

double content_cosine_distance(const Vector& a, const Vector& b) {
  return 1.0 - a.dot(b) / (a.norm() * b.norm());
}

}  // namespace

void SyntheticFactorSpec::validate() const {
  if (d == 0) throw InvalidArgument("synthetic d must be >= 1");
  if (factor_count < 2) throw InvalidArgument("synthetic generator needs factor_count >= 2 for disjoint subsets");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw InvalidArgument("noise_sigma must be >= 0");
  if (!(nuisance_scale >= 0.0)) throw InvalidArgument("nuisance_scale must be >= 0");
  if (classes < 1) throw InvalidArgument("synthetic world needs at least one class");
}

SyntheticWorld::SyntheticWorld(const SyntheticFactorSpec& spec) : spec_(spec) {
  spec_.validate();
  auto rng = make_rng(spec.world_seed, 0x776f726c64ULL);
  const auto d = static_cast<Eigen::Index>(spec.d);
  const double col_scale = 1.0 / std::sqrt(static_cast<double>(spec.d));
  semantic_map_ = gaussian(d, spec.semantic_dims, col_scale, rng);
  factor_map_ = gaussian(d, spec.factor_count, col_scale, rng);
  nuisance_map_ = gaussian(d, spec.nuisance_dims, col_scale, rng);
  centroids_ = gaussian(spec.semantic_dims, spec.classes, 1.0, rng);
  const auto cells = static_cast<Eigen::Index>(spec.s) * spec.s;
  if (cells > 0) {
    patch_pattern_ = gaussian(cells, d, 0.5 * col_scale, rng);
    patch_pattern_.rowwise() -= patch_pattern_.colwise().mean();
  }
}

Vector SyntheticWorld::content(std::uint32_t cls, const Vector& factors) const {
  Vector c(content_dim());
  c << centroids_.col(cls), factors;
  return c;
}

Vector SyntheticWorld::sample_factors(Rng& rng) const {
  std::normal_distribution<double> n(0.0, 1.0);
  Vector f(spec_.factor_count);
  for (auto& v : f) v = n(rng);
  return f;
}

std::uint32_t SyntheticWorld::sample_class(Rng& rng) const {
  return std::uniform_int_distribution<std::uint32_t>(0, spec_.classes - 1)(rng);
}

Vector SyntheticWorld::perturbation(const Vector& factors, const std::vector<std::uint32_t>& subset, double norm,
                                    Rng& rng) const {
  std::normal_distribution<double> n(0.0, 1.0);
  Vector delta = Vector::Zero(factors.size());
  for (;;) {
    Vector local(subset.size()), anchor(subset.size());
    for (std::size_t i = 0; i < subset.size(); ++i) {
      local[static_cast<Eigen::Index>(i)] = n(rng);
      anchor[static_cast<Eigen::Index>(i)] = factors[subset[i]];
    }
    const double a2 = anchor.squaredNorm();
    if (a2 > 0.0) local -= (local.dot(anchor) / a2) * anchor;
    const double len = local.norm();
    if (len < 1e-8) continue;
    local *= norm / len;
    for (std::size_t i = 0; i < subset.size(); ++i) delta[subset[i]] = local[static_cast<Eigen::Index>(i)];
    return delta;
  }
}

EmbeddingRecord SyntheticWorld::render(std::string id, const Vector& content, Rng& rng) const {
  std::normal_distribution<double> n(0.0, 1.0);
  Vector nuisance(spec_.nuisance_dims);
  for (auto& v : nuisance) v = spec_.nuisance_scale * n(rng);

  const auto sem = content.head(spec_.semantic_dims);
  const auto fac = content.tail(spec_.factor_count);
  Vector e = semantic_map_ * sem + factor_map_ * fac + nuisance_map_ * nuisance;
  for (auto& v : e) v += spec_.noise_sigma * n(rng);

  EmbeddingRecord r;
  r.id = std::move(id);
  r.cls = e.cast<float>();
  if (spec_.s > 0) {
    Matrix grid = patch_pattern_.rowwise() + e.transpose();
    if (spec_.noise_sigma > 0.0)
      for (Eigen::Index j = 0; j < grid.cols(); ++j)
        for (Eigen::Index i = 0; i < grid.rows(); ++i) grid(i, j) += spec_.noise_sigma * n(rng);
    r.patch = grid.cast<float>();
  }
  return r;
}

SyntheticNights make_synthetic_nights(const SyntheticFactorSpec& spec) {
  const SyntheticWorld world(spec);
  auto rng = make_rng(spec.seed, 0x6e6967687473ULL);
  std::uniform_real_distribution<double> small_frac(0.25, 0.6);
  std::uniform_real_distribution<double> ratio(1.4, 2.5);

  SyntheticNights out{EmbeddingStore(spec.d, spec.s), {}, {}, Matrix(3 * spec.n_triplets, world.content_dim())};
  out.manifest.entries.reserve(spec.n_triplets);
  out.ground_truth.reserve(spec.n_triplets);

  std::vector<std::uint32_t> order(spec.factor_count);
  const std::size_t half = spec.factor_count / 2;
  for (std::size_t t = 0; t < spec.n_triplets; ++t) {
    const auto cls = world.sample_class(rng);
    const Vector factors = world.sample_factors(rng);
    std::iota(order.begin(), order.end(), 0u);
    std::shuffle(order.begin(), order.end(), rng);
    const std::vector<std::uint32_t> subset0(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half));
    const std::vector<std::uint32_t> subset1(order.begin() + static_cast<std::ptrdiff_t>(half),
                                             order.begin() + static_cast<std::ptrdiff_t>(2 * half));
    const int y = std::uniform_int_distribution<int>(0, 1)(rng);
    const double small = small_frac(rng) * factors.norm();
    const double large = small * ratio(rng);
    const Vector v0 = factors + world.perturbation(factors, subset0, y == 0 ? small : large, rng);
    const Vector v1 = factors + world.perturbation(factors, subset1, y == 1 ? small : large, rng);

    const Vector contents[3] = {world.content(cls, factors), world.content(cls, v0), world.content(cls, v1)};
    const std::string ids[3] = {make_id("n", t, "_ref"), make_id("n", t, "_x0"), make_id("n", t, "_x1")};
    for (int k = 0; k < 3; ++k) {
      out.latents.row(static_cast<Eigen::Index>(3 * t + k)) = contents[k].transpose();
      out.store.add(world.render(ids[k], contents[k], rng));
    }
    out.manifest.entries.push_back({ids[0], ids[1], ids[2], y});
    out.ground_truth.push_back(y);
  }
  return out;
}

double latent_agreement(const SyntheticNights& data) {
  if (data.manifest.empty()) return 0.0;
  double hits = 0.0;
  for (std::size_t t = 0; t < data.manifest.size(); ++t) {
    const Vector ref = data.latents.row(static_cast<Eigen::Index>(3 * t)).transpose();
    const double d0 = content_cosine_distance(ref, data.latents.row(static_cast<Eigen::Index>(3 * t + 1)).transpose());
    const double d1 = content_cosine_distance(ref, data.latents.row(static_cast<Eigen::Index>(3 * t + 2)).transpose());
    const int y = data.manifest.entries[t].y;
    if (d0 == d1) hits += 0.5;
    else if ((d0 < d1) == (y == 0)) hits += 1.0;
  }
  return hits / static_cast<double>(data.manifest.size());
}

SyntheticLabeled make_synthetic_labeled(const SyntheticFactorSpec& spec, std::size_t per_class) {
  const SyntheticWorld world(spec);
  auto rng = make_rng(spec.seed, 0x6c6162656cULL);
  SyntheticLabeled out{EmbeddingStore(spec.d, spec.s), {}};
  std::size_t index = 0;
  for (std::uint32_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i, ++index) {
      auto id = make_id("c", index);
      out.labels.emplace_back(id, std::to_string(c));
      out.store.add(world.render(std::move(id), world.content(c, world.sample_factors(rng)), rng));
    }
  }
  return out;
}

SyntheticRetrieval make_synthetic_retrieval(const SyntheticFactorSpec& spec, std::size_t instances) {
  const SyntheticWorld world(spec);
  auto rng = make_rng(spec.seed, 0x696e7374ULL);
  std::uniform_real_distribution<double> view_frac(0.1, 0.3);
  SyntheticRetrieval out{EmbeddingStore(spec.d, spec.s), {}, {}};
  std::vector<std::uint32_t> order(spec.factor_count);
  const std::size_t half = spec.factor_count / 2;
  for (std::size_t i = 0; i < instances; ++i) {
    const auto cls = world.sample_class(rng);
    const Vector factors = world.sample_factors(rng);
    auto view = [&] {
      std::iota(order.begin(), order.end(), 0u);
      std::shuffle(order.begin(), order.end(), rng);
      const std::vector<std::uint32_t> subset(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half));
      return Vector(factors + world.perturbation(factors, subset, view_frac(rng) * factors.norm(), rng));
    };
    auto qid = make_id("q", i);
    auto gid = make_id("g", i);
    out.store.add(world.render(qid, world.content(cls, view()), rng));
    out.store.add(world.render(gid, world.content(cls, view()), rng));
    out.truth.emplace_back(qid, gid);
    out.gallery_ids.push_back(std::move(gid));
  }
  return out;
}

}  // namespace paln
