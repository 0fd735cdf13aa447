#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace paln {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Storage precision of embeddings on disk and in memory.
using MatrixF = Eigen::MatrixXf;
using VectorF = Eigen::VectorXf;

using Rng = std::mt19937_64;

/// Derives an independent stream from a base seed and a stream tag.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

}  // namespace paln
