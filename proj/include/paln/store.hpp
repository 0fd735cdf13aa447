#pragma once

#include "paln/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace paln {

/// One image's features: a CLS vector and an optional s x s grid of patch tokens.
///
/// Patch tokens are stored one cell per row, cells in row-major grid order
/// (cell (i, j) is row i * s + j), so `patch` is (s*s) x d.
struct EmbeddingRecord {
  std::string id;
  VectorF cls;
  MatrixF patch;
};

/// Insertion-ordered collection of embedding records sharing (d, s).
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  EmbeddingStore(std::uint32_t dim, std::uint32_t patch_side);

  /// Validates shape, finiteness and id uniqueness, then appends.
  void add(EmbeddingRecord record);

  const EmbeddingRecord& at(std::string_view id) const;
  const EmbeddingRecord* find(std::string_view id) const;
  bool contains(std::string_view id) const { return find(id) != nullptr; }

  std::uint32_t dim() const { return dim_; }
  std::uint32_t patch_side() const { return patch_side_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::span<const EmbeddingRecord> records() const { return records_; }

  /// Stacks every CLS vector as a row, in insertion order.
  Matrix cls_matrix() const;
  std::vector<std::string> ids() const;

  friend bool operator==(const EmbeddingStore& a, const EmbeddingStore& b);

 private:
  std::uint32_t dim_ = 0;
  std::uint32_t patch_side_ = 0;
  std::vector<EmbeddingRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Writes the binary `PALN` container. Returns the number of bytes written.
std::uint64_t save_store(const EmbeddingStore& store, const std::filesystem::path& path);

EmbeddingStore load_store(const std::filesystem::path& path);

}  // namespace paln
