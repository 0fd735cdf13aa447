#pragma once

#include "paln/backbone.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace paln {

struct NamedMatrix {
  std::string name;
  Matrix value;
};

/// `PALA` container: the store layout with named f32 matrices as records.
std::uint64_t save_named_matrices(const std::vector<NamedMatrix>& matrices, std::uint32_t dim,
                                  const std::filesystem::path& path);
std::vector<NamedMatrix> load_named_matrices(const std::filesystem::path& path);

/// Each adapter is written as `<name>.A`, `<name>.B`, `<name>.alpha`, `<name>.dropout`.
std::uint64_t save_adapters(const AdapterSet& adapters, const std::filesystem::path& path);
AdapterSet load_adapters(const std::filesystem::path& path);

}  // namespace paln
