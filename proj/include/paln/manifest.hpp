#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace paln {

/// One 2AFC judgment: `y` names which of x0 (0) or x1 (1) is closer to `ref`.
struct Triplet {
  std::string ref;
  std::string x0;
  std::string x1;
  int y = 0;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

enum class SplitTag { train, val, test, unsplit };

struct TripletManifest {
  std::vector<Triplet> entries;
  SplitTag split = SplitTag::unsplit;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

/// Side information gathered while parsing a manifest.
struct ManifestLoadReport {
  /// 1-based data line numbers whose (ref, x0, x1) repeats an earlier row.
  std::vector<std::size_t> duplicate_lines;
};

/// Validates y in {0,1} and distinct ids; throws InvalidArgument otherwise.
void validate(const Triplet& t);

TripletManifest load_manifest(const std::filesystem::path& path, ManifestLoadReport* report = nullptr);
void save_manifest(const TripletManifest& manifest, const std::filesystem::path& path);

/// (id, label) pairs in file order.
using LabelList = std::vector<std::pair<std::string, std::string>>;

LabelList load_labels(const std::filesystem::path& path);
void save_labels(const LabelList& labels, const std::filesystem::path& path);

/// Class-boundary triplets: ref and the preferred image share a class, the other image does not.
TripletManifest make_class_triplets(const LabelList& labels, std::size_t n, std::uint64_t seed);

/// Deterministic partition into (train, val, test) with largest-remainder sizing.
/// Entries keep their original relative order inside each part.
std::array<TripletManifest, 3> split_manifest(const TripletManifest& manifest, std::array<double, 3> fractions,
                                              std::uint64_t seed);

/// Largest-remainder apportionment of `n` items; ties go to the earlier part.
std::array<std::size_t, 3> apportion(std::size_t n, std::array<double, 3> fractions);

/// Two-way (train, val) partition holding out round(val_fraction * n) entries.
std::array<TripletManifest, 2> holdout_split(const TripletManifest& manifest, double val_fraction, std::uint64_t seed);

/// Draws `n` entries without replacement, preserving their manifest order.
TripletManifest sample_manifest(const TripletManifest& manifest, std::size_t n, std::uint64_t seed);

}  // namespace paln
