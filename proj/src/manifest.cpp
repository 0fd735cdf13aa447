#include "paln/manifest.hpp"

#include "paln/error.hpp"
#include "paln/types.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

namespace paln {

namespace {

std::vector<std::string> split_csv_line(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

// Maps each required column name to its position in the header row.
std::vector<std::size_t> header_positions(const std::vector<std::string>& header,
                                          std::initializer_list<const char*> required, const std::string& path) {
  std::vector<std::size_t> pos;
  for (const char* name : required) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError(path + ": missing column '" + name + "'");
    pos.push_back(static_cast<std::size_t>(it - header.begin()));
  }
  return pos;
}

std::ifstream open_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

std::ofstream create_text(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  return out;
}

}  // namespace

void validate(const Triplet& t) {
  if (t.y != 0 && t.y != 1) throw InvalidArgument("triplet label must be 0 or 1, got " + std::to_string(t.y));
  if (t.ref == t.x0 || t.ref == t.x1 || t.x0 == t.x1)
    throw InvalidArgument("triplet ids must be distinct: (" + t.ref + ", " + t.x0 + ", " + t.x1 + ")");
}

TripletManifest load_manifest(const std::filesystem::path& path, ManifestLoadReport* report) {
  auto in = open_text(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty manifest");
  const auto pos = header_positions(split_csv_line(line), {"ref", "x0", "x1", "y"}, path.string());
  const auto width = *std::max_element(pos.begin(), pos.end()) + 1;

  TripletManifest manifest;
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() < width) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": too few fields");
    Triplet t{f[pos[0]], f[pos[1]], f[pos[2]], 0};
    const auto& ys = f[pos[3]];
    if (ys != "0" && ys != "1")
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": y must be 0 or 1, got '" + ys + "'");
    t.y = ys == "1" ? 1 : 0;
    try {
      validate(t);
    } catch (const InvalidArgument& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!seen.emplace(t.ref, t.x0, t.x1).second && report) report->duplicate_lines.push_back(line_no - 1);
    manifest.entries.push_back(std::move(t));
  }
  return manifest;
}

void save_manifest(const TripletManifest& manifest, const std::filesystem::path& path) {
  auto out = create_text(path);
  out << "ref,x0,x1,y\n";
  for (const auto& t : manifest.entries) out << t.ref << ',' << t.x0 << ',' << t.x1 << ',' << t.y << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

LabelList load_labels(const std::filesystem::path& path) {
  auto in = open_text(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty label file");
  const auto pos = header_positions(split_csv_line(line), {"id", "label"}, path.string());
  const auto width = std::max(pos[0], pos[1]) + 1;
  LabelList labels;
  std::set<std::string> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() < width) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": too few fields");
    if (!seen.insert(f[pos[0]]).second)
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": duplicate id '" + f[pos[0]] + "'");
    labels.emplace_back(f[pos[0]], f[pos[1]]);
  }
  return labels;
}

void save_labels(const LabelList& labels, const std::filesystem::path& path) {
  auto out = create_text(path);
  out << "id,label\n";
  for (const auto& [id, label] : labels) out << id << ',' << label << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

TripletManifest make_class_triplets(const LabelList& labels, std::size_t n, std::uint64_t seed) {
  // Classes in first-appearance order so the result depends only on the input order.
  std::vector<std::string> class_names;
  std::map<std::string, std::vector<std::string>> members;
  for (const auto& [id, label] : labels) {
    auto& m = members[label];
    if (m.empty()) class_names.push_back(label);
    m.push_back(id);
  }
  std::vector<std::size_t> anchor_classes;
  for (std::size_t c = 0; c < class_names.size(); ++c)
    if (members[class_names[c]].size() >= 2) anchor_classes.push_back(c);
  if (class_names.size() < 2 || anchor_classes.empty())
    throw InvalidArgument("class triplets need >= 2 classes and one class with >= 2 members");

  auto rng = make_rng(seed, 0x636c617373ULL);
  auto pick = [&rng](std::size_t count) { return std::uniform_int_distribution<std::size_t>(0, count - 1)(rng); };

  TripletManifest out;
  out.entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = anchor_classes[pick(anchor_classes.size())];
    const auto& same = members[class_names[c]];
    const auto a = pick(same.size());
    auto b = pick(same.size() - 1);
    if (b >= a) ++b;
    auto other = pick(class_names.size() - 1);
    if (other >= c) ++other;
    const auto& diff = members[class_names[other]];
    const auto& neg = diff[pick(diff.size())];
    const int y = static_cast<int>(pick(2));
    Triplet t{same[a], y == 0 ? same[b] : neg, y == 0 ? neg : same[b], y};
    out.entries.push_back(std::move(t));
  }
  return out;
}

std::array<std::size_t, 3> apportion(std::size_t n, std::array<double, 3> fractions) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0) || !std::isfinite(f)) throw InvalidArgument("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("split fractions must sum to 1");

  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
  return sizes;
}

std::array<TripletManifest, 3> split_manifest(const TripletManifest& manifest, std::array<double, 3> fractions,
                                              std::uint64_t seed) {
  const auto sizes = apportion(manifest.size(), fractions);
  std::vector<std::size_t> perm(manifest.size());
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(seed, 0x73706c6974ULL);
  std::shuffle(perm.begin(), perm.end(), rng);

  std::array<TripletManifest, 3> parts;
  const SplitTag tags[3] = {SplitTag::train, SplitTag::val, SplitTag::test};
  std::size_t offset = 0;
  for (std::size_t p = 0; p < 3; ++p) {
    std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(offset),
                                 perm.begin() + static_cast<std::ptrdiff_t>(offset + sizes[p]));
    std::sort(idx.begin(), idx.end());
    parts[p].split = tags[p];
    for (auto i : idx) parts[p].entries.push_back(manifest.entries[i]);
    offset += sizes[p];
  }
  return parts;
}

TripletManifest sample_manifest(const TripletManifest& manifest, std::size_t n, std::uint64_t seed) {
  if (n > manifest.size())
    throw InvalidArgument("cannot sample " + std::to_string(n) + " triplets from " + std::to_string(manifest.size()));
  std::vector<std::size_t> perm(manifest.size());
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(seed, 0x73616d706c65ULL);
  std::shuffle(perm.begin(), perm.end(), rng);
  perm.resize(n);
  std::sort(perm.begin(), perm.end());
  TripletManifest out;
  out.split = manifest.split;
  for (auto i : perm) out.entries.push_back(manifest.entries[i]);
  return out;
}


std::array<TripletManifest, 2> holdout_split(const TripletManifest& manifest, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw InvalidArgument("holdout fraction must lie in (0, 1)");
  if (manifest.size() < 2) throw InvalidArgument("holdout split needs at least 2 triplets");
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(manifest.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, manifest.size() - 1);
  std::vector<std::size_t> perm(manifest.size());
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(seed, 0x686f6c64ULL);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<char> is_val(manifest.size(), 0);
  for (std::size_t i = 0; i < n_val; ++i) is_val[perm[i]] = 1;
  std::array<TripletManifest, 2> parts;
  parts[0].split = SplitTag::train;
  parts[1].split = SplitTag::val;
  for (std::size_t i = 0; i < manifest.size(); ++i) parts[is_val[i]].entries.push_back(manifest.entries[i]);
  return parts;
}

}  // namespace paln
