#include "paln/store.hpp"

#include "binary_io.hpp"
#include "paln/error.hpp"

namespace paln {

namespace {

constexpr std::uint32_t kStoreVersion = 1;

// Row-major (cell, channel) order regardless of Eigen's column-major default.
using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

EmbeddingStore::EmbeddingStore(std::uint32_t dim, std::uint32_t patch_side) : dim_(dim), patch_side_(patch_side) {
  if (dim == 0) throw InvalidArgument("embedding dimension must be >= 1");
}

void EmbeddingStore::add(EmbeddingRecord record) {
  if (dim_ == 0) throw InvalidArgument("store has no dimension; construct with dim >= 1");
  if (record.cls.size() != static_cast<Eigen::Index>(dim_))
    throw ShapeError("record '" + record.id + "' has cls length " + std::to_string(record.cls.size()) +
                     ", store dim is " + std::to_string(dim_));
  const auto cells = static_cast<Eigen::Index>(patch_side_) * patch_side_;
  if (patch_side_ == 0) {
    if (record.patch.size() != 0) throw ShapeError("record '" + record.id + "' has patches but store s=0");
  } else if (record.patch.rows() != cells || record.patch.cols() != static_cast<Eigen::Index>(dim_)) {
    throw ShapeError("record '" + record.id + "' patch grid does not match (s, s, d)");
  }
  if (!record.cls.allFinite() || !record.patch.allFinite())
    throw InvalidArgument("record '" + record.id + "' contains non-finite values");
  if (index_.contains(record.id)) throw InvalidArgument("duplicate id '" + record.id + "'");
  index_.emplace(record.id, records_.size());
  records_.push_back(std::move(record));
}

const EmbeddingRecord* EmbeddingStore::find(std::string_view id) const {
  const auto it = index_.find(std::string(id));
  return it == index_.end() ? nullptr : &records_[it->second];
}

const EmbeddingRecord& EmbeddingStore::at(std::string_view id) const {
  if (const auto* r = find(id)) return *r;
  throw UnknownId(std::string(id));
}

Matrix EmbeddingStore::cls_matrix() const {
  Matrix m(static_cast<Eigen::Index>(records_.size()), static_cast<Eigen::Index>(dim_));
  for (std::size_t i = 0; i < records_.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) = records_[i].cls.cast<double>().transpose();
  return m;
}

std::vector<std::string> EmbeddingStore::ids() const {
  std::vector<std::string> out;
  out.reserve(records_.size());
  for (const auto& r : records_) out.push_back(r.id);
  return out;
}

bool operator==(const EmbeddingStore& a, const EmbeddingStore& b) {
  if (a.dim_ != b.dim_ || a.patch_side_ != b.patch_side_ || a.records_.size() != b.records_.size()) return false;
  for (std::size_t i = 0; i < a.records_.size(); ++i) {
    const auto& x = a.records_[i];
    const auto& y = b.records_[i];
    if (x.id != y.id || x.cls != y.cls) return false;
    if (x.patch.rows() != y.patch.rows() || x.patch.cols() != y.patch.cols() || x.patch != y.patch) return false;
  }
  return true;
}

std::uint64_t save_store(const EmbeddingStore& store, const std::filesystem::path& path) {
  if (store.dim() == 0) throw InvalidArgument("cannot save a store without dimension");
  detail::Writer w(path.string());
  w.bytes("PALN", 4);
  w.put(kStoreVersion);
  w.put(store.dim());
  w.put(store.patch_side());
  w.put(static_cast<std::uint64_t>(store.size()));
  RowMajorF grid;
  for (const auto& r : store.records()) {
    w.str(r.id);
    w.floats(r.cls.data(), static_cast<std::size_t>(r.cls.size()));
    if (store.patch_side() > 0) {
      grid = r.patch;
      w.floats(grid.data(), static_cast<std::size_t>(grid.size()));
    }
  }
  return w.finish();
}

EmbeddingStore load_store(const std::filesystem::path& path) {
  detail::Reader in(path.string());
  in.expect_magic("PALN");
  const auto version = in.get<std::uint32_t>();
  if (version != kStoreVersion)
    throw FormatError("unsupported store version " + std::to_string(version) + " in " + path.string());
  const auto d = in.get<std::uint32_t>();
  const auto s = in.get<std::uint32_t>();
  const auto count = in.get<std::uint64_t>();
  if (d == 0) throw FormatError("store header has d=0");

  EmbeddingStore store(d, s);
  const auto cells = static_cast<Eigen::Index>(s) * s;
  RowMajorF grid(cells, d);
  for (std::uint64_t i = 0; i < count; ++i) {
    EmbeddingRecord r;
    r.id = in.str();
    r.cls.resize(d);
    in.floats(r.cls.data(), d);
    if (s > 0) {
      in.floats(grid.data(), static_cast<std::size_t>(grid.size()));
      r.patch = grid;
    }
    if (!r.cls.allFinite() || !r.patch.allFinite())
      throw FormatError("non-finite value in record '" + r.id + "' of " + path.string());
    store.add(std::move(r));
  }
  if (!in.at_end()) throw FormatError("trailing bytes after " + std::to_string(count) + " records in " + path.string());
  return store;
}

}  // namespace paln
