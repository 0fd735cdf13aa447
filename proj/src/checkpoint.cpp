#include "paln/checkpoint.hpp"

#include "binary_io.hpp"

namespace paln {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::uint64_t save_named_matrices(const std::vector<NamedMatrix>& matrices, std::uint32_t dim,
                                  const std::filesystem::path& path) {
  detail::Writer w(path.string());
  w.bytes("PALA", 4);
  w.put(kCheckpointVersion);
  w.put(dim);
  w.put(std::uint32_t{0});
  w.put(static_cast<std::uint64_t>(matrices.size()));
  for (const auto& m : matrices) {
    if (!m.value.allFinite()) throw InvalidArgument("matrix '" + m.name + "' has non-finite entries");
    w.str(m.name);
    w.put(static_cast<std::uint32_t>(m.value.rows()));
    w.put(static_cast<std::uint32_t>(m.value.cols()));
    const RowMajorF data = m.value.cast<float>();
    w.floats(data.data(), static_cast<std::size_t>(data.size()));
  }
  return w.finish();
}

std::vector<NamedMatrix> load_named_matrices(const std::filesystem::path& path) {
  detail::Reader in(path.string());
  in.expect_magic("PALA");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  in.get<std::uint32_t>();
  in.get<std::uint32_t>();
  const auto count = in.get<std::uint64_t>();
  std::vector<NamedMatrix> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedMatrix m;
    m.name = in.str();
    const auto rows = in.get<std::uint32_t>();
    const auto cols = in.get<std::uint32_t>();
    if (static_cast<std::uint64_t>(rows) * cols > (1ULL << 32)) throw FormatError("matrix too large in " + path.string());
    RowMajorF data(rows, cols);
    in.floats(data.data(), static_cast<std::size_t>(data.size()));
    if (!data.allFinite()) throw FormatError("non-finite value in matrix '" + m.name + "'");
    m.value = data.cast<double>();
    out.push_back(std::move(m));
  }
  if (!in.at_end()) throw FormatError("trailing bytes in " + path.string());
  return out;
}

std::uint64_t save_adapters(const AdapterSet& adapters, const std::filesystem::path& path) {
  std::vector<NamedMatrix> mats;
  std::uint32_t dim = 0;
  for (const auto& na : adapters) {
    dim = static_cast<std::uint32_t>(na.adapter.b.rows());
    mats.push_back({na.name + ".A", na.adapter.a});
    mats.push_back({na.name + ".B", na.adapter.b});
    mats.push_back({na.name + ".alpha", Matrix::Constant(1, 1, na.adapter.alpha)});
    mats.push_back({na.name + ".dropout", Matrix::Constant(1, 1, na.adapter.dropout)});
  }
  return save_named_matrices(mats, dim, path);
}

AdapterSet load_adapters(const std::filesystem::path& path) {
  const auto mats = load_named_matrices(path);
  if (mats.size() % 4 != 0) throw FormatError("adapter checkpoint must hold A, B, alpha, dropout per adapter");
  AdapterSet out;
  for (std::size_t i = 0; i < mats.size(); i += 4) {
    const auto& a = mats[i];
    if (!ends_with(a.name, ".A")) throw FormatError("expected '<name>.A', got '" + a.name + "'");
    const auto name = a.name.substr(0, a.name.size() - 2);
    if (mats[i + 1].name != name + ".B" || mats[i + 2].name != name + ".alpha" || mats[i + 3].name != name + ".dropout")
      throw FormatError("incomplete adapter record for '" + name + "'");
    LoraAdapter ad;
    ad.a = a.value;
    ad.b = mats[i + 1].value;
    ad.alpha = mats[i + 2].value(0, 0);
    ad.dropout = mats[i + 3].value(0, 0);
    try {
      ad.validate();
    } catch (const InvalidArgument& e) {
      throw FormatError("adapter '" + name + "': " + e.what());
    }
    out.push_back({name, std::move(ad)});
  }
  return out;
}

}  // namespace paln
