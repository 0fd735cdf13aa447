#include "binary_io.hpp"
#include "paln/dense_probes.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace paln {

void save_target(const DenseTarget& target, const std::filesystem::path& path) {
  const auto h = target.height(), w = target.width();
  detail::Writer out(path.string());
  out.bytes("PALT", 4);
  out.put(static_cast<std::uint32_t>(h));
  out.put(static_cast<std::uint32_t>(w));
  out.put(static_cast<std::uint8_t>(target.kind));
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) {
      if (target.kind == DenseKind::seg) {
        const int label = target.labels(i, j);
        if (label < 0 || label > std::numeric_limits<std::uint16_t>::max())
          throw InvalidArgument("class id does not fit in u16");
        out.put(static_cast<std::uint16_t>(label));
      } else {
        out.put(static_cast<float>(target.depth(i, j)));
      }
    }
  std::vector<std::uint8_t> bits(static_cast<std::size_t>((h * w + 7) / 8), 0);
  for (Eigen::Index p = 0; p < h * w; ++p)
    if (target.valid(p / w, p % w)) bits[static_cast<std::size_t>(p / 8)] |= static_cast<std::uint8_t>(1u << (p % 8));
  out.bytes(bits.data(), bits.size());
  out.finish();
}

DenseTarget load_target(const std::filesystem::path& path) {
  detail::Reader in(path.string());
  in.expect_magic("PALT");
  const auto h = static_cast<Eigen::Index>(in.get<std::uint32_t>());
  const auto w = static_cast<Eigen::Index>(in.get<std::uint32_t>());
  const auto kind = in.get<std::uint8_t>();
  if (kind > 1) throw FormatError("unknown target kind " + std::to_string(kind) + " in " + path.string());
  if (h * w > (Eigen::Index{1} << 30)) throw FormatError("target too large in " + path.string());
  DenseTarget t;
  t.kind = static_cast<DenseKind>(kind);
  if (t.kind == DenseKind::seg) t.labels.resize(h, w);
  else t.depth.resize(h, w);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) {
      if (t.kind == DenseKind::seg) {
        t.labels(i, j) = in.get<std::uint16_t>();
      } else {
        const float v = in.get<float>();
        if (!std::isfinite(v)) throw FormatError("non-finite depth in " + path.string());
        t.depth(i, j) = v;
      }
    }
  std::vector<std::uint8_t> bits(static_cast<std::size_t>((h * w + 7) / 8));
  in.bytes(bits.data(), bits.size());
  t.valid.resize(h, w);
  for (Eigen::Index p = 0; p < h * w; ++p) t.valid(p / w, p % w) = (bits[static_cast<std::size_t>(p / 8)] >> (p % 8)) & 1u;
  if (!in.at_end()) throw FormatError("trailing bytes in " + path.string());
  return t;
}

}  // namespace paln
