#include "paln/error.hpp"
#include "paln/manifest.hpp"
#include "paln/store.hpp"
#include "paln/synthetic.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <set>

using namespace paln;
using test_util::TempDir;

namespace {

EmbeddingRecord record(const std::string& id, std::uint32_t d, std::uint32_t s, float base) {
  EmbeddingRecord r;
  r.id = id;
  r.cls = VectorF::LinSpaced(d, base, base + 1.0f);
  if (s > 0) {
    r.patch = MatrixF(s * s, d);
    for (Eigen::Index i = 0; i < r.patch.size(); ++i) r.patch.data()[i] = base - 0.25f * static_cast<float>(i);
  }
  return r;
}

template <typename T>
T read_at(const std::string& bytes, std::size_t offset) {
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof v);
  return v;
}

void write_csv(const std::filesystem::path& p, const std::string& text) { test_util::write_file(p, text); }

double cosine_dist(const VectorF& a, const VectorF& b) {
  double dot = 0, na = 0, nb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  return 1.0 - dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("store round trip is exact") {
  TempDir tmp("store");
  EmbeddingStore store(4, 0);
  store.add(record("a", 4, 0, 0.5f));
  store.add(record("b\xc3\xa9", 4, 0, -3.0f));
  const auto bytes = save_store(store, tmp / "s.paln");
  CHECK(bytes == std::filesystem::file_size(tmp / "s.paln"));
  const auto loaded = load_store(tmp / "s.paln");
  CHECK(loaded == store);
  REQUIRE(loaded.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(loaded.records()[i].id == store.records()[i].id);
    CHECK((loaded.records()[i].cls.array() == store.records()[i].cls.array()).all());
  }
}

TEST_CASE("store round trip with patches") {
  TempDir tmp("store");
  EmbeddingStore store(3, 2);
  store.add(record("x", 3, 2, 1.0f));
  store.add(record("y", 3, 2, 2.0f));
  save_store(store, tmp / "s.paln");
  const auto loaded = load_store(tmp / "s.paln");
  CHECK(loaded == store);
  CHECK((loaded.at("y").patch.array() == store.at("y").patch.array()).all());
}

TEST_CASE("store header encodes d, s and count") {
  TempDir tmp("store");
  EmbeddingStore store(768, 16);
  store.add(record("only", 768, 16, 0.0f));
  save_store(store, tmp / "big.paln");
  const auto bytes = test_util::read_file(tmp / "big.paln");
  CHECK(bytes.substr(0, 4) == "PALN");
  CHECK(read_at<std::uint32_t>(bytes, 4) == 1u);
  CHECK(read_at<std::uint32_t>(bytes, 8) == 768u);
  CHECK(read_at<std::uint32_t>(bytes, 12) == 16u);
  CHECK(read_at<std::uint64_t>(bytes, 16) == 1u);
  CHECK(bytes.size() == 24 + 4 + 4 + 768 * 4 + 16 * 16 * 768 * 4);
}

TEST_CASE("store rejects invalid records") {
  EmbeddingStore store(2, 0);
  store.add(record("a", 2, 0, 0.0f));
  CHECK_THROWS_AS(store.add(record("a", 2, 0, 1.0f)), InvalidArgument);
  CHECK_THROWS_AS(store.add(record("b", 3, 0, 1.0f)), ShapeError);
  auto bad = record("c", 2, 0, 0.0f);
  bad.cls[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(store.add(bad), InvalidArgument);
  CHECK_THROWS_AS(store.at("missing"), UnknownId);
}

TEST_CASE("load_store rejects malformed files") {
  TempDir tmp("store");
  EmbeddingStore store(4, 0);
  store.add(record("a", 4, 0, 0.5f));
  store.add(record("b", 4, 0, 1.5f));
  save_store(store, tmp / "good.paln");
  const auto good = test_util::read_file(tmp / "good.paln");

  SUBCASE("wrong magic") {
    auto b = good;
    b[0] = 'X';
    test_util::write_file(tmp / "f", b);
    CHECK_THROWS_AS(load_store(tmp / "f"), FormatError);
  }
  SUBCASE("version mismatch") {
    auto b = good;
    b[4] = 2;
    test_util::write_file(tmp / "f", b);
    CHECK_THROWS_AS(load_store(tmp / "f"), FormatError);
  }
  SUBCASE("truncated mid-record") {
    test_util::write_file(tmp / "f", good.substr(0, good.size() - 3));
    CHECK_THROWS_AS(load_store(tmp / "f"), FormatError);
  }
  SUBCASE("NaN payload") {
    auto b = good;
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(b.data() + 24 + 4 + 1 + 4, &nan, 4);
    test_util::write_file(tmp / "f", b);
    CHECK_THROWS_AS(load_store(tmp / "f"), FormatError);
  }
  SUBCASE("trailing bytes") {
    test_util::write_file(tmp / "f", good + "z");
    CHECK_THROWS_AS(load_store(tmp / "f"), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_store(tmp / "nope"), IoError); }
}

TEST_CASE("load_manifest parses rows in order") {
  TempDir tmp("manifest");
  write_csv(tmp / "m.csv", "ref,x0,x1,y\nr1,a,b,0\nr2,c,d,1\nr3,e,f,1\nr4,g,h,0\n");
  const auto m = load_manifest(tmp / "m.csv");
  REQUIRE(m.size() == 4);
  CHECK(m.entries[0] == Triplet{"r1", "a", "b", 0});
  CHECK(m.entries[3] == Triplet{"r4", "g", "h", 0});
  CHECK(m.split == SplitTag::unsplit);
}

TEST_CASE("load_manifest accepts any column order and CRLF") {
  TempDir tmp("manifest");
  write_csv(tmp / "m.csv", "y,x1,ref,x0\r\n1,b,r,a\r\n");
  const auto m = load_manifest(tmp / "m.csv");
  REQUIRE(m.size() == 1);
  CHECK(m.entries[0] == Triplet{"r", "a", "b", 1});
}

TEST_CASE("load_manifest errors") {
  TempDir tmp("manifest");
  write_csv(tmp / "y2.csv", "ref,x0,x1,y\nr,a,b,2\n");
  CHECK_THROWS_AS(load_manifest(tmp / "y2.csv"), FormatError);
  write_csv(tmp / "nocol.csv", "ref,x0,y\nr,a,1\n");
  CHECK_THROWS_AS(load_manifest(tmp / "nocol.csv"), FormatError);
  write_csv(tmp / "same.csv", "ref,x0,x1,y\nr,a,a,1\n");
  CHECK_THROWS_AS(load_manifest(tmp / "same.csv"), FormatError);
  write_csv(tmp / "short.csv", "ref,x0,x1,y\nr,a\n");
  CHECK_THROWS_AS(load_manifest(tmp / "short.csv"), FormatError);
}

TEST_CASE("duplicate manifest rows are kept and reported") {
  TempDir tmp("manifest");
  write_csv(tmp / "m.csv", "ref,x0,x1,y\nr,a,b,0\nr,a,b,0\nq,a,b,1\nr,a,b,1\n");
  ManifestLoadReport report;
  const auto m = load_manifest(tmp / "m.csv", &report);
  CHECK(m.size() == 4);
  CHECK(report.duplicate_lines == std::vector<std::size_t>{2, 4});
}

TEST_CASE("13,900-triplet manifest round trips") {
  TempDir tmp("manifest");
  TripletManifest m;
  for (int i = 0; i < 13900; ++i)
    m.entries.push_back({"r" + std::to_string(i), "a" + std::to_string(i), "b" + std::to_string(i), i % 2});
  save_manifest(m, tmp / "m.csv");
  const auto loaded = load_manifest(tmp / "m.csv");
  CHECK(loaded.size() == 13900);
  CHECK(loaded.entries == m.entries);
}

TEST_CASE("labels round trip") {
  TempDir tmp("labels");
  const LabelList labels{{"a", "cat"}, {"b", "dog"}, {"c", "cat"}};
  save_labels(labels, tmp / "l.csv");
  CHECK(load_labels(tmp / "l.csv") == labels);
  write_csv(tmp / "bad.csv", "name,label\na,b\n");
  CHECK_THROWS_AS(load_labels(tmp / "bad.csv"), FormatError);
}

TEST_CASE("class triplets: forced single case") {
  const LabelList labels{{"a", "1"}, {"b", "1"}, {"c", "2"}};
  const auto m = make_class_triplets(labels, 1, 0);
  REQUIRE(m.size() == 1);
  const auto& t = m.entries[0];
  const std::string chosen = t.y == 0 ? t.x0 : t.x1;
  const std::string other = t.y == 0 ? t.x1 : t.x0;
  CHECK((t.ref == "a" || t.ref == "b"));
  CHECK((chosen == "a" || chosen == "b"));
  CHECK(chosen != t.ref);
  CHECK(other == "c");
}

TEST_CASE("class triplets: determinism, balance and class structure") {
  LabelList labels;
  std::map<std::string, std::string> cls;
  for (int c = 0; c < 10; ++c)
    for (int i = 0; i < 100; ++i) {
      const auto id = "i" + std::to_string(c * 100 + i);
      labels.emplace_back(id, "k" + std::to_string(c));
      cls[id] = "k" + std::to_string(c);
    }
  const auto m = make_class_triplets(labels, 10000, 7);
  CHECK(make_class_triplets(labels, 10000, 7).entries == m.entries);
  CHECK(make_class_triplets(labels, 10000, 8).entries != m.entries);

  std::size_t y0 = 0;
  for (const auto& t : m.entries) {
    y0 += t.y == 0;
    const auto& chosen = t.y == 0 ? t.x0 : t.x1;
    const auto& other = t.y == 0 ? t.x1 : t.x0;
    CHECK(cls[t.ref] == cls[chosen]);
    CHECK(cls[t.ref] != cls[other]);
    CHECK(t.ref != chosen);
  }
  const double p = static_cast<double>(y0) / 10000.0;
  CHECK(std::abs(p - 0.5) <= 0.02);
}

TEST_CASE("class triplets need two classes and a pair") {
  CHECK_THROWS_AS(make_class_triplets({{"a", "1"}, {"b", "1"}}, 5, 0), InvalidArgument);
  CHECK_THROWS_AS(make_class_triplets({{"a", "1"}, {"b", "2"}}, 5, 0), InvalidArgument);
}

TEST_CASE("synthetic nights: zero noise gives full latent agreement") {
  SyntheticFactorSpec spec;
  spec.n_triplets = 100;
  spec.noise_sigma = 0.0;
  spec.seed = 3;
  const auto data = make_synthetic_nights(spec);
  CHECK(data.manifest.size() == 100);
  CHECK(data.store.size() == 300);
  CHECK(latent_agreement(data) == 1.0);
  for (std::size_t i = 0; i < data.manifest.size(); ++i) CHECK(data.manifest.entries[i].y == data.ground_truth[i]);

  // Independent check straight from the latents.
  for (std::size_t t = 0; t < 100; ++t) {
    const Vector r = data.latents.row(3 * t).transpose();
    const Vector a = data.latents.row(3 * t + 1).transpose();
    const Vector b = data.latents.row(3 * t + 2).transpose();
    const double d0 = 1.0 - r.dot(a) / (r.norm() * a.norm());
    const double d1 = 1.0 - r.dot(b) / (r.norm() * b.norm());
    CHECK((d0 < d1) == (data.ground_truth[t] == 0));
  }
}

TEST_CASE("synthetic nights is deterministic") {
  SyntheticFactorSpec spec;
  spec.n_triplets = 50;
  spec.noise_sigma = 0.1;
  spec.s = 2;
  spec.seed = 11;
  const auto a = make_synthetic_nights(spec);
  const auto b = make_synthetic_nights(spec);
  CHECK(a.store == b.store);
  CHECK(a.manifest.entries == b.manifest.entries);
  CHECK(a.store.patch_side() == 2);
  CHECK(a.store.records()[0].patch.rows() == 4);
  spec.seed = 12;
  CHECK(!(make_synthetic_nights(spec).store == a.store));
}

TEST_CASE("synthetic nights with noise is informative but imperfect") {
  SyntheticFactorSpec spec;
  spec.n_triplets = 1000;
  spec.d = 64;
  spec.noise_sigma = 0.5;
  spec.seed = 5;
  const auto data = make_synthetic_nights(spec);
  double hits = 0;
  for (const auto& t : data.manifest.entries) {
    const double d0 = cosine_dist(data.store.at(t.ref).cls, data.store.at(t.x0).cls);
    const double d1 = cosine_dist(data.store.at(t.ref).cls, data.store.at(t.x1).cls);
    hits += d0 == d1 ? 0.5 : ((d0 < d1) == (t.y == 0) ? 1.0 : 0.0);
  }
  const double agreement = hits / 1000.0;
  CHECK(agreement > 0.5);
  CHECK(agreement < 1.0);
}

TEST_CASE("synthetic spec validation") {
  SyntheticFactorSpec spec;
  spec.noise_sigma = -1.0;
  CHECK_THROWS_AS(make_synthetic_nights(spec), InvalidArgument);
  spec = {};
  spec.factor_count = 1;
  CHECK_THROWS_AS(make_synthetic_nights(spec), InvalidArgument);
}

TEST_CASE("synthetic labeled and retrieval sets share the world") {
  SyntheticFactorSpec spec;
  spec.seed = 2;
  const auto lab = make_synthetic_labeled(spec, 5);
  CHECK(lab.store.size() == 50);
  CHECK(lab.labels.size() == 50);
  CHECK(lab.labels[7].second == "1");
  const auto ret = make_synthetic_retrieval(spec, 20);
  CHECK(ret.truth.size() == 20);
  CHECK(ret.gallery_ids.size() == 20);
  CHECK(ret.store.size() == 40);
  for (const auto& [q, g] : ret.truth) {
    CHECK(ret.store.contains(q));
    CHECK(ret.store.contains(g));
  }
}

TEST_CASE("split_manifest sizes and partition") {
  TripletManifest m;
  for (int i = 0; i < 10; ++i) m.entries.push_back({"r" + std::to_string(i), "a", "b", i % 2});
  const auto parts = split_manifest(m, {0.8, 0.1, 0.1}, 1);
  CHECK(parts[0].size() == 8);
  CHECK(parts[1].size() == 1);
  CHECK(parts[2].size() == 1);
  CHECK(parts[0].split == SplitTag::train);
  CHECK(parts[1].split == SplitTag::val);
  CHECK(parts[2].split == SplitTag::test);

  std::multiset<std::string> all, joined;
  for (const auto& t : m.entries) all.insert(t.ref);
  for (const auto& p : parts)
    for (const auto& t : p.entries) joined.insert(t.ref);
  CHECK(all == joined);

  bool differs = false;
  for (std::uint64_t seed = 2; seed < 6; ++seed) {
    const auto other = split_manifest(m, {0.8, 0.1, 0.1}, seed);
    CHECK(other[0].size() == 8);
    CHECK(other[1].size() == 1);
    differs |= other[1].entries != parts[1].entries || other[2].entries != parts[2].entries;
  }
  CHECK(differs);
  CHECK(split_manifest(m, {0.8, 0.1, 0.1}, 1)[0].entries == parts[0].entries);
}

TEST_CASE("largest remainder apportionment") {
  CHECK(apportion(10, {0.8, 0.1, 0.1}) == std::array<std::size_t, 3>{8, 1, 1});
  CHECK(apportion(1, {1.0 / 3, 1.0 / 3, 1.0 / 3}) == std::array<std::size_t, 3>{1, 0, 0});
  CHECK(apportion(2, {1.0 / 3, 1.0 / 3, 1.0 / 3}) == std::array<std::size_t, 3>{1, 1, 0});
  CHECK(apportion(7, {0.5, 0.25, 0.25}) == std::array<std::size_t, 3>{3, 2, 2});
  CHECK(apportion(0, {0.5, 0.25, 0.25}) == std::array<std::size_t, 3>{0, 0, 0});
  CHECK_THROWS_AS(apportion(10, {0.8, 0.2, 0.0}), InvalidArgument);
  CHECK_THROWS_AS(apportion(10, {0.8, 0.3, 0.1}), InvalidArgument);
  CHECK_THROWS_AS(apportion(10, {-0.1, 0.6, 0.5}), InvalidArgument);
}

TEST_CASE("holdout and sampling") {
  TripletManifest m;
  for (int i = 0; i < 100; ++i) m.entries.push_back({"r" + std::to_string(i), "a", "b", 0});
  const auto parts = holdout_split(m, 0.1, 4);
  CHECK(parts[0].size() == 90);
  CHECK(parts[1].size() == 10);
  const auto s = sample_manifest(m, 30, 1);
  CHECK(s.size() == 30);
  CHECK(std::is_sorted(s.entries.begin(), s.entries.end(), [](const Triplet& a, const Triplet& b) {
    return std::stoi(a.ref.substr(1)) < std::stoi(b.ref.substr(1));
  }));
  CHECK_THROWS_AS(sample_manifest(m, 101, 1), InvalidArgument);
  CHECK_THROWS_AS(holdout_split(m, 0.0, 1), InvalidArgument);
}
