#include "cli.hpp"

#include "paln/alignment.hpp"
#include "paln/checkpoint.hpp"
#include "paln/dense_probes.hpp"
#include "paln/error.hpp"
#include "paln/linear_probe.hpp"
#include "paln/manifest.hpp"
#include "paln/retrieval.hpp"
#include "paln/store.hpp"
#include "paln/synthetic.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

namespace paln::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Every flag of every command; each subcommand binds the subset it understands.
struct Options {
  std::string store, manifest, val_manifest, labels, test_labels, out, config, adapter, truth, targets, queries;
  std::string eval_store;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string feature_mode = "cls";
  double margin = 0.05;
  double lr = 3e-4;
  std::size_t batch = 16;
  std::size_t depth_batch = 128;
  std::size_t epochs = 8;
  std::size_t head_epochs = 10;
  std::size_t max_steps = 0;
  long rank = 16;
  double alpha = 0.5;
  double dropout = 0.0;
  double val_fraction = 0.1;
  std::string ks;
  std::string c_grid = "1e0,1e1,1e2,1e3,1e4,1e5,1e6";
  std::size_t folds = 10;
  std::size_t max_iter = 1000;
  int bins = 256;
  std::string depth_range = "0.001,10";
  std::string spacing = "uniform";
  std::string silog_sign = "paper";
  std::string resolution = "upsample";
  int classes = 0;
  double test_fraction = 0.2;
  std::size_t k = 3;
  bool csv = false;

  // synth
  std::string kind = "nights";
  std::size_t n = 1000;
  std::uint32_t d = 64;
  std::uint32_t s = 0;
  std::uint32_t factors = 8;
  double noise = 0.0;
  std::uint64_t world_seed = 0;
  std::size_t per_class = 100;
  int height = 16;
  int width = 16;

  // ablate
  std::vector<std::string> datasets;
  std::vector<std::string> tasks;
  std::size_t budget = 13900;
  std::string steps;
};

unsigned default_threads() {
  if (const char* env = std::getenv("PALN_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
  }
  return 1;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw InvalidArgument(std::string("bad value '") + item + "' in " + what);
    out.push_back(v);
  }
  if (out.empty()) throw InvalidArgument(std::string("empty list for ") + what);
  return out;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::string> out;
  for (std::string line; std::getline(f, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// Flat key=value lines; '#' starts a comment.
std::vector<std::string> config_file_args(const fs::path& path) {
  std::vector<std::string> args;
  for (auto line : read_lines(path)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string t) {
      const auto b = t.find_first_not_of(" \t");
      const auto e = t.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : t.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CLI::ConversionError("config line without '=': " + line);
    args.push_back("--" + trim(line.substr(0, eq)) + "=" + trim(line.substr(eq + 1)));
  }
  return args;
}

CLI::App* leaf_of(CLI::App& app) {
  CLI::App* cur = &app;
  while (!cur->get_subcommands().empty()) cur = cur->get_subcommands().front();
  return cur;
}

std::string command_name(CLI::App& app) {
  std::string name;
  for (CLI::App* cur = &app; !cur->get_subcommands().empty();) {
    cur = cur->get_subcommands().front();
    name += (name.empty() ? "" : " ") + cur->get_name();
  }
  return name;
}

// Resolved (key, value) pairs of the leaf command, sorted by key.
std::map<std::string, std::string> resolved_config(const CLI::App& leaf) {
  std::map<std::string, std::string> out;
  for (const CLI::Option* opt : leaf.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const auto& name = opt->get_lnames().front();
    if (name == "help") continue;
    std::string value;
    if (opt->count() > 0) {
      const auto res = opt->get_expected_max() > 1 ? opt->results() : opt->reduced_results();
      for (std::size_t i = 0; i < res.size(); ++i) value += (i ? ";" : "") + res[i];
    } else {
      value = opt->get_default_str();
    }
    out[name] = value;
  }
  return out;
}

struct RunContext {
  std::string command;
  fs::path out;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  bool csv = false;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  std::string config_hash() const {
    std::string text;
    for (const auto& [k, v] : config)
      if (k != "out" && k != "threads" && k != "config") text += k + "=" + v + "\n";
    return hex64(fnv1a(text));
  }
};

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& rows) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, rows);
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) flatten(j[i], prefix + "." + std::to_string(i), rows);
  } else {
    rows.emplace_back(prefix, j.is_string() ? j.get<std::string>() : j.dump());
  }
}

void emit_report(const RunContext& ctx, const json& metrics, std::ostream& out) {
  json report;
  report["command"] = ctx.command;
  report["config_hash"] = ctx.config_hash();
  report["seed"] = ctx.seed;
  report["metrics"] = metrics;
  report["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  write_text(ctx.out / "report.json", report.dump(2) + "\n");

  std::string cfg;
  for (const auto& [k, v] : ctx.config) cfg += k + "=" + v + "\n";
  write_text(ctx.out / "resolved_config.txt", cfg);

  if (ctx.csv) {
    std::vector<std::pair<std::string, std::string>> rows;
    flatten(metrics, "", rows);
    std::string text = "metric,value\n";
    for (const auto& [k, v] : rows) text += k + "," + v + "\n";
    write_text(ctx.out / "metrics.csv", text);
  }
  out << metrics.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// feature access

std::optional<LoraAdapter> load_projection_adapter(const std::string& path) {
  if (path.empty()) return std::nullopt;
  auto set = load_adapters(path);
  if (set.size() != 1) throw FormatError("expected exactly one projection adapter in " + path);
  return set.front().adapter;
}

// Evaluation-space features: raw embeddings or embeddings through a trained adapter.
class FeatureSource {
 public:
  FeatureSource(const EmbeddingStore& store, const std::optional<LoraAdapter>& adapter, FeatureMode mode)
      : store_(store), mode_(mode) {
    if (adapter) {
      if (adapter->a.cols() != store.dim()) throw ShapeError("adapter dimension does not match the store");
      projected_ = std::make_unique<ProjectionBackbone>(store, *adapter);
    }
  }

  FeatureBundle bundle(const std::string& id) const {
    return projected_ ? projected_->extract(id) : lookup_features(store_, id);
  }
  Vector vector(const std::string& id) const { return assemble_features(bundle(id), mode_); }

  Matrix rows(const std::vector<std::string>& ids) const {
    if (ids.empty()) return {};
    const Vector first = vector(ids.front());
    Matrix m(static_cast<Eigen::Index>(ids.size()), first.size());
    m.row(0) = first.transpose();
    for (std::size_t i = 1; i < ids.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = vector(ids[i]).transpose();
    return m;
  }

 private:
  const EmbeddingStore& store_;
  FeatureMode mode_;
  std::unique_ptr<ProjectionBackbone> projected_;
};

// Random test split of ids, stratified by label when labels are given.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const std::vector<std::string>& strata,
                                                                            double test_fraction,
                                                                            std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw InvalidArgument("test fraction must lie in (0, 1)");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < strata.size(); ++i) groups[strata[i]].push_back(i);
  auto rng = make_rng(seed, 0x74657374ULL);
  std::vector<char> is_test(strata.size(), 0);
  for (auto& [label, idx] : groups) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < n_test; ++i) is_test[idx[i]] = 1;
  }
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < strata.size(); ++i) (is_test[i] ? test : train).push_back(i);
  if (train.empty() || test.empty()) throw InvalidArgument("split leaves an empty train or test part");
  return {train, test};
}

std::vector<std::pair<std::string, std::string>> load_pairs(const fs::path& path, const char* a, const char* b) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines.front() != std::string(a) + "," + b)
    throw FormatError(path.string() + ": expected header '" + a + "," + b + "'");
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto comma = lines[i].find(',');
    if (comma == std::string::npos) throw FormatError(path.string() + ": malformed line " + std::to_string(i + 1));
    out.emplace_back(lines[i].substr(0, comma), lines[i].substr(comma + 1));
  }
  return out;
}

void require(bool cond, const std::string& flag) {
  if (!cond) throw CLI::RequiredError(flag);
}

json recall_json(const RecallReport& r) {
  json j;
  for (std::size_t i = 0; i < r.ks.size(); ++i) j["top" + std::to_string(r.ks[i])] = 100.0 * r.rates[i];
  json hits;
  for (std::size_t i = 0; i < r.ks.size(); ++i) hits["top" + std::to_string(r.ks[i])] = r.hits[i];
  j["hits"] = hits;
  j["n_queries"] = r.n_queries;
  return j;
}

// ---------------------------------------------------------------------------
// evaluation kernels shared by eval and ablate

json eval_retrieval(const FeatureSource& src, const EmbeddingStore& store, const fs::path& truth_path,
                    const std::vector<std::size_t>& ks, unsigned threads) {
  const auto pairs = load_pairs(truth_path, "query", "gallery");
  std::map<std::string, std::vector<std::string>> truth;
  std::vector<std::string> query_order;
  for (const auto& [q, g] : pairs) {
    if (!store.contains(q)) throw UnknownId(q);
    if (truth.find(q) == truth.end()) query_order.push_back(q);
    truth[q].push_back(g);
  }
  std::vector<std::string> gallery;
  for (const auto& id : store.ids())
    if (truth.find(id) == truth.end()) gallery.push_back(id);
  const auto index = CosineIndex::build(src.rows(gallery), gallery);
  std::vector<RetrievalQuery> queries;
  for (const auto& q : query_order) queries.push_back({q, src.vector(q), truth[q]});
  return recall_json(recall_at_k(index, queries, ks, threads));
}

struct LabeledSplit {
  std::vector<std::string> train_ids, test_ids, train_labels, test_labels;
};

LabeledSplit labeled_split(const std::string& labels_path, const std::string& test_labels_path, double test_fraction,
                           std::uint64_t seed) {
  LabeledSplit s;
  const auto labels = load_labels(labels_path);
  if (!test_labels_path.empty()) {
    for (const auto& [id, l] : labels) s.train_ids.push_back(id), s.train_labels.push_back(l);
    for (const auto& [id, l] : load_labels(test_labels_path)) s.test_ids.push_back(id), s.test_labels.push_back(l);
    return s;
  }
  std::vector<std::string> strata;
  for (const auto& p : labels) strata.push_back(p.second);
  const auto [train, test] = split_indices(strata, test_fraction, seed);
  for (auto i : train) s.train_ids.push_back(labels[i].first), s.train_labels.push_back(labels[i].second);
  for (auto i : test) s.test_ids.push_back(labels[i].first), s.test_labels.push_back(labels[i].second);
  return s;
}

CountDataset count_dataset(const FeatureSource& src, const std::vector<std::string>& ids,
                           const std::vector<std::string>& labels) {
  CountDataset ds;
  ds.ids = ids;
  ds.embeddings = src.rows(ids);
  for (const auto& l : labels) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(l, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != l.size() || v < 0) throw FormatError("count label '" + l + "' is not a non-negative integer");
    ds.counts.push_back(v);
  }
  return ds;
}

json eval_count(const FeatureSource& src, const LabeledSplit& split, const std::vector<std::size_t>& ks,
                unsigned threads) {
  const auto train = count_dataset(src, split.train_ids, split.train_labels);
  const auto test = count_dataset(src, split.test_ids, split.test_labels);
  const auto r = knn_count_eval(train, test, ks, threads);
  json j;
  j["mae"] = r.mae;
  j["rmse"] = r.rmse;
  j["chosen_k"] = r.chosen_k;
  json acc;
  for (std::size_t i = 0; i < r.ks.size(); ++i) acc[std::to_string(r.ks[i])] = r.train_accuracy[i];
  j["loo_accuracy"] = acc;
  j["n_train"] = train.size();
  j["n_test"] = test.size();
  return j;
}

json eval_probe(const FeatureSource& src, const LabeledSplit& split, const ProbeConfig& cfg) {
  const auto r = linear_probe_classify(src.rows(split.train_ids), split.train_labels, src.rows(split.test_ids),
                                       split.test_labels, cfg);
  json j;
  j["best_c"] = r.best_c;
  j["val_accuracy"] = r.val_accuracy;
  json cv;
  for (std::size_t i = 0; i < cfg.c_grid.size(); ++i) cv.push_back({{"c", cfg.c_grid[i]}, {"accuracy", r.cv_accuracy[i]}});
  j["cv_accuracy"] = cv;
  j["n_train"] = split.train_ids.size();
  j["n_val"] = split.test_ids.size();
  return j;
}

// Leave-one-out RAG over the labeled gallery; returns metrics and fills bundle lines.
json eval_rag(const FeatureSource& src, const LabelList& labels, const std::vector<std::string>& queries,
              std::size_t k, std::string* bundles_jsonl) {
  std::vector<std::string> ids;
  std::unordered_map<std::string, std::string> label_map;
  for (const auto& [id, l] : labels) {
    ids.push_back(id);
    label_map[id] = l;
  }
  const auto index = CosineIndex::build(src.rows(ids), ids);
  std::size_t scored = 0, correct = 0;
  for (const auto& q : queries) {
    const auto bundle = select_rag_examples(index, src.vector(q), q, label_map, k);
    if (bundles_jsonl) {
      json b;
      b["query"] = bundle.query;
      json ex = json::array();
      for (const auto& e : bundle.examples) ex.push_back({{"id", e.id}, {"label", e.label}, {"score", e.score}});
      b["examples"] = ex;
      *bundles_jsonl += b.dump() + "\n";
    }
    if (const auto it = label_map.find(q); it != label_map.end()) {
      ++scored;
      correct += majority_label(bundle) == it->second;
    }
  }
  json j;
  j["n_queries"] = queries.size();
  j["k"] = k;
  j["oracle_accuracy"] = scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
  j["n_scored"] = scored;
  return j;
}

// ---------------------------------------------------------------------------
// commands

FeatureMode feature_mode(const Options& o) { return parse_feature_mode(o.feature_mode); }

AlignmentConfig alignment_config(const Options& o) {
  AlignmentConfig c;
  c.margin = o.margin;
  c.lr = o.lr;
  c.batch_size = o.batch;
  c.epochs = o.epochs;
  c.max_steps = o.max_steps;
  c.feature_mode = feature_mode(o);
  c.seed = o.seed;
  c.threads = o.threads;
  c.validate();
  return c;
}

json cmd_synth(const Options& o, const RunContext& ctx) {
  SyntheticFactorSpec spec;
  spec.n_triplets = o.n;
  spec.d = o.d;
  spec.s = o.s;
  spec.factor_count = o.factors;
  spec.noise_sigma = o.noise;
  spec.seed = o.seed;
  spec.world_seed = o.world_seed;
  if (o.classes > 0) spec.classes = static_cast<std::uint32_t>(o.classes);
  spec.validate();

  json m;
  m["kind"] = o.kind;
  if (o.kind == "nights") {
    const auto data = make_synthetic_nights(spec);
    save_store(data.store, ctx.out / "store.paln");
    save_manifest(data.manifest, ctx.out / "manifest.csv");
    FrozenLookup frozen(data.store);
    m["n_triplets"] = data.manifest.size();
    m["n_images"] = data.store.size();
    m["ground_truth_agreement"] = latent_agreement(data);
    m["embedding_agreement"] = two_afc_accuracy(frozen, data.manifest, FeatureMode::ClsOnly);
  } else if (o.kind == "classes") {
    const auto data = make_synthetic_labeled(spec, o.per_class);
    const auto manifest = make_class_triplets(data.labels, o.n, o.seed);
    save_store(data.store, ctx.out / "store.paln");
    save_labels(data.labels, ctx.out / "labels.csv");
    save_manifest(manifest, ctx.out / "manifest.csv");
    m["n_triplets"] = manifest.size();
    m["n_images"] = data.store.size();
    m["classes"] = spec.classes;
  } else if (o.kind == "retrieval") {
    const auto data = make_synthetic_retrieval(spec, o.n);
    save_store(data.store, ctx.out / "store.paln");
    std::string text = "query,gallery\n";
    for (const auto& [q, g] : data.truth) text += q + "," + g + "\n";
    write_text(ctx.out / "truth.csv", text);
    m["n_queries"] = data.truth.size();
    m["n_gallery"] = data.gallery_ids.size();
  } else if (o.kind == "seg" || o.kind == "depth") {
    const auto kind = o.kind == "seg" ? DenseKind::seg : DenseKind::depth;
    const auto range = parse_list<double>(o.depth_range, "--depth-range");
    if (range.size() != 2) throw InvalidArgument("--depth-range takes min,max");
    DepthBinning binning{range[0], range[1], o.bins, BinSpacing::uniform};
    const std::uint32_t side = o.s > 0 ? o.s : 4;
    const auto data = make_planted_dense(kind, o.n, static_cast<int>(o.d), static_cast<int>(side), o.height, o.width,
                                         o.classes > 0 ? o.classes : 3, binning, o.seed);
    EmbeddingStore store(o.d, side);
    fs::create_directories(ctx.out / "targets");
    for (std::size_t i = 0; i < data.ids.size(); ++i) {
      store.add({data.ids[i], data.features[i].cls.cast<float>(), data.features[i].patch.cast<float>()});
      save_target(data.targets[i], ctx.out / "targets" / (data.ids[i] + ".palt"));
    }
    save_store(store, ctx.out / "store.paln");
    m["n_images"] = store.size();
    m["height"] = o.height;
    m["width"] = o.width;
  } else {
    throw CLI::ValidationError("--kind", "must be one of nights, classes, retrieval, seg, depth");
  }
  return m;
}

json cmd_align(const Options& o, const RunContext& ctx) {
  const auto store = load_store(o.store);
  ManifestLoadReport load_report;
  auto train = load_manifest(o.manifest, &load_report);
  TripletManifest val;
  if (!o.val_manifest.empty()) {
    val = load_manifest(o.val_manifest);
  } else {
    auto parts = holdout_split(train, o.val_fraction, o.seed);
    train = std::move(parts[0]);
    val = std::move(parts[1]);
  }
  const auto cfg = alignment_config(o);
  auto bb = ProjectionBackbone::with_fresh_adapter(store, o.rank, o.alpha, o.dropout, o.seed);
  const auto result = train_alignment(bb, train, val, cfg);
  save_adapters(bb.adapters(), ctx.out / "adapter.pala");
  write_text(ctx.out / "history.jsonl", history_to_jsonl(result.history));

  json m;
  m["n_train"] = train.size();
  m["n_val"] = val.size();
  m["duplicate_rows"] = load_report.duplicate_lines.size();
  m["steps"] = result.steps;
  m["initial_val_loss"] = result.initial_val_loss;
  m["initial_val_2afc"] = result.initial_val_2afc;
  m["best_epoch"] = result.best_epoch;
  m["best_val_loss"] = result.best_val_loss;
  m["best_val_2afc"] = result.best_epoch > 0 ? result.history[result.best_epoch - 1].val_2afc : result.initial_val_2afc;
  return m;
}

json cmd_eval_retrieval(const Options& o, const RunContext&) {
  require(!o.truth.empty(), "--truth");
  const auto store = load_store(o.store);
  const FeatureSource src(store, load_projection_adapter(o.adapter), feature_mode(o));
  return eval_retrieval(src, store, o.truth, parse_list<std::size_t>(o.ks.empty() ? "1,3,5" : o.ks, "--ks"),
                        o.threads);
}

json cmd_eval_count(const Options& o, const RunContext&) {
  require(!o.labels.empty(), "--labels");
  const auto store = load_store(o.store);
  const FeatureSource src(store, load_projection_adapter(o.adapter), feature_mode(o));
  const auto split = labeled_split(o.labels, o.test_labels, o.test_fraction, o.seed);
  return eval_count(src, split, parse_list<std::size_t>(o.ks.empty() ? "1,3,5,10" : o.ks, "--ks"), o.threads);
}

ProbeConfig probe_config(const Options& o) {
  ProbeConfig cfg;
  cfg.c_grid = parse_list<double>(o.c_grid, "--c-grid");
  cfg.folds = o.folds;
  cfg.max_iter = o.max_iter;
  cfg.seed = o.seed;
  cfg.threads = o.threads;
  cfg.validate();
  return cfg;
}

json cmd_eval_probe(const Options& o, const RunContext&) {
  require(!o.labels.empty(), "--labels");
  const auto store = load_store(o.store);
  const FeatureSource src(store, load_projection_adapter(o.adapter), feature_mode(o));
  return eval_probe(src, labeled_split(o.labels, o.test_labels, o.test_fraction, o.seed), probe_config(o));
}

json cmd_eval_rag(const Options& o, const RunContext& ctx) {
  require(!o.labels.empty(), "--labels");
  const auto store = load_store(o.store);
  const FeatureSource src(store, load_projection_adapter(o.adapter), feature_mode(o));
  const auto labels = load_labels(o.labels);
  std::vector<std::string> queries;
  if (!o.queries.empty()) {
    queries = read_lines(o.queries);
  } else {
    for (const auto& p : labels) queries.push_back(p.first);
  }
  std::string bundles;
  auto m = eval_rag(src, labels, queries, o.k, &bundles);
  write_text(ctx.out / "bundles.jsonl", bundles);
  return m;
}

struct DenseData {
  std::vector<FeatureBundle> train_f, test_f;
  std::vector<DenseTarget> train_t, test_t;
};

DenseData load_dense(const Options& o) {
  require(!o.targets.empty(), "--targets");
  const auto store = load_store(o.store);
  if (store.patch_side() == 0) throw InvalidArgument("dense probes need a store with patch tokens");
  const FeatureSource src(store, load_projection_adapter(o.adapter), FeatureMode::ClsOnly);
  const auto ids = store.ids();
  const auto [train, test] = split_indices(std::vector<std::string>(ids.size()), o.test_fraction, o.seed);
  DenseData d;
  auto load = [&](std::size_t i, std::vector<FeatureBundle>& f, std::vector<DenseTarget>& t) {
    f.push_back(src.bundle(ids[i]));
    t.push_back(load_target(fs::path(o.targets) / (ids[i] + ".palt")));
  };
  for (auto i : train) load(i, d.train_f, d.train_t);
  for (auto i : test) load(i, d.test_f, d.test_t);
  return d;
}

HeadTrainConfig head_config(const Options& o, HeadTrainConfig cfg, std::size_t batch) {
  cfg.lr = o.lr;
  cfg.epochs = o.head_epochs;
  cfg.batch_size = batch;
  cfg.seed = o.seed;
  if (o.resolution == "upsample") {
    cfg.rule = ResolutionRule::upsample_predictions;
  } else if (o.resolution == "downsample") {
    cfg.rule = ResolutionRule::downsample_targets;
  } else {
    throw CLI::ValidationError("--resolution", "must be upsample or downsample");
  }
  return cfg;
}

json cmd_eval_seg(const Options& o, const RunContext&) {
  const auto d = load_dense(o);
  int classes = o.classes;
  if (classes <= 0) {
    for (const auto& t : d.train_t) classes = std::max(classes, t.labels.maxCoeff() + 1);
    for (const auto& t : d.test_t) classes = std::max(classes, t.labels.maxCoeff() + 1);
  }
  std::vector<double> losses;
  const auto head = train_seg_head(d.train_f, d.train_t, classes, head_config(o, HeadTrainConfig::seg_preset(), o.batch), &losses);
  const auto r = eval_seg(head, d.test_f, d.test_t);
  json m;
  m["miou"] = r.miou;
  m["pixel_accuracy"] = r.pixel_accuracy;
  m["classes"] = classes;
  m["train_loss"] = losses;
  m["n_train"] = d.train_f.size();
  m["n_test"] = d.test_f.size();
  return m;
}

json cmd_eval_depth(const Options& o, const RunContext&) {
  const auto d = load_dense(o);
  const auto range = parse_list<double>(o.depth_range, "--depth-range");
  if (range.size() != 2) throw InvalidArgument("--depth-range takes min,max");
  DepthBinning binning{range[0], range[1], o.bins, BinSpacing::uniform};
  if (o.spacing == "log") {
    binning.spacing = BinSpacing::log_uniform;
  } else if (o.spacing != "uniform") {
    throw CLI::ValidationError("--spacing", "must be uniform or log");
  }
  auto cfg = head_config(o, HeadTrainConfig::depth_preset(), o.depth_batch);
  if (o.silog_sign == "classic") {
    cfg.silog.sign = SilogSign::classic;
  } else if (o.silog_sign != "paper") {
    throw CLI::ValidationError("--silog-sign", "must be paper or classic");
  }
  std::vector<double> losses;
  const auto head = train_depth_head(d.train_f, d.train_t, binning, cfg, &losses);
  const auto r = eval_depth(head, d.test_f, d.test_t);
  json m;
  m["rmse"] = r.rmse;
  m["abs_rel"] = r.abs_rel;
  m["log10"] = r.log10;
  m["delta1"] = r.delta1;
  m["delta2"] = r.delta2;
  m["delta3"] = r.delta3;
  m["train_loss"] = losses;
  m["n_train"] = d.train_f.size();
  m["n_test"] = d.test_f.size();
  return m;
}

struct AblationDataset {
  std::string name;
  std::string store;
  std::string manifest;
};

AblationDataset parse_dataset(const std::string& text) {
  const auto eq = text.find('=');
  const auto colon = text.find(':', eq == std::string::npos ? 0 : eq + 1);
  if (eq == std::string::npos || colon == std::string::npos || eq == 0)
    throw CLI::ValidationError("--dataset", "expected name=store:manifest, got '" + text + "'");
  return {text.substr(0, eq), text.substr(eq + 1, colon - eq - 1), text.substr(colon + 1)};
}

json cmd_ablate(const Options& o, const RunContext& ctx) {
  require(!o.datasets.empty(), "--dataset");
  require(!o.eval_store.empty(), "--eval-store");
  std::vector<AblationDataset> datasets;
  for (const auto& t : o.datasets) datasets.push_back(parse_dataset(t));
  std::vector<std::string> tasks = o.tasks.empty() ? std::vector<std::string>{"retrieval"} : o.tasks;
  for (const auto& t : tasks) {
    if (t != "retrieval" && t != "probe" && t != "count" && t != "rag")
      throw CLI::ValidationError("--task", "unknown task '" + t + "'");
    if (t == "retrieval") require(!o.truth.empty(), "--truth");
    if (t != "retrieval") require(!o.labels.empty(), "--labels");
  }
  std::vector<std::size_t> step_counts{0};
  if (!o.steps.empty()) step_counts = parse_list<std::size_t>(o.steps, "--steps");

  const auto eval_store = load_store(o.eval_store);
  const auto mode = feature_mode(o);
  std::optional<LabeledSplit> split;
  LabelList labels;
  if (!o.labels.empty()) {
    labels = load_labels(o.labels);
    split = labeled_split(o.labels, o.test_labels, o.test_fraction, o.seed);
  }

  // Budget check before any training so a shortfall fails fast.
  std::vector<EmbeddingStore> stores;
  std::vector<TripletManifest> manifests;
  for (const auto& ds : datasets) {
    stores.push_back(load_store(ds.store));
    if (stores.back().dim() != eval_store.dim())
      throw ShapeError("dataset '" + ds.name + "' has a different embedding dimension than the eval store");
    auto m = load_manifest(ds.manifest);
    if (m.size() < o.budget)
      throw InvalidArgument("dataset '" + ds.name + "' has " + std::to_string(m.size()) + " triplets, budget is " +
                            std::to_string(o.budget));
    manifests.push_back(sample_manifest(m, o.budget, o.seed));
  }

  auto task_metrics = [&](const FeatureSource& src) {
    json t;
    for (const auto& task : tasks) {
      if (task == "retrieval") {
        t[task] = eval_retrieval(src, eval_store, o.truth,
                                 parse_list<std::size_t>(o.ks.empty() ? "1,3,5" : o.ks, "--ks"), o.threads);
      } else if (task == "count") {
        t[task] = eval_count(src, *split, parse_list<std::size_t>(o.ks.empty() ? "1,3,5,10" : o.ks, "--ks"),
                             o.threads);
      } else if (task == "probe") {
        t[task] = eval_probe(src, *split, probe_config(o));
      } else {
        std::vector<std::string> queries;
        for (const auto& p : labels) queries.push_back(p.first);
        t[task] = eval_rag(src, labels, queries, o.k, nullptr);
      }
    }
    return t;
  };

  json rows = json::array();
  {
    const FeatureSource base(eval_store, std::nullopt, mode);
    json row;
    row["dataset"] = "base";
    row["steps"] = 0;
    row["tasks"] = task_metrics(base);
    rows.push_back(row);
  }

  auto cfg = alignment_config(o);
  fs::create_directories(ctx.out / "adapters");
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    const auto parts = holdout_split(manifests[i], o.val_fraction, o.seed);
    for (auto steps : step_counts) {
      cfg.max_steps = steps;
      auto bb = ProjectionBackbone::with_fresh_adapter(stores[i], o.rank, o.alpha, o.dropout, o.seed);
      const auto result = train_alignment(bb, parts[0], parts[1], cfg);
      save_adapters(bb.adapters(), ctx.out / "adapters" / (datasets[i].name + "_" + std::to_string(result.steps) + ".pala"));
      const FeatureSource src(eval_store, bb.adapters().front().adapter, mode);
      json row;
      row["dataset"] = datasets[i].name;
      row["steps"] = result.steps;
      row["best_val_loss"] = result.best_val_loss;
      row["best_val_2afc"] =
          result.best_epoch > 0 ? result.history[result.best_epoch - 1].val_2afc : result.initial_val_2afc;
      row["tasks"] = task_metrics(src);
      rows.push_back(row);
    }
  }
  json m;
  m["budget"] = o.budget;
  m["rows"] = rows;
  return m;
}

using Handler = std::function<json(const Options&, const RunContext&)>;

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--out", o.out, "Output directory")->required();
  sub->add_option("--seed", o.seed, "Random seed");
  sub->add_option("--threads", o.threads, "Worker threads (default: PALN_THREADS or 1)")->check(CLI::PositiveNumber);
  sub->add_option("--config", o.config, "Flat key=value file; flags override it");
  sub->add_flag("--csv", o.csv, "Also write metrics.csv");
}

void add_features(CLI::App* sub, Options& o, bool with_mode = true) {
  sub->add_option("--store", o.store, "Embedding store (.paln)")->required();
  sub->add_option("--adapter", o.adapter, "Projection adapter (.pala) applied before evaluation");
  if (with_mode)
    sub->add_option("--feature-mode", o.feature_mode, "cls or patch")->check(CLI::IsMember({"cls", "patch"}));
}

void add_training(CLI::App* sub, Options& o) {
  sub->add_option("--margin", o.margin, "Hinge margin m");
  sub->add_option("--lr", o.lr, "Adam learning rate");
  sub->add_option("--batch", o.batch, "Triplets per step");
  sub->add_option("--epochs", o.epochs, "Training epochs");
  sub->add_option("--rank", o.rank, "LoRA rank r");
  sub->add_option("--alpha", o.alpha, "LoRA scale alpha");
  sub->add_option("--dropout", o.dropout, "LoRA dropout");
  sub->add_option("--val-fraction", o.val_fraction, "Held-out validation share when no --val-manifest is given");
}

void add_labels(CLI::App* sub, Options& o) {
  sub->add_option("--labels", o.labels, "CSV id,label")->required();
  sub->add_option("--test-labels", o.test_labels, "CSV id,label for the test split (default: random split)");
  sub->add_option("--test-fraction", o.test_fraction, "Test share of a random split");
}

void add_probe(CLI::App* sub, Options& o) {
  sub->add_option("--c-grid", o.c_grid, "Inverse regularization strengths, comma separated");
  sub->add_option("--folds", o.folds, "Cross-validation folds");
  sub->add_option("--max-iter", o.max_iter, "Solver iterations per fit");
}

void add_dense(CLI::App* sub, Options& o) {
  sub->add_option("--targets", o.targets, "Directory of <id>.palt targets")->required();
  sub->add_option("--lr", o.lr, "Adam learning rate");
  sub->add_option("--epochs", o.head_epochs, "Head training epochs");
  sub->add_option("--test-fraction", o.test_fraction, "Test share of the image split");
  sub->add_option("--resolution", o.resolution, "upsample (predictions) or downsample (targets)")
      ->check(CLI::IsMember({"upsample", "downsample"}));
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Perceptual alignment of frozen embeddings and downstream evaluation", "paln"};
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  std::map<const CLI::App*, Handler> handlers;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  add_common(synth, o);
  synth->add_option("--kind", o.kind, "nights, classes, retrieval, seg or depth")
      ->check(CLI::IsMember({"nights", "classes", "retrieval", "seg", "depth"}));
  synth->add_option("--n", o.n, "Triplets (nights, classes), instances (retrieval) or images (seg, depth)");
  synth->add_option("--d", o.d, "Embedding dimension");
  synth->add_option("--s", o.s, "Patch grid side (0: no patches)");
  synth->add_option("--factors", o.factors, "Mid-level factor count");
  synth->add_option("--noise", o.noise, "Embedding noise sigma");
  synth->add_option("--world-seed", o.world_seed, "Seed of the shared embedding world");
  synth->add_option("--classes", o.classes, "Semantic classes (0: default)");
  synth->add_option("--per-class", o.per_class, "Images per class (classes kind)");
  synth->add_option("--height", o.height, "Target height (seg, depth)");
  synth->add_option("--width", o.width, "Target width (seg, depth)");
  synth->add_option("--bins", o.bins, "Depth bins defining the planted range check");
  synth->add_option("--depth-range", o.depth_range, "min,max depth in meters");
  handlers[synth] = cmd_synth;

  auto* align = app.add_subcommand("align", "Train a projection adapter on triplet judgments");
  add_common(align, o);
  align->add_option("--store", o.store, "Embedding store (.paln)")->required();
  align->add_option("--feature-mode", o.feature_mode, "cls or patch")->check(CLI::IsMember({"cls", "patch"}));
  align->add_option("--manifest", o.manifest, "Training triplets (CSV)")->required();
  align->add_option("--val-manifest", o.val_manifest, "Validation triplets (CSV)");
  align->add_option("--max-steps", o.max_steps, "Stop after this many optimizer steps (0: run all epochs)");
  add_training(align, o);
  handlers[align] = cmd_align;

  auto* eval = app.add_subcommand("eval", "Evaluate embeddings on a downstream protocol");
  eval->require_subcommand(1);

  auto* retrieval = eval->add_subcommand("retrieval", "Instance retrieval recall@k");
  add_common(retrieval, o);
  add_features(retrieval, o);
  retrieval->add_option("--truth", o.truth, "CSV query,gallery; every other store id forms the gallery")->required();
  retrieval->add_option("--ks", o.ks, "Cutoffs (default 1,3,5)");
  handlers[retrieval] = cmd_eval_retrieval;

  auto* count = eval->add_subcommand("count", "kNN counting");
  add_common(count, o);
  add_features(count, o);
  add_labels(count, o);
  count->add_option("--ks", o.ks, "Candidate k values (default 1,3,5,10)");
  handlers[count] = cmd_eval_count;

  auto* probe = eval->add_subcommand("probe", "Cross-validated logistic-regression probe");
  add_common(probe, o);
  add_features(probe, o);
  add_labels(probe, o);
  add_probe(probe, o);
  handlers[probe] = cmd_eval_probe;

  auto* rag = eval->add_subcommand("rag", "Nearest labeled examples for in-context prompts");
  add_common(rag, o);
  add_features(rag, o);
  rag->add_option("--labels", o.labels, "CSV id,label of the labeled gallery")->required();
  rag->add_option("--queries", o.queries, "File with one query id per line (default: every labeled id)");
  rag->add_option("--k", o.k, "Examples per prompt");
  handlers[rag] = cmd_eval_rag;

  auto* seg = eval->add_subcommand("seg", "Linear segmentation probe on patch tokens");
  add_common(seg, o);
  add_features(seg, o, false);
  add_dense(seg, o);
  seg->add_option("--batch", o.batch, "Images per step");
  seg->add_option("--classes", o.classes, "Class count (0: infer from targets)");
  handlers[seg] = cmd_eval_seg;

  auto* depth = eval->add_subcommand("depth", "Linear binned-depth probe on patch tokens");
  add_common(depth, o);
  add_features(depth, o, false);
  add_dense(depth, o);
  depth->add_option("--batch", o.depth_batch, "Images per step");
  depth->add_option("--bins", o.bins, "Depth bins");
  depth->add_option("--depth-range", o.depth_range, "min,max depth in meters");
  depth->add_option("--spacing", o.spacing, "uniform or log")->check(CLI::IsMember({"uniform", "log"}));
  depth->add_option("--silog-sign", o.silog_sign, "paper (+) or classic (-) squared-mean term")
      ->check(CLI::IsMember({"paper", "classic"}));
  handlers[depth] = cmd_eval_depth;

  auto* ablate = app.add_subcommand("ablate", "Compare adapters trained on different triplet sources");
  add_common(ablate, o);
  ablate->add_option("--dataset", o.datasets, "name=store:manifest (repeatable)")
      ->required()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  ablate->add_option("--task", o.tasks, "retrieval, count, probe or rag (repeatable; default retrieval)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  ablate->add_option("--eval-store", o.eval_store, "Store the tasks are evaluated on")->required();
  ablate->add_option("--truth", o.truth, "Retrieval truth CSV query,gallery");
  ablate->add_option("--labels", o.labels, "CSV id,label for count, probe and rag");
  ablate->add_option("--test-labels", o.test_labels, "CSV id,label test split");
  ablate->add_option("--test-fraction", o.test_fraction, "Test share of a random split");
  ablate->add_option("--budget", o.budget, "Triplets drawn from every dataset");
  ablate->add_option("--steps", o.steps, "Comma-separated step counts (default: full epochs)");
  ablate->add_option("--feature-mode", o.feature_mode, "cls or patch")->check(CLI::IsMember({"cls", "patch"}));
  ablate->add_option("--ks", o.ks, "Retrieval or count cutoffs");
  ablate->add_option("--k", o.k, "RAG examples per prompt");
  add_training(ablate, o);
  add_probe(ablate, o);
  handlers[ablate] = cmd_ablate;

  auto parse = [&](std::vector<std::string> a) {
    o = Options{};
    o.threads = default_threads();
    app.clear();
    std::reverse(a.begin(), a.end());
    app.parse(a);
  };

  try {
    parse(args);
    if (!o.config.empty()) {
      std::size_t depth = 0;
      for (CLI::App* cur = &app; !cur->get_subcommands().empty(); cur = cur->get_subcommands().front()) ++depth;
      std::vector<std::string> merged(args.begin(), args.begin() + static_cast<std::ptrdiff_t>(depth));
      for (auto& a : config_file_args(o.config)) merged.push_back(std::move(a));
      merged.insert(merged.end(), args.begin() + static_cast<std::ptrdiff_t>(depth), args.end());
      parse(merged);
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : usage_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return runtime_error;
  }

  const CLI::App* leaf = leaf_of(app);
  RunContext ctx;
  ctx.command = command_name(app);
  ctx.out = o.out;
  ctx.config = resolved_config(*leaf);
  ctx.seed = o.seed;
  ctx.csv = o.csv;
  try {
    fs::create_directories(ctx.out);
    const json metrics = handlers.at(leaf)(o, ctx);
    emit_report(ctx, metrics, out);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return usage_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return runtime_error;
  }
}

}  // namespace paln::cli
