#include "paln/retrieval.hpp"

#include "paln/error.hpp"
#include "paln/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace paln {

namespace {

Vector unit(const Vector& v, const std::string& what) {
  const double n = v.norm();
  if (n == 0.0) throw DegenerateInput(what + " has zero norm");
  return v / n;
}

// Top-k over gallery rows, skipping rows where `skip(row)` is true.
template <typename Skip>
std::vector<Neighbor> topk_rows(const CosineIndex& index, const Vector& query, std::size_t k, Skip&& skip) {
  if (k < 1) throw InvalidArgument("k must be >= 1");
  if (query.size() != index.dim()) throw ShapeError("query dimension does not match the index");
  const Vector q = unit(query, "query");
  const Vector sims = index.rows() * q;
  std::vector<Eigen::Index> rows;
  rows.reserve(index.size());
  for (Eigen::Index r = 0; r < sims.size(); ++r)
    if (!skip(r)) rows.push_back(r);
  const auto take = std::min(k, rows.size());
  auto better = [&](Eigen::Index a, Eigen::Index b) { return sims[a] > sims[b] || (sims[a] == sims[b] && a < b); };
  std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take), rows.end(), better);
  std::vector<Neighbor> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back({index.ids()[static_cast<std::size_t>(rows[i])], sims[rows[i]], rows[i]});
  return out;
}

}  // namespace

CosineIndex CosineIndex::build(const Matrix& vectors, std::vector<std::string> ids) {
  if (static_cast<std::size_t>(vectors.rows()) != ids.size()) throw ShapeError("one id per gallery row required");
  CosineIndex index;
  index.rows_ = vectors;
  for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
    const double n = vectors.row(r).norm();
    if (n == 0.0) throw DegenerateInput("gallery vector '" + ids[static_cast<std::size_t>(r)] + "' has zero norm");
    index.rows_.row(r) /= n;
    if (!index.lookup_.emplace(ids[static_cast<std::size_t>(r)], r).second)
      throw InvalidArgument("duplicate gallery id '" + ids[static_cast<std::size_t>(r)] + "'");
  }
  index.ids_ = std::move(ids);
  return index;
}

Eigen::Index CosineIndex::row_of(const std::string& id) const {
  const auto it = lookup_.find(id);
  return it == lookup_.end() ? -1 : it->second;
}

std::vector<Neighbor> query_topk(const CosineIndex& index, const Vector& query, std::size_t k,
                                 const std::unordered_set<std::string>& exclude) {
  std::vector<bool> skip(index.size(), false);
  for (const auto& id : exclude)
    if (const auto r = index.row_of(id); r >= 0) skip[static_cast<std::size_t>(r)] = true;
  return topk_rows(index, query, k, [&](Eigen::Index r) { return skip[static_cast<std::size_t>(r)]; });
}

RecallReport recall_at_k(const CosineIndex& index, std::span<const RetrievalQuery> queries,
                         std::vector<std::size_t> ks, unsigned threads) {
  if (ks.empty()) throw InvalidArgument("recall needs at least one k");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  if (ks.front() < 1) throw InvalidArgument("k must be >= 1");
  for (const auto& q : queries)
    if (q.truth.empty()) throw InvalidArgument("query '" + q.id + "' has an empty truth set");

  // First rank (1-based) at which a truth id appears; 0 when absent from the top max-k.
  std::vector<std::size_t> first_hit(queries.size(), 0);
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    const auto& q = queries[i];
    const auto self = index.row_of(q.id);
    const auto nn = topk_rows(index, q.vector, ks.back(), [&](Eigen::Index r) { return r == self; });
    for (std::size_t rank = 0; rank < nn.size(); ++rank)
      if (std::find(q.truth.begin(), q.truth.end(), nn[rank].id) != q.truth.end()) {
        first_hit[i] = rank + 1;
        break;
      }
  });

  RecallReport report;
  report.ks = ks;
  report.n_queries = queries.size();
  for (auto k : ks) {
    const auto hits = static_cast<std::size_t>(
        std::count_if(first_hit.begin(), first_hit.end(), [k](std::size_t r) { return r > 0 && r <= k; }));
    report.hits.push_back(hits);
    report.rates.push_back(queries.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(queries.size()));
  }
  return report;
}

int predict_count(std::span<const int> neighbor_counts) {
  if (neighbor_counts.empty()) throw InvalidArgument("no neighbors to vote");
  std::map<int, int> votes;
  for (int c : neighbor_counts) ++votes[c];
  int top = 0;
  for (const auto& [count, v] : votes) top = std::max(top, v);
  double sum = 0.0;
  int tied = 0;
  for (const auto& [count, v] : votes)
    if (v == top) {
      sum += count;
      ++tied;
    }
  return static_cast<int>(std::floor(sum / tied + 0.5));
}

CountEval knn_count_eval(const CountDataset& train, const CountDataset& test, std::vector<std::size_t> ks,
                         unsigned threads) {
  if (train.size() == 0 || test.size() == 0) throw InvalidArgument("count evaluation needs non-empty train and test");
  if (ks.empty()) throw InvalidArgument("count evaluation needs at least one k");
  for (auto k : ks)
    if (k < 1) throw InvalidArgument("k must be >= 1");
  for (const auto* ds : {&train, &test}) {
    if (static_cast<std::size_t>(ds->embeddings.rows()) != ds->size() || ds->counts.size() != ds->size())
      throw ShapeError("count dataset fields are misaligned");
    for (int c : ds->counts)
      if (c < 0) throw InvalidArgument("counts must be >= 0");
  }
  const auto index = CosineIndex::build(train.embeddings, train.ids);
  const auto max_k = *std::max_element(ks.begin(), ks.end());

  auto predict_from = [&](const std::vector<Neighbor>& nn, std::size_t k) {
    std::vector<int> counts;
    for (std::size_t i = 0; i < std::min(k, nn.size()); ++i)
      counts.push_back(train.counts[static_cast<std::size_t>(nn[i].row)]);
    return predict_count(counts);
  };

  // Leave-one-out on train.
  std::vector<std::vector<Neighbor>> loo(train.size());
  parallel_for(train.size(), threads, [&](std::size_t i) {
    loo[i] = topk_rows(index, train.embeddings.row(static_cast<Eigen::Index>(i)).transpose(), max_k,
                       [i](Eigen::Index r) { return r == static_cast<Eigen::Index>(i); });
  });

  CountEval out;
  out.ks = ks;
  double best = -1.0;
  for (auto k : ks) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < train.size(); ++i)
      if (!loo[i].empty() && predict_from(loo[i], k) == train.counts[i]) ++correct;
    const double acc = static_cast<double>(correct) / static_cast<double>(train.size());
    out.train_accuracy.push_back(acc);
    if (acc > best || (acc == best && k < out.chosen_k)) {
      best = acc;
      out.chosen_k = k;
    }
  }

  std::vector<double> errors(test.size());
  parallel_for(test.size(), threads, [&](std::size_t i) {
    const auto nn = topk_rows(index, test.embeddings.row(static_cast<Eigen::Index>(i)).transpose(), out.chosen_k,
                              [](Eigen::Index) { return false; });
    errors[i] = static_cast<double>(predict_from(nn, out.chosen_k) - test.counts[i]);
  });
  double abs_sum = 0.0, sq_sum = 0.0;
  for (double e : errors) {
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  out.mae = abs_sum / static_cast<double>(test.size());
  out.rmse = std::sqrt(sq_sum / static_cast<double>(test.size()));
  return out;
}

PromptBundle select_rag_examples(const CosineIndex& index, const Vector& query, const std::string& query_id,
                                 const std::unordered_map<std::string, std::string>& labels, std::size_t k) {
  std::size_t labeled = 0;
  for (const auto& id : index.ids()) labeled += labels.contains(id);
  if (labeled < k)
    throw InvalidArgument("need at least " + std::to_string(k) + " labeled gallery items, have " +
                          std::to_string(labeled));
  const auto self = index.row_of(query_id);
  const auto nn = topk_rows(index, query, k, [&](Eigen::Index r) {
    return r == self || !labels.contains(index.ids()[static_cast<std::size_t>(r)]);
  });
  PromptBundle bundle;
  bundle.query = query_id;
  for (const auto& n : nn) bundle.examples.push_back({n.id, labels.at(n.id), n.similarity});
  return bundle;
}

std::string majority_label(const PromptBundle& bundle) {
  if (bundle.examples.empty()) throw InvalidArgument("empty prompt bundle");
  std::map<std::string, int> votes;
  for (const auto& e : bundle.examples) ++votes[e.label];
  int top = 0;
  for (const auto& [label, v] : votes) top = std::max(top, v);
  for (const auto& e : bundle.examples)
    if (votes[e.label] == top) return e.label;
  return bundle.examples.front().label;
}

}  // namespace paln
