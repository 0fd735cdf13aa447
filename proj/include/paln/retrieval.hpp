#pragma once

#include "paln/types.hpp"

#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace paln {

/// Immutable gallery of unit-normalized rows for exact cosine search.
class CosineIndex {
 public:
  /// Normalizes each row; throws DegenerateInput naming the first zero-norm id.
  static CosineIndex build(const Matrix& vectors, std::vector<std::string> ids);

  std::size_t size() const { return ids_.size(); }
  Eigen::Index dim() const { return rows_.cols(); }
  const Matrix& rows() const { return rows_; }
  const std::vector<std::string>& ids() const { return ids_; }
  /// Row of `id`, or -1.
  Eigen::Index row_of(const std::string& id) const;

 private:
  Matrix rows_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, Eigen::Index> lookup_;
};

struct Neighbor {
  std::string id;
  double similarity = 0.0;
  Eigen::Index row = 0;
};

/// Exact top-k by cosine similarity; ties go to the earlier gallery row.
std::vector<Neighbor> query_topk(const CosineIndex& index, const Vector& query, std::size_t k,
                                 const std::unordered_set<std::string>& exclude = {});

struct RetrievalQuery {
  std::string id;
  Vector vector;
  /// Gallery ids that count as a correct match.
  std::vector<std::string> truth;
};

struct RecallReport {
  std::vector<std::size_t> ks;
  std::vector<std::size_t> hits;
  std::vector<double> rates;
  std::size_t n_queries = 0;
};

/// A query hits at k when any truth id is among its k nearest gallery items.
RecallReport recall_at_k(const CosineIndex& index, std::span<const RetrievalQuery> queries,
                         std::vector<std::size_t> ks, unsigned threads = 1);

struct CountDataset {
  std::vector<std::string> ids;
  Matrix embeddings;  ///< one row per id
  std::vector<int> counts;

  std::size_t size() const { return ids.size(); }
};

/// Most frequent count among neighbors; ties resolve to the mean of the tied
/// counts rounded half-up.
int predict_count(std::span<const int> neighbor_counts);

struct CountEval {
  double mae = 0.0;
  double rmse = 0.0;
  std::size_t chosen_k = 0;
  std::vector<std::size_t> ks;
  /// Leave-one-out exact-count accuracy on train, aligned with `ks`.
  std::vector<double> train_accuracy;
};

/// Picks k by leave-one-out accuracy on train (ties: smallest k) and reports
/// MAE/RMSE of kNN count predictions on test.
CountEval knn_count_eval(const CountDataset& train, const CountDataset& test,
                         std::vector<std::size_t> ks = {1, 3, 5, 10}, unsigned threads = 1);

struct RagExample {
  std::string id;
  std::string label;
  double score = 0.0;
};

/// In-context examples for one query, most similar first.
struct PromptBundle {
  std::string query;
  std::vector<RagExample> examples;
};

/// k nearest labeled gallery items, never the query itself.
PromptBundle select_rag_examples(const CosineIndex& index, const Vector& query, const std::string& query_id,
                                 const std::unordered_map<std::string, std::string>& labels, std::size_t k = 3);

/// Stand-in for the VLM: the bundle's most frequent label, earliest example on ties.
std::string majority_label(const PromptBundle& bundle);

}  // namespace paln
