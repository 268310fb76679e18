#pragma once

#include <map>
#include <string>
#include <vector>

#include "xmd/common.hpp"
#include "xmd/embedding.hpp"

namespace xmd {

/// Fixed candidate set for retrieval, one embedding row per key.
struct CandidatePool {
  MatrixXd embeddings;  // N x D
  std::vector<std::string> keys;
  std::string space_id;

  int size() const { return static_cast<int>(keys.size()); }
  int dim() const { return static_cast<int>(embeddings.cols()); }
};

CandidatePool pool_from_cache(const EmbeddingCache& cache);
CandidatePool pool_from_embeddings(const std::vector<std::string>& keys,
                                   const std::vector<Embedding>& embeddings);

struct RankedKey {
  std::string key;
  double score = 0.0;  // cosine similarity
  int pool_index = 0;
};

/// All pool keys sorted by descending cosine similarity to the query;
/// ties broken by ascending pool index.
std::vector<RankedKey> rank_candidates(const VectorXd& query, const CandidatePool& pool);

/// 1-based rank of `target_key` for the query.
int rank_of(const VectorXd& query, const std::string& target_key, const CandidatePool& pool);

struct RecallReport {
  double recall_at_1 = 0.0;
  double recall_at_5 = 0.0;
  double recall_at_10 = 0.0;
  double mean_recall = 0.0;  // average of the three, in percent
  std::vector<int> per_query_rank;
};

/// Percentage of queries whose ground-truth key lands in the top K.
double recall_at_k(const std::vector<VectorXd>& queries,
                   const std::vector<std::string>& ground_truth_keys, const CandidatePool& pool,
                   int k);

/// Recall@{1,5,10} and their mean, sharing one ranking pass per query.
RecallReport mean_recall(const std::vector<VectorXd>& queries,
                         const std::vector<std::string>& ground_truth_keys,
                         const CandidatePool& pool);

// ---------------------------------------------------------------------------
// Zero-shot classification via prompt ensembling
// ---------------------------------------------------------------------------

struct ClassWeights {
  std::vector<std::string> classes;
  MatrixXd weights;  // C x D, unit rows
};

/// The manual prompt set used for zero-shot classification; each entry
/// contains a "{}" placeholder for the class name.
const std::vector<std::string>& default_prompt_templates();

std::string fill_template(const std::string& tmpl, const std::string& class_name);

/// For each class: embed every filled template, average, L2-normalize.
ClassWeights build_class_weights(const std::vector<std::string>& class_names,
                                 const std::vector<std::string>& templates,
                                 const EmbeddingProvider& text_provider);

/// Class names sorted by descending cosine to the weight rows, truncated to
/// k; ties broken by ascending class index.
std::vector<std::string> classify(const VectorXd& signal_embedding, const ClassWeights& weights,
                                  int k);

/// Top-k accuracy (percent) over a labeled set of embeddings.
double accuracy(const std::vector<VectorXd>& embeddings, const std::vector<std::string>& labels,
                const ClassWeights& weights, int k);

}  // namespace xmd
