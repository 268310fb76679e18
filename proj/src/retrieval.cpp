#include "xmd/retrieval.hpp"

#include <algorithm>
#include <numeric>

namespace xmd {

CandidatePool pool_from_cache(const EmbeddingCache& cache) {
  CandidatePool p;
  p.embeddings = cache.rows.cast<double>();
  p.keys = cache.keys;
  p.space_id = cache.space_id;
  if (p.size() < 1) throw std::invalid_argument("candidate pool must not be empty");
  return p;
}

CandidatePool pool_from_embeddings(const std::vector<std::string>& keys,
                                   const std::vector<Embedding>& embeddings) {
  if (keys.size() != embeddings.size())
    throw std::invalid_argument("pool: key/embedding count mismatch");
  if (keys.empty()) throw std::invalid_argument("candidate pool must not be empty");
  CandidatePool p;
  p.space_id = embeddings.front().space_id;
  p.embeddings.resize(static_cast<Eigen::Index>(keys.size()), embeddings.front().dim());
  std::map<std::string, bool> seen;
  for (size_t i = 0; i < keys.size(); ++i) {
    if (!seen.emplace(keys[i], true).second)
      throw std::invalid_argument("pool: duplicate key '" + keys[i] + "'");
    if (embeddings[i].dim() != p.embeddings.cols())
      throw std::invalid_argument("pool: inconsistent embedding dimensions");
    p.embeddings.row(static_cast<Eigen::Index>(i)) = to_double(embeddings[i].values).transpose();
  }
  p.keys = keys;
  return p;
}

namespace {

/// Cosine scores of the query against all pool rows.
VectorXd pool_scores(const VectorXd& query, const CandidatePool& pool) {
  if (pool.size() < 1) throw std::invalid_argument("rank_candidates: empty pool");
  if (query.size() != pool.embeddings.cols())
    throw std::invalid_argument("rank_candidates: query dimension " +
                                std::to_string(query.size()) + " does not match pool dimension " +
                                std::to_string(pool.embeddings.cols()));
  const double qn = query.norm();
  if (qn == 0.0) throw std::invalid_argument("rank_candidates: zero-norm query");
  VectorXd scores = pool.embeddings * (query / qn);
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const double rn = pool.embeddings.row(i).norm();
    if (rn == 0.0) throw std::invalid_argument("rank_candidates: zero-norm pool row " +
                                               std::to_string(i));
    scores[i] /= rn;
  }
  return scores;
}

std::vector<int> sorted_indices(const VectorXd& scores) {
  std::vector<int> idx(static_cast<size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

std::vector<RankedKey> rank_candidates(const VectorXd& query, const CandidatePool& pool) {
  const VectorXd scores = pool_scores(query, pool);
  std::vector<RankedKey> out;
  out.reserve(static_cast<size_t>(pool.size()));
  for (int i : sorted_indices(scores))
    out.push_back({pool.keys[static_cast<size_t>(i)], scores[i], i});
  return out;
}

int rank_of(const VectorXd& query, const std::string& target_key, const CandidatePool& pool) {
  const VectorXd scores = pool_scores(query, pool);
  int target = -1;
  for (int i = 0; i < pool.size(); ++i)
    if (pool.keys[static_cast<size_t>(i)] == target_key) {
      target = i;
      break;
    }
  if (target < 0)
    throw std::invalid_argument("ground-truth key '" + target_key + "' is not in the pool");
  // rank = 1 + number of candidates strictly better, or equal with a lower index
  int rank = 1;
  for (int i = 0; i < pool.size(); ++i) {
    if (i == target) continue;
    if (scores[i] > scores[target] || (scores[i] == scores[target] && i < target)) ++rank;
  }
  return rank;
}

double recall_at_k(const std::vector<VectorXd>& queries,
                   const std::vector<std::string>& ground_truth_keys, const CandidatePool& pool,
                   int k) {
  if (queries.size() != ground_truth_keys.size())
    throw std::invalid_argument("recall_at_k: query/ground-truth count mismatch");
  if (queries.empty()) throw std::invalid_argument("recall_at_k: no queries");
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  int hits = 0;
  for (size_t i = 0; i < queries.size(); ++i)
    if (rank_of(queries[i], ground_truth_keys[i], pool) <= k) ++hits;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(queries.size());
}

RecallReport mean_recall(const std::vector<VectorXd>& queries,
                         const std::vector<std::string>& ground_truth_keys,
                         const CandidatePool& pool) {
  if (queries.size() != ground_truth_keys.size())
    throw std::invalid_argument("mean_recall: query/ground-truth count mismatch");
  if (queries.empty()) throw std::invalid_argument("mean_recall: no queries");
  RecallReport r;
  int h1 = 0, h5 = 0, h10 = 0;
  for (size_t i = 0; i < queries.size(); ++i) {
    const int rank = rank_of(queries[i], ground_truth_keys[i], pool);
    r.per_query_rank.push_back(rank);
    if (rank <= 1) ++h1;
    if (rank <= 5) ++h5;
    if (rank <= 10) ++h10;
  }
  const auto n = static_cast<double>(queries.size());
  r.recall_at_1 = 100.0 * h1 / n;
  r.recall_at_5 = 100.0 * h5 / n;
  r.recall_at_10 = 100.0 * h10 / n;
  r.mean_recall = (r.recall_at_1 + r.recall_at_5 + r.recall_at_10) / 3.0;
  return r;
}

// --- zero-shot classification ---------------------------------------------------

const std::vector<std::string>& default_prompt_templates() {
  static const std::vector<std::string> templates = {
      "a photo of a {}.",
      "a blurry photo of a {}.",
      "a black and white photo of a {}.",
      "a low contrast photo of a {}.",
      "a high contrast photo of a {}.",
      "a bad photo of a {}.",
      "a good photo of a {}.",
      "a photo of a small {}.",
      "a photo of a big {}.",
      "a photo of the {}.",
      "a blurry photo of the {}.",
      "a black and white photo of the {}.",
      "a low contrast photo of the {}.",
      "a high contrast photo of the {}.",
      "a bad photo of the {}.",
      "a good photo of the {}.",
      "a photo of the small {}.",
      "a photo of the big {}.",
  };
  return templates;
}

std::string fill_template(const std::string& tmpl, const std::string& class_name) {
  std::string out = tmpl;
  size_t pos = 0;
  bool replaced = false;
  while ((pos = out.find("{}", pos)) != std::string::npos) {
    out.replace(pos, 2, class_name);
    pos += class_name.size();
    replaced = true;
  }
  if (!replaced)
    throw std::invalid_argument("prompt template '" + tmpl + "' has no {} placeholder");
  return out;
}

ClassWeights build_class_weights(const std::vector<std::string>& class_names,
                                 const std::vector<std::string>& templates,
                                 const EmbeddingProvider& text_provider) {
  if (class_names.empty()) throw std::invalid_argument("build_class_weights: no classes");
  if (templates.empty()) throw std::invalid_argument("build_class_weights: no templates");
  ClassWeights cw;
  cw.classes = class_names;
  cw.weights.resize(static_cast<Eigen::Index>(class_names.size()), text_provider.dimension());
  for (size_t c = 0; c < class_names.size(); ++c) {
    VectorXd mean = VectorXd::Zero(text_provider.dimension());
    for (const auto& tmpl : templates)
      mean += to_double(text_provider.embed_text(fill_template(tmpl, class_names[c])).values);
    mean /= static_cast<double>(templates.size());
    const double norm = mean.norm();
    if (norm < 1e-12)
      throw std::runtime_error("class '" + class_names[c] +
                               "' has a degenerate (near-zero) prompt-ensemble mean");
    cw.weights.row(static_cast<Eigen::Index>(c)) = (mean / norm).transpose();
  }
  return cw;
}

std::vector<std::string> classify(const VectorXd& signal_embedding, const ClassWeights& weights,
                                  int k) {
  const auto c = static_cast<int>(weights.classes.size());
  if (k < 1 || k > c)
    throw std::invalid_argument("classify: k must lie in [1, " + std::to_string(c) + "]");
  if (signal_embedding.size() != weights.weights.cols())
    throw std::invalid_argument("classify: embedding dimension mismatch");
  const double qn = signal_embedding.norm();
  if (qn == 0.0) throw std::invalid_argument("classify: zero-norm embedding");
  VectorXd scores = weights.weights * (signal_embedding / qn);
  for (Eigen::Index i = 0; i < scores.size(); ++i) scores[i] /= weights.weights.row(i).norm();
  std::vector<std::string> out;
  out.reserve(static_cast<size_t>(k));
  for (int i : sorted_indices(scores)) {
    out.push_back(weights.classes[static_cast<size_t>(i)]);
    if (static_cast<int>(out.size()) == k) break;
  }
  return out;
}

double accuracy(const std::vector<VectorXd>& embeddings, const std::vector<std::string>& labels,
                const ClassWeights& weights, int k) {
  if (embeddings.size() != labels.size())
    throw std::invalid_argument("accuracy: embedding/label count mismatch");
  if (embeddings.empty()) throw std::invalid_argument("accuracy: no items");
  int hits = 0;
  for (size_t i = 0; i < embeddings.size(); ++i) {
    const auto topk = classify(embeddings[i], weights, k);
    if (std::find(topk.begin(), topk.end(), labels[i]) != topk.end()) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(embeddings.size());
}

}  // namespace xmd
