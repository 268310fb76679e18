#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "xmd/retrieval.hpp"

using namespace xmd;

namespace {

CandidatePool make_pool(const MatrixXd& rows) {
  CandidatePool p;
  p.embeddings = rows;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) p.keys.push_back("k" + std::to_string(i));
  p.space_id = "test";
  return p;
}

VectorXd vec(std::initializer_list<double> vals) {
  VectorXd v(static_cast<Eigen::Index>(vals.size()));
  int i = 0;
  for (double x : vals) v[i++] = x;
  return v;
}

}  // namespace

TEST_CASE("rank_candidates: self-match wins, singleton pool, validation") {
  MatrixXd rows = MatrixXd::Identity(4, 4);  // orthogonal candidates
  const CandidatePool pool = make_pool(rows);
  const auto ranked = rank_candidates(vec({0, 0, 1, 0}), pool);
  CHECK(ranked.front().key == "k2");
  CHECK(ranked.front().score == doctest::Approx(1.0));
  CHECK(ranked.size() == 4);

  const CandidatePool one = make_pool(MatrixXd::Ones(1, 3));
  CHECK(rank_candidates(vec({1, 2, 3}), one).front().key == "k0");

  CHECK_THROWS_AS(rank_candidates(vec({1, 2}), pool), std::invalid_argument);
  CHECK_THROWS_AS(rank_candidates(vec({0, 0, 0, 0}), pool), std::invalid_argument);
}

TEST_CASE("rank_candidates matches a brute-force cosine sort") {
  Rng rng(4);
  const MatrixXd rows = rng.normal_matrix(10, 6);
  const CandidatePool pool = make_pool(rows);
  const VectorXd q = rng.normal_vector(6);

  std::vector<std::pair<double, int>> brute;
  for (int i = 0; i < 10; ++i) {
    double dot = 0, nq = q.norm(), nr = rows.row(i).norm();
    for (int c = 0; c < 6; ++c) dot += q[c] * rows(i, c);
    brute.emplace_back(dot / (nq * nr), i);
  }
  std::stable_sort(brute.begin(), brute.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });

  const auto ranked = rank_candidates(q, pool);
  for (int i = 0; i < 10; ++i) {
    CHECK(ranked[static_cast<size_t>(i)].pool_index == brute[static_cast<size_t>(i)].second);
    CHECK(ranked[static_cast<size_t>(i)].score ==
          doctest::Approx(brute[static_cast<size_t>(i)].first).epsilon(1e-9));
  }
}

TEST_CASE("rank_candidates: ties break by ascending pool index; scaling is ignored") {
  MatrixXd rows(3, 2);
  rows << 1, 0, 2, 0, 0, 1;  // rows 0 and 1 have identical direction
  const CandidatePool pool = make_pool(rows);
  const auto ranked = rank_candidates(vec({5, 0}), pool);
  CHECK(ranked[0].key == "k0");
  CHECK(ranked[1].key == "k1");

  const auto scaled = rank_candidates(vec({0.001, 0}), pool);
  CHECK(scaled[0].key == ranked[0].key);
  CHECK(scaled[1].key == ranked[1].key);
}

TEST_CASE("recall_at_k: perfect mapper, hand-counted ranks, bounds") {
  Rng rng(7);
  const MatrixXd rows = rng.normal_matrix(20, 8);
  const CandidatePool pool = make_pool(rows);

  // queries equal to their ground-truth rows: recall@1 = 100
  std::vector<VectorXd> queries;
  std::vector<std::string> gts;
  for (int i = 0; i < 20; ++i) {
    queries.push_back(rows.row(i).transpose());
    gts.push_back("k" + std::to_string(i));
  }
  CHECK(recall_at_k(queries, gts, pool, 1) == 100.0);

  CHECK_THROWS(recall_at_k(queries, std::vector<std::string>(20, "nope"), pool, 1));
}

TEST_CASE("mean_recall equals the mean of its components; hand case 1/4/7") {
  // construct 3 queries with known ranks 1, 4, 7 against a 10-pool
  MatrixXd rows = MatrixXd::Zero(10, 10);
  for (int i = 0; i < 10; ++i) rows(i, i) = 1.0;
  const CandidatePool pool = make_pool(rows);

  auto query_with_rank = [&](int gt_index, int rank) {
    // the gt coordinate gets a value that puts exactly rank-1 rows above it
    VectorXd q = VectorXd::Zero(10);
    for (int i = 0, placed = 0; i < 10 && placed < rank - 1; ++i) {
      if (i == gt_index) continue;
      q[i] = 1.0;  // cosine 1/|q| each, higher than the gt coordinate value
      ++placed;
    }
    q[gt_index] = 0.5;
    return q;
  };
  const std::vector<VectorXd> queries = {query_with_rank(0, 1), query_with_rank(1, 4),
                                         query_with_rank(2, 7)};
  const std::vector<std::string> gts = {"k0", "k1", "k2"};
  const RecallReport r = mean_recall(queries, gts, pool);
  CHECK(r.per_query_rank == std::vector<int>{1, 4, 7});
  CHECK(r.recall_at_1 == doctest::Approx(100.0 / 3.0));
  CHECK(r.recall_at_5 == doctest::Approx(200.0 / 3.0));
  CHECK(r.recall_at_10 == doctest::Approx(100.0));
  CHECK(r.mean_recall == doctest::Approx((r.recall_at_1 + r.recall_at_5 + r.recall_at_10) / 3.0));

  // recall is non-decreasing in K
  double prev = 0.0;
  for (int k = 1; k <= 10; ++k) {
    const double rk = recall_at_k(queries, gts, pool, k);
    CHECK(rk >= prev);
    CHECK(rk <= 100.0);
    prev = rk;
  }
}

TEST_CASE("default prompt templates: 18 entries, all with a placeholder") {
  const auto& templates = default_prompt_templates();
  CHECK(templates.size() == 18);
  for (const auto& t : templates) CHECK(t.find("{}") != std::string::npos);
  CHECK(templates.front() == "a photo of a {}.");
  CHECK(fill_template("a photo of a {}.", "dog") == "a photo of a dog.");
  CHECK_THROWS_AS(fill_template("no placeholder", "dog"), std::invalid_argument);
}

TEST_CASE("build_class_weights: single template, degenerate pair, mean oracle") {
  TableProvider table(2, "t");
  VectorXf v(2);
  v << 3.0f, 4.0f;
  table.insert("a photo of a dog.", v);
  const ClassWeights single = build_class_weights({"dog"}, {"a photo of a {}."}, table);
  CHECK(single.weights(0, 0) == doctest::Approx(0.6));
  CHECK(single.weights(0, 1) == doctest::Approx(0.8));

  // two templates mapping to v and -v: degenerate zero mean
  VectorXf neg = -v;
  table.insert("X dog", v);
  table.insert("Y dog", neg);
  CHECK_THROWS(build_class_weights({"dog"}, {"X {}", "Y {}"}, table));

  // 18 paper templates against a hand-computed mean
  Rng rng(3);
  TableProvider big(6, "t");
  VectorXd mean = VectorXd::Zero(6);
  for (const auto& tmpl : default_prompt_templates()) {
    const VectorXf row = to_float(rng.normal_vector(6));
    big.insert(fill_template(tmpl, "cat"), row);
    mean += to_double(row);
  }
  mean /= 18.0;
  mean /= mean.norm();
  const ClassWeights cw = build_class_weights({"cat"}, default_prompt_templates(), big);
  CHECK((cw.weights.row(0).transpose() - mean).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("classify: exact match, tie-breaking, duplicate non-winning class") {
  ClassWeights w;
  w.classes = {"c0", "c1", "c2", "c3"};
  w.weights = MatrixXd::Identity(4, 4);
  const auto top = classify(vec({0, 0, 0, 1}), w, 2);
  CHECK(top[0] == "c3");

  CHECK_THROWS_AS(classify(vec({1, 0, 0, 0}), w, 5), std::invalid_argument);
  CHECK_THROWS_AS(classify(vec({1, 0, 0, 0}), w, 0), std::invalid_argument);

  // appending a duplicate of a non-winning class must not change the argmax
  ClassWeights w2 = w;
  w2.classes.push_back("c1-copy");
  w2.weights.conservativeResize(5, 4);
  w2.weights.row(4) = w.weights.row(1);
  CHECK(classify(vec({0, 0, 0, 1}), w2, 1)[0] == "c3");

  // exact tie between rows 0 and 1 resolves to the lower class index
  VectorXd q = vec({1, 1, 0, 0});
  CHECK(classify(q, w, 1)[0] == "c0");
}

TEST_CASE("accuracy: orthogonal anchors with near-anchor queries hit 100% top-1") {
  Rng rng(9);
  const int c = 6, d = 16;
  ClassWeights w;
  w.weights = MatrixXd::Zero(c, d);
  for (int i = 0; i < c; ++i) {
    w.classes.push_back("class" + std::to_string(i));
    w.weights(i, i) = 1.0;  // orthogonal anchors
  }
  std::vector<VectorXd> queries;
  std::vector<std::string> labels;
  for (int i = 0; i < 30; ++i) {
    const int label = i % c;
    VectorXd q = 0.05 * rng.normal_vector(d);
    q[label] += 1.0;
    queries.push_back(q);
    labels.push_back(w.classes[static_cast<size_t>(label)]);
  }
  CHECK(accuracy(queries, labels, w, 1) == 100.0);
  CHECK(accuracy(queries, labels, w, 3) == 100.0);
}
