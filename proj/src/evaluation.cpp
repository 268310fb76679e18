#include "xmd/evaluation.hpp"

#include <fstream>

namespace xmd {

using nlohmann::json;

IdentificationResult two_way_identification(const std::vector<VectorXd>& gen_embeddings,
                                            const std::vector<VectorXd>& gt_embeddings,
                                            const CandidatePool& distractor_pool, int trials,
                                            Rng& rng, const std::vector<std::string>& gt_keys) {
  if (gen_embeddings.size() != gt_embeddings.size())
    throw std::invalid_argument("identification: generated/ground-truth count mismatch");
  if (gen_embeddings.empty()) throw std::invalid_argument("identification: no items");
  if (distractor_pool.size() < 1) throw std::invalid_argument("identification: empty distractor pool");
  if (!gt_keys.empty() && gt_keys.size() != gen_embeddings.size())
    throw std::invalid_argument("identification: gt_keys count mismatch");
  if (trials < 0) throw std::invalid_argument("identification: trials must be >= 0");

  IdentificationResult result;
  result.trials = trials;
  for (size_t i = 0; i < gen_embeddings.size(); ++i) {
    const VectorXd& gen = gen_embeddings[i];
    const VectorXd& gt = gt_embeddings[i];
    const double cos_gt = cosine(gen, gt);
    const std::string* own_key = gt_keys.empty() ? nullptr : &gt_keys[i];

    auto score_against = [&](int pool_row) {
      const VectorXd d = distractor_pool.embeddings.row(pool_row).transpose();
      const double cos_d = cosine(gen, d);
      if (cos_gt > cos_d) return 1.0;
      if (cos_gt == cos_d) return 0.5;
      return 0.0;
    };

    double correct = 0.0;
    int counted = 0;
    if (trials == 0) {
      // exhaustive over the pool
      for (int r = 0; r < distractor_pool.size(); ++r) {
        if (own_key && distractor_pool.keys[static_cast<size_t>(r)] == *own_key) continue;
        correct += score_against(r);
        ++counted;
      }
      if (counted == 0)
        throw std::invalid_argument("identification: pool holds only the item's own ground truth");
    } else {
      for (int k = 0; k < trials; ++k) {
        int r = rng.uniform_int(distractor_pool.size());
        if (own_key && distractor_pool.keys[static_cast<size_t>(r)] == *own_key) {
          if (distractor_pool.size() == 1)
            throw std::invalid_argument(
                "identification: pool holds only the item's own ground truth");
          while (distractor_pool.keys[static_cast<size_t>(r)] == *own_key)
            r = rng.uniform_int(distractor_pool.size());
        }
        correct += score_against(r);
        ++counted;
      }
    }
    result.per_item.push_back(100.0 * correct / counted);
  }

  double total = 0.0;
  for (double v : result.per_item) total += v;
  result.percent_correct = total / static_cast<double>(result.per_item.size());
  return result;
}

json identification_to_json(const IdentificationResult& r) {
  return {{"percent_correct", r.percent_correct}, {"trials", r.trials}, {"per_item", r.per_item}};
}

json build_report(const std::optional<json>& retrieval, const std::optional<json>& classification,
                  const std::optional<json>& identification, const json& run_metadata) {
  if (!retrieval && !classification && !identification)
    throw std::invalid_argument("build_report: at least one metric block is required");
  json report;
  report["schema_version"] = 1;
  report["retrieval"] = retrieval ? *retrieval : json(nullptr);
  report["classification"] = classification ? *classification : json(nullptr);
  report["identification"] = identification ? *identification : json(nullptr);
  report["metadata"] = run_metadata;
  // digest the configuration block when the caller separates it out, so all
  // artifacts of one run share a digest; otherwise cover the whole metadata
  const json& digested =
      run_metadata.is_object() && run_metadata.contains("config") ? run_metadata["config"]
                                                                  : run_metadata;
  report["config_digest"] = digest_hex(fnv1a64(digested.dump()));
  return report;
}

void write_json(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("JSON parse failure in " + path.string() + ": " + e.what());
  }
  return j;
}

}  // namespace xmd
