#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "xmd/common.hpp"
#include "xmd/retrieval.hpp"

namespace xmd {

struct IdentificationResult {
  double percent_correct = 0.0;
  int trials = 0;  // per item
  std::vector<double> per_item;
};

/// n=2 identification: for each item and trial, success iff the generated
/// embedding is closer (by cosine) to its ground truth than to a random
/// distractor; ties credit 0.5. trials = 0 enumerates the whole pool
/// exhaustively. A distractor whose pool key equals the item's own
/// ground-truth key (gt_keys[i]) is never used.
IdentificationResult two_way_identification(const std::vector<VectorXd>& gen_embeddings,
                                            const std::vector<VectorXd>& gt_embeddings,
                                            const CandidatePool& distractor_pool, int trials,
                                            Rng& rng,
                                            const std::vector<std::string>& gt_keys = {});

/// Consolidated metrics report. At least one block must be present. The
/// report embeds a digest of `run_metadata` so equal digests imply equal
/// configurations.
nlohmann::json build_report(const std::optional<nlohmann::json>& retrieval,
                            const std::optional<nlohmann::json>& classification,
                            const std::optional<nlohmann::json>& identification,
                            const nlohmann::json& run_metadata);

nlohmann::json identification_to_json(const IdentificationResult& r);

void write_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace xmd
