#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>

#include "xmd/data_model.hpp"
#include "xmd/diffusion.hpp"
#include "xmd/evaluation.hpp"
#include "xmd/mapping_network.hpp"
#include "xmd/synthetic.hpp"
#include "xmd/trainer.hpp"

namespace xmd {

struct ReconstructionConfig {
  int steps = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;
  InitKind init = InitKind::NoisedImage;
  double scale = 1000.0;  // guidance scale s
  double t_start_fraction = 0.5;
  SigmaRule sigma_rule = SigmaRule::Beta;
  EtaRule eta_rule = EtaRule::SqrtOneMinusAlphaBar;

  nlohmann::json to_json() const;
  static ReconstructionConfig from_json(const nlohmann::json& j);
};

struct MapperSpec {
  std::string kind = "linear";  // "linear" | "vae"
  int hidden_dim = 2048;
  int latent_dim = 512;
  std::string activation = "tanh";
  double kl_weight = 0.001;
  // decoder pretraining (vae only)
  int pretrain_epochs = 60;
  int pretrain_batch = 64;
  double pretrain_lr = 1e-3;

  nlohmann::json to_json() const;
  static MapperSpec from_json(const nlohmann::json& j);
};

/// One experiment = one directory. Inputs are either a synthetic block
/// (generated under <out_dir>/data) or explicit manifest + cache paths.
struct ExperimentConfig {
  uint64_t seed = 0;
  std::filesystem::path out_dir;
  std::optional<SyntheticSpec> synthetic;
  std::filesystem::path manifest_path;
  std::filesystem::path image_cache_path;
  std::filesystem::path text_cache_path;
  std::filesystem::path classes_path;

  bool standardize = true;
  bool average_repeats_enabled = true;
  std::string train_split = "train";
  std::string eval_split = "test";

  MapperSpec mapper;
  TrainConfig train;

  bool task_retrieval = true;
  bool task_classification = true;
  bool task_reconstruction = true;
  ReconstructionConfig reconstruction;
  int identification_trials = 50;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Averaged/standardized view of one manifest, ready for training and
/// evaluation.
struct PreparedDataset {
  DatasetManifest manifest;  // processed records
  std::optional<VoxelStats> stats;
};

PreparedDataset prepare_dataset(const std::filesystem::path& manifest_path, bool average,
                                bool standardize, const std::string& train_split);

/// ingest -> (pretrain) -> train -> retrieve/classify/reconstruct ->
/// evaluate -> report. Writes everything under config.out_dir and returns
/// the consolidated report path. Deterministic given config.seed.
std::filesystem::path run_pipeline(const ExperimentConfig& config);

}  // namespace xmd
