#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "xmd/contrastive.hpp"
#include "xmd/data_model.hpp"
#include "xmd/embedding.hpp"
#include "xmd/mapping_network.hpp"
#include "xmd/optimizer.hpp"

namespace xmd {

enum class Modality { V, T, VT };
Modality modality_from_name(const std::string& name);  // "V" | "T" | "V&T"
std::string modality_name(Modality m);

struct TrainConfig {
  double alpha = 0.5;
  double tau1 = 0.05;
  double tau2 = 0.1;
  int batch_size = 400;
  double lr = 4.5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int epochs = 300;
  int patience = 50;  // early stop on the selection metric
  uint64_t seed = 0;
  Modality modality = Modality::VT;
  std::string selection_split = "test";     // optimistic, mirrors the sweep protocol;
                                            // point at a validation split to avoid it
  std::string selection_target = "image";   // "image" | "text"

  /// Modality V pins alpha to 1, T to 0.
  double effective_alpha() const;
  void validate() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  std::optional<double> l_fi;
  std::optional<double> l_ft;
  double selection_metric = 0.0;
};

struct TrainResult {
  MapperCheckpoint checkpoint;  // parameters of the best epoch
  std::vector<EpochLog> log;
  double initial_metric = 0.0;  // selection metric of the untrained mapper
  double best_metric = 0.0;
  int best_epoch = 0;
};

/// Contrastive training of a mapper against frozen image/text embeddings.
/// Records must already be averaged/standardized as desired. Captions are
/// resampled every epoch. Deterministic given config.seed.
TrainResult train(TrainableMapper& mapper, const std::vector<SignalRecord>& train_records,
                  const std::vector<SignalRecord>& selection_records,
                  const EmbeddingProvider& image_provider, const EmbeddingProvider& text_provider,
                  const TrainConfig& config);

void write_train_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

}  // namespace xmd
