#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>

#include "xmd/common.hpp"
#include "xmd/data_model.hpp"
#include "xmd/embedding.hpp"

namespace xmd {

/// Desk-scale benchmark: item latents on the unit sphere, image/text
/// embeddings as rotations of the latent with controllable agreement, class
/// anchors for zero-shot labels, and signals that are a seeded linear map of
/// the image embedding plus Gaussian noise.
struct SyntheticSpec {
  int n_train = 100;
  int n_test = 50;
  int voxels = 64;
  int dim = 32;  // embedding dimension D
  double noise_sigma = 0.05;
  int n_classes = 10;
  double image_text_agreement = 1.0;  // expected cosine between an item's image and text embeddings
  double modality_balance = 0.5;      // how the agreement angle splits between the modalities:
                                      // image sits at agreement^balance from the latent, text at
                                      // agreement^(1-balance); 0.5 is symmetric
  double class_concentration = 0.0;   // 0: latents uniform on the sphere; otherwise the cosine
                                      // between a latent and its class anchor, which clusters
                                      // items and creates hard negatives
  int nuisance_dim = 0;               // 0: rotation noise isotropic; otherwise image and caption
                                      // rotations share a fixed subspace of this dimension,
                                      // a stand-in for low-level appearance features
  int captions_per_item = 2;
  int test_repeats = 1;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

struct SyntheticDataset {
  std::filesystem::path dir;
  std::filesystem::path manifest_path;
  std::filesystem::path image_cache_path;
  std::filesystem::path text_cache_path;  // captions plus filled class prompts
  std::filesystem::path classes_path;
  std::string space_id;
};

SyntheticDataset generate_synthetic(const SyntheticSpec& spec,
                                    const std::filesystem::path& out_dir);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::vector<std::string>& lines, const std::filesystem::path& path);

}  // namespace xmd
