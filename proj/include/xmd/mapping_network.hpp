#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>

#include "xmd/common.hpp"
#include "xmd/embedding.hpp"
#include "xmd/optimizer.hpp"

namespace xmd {

enum class Activation { Tanh, Silu };
Activation activation_from_name(const std::string& name);
std::string activation_name(Activation a);

enum class MapperMode { Train, Infer };

/// 0.5 * sum(exp(logvar) + mu^2 - 1 - logvar), the closed-form KL of
/// N(mu, diag(exp(logvar))) against the standard normal prior.
double kl_divergence(const VectorXd& mu, const VectorXd& logvar);

/// z = mu + exp(logvar / 2) * n with n drawn standard normal from rng.
VectorXd reparameterize(const VectorXd& mu, const VectorXd& logvar, Rng& rng);

// ---------------------------------------------------------------------------
// Checkpoints: magic "XMDCKPT1" | u32 version | u32 header_len | header JSON
// (kind, config, tensor directory) | float32 tensor blobs | u32 meta_len |
// metadata JSON. Tensors are stored column-major, so a reload reproduces
// forward outputs bit-identically on the same platform.
// ---------------------------------------------------------------------------

struct MapperCheckpoint {
  std::string kind;  // "linear" | "vae" | "vae_decoder"
  nlohmann::json config;
  std::map<std::string, MatrixXf> tensors;
  nlohmann::json metadata;

  const MatrixXf& tensor(const std::string& name) const;
};

void save_checkpoint(const MapperCheckpoint& ckpt, const std::filesystem::path& path);
MapperCheckpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Mappers
// ---------------------------------------------------------------------------

/// Trainable map from voxel space into the joint embedding space. Batches are
/// row-major (one sample per row); all math runs in double, parameters are
/// float32.
class TrainableMapper {
 public:
  virtual ~TrainableMapper() = default;

  virtual std::string kind() const = 0;
  virtual int input_dim() const = 0;
  virtual int output_dim() const = 0;
  virtual const std::string& space_id() const = 0;

  /// Forward pass. Train mode caches activations for backward and, for the
  /// VAE, samples the latent; infer mode is deterministic.
  virtual MatrixXd forward(const MatrixXd& X, MapperMode mode, Rng* rng = nullptr) = 0;

  /// Mapper-internal loss terms from the last train-mode forward (the VAE's
  /// weighted KL); zero for the linear mapper.
  virtual double aux_loss() const { return 0.0; }

  /// Accumulate parameter gradients given dLoss/dF for the cached batch.
  virtual void backward(const MatrixXd& dF) = 0;

  virtual std::vector<ParamRef> params() = 0;

  /// Throws if the mapper is not in a trainable state.
  virtual void check_trainable() const {}

  /// Digest of parameters that must not move during training (the frozen VAE
  /// decoder); 0 when there are none.
  virtual uint64_t frozen_digest() const { return 0; }

  virtual MapperCheckpoint to_checkpoint(nlohmann::json metadata) const = 0;
};

/// Map one signal vector with a mapper. Train mode samples the VAE latent;
/// infer mode uses the latent mean.
Embedding map_signal(TrainableMapper& mapper, const VectorXf& signal, MapperMode mode,
                     Rng* rng = nullptr);

class LinearMapper : public TrainableMapper {
 public:
  LinearMapper(int voxel_count, int embed_dim, uint64_t seed, std::string space_id = "");
  explicit LinearMapper(const MapperCheckpoint& ckpt);

  std::string kind() const override { return "linear"; }
  int input_dim() const override { return static_cast<int>(weight_.cols()); }
  int output_dim() const override { return static_cast<int>(weight_.rows()); }
  const std::string& space_id() const override { return space_id_; }

  /// weight * signal + bias.
  VectorXd linear_forward(const VectorXd& signal) const;

  MatrixXd forward(const MatrixXd& X, MapperMode mode, Rng* rng = nullptr) override;
  void backward(const MatrixXd& dF) override;
  std::vector<ParamRef> params() override;
  MapperCheckpoint to_checkpoint(nlohmann::json metadata) const override;

  const MatrixXf& weight() const { return weight_; }
  const MatrixXf& bias() const { return bias_; }
  void set_parameters(const MatrixXf& weight, const MatrixXf& bias);

 private:
  MatrixXf weight_;  // D x voxels
  MatrixXf bias_;    // D x 1
  MatrixXd grad_weight_, grad_bias_;
  MatrixXd cached_input_;
  std::string space_id_;
  uint64_t seed_ = 0;
};

struct VaeMapperConfig {
  int voxel_count = 0;
  int embed_dim = 0;
  int hidden_dim = 2048;
  int latent_dim = 512;
  Activation activation = Activation::Tanh;
  double kl_weight = 0.001;  // weight on the encoder KL term during training
  uint64_t seed = 0;
  std::string space_id;

  nlohmann::json to_json() const;
  static VaeMapperConfig from_json(const nlohmann::json& j);
};

/// Signal encoder (voxels -> hidden -> mu/logvar heads) feeding a decoder
/// (latent -> hidden -> D) that is pretrained on unpaired image embeddings
/// and frozen before the encoder is trained.
class VaeMapper : public TrainableMapper {
 public:
  explicit VaeMapper(const VaeMapperConfig& config);
  VaeMapper(const VaeMapperConfig& config, const MapperCheckpoint& pretrained_decoder);
  explicit VaeMapper(const MapperCheckpoint& ckpt);
  ~VaeMapper() override;

  std::string kind() const override { return "vae"; }
  int input_dim() const override { return config_.voxel_count; }
  int output_dim() const override { return config_.embed_dim; }
  const std::string& space_id() const override { return config_.space_id; }

  void encode(const VectorXd& signal, VectorXd& mu, VectorXd& logvar) const;
  VectorXd decode(const VectorXd& z) const;

  bool decoder_frozen() const { return decoder_frozen_; }
  void freeze_decoder() { decoder_frozen_ = true; }
  uint64_t frozen_digest() const override;
  void check_trainable() const override;

  MatrixXd forward(const MatrixXd& X, MapperMode mode, Rng* rng = nullptr) override;
  double aux_loss() const override { return aux_loss_; }
  void backward(const MatrixXd& dF) override;
  std::vector<ParamRef> params() override;
  MapperCheckpoint to_checkpoint(nlohmann::json metadata) const override;

  const VaeMapperConfig& config() const { return config_; }

 private:
  struct Cache;
  VaeMapperConfig config_;

  // encoder
  MatrixXf enc_w1_, enc_b1_, enc_wm_, enc_bm_, enc_wv_, enc_bv_;
  MatrixXd g_enc_w1_, g_enc_b1_, g_enc_wm_, g_enc_bm_, g_enc_wv_, g_enc_bv_;
  // decoder
  MatrixXf dec_w1_, dec_b1_, dec_w2_, dec_b2_;
  bool decoder_frozen_ = false;

  double aux_loss_ = 0.0;
  std::unique_ptr<Cache> cache_;

  void init_encoder(Rng& rng);
  void init_decoder(Rng& rng);
  void load_decoder_tensors(const MapperCheckpoint& ckpt);
};

std::unique_ptr<TrainableMapper> mapper_from_checkpoint(const MapperCheckpoint& ckpt);
std::unique_ptr<TrainableMapper> mapper_from_checkpoint(const MapperCheckpoint& ckpt,
                                                        int expected_voxel_count);

// ---------------------------------------------------------------------------
// Decoder pretraining on unpaired image embeddings: cosine-distance
// reconstruction plus a KL-weighted latent regularizer.
// ---------------------------------------------------------------------------

struct DecoderPretrainConfig {
  int embed_dim = 0;
  int hidden_dim = 2048;
  int latent_dim = 512;
  Activation activation = Activation::Tanh;
  double kl_weight = 0.001;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  int batch_size = 128;
  int epochs = 50;
  double holdout_fraction = 0.1;
  uint64_t seed = 0;
  std::string space_id;
};

struct DecoderPretrainResult {
  MapperCheckpoint checkpoint;  // kind "vae_decoder"; auxiliary visual encoder kept for inspection
  double holdout_cosine = 0.0;  // mean reconstruction cosine on held-out embeddings
  std::vector<double> epoch_losses;
};

DecoderPretrainResult pretrain_decoder(const MatrixXf& image_embeddings,
                                       const DecoderPretrainConfig& config);

}  // namespace xmd
