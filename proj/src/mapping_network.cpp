#include "xmd/mapping_network.hpp"

#include <fstream>

namespace xmd {

using nlohmann::json;

Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "silu") return Activation::Silu;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string activation_name(Activation a) {
  return a == Activation::Tanh ? "tanh" : "silu";
}

double kl_divergence(const VectorXd& mu, const VectorXd& logvar) {
  if (mu.size() != logvar.size())
    throw std::invalid_argument("kl_divergence: mu/logvar length mismatch");
  return 0.5 * (logvar.array().exp() + mu.array().square() - 1.0 - logvar.array()).sum();
}

VectorXd reparameterize(const VectorXd& mu, const VectorXd& logvar, Rng& rng) {
  if (mu.size() != logvar.size())
    throw std::invalid_argument("reparameterize: mu/logvar length mismatch");
  const VectorXd n = rng.normal_vector(static_cast<int>(mu.size()));
  return mu.array() + (logvar.array() / 2.0).exp() * n.array();
}

namespace {

MatrixXd activate(const MatrixXd& pre, Activation a) {
  if (a == Activation::Tanh) return pre.array().tanh();
  const Eigen::ArrayXXd s = 1.0 / (1.0 + (-pre.array()).exp());
  return (pre.array() * s).matrix();
}

// derivative of the activation with respect to its preactivation
MatrixXd activate_grad(const MatrixXd& pre, const MatrixXd& act, Activation a) {
  if (a == Activation::Tanh) return (1.0 - act.array().square()).matrix();
  const Eigen::ArrayXXd s = 1.0 / (1.0 + (-pre.array()).exp());
  return (s * (1.0 + pre.array() * (1.0 - s))).matrix();
}

VectorXd colvec(const MatrixXf& m) { return m.col(0).cast<double>(); }

// Y = X * W^T + 1 b^T
MatrixXd affine(const MatrixXd& X, const MatrixXf& W, const MatrixXf& b) {
  MatrixXd Y = X * W.cast<double>().transpose();
  Y.rowwise() += colvec(b).transpose();
  return Y;
}

MatrixXf init_scaled_normal(int rows, int cols, Rng rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  return (rng.normal_matrix(rows, cols) * scale).cast<float>();
}

}  // namespace

// --- checkpoint container ----------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'X', 'M', 'D', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kCkptVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const char* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}
}  // namespace

const MatrixXf& MapperCheckpoint::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::runtime_error("checkpoint has no tensor '" + name + "'");
  return it->second;
}

void save_checkpoint(const MapperCheckpoint& ckpt, const std::filesystem::path& path) {
  json header{{"kind", ckpt.kind}, {"config", ckpt.config}};
  json dir = json::array();
  for (const auto& [name, t] : ckpt.tensors)
    dir.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  header["tensors"] = std::move(dir);
  const std::string header_text = header.dump();
  const std::string meta_text = ckpt.metadata.is_null() ? "{}" : ckpt.metadata.dump();

  std::string buf;
  buf.append(kCkptMagic, sizeof(kCkptMagic));
  put_u32(buf, kCkptVersion);
  put_u32(buf, static_cast<uint32_t>(header_text.size()));
  buf += header_text;
  for (const auto& [name, t] : ckpt.tensors)
    buf.append(reinterpret_cast<const char*>(t.data()),
               sizeof(float) * static_cast<size_t>(t.size()));
  put_u32(buf, static_cast<uint32_t>(meta_text.size()));
  buf += meta_text;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

MapperCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  const auto total = static_cast<size_t>(in.tellg());
  std::string buf(total, '\0');
  in.seekg(0);
  in.read(buf.data(), static_cast<std::streamsize>(total));
  if (!in || total < 16) throw std::runtime_error("corrupt checkpoint: " + path.string());

  if (std::memcmp(buf.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
    throw std::runtime_error("bad checkpoint magic in " + path.string());
  const uint32_t version = get_u32(buf.data() + 8);
  if (version != kCkptVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const uint32_t header_len = get_u32(buf.data() + 12);
  if (16 + static_cast<size_t>(header_len) > total)
    throw std::runtime_error("corrupt checkpoint header in " + path.string());

  MapperCheckpoint ckpt;
  json header;
  try {
    header = json::parse(buf.substr(16, header_len));
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.config = header.at("config");
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt checkpoint header JSON in " + path.string() + ": " +
                             e.what());
  }

  size_t offset = 16 + header_len;
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    const size_t bytes = sizeof(float) * static_cast<size_t>(rows * cols);
    if (offset + bytes > total)
      throw std::runtime_error("checkpoint truncated at tensor '" + name + "'");
    MatrixXf t(rows, cols);
    std::memcpy(t.data(), buf.data() + offset, bytes);
    offset += bytes;
    ckpt.tensors.emplace(name, std::move(t));
  }
  if (offset + 4 > total) throw std::runtime_error("checkpoint missing metadata section");
  const uint32_t meta_len = get_u32(buf.data() + offset);
  offset += 4;
  if (offset + meta_len > total) throw std::runtime_error("checkpoint metadata truncated");
  try {
    ckpt.metadata = json::parse(buf.substr(offset, meta_len));
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt checkpoint metadata: " + std::string(e.what()));
  }
  return ckpt;
}

// --- LinearMapper --------------------------------------------------------------

LinearMapper::LinearMapper(int voxel_count, int embed_dim, uint64_t seed, std::string space_id)
    : space_id_(std::move(space_id)), seed_(seed) {
  if (voxel_count <= 0 || embed_dim <= 0)
    throw std::invalid_argument("linear mapper: dimensions must be positive");
  Rng rng(seed);
  weight_ = init_scaled_normal(embed_dim, voxel_count, rng.child(0));
  bias_ = MatrixXf::Zero(embed_dim, 1);
}

LinearMapper::LinearMapper(const MapperCheckpoint& ckpt) {
  if (ckpt.kind != "linear")
    throw std::runtime_error("checkpoint kind '" + ckpt.kind + "' is not a linear mapper");
  weight_ = ckpt.tensor("weight");
  bias_ = ckpt.tensor("bias");
  if (bias_.rows() != weight_.rows() || bias_.cols() != 1)
    throw std::runtime_error("linear checkpoint: bias shape mismatch");
  space_id_ = ckpt.config.value("space_id", std::string{});
  seed_ = ckpt.config.value("seed", uint64_t{0});
}

VectorXd LinearMapper::linear_forward(const VectorXd& signal) const {
  if (signal.size() != weight_.cols())
    throw std::invalid_argument("linear_forward: signal length " + std::to_string(signal.size()) +
                                " does not match voxel_count " + std::to_string(weight_.cols()));
  return weight_.cast<double>() * signal + colvec(bias_);
}

MatrixXd LinearMapper::forward(const MatrixXd& X, MapperMode mode, Rng*) {
  if (X.cols() != weight_.cols())
    throw std::invalid_argument("linear mapper: batch has " + std::to_string(X.cols()) +
                                " voxels, expected " + std::to_string(weight_.cols()));
  if (mode == MapperMode::Train) cached_input_ = X;
  return affine(X, weight_, bias_);
}

void LinearMapper::backward(const MatrixXd& dF) {
  if (cached_input_.rows() != dF.rows())
    throw std::logic_error("linear mapper: backward without matching forward");
  if (grad_weight_.size() == 0) {
    grad_weight_.setZero(weight_.rows(), weight_.cols());
    grad_bias_.setZero(bias_.rows(), 1);
  }
  grad_weight_ += dF.transpose() * cached_input_;
  grad_bias_ += dF.colwise().sum().transpose();
}

std::vector<ParamRef> LinearMapper::params() {
  if (grad_weight_.size() == 0) {
    grad_weight_.setZero(weight_.rows(), weight_.cols());
    grad_bias_.setZero(bias_.rows(), 1);
  }
  return {{"weight", &weight_, &grad_weight_}, {"bias", &bias_, &grad_bias_}};
}

MapperCheckpoint LinearMapper::to_checkpoint(json metadata) const {
  MapperCheckpoint ckpt;
  ckpt.kind = "linear";
  ckpt.config = {{"voxel_count", weight_.cols()},
                 {"embed_dim", weight_.rows()},
                 {"seed", seed_},
                 {"space_id", space_id_}};
  ckpt.tensors = {{"weight", weight_}, {"bias", bias_}};
  ckpt.metadata = std::move(metadata);
  return ckpt;
}

void LinearMapper::set_parameters(const MatrixXf& weight, const MatrixXf& bias) {
  if (bias.rows() != weight.rows() || bias.cols() != 1)
    throw std::invalid_argument("linear mapper: bias must be (out x 1)");
  weight_ = weight;
  bias_ = bias;
  grad_weight_.resize(0, 0);
  grad_bias_.resize(0, 0);
}

// --- VaeMapper -----------------------------------------------------------------

struct VaeMapper::Cache {
  MatrixXd X, P1, H, MU, LV, N, SD, Z, P2, G;
  bool train = false;
};

VaeMapper::~VaeMapper() = default;

json VaeMapperConfig::to_json() const {
  return {{"voxel_count", voxel_count}, {"embed_dim", embed_dim},
          {"hidden_dim", hidden_dim},   {"latent_dim", latent_dim},
          {"activation", activation_name(activation)},
          {"kl_weight", kl_weight},     {"seed", seed},
          {"space_id", space_id}};
}

VaeMapperConfig VaeMapperConfig::from_json(const json& j) {
  VaeMapperConfig c;
  c.voxel_count = j.at("voxel_count").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.hidden_dim = j.value("hidden_dim", 2048);
  c.latent_dim = j.value("latent_dim", 512);
  c.activation = activation_from_name(j.value("activation", std::string("tanh")));
  c.kl_weight = j.value("kl_weight", 0.001);
  c.seed = j.value("seed", uint64_t{0});
  c.space_id = j.value("space_id", std::string{});
  return c;
}

VaeMapper::VaeMapper(const VaeMapperConfig& config) : config_(config) {
  if (config.voxel_count <= 0 || config.embed_dim <= 0 || config.hidden_dim <= 0 ||
      config.latent_dim <= 0)
    throw std::invalid_argument("vae mapper: dimensions must be positive");
  Rng rng(config.seed);
  init_encoder(rng);
  init_decoder(rng);
}

VaeMapper::VaeMapper(const VaeMapperConfig& config, const MapperCheckpoint& pretrained_decoder)
    : VaeMapper([&] {
        VaeMapperConfig c = config;
        // the decoder artifact fixes the embedding-side dimensions
        c.embed_dim = pretrained_decoder.config.at("embed_dim").get<int>();
        c.hidden_dim = pretrained_decoder.config.at("hidden_dim").get<int>();
        c.latent_dim = pretrained_decoder.config.at("latent_dim").get<int>();
        c.activation = activation_from_name(
            pretrained_decoder.config.at("activation").get<std::string>());
        if (c.space_id.empty())
          c.space_id = pretrained_decoder.config.value("space_id", std::string{});
        return c;
      }()) {
  if (pretrained_decoder.kind != "vae_decoder")
    throw std::runtime_error("checkpoint kind '" + pretrained_decoder.kind +
                             "' is not a pretrained vae decoder");
  load_decoder_tensors(pretrained_decoder);
  decoder_frozen_ = true;
}

VaeMapper::VaeMapper(const MapperCheckpoint& ckpt)
    : config_(VaeMapperConfig::from_json(ckpt.config)) {
  if (ckpt.kind != "vae")
    throw std::runtime_error("checkpoint kind '" + ckpt.kind + "' is not a vae mapper");
  enc_w1_ = ckpt.tensor("encoder.w1");
  enc_b1_ = ckpt.tensor("encoder.b1");
  enc_wm_ = ckpt.tensor("encoder.wm");
  enc_bm_ = ckpt.tensor("encoder.bm");
  enc_wv_ = ckpt.tensor("encoder.wv");
  enc_bv_ = ckpt.tensor("encoder.bv");
  load_decoder_tensors(ckpt);
  decoder_frozen_ = ckpt.config.value("decoder_frozen", true);
}

void VaeMapper::init_encoder(Rng& rng) {
  enc_w1_ = init_scaled_normal(config_.hidden_dim, config_.voxel_count, rng.child(1));
  enc_b1_ = MatrixXf::Zero(config_.hidden_dim, 1);
  enc_wm_ = init_scaled_normal(config_.latent_dim, config_.hidden_dim, rng.child(2));
  enc_bm_ = MatrixXf::Zero(config_.latent_dim, 1);
  enc_wv_ = init_scaled_normal(config_.latent_dim, config_.hidden_dim, rng.child(3));
  enc_bv_ = MatrixXf::Zero(config_.latent_dim, 1);
}

void VaeMapper::init_decoder(Rng& rng) {
  dec_w1_ = init_scaled_normal(config_.hidden_dim, config_.latent_dim, rng.child(4));
  dec_b1_ = MatrixXf::Zero(config_.hidden_dim, 1);
  dec_w2_ = init_scaled_normal(config_.embed_dim, config_.hidden_dim, rng.child(5));
  dec_b2_ = MatrixXf::Zero(config_.embed_dim, 1);
}

void VaeMapper::load_decoder_tensors(const MapperCheckpoint& ckpt) {
  dec_w1_ = ckpt.tensor("decoder.w1");
  dec_b1_ = ckpt.tensor("decoder.b1");
  dec_w2_ = ckpt.tensor("decoder.w2");
  dec_b2_ = ckpt.tensor("decoder.b2");
  if (dec_w1_.rows() != config_.hidden_dim || dec_w1_.cols() != config_.latent_dim ||
      dec_w2_.rows() != config_.embed_dim || dec_w2_.cols() != config_.hidden_dim)
    throw std::runtime_error("vae decoder tensor shapes do not match the declared config");
}

void VaeMapper::encode(const VectorXd& signal, VectorXd& mu, VectorXd& logvar) const {
  if (signal.size() != config_.voxel_count)
    throw std::invalid_argument("vae encode: signal length mismatch");
  const VectorXd p1 = enc_w1_.cast<double>() * signal + colvec(enc_b1_);
  const VectorXd h = activate(p1, config_.activation);
  mu = enc_wm_.cast<double>() * h + colvec(enc_bm_);
  logvar = enc_wv_.cast<double>() * h + colvec(enc_bv_);
}

VectorXd VaeMapper::decode(const VectorXd& z) const {
  if (z.size() != config_.latent_dim)
    throw std::invalid_argument("vae decode: latent length mismatch");
  const VectorXd p2 = dec_w1_.cast<double>() * z + colvec(dec_b1_);
  const VectorXd g = activate(p2, config_.activation);
  return dec_w2_.cast<double>() * g + colvec(dec_b2_);
}

uint64_t VaeMapper::frozen_digest() const {
  uint64_t h = digest_matrix(dec_w1_);
  h = digest_matrix(dec_b1_, h);
  h = digest_matrix(dec_w2_, h);
  return digest_matrix(dec_b2_, h);
}

void VaeMapper::check_trainable() const {
  if (!decoder_frozen_)
    throw std::runtime_error(
        "vae mapper: decoder must be pretrained and frozen before encoder training");
}

MatrixXd VaeMapper::forward(const MatrixXd& X, MapperMode mode, Rng* rng) {
  if (X.cols() != config_.voxel_count)
    throw std::invalid_argument("vae mapper: batch has " + std::to_string(X.cols()) +
                                " voxels, expected " + std::to_string(config_.voxel_count));
  auto c = std::make_unique<Cache>();
  c->train = mode == MapperMode::Train;
  c->X = X;
  c->P1 = affine(X, enc_w1_, enc_b1_);
  c->H = activate(c->P1, config_.activation);
  c->MU = affine(c->H, enc_wm_, enc_bm_);
  c->LV = affine(c->H, enc_wv_, enc_bv_);

  if (mode == MapperMode::Train) {
    if (!rng) throw std::invalid_argument("vae mapper: train-mode forward needs an rng");
    c->N = rng->normal_matrix(static_cast<int>(X.rows()), config_.latent_dim);
    c->SD = (c->LV.array() / 2.0).exp();
    c->Z = c->MU + c->SD.cwiseProduct(c->N);
    double kl = 0.0;
    for (Eigen::Index i = 0; i < c->MU.rows(); ++i)
      kl += kl_divergence(c->MU.row(i).transpose(), c->LV.row(i).transpose());
    aux_loss_ = config_.kl_weight * kl / static_cast<double>(X.rows());
  } else {
    c->Z = c->MU;
    aux_loss_ = 0.0;
  }

  c->P2 = affine(c->Z, dec_w1_, dec_b1_);
  c->G = activate(c->P2, config_.activation);
  MatrixXd F = c->G * dec_w2_.cast<double>().transpose();
  F.rowwise() += colvec(dec_b2_).transpose();
  if (mode == MapperMode::Train) cache_ = std::move(c);
  return F;
}

void VaeMapper::backward(const MatrixXd& dF) {
  if (!cache_ || !cache_->train)
    throw std::logic_error("vae mapper: backward without a train-mode forward");
  const Cache& c = *cache_;
  const double inv_m = 1.0 / static_cast<double>(c.X.rows());

  // through the frozen decoder to the latent
  const MatrixXd dG = dF * dec_w2_.cast<double>();
  const MatrixXd dP2 = dG.cwiseProduct(activate_grad(c.P2, c.G, config_.activation));
  const MatrixXd dZ = dP2 * dec_w1_.cast<double>();

  // reparameterization plus the weighted KL term
  MatrixXd dMU = dZ + (config_.kl_weight * inv_m) * c.MU;
  MatrixXd dLV = 0.5 * dZ.cwiseProduct(c.N).cwiseProduct(c.SD) +
                 (config_.kl_weight * inv_m * 0.5) * (c.LV.array().exp() - 1.0).matrix();

  const MatrixXd dH = dMU * enc_wm_.cast<double>() + dLV * enc_wv_.cast<double>();
  const MatrixXd dP1 = dH.cwiseProduct(activate_grad(c.P1, c.H, config_.activation));

  if (g_enc_w1_.size() == 0) {
    g_enc_w1_.setZero(enc_w1_.rows(), enc_w1_.cols());
    g_enc_b1_.setZero(enc_b1_.rows(), 1);
    g_enc_wm_.setZero(enc_wm_.rows(), enc_wm_.cols());
    g_enc_bm_.setZero(enc_bm_.rows(), 1);
    g_enc_wv_.setZero(enc_wv_.rows(), enc_wv_.cols());
    g_enc_bv_.setZero(enc_bv_.rows(), 1);
  }
  g_enc_w1_ += dP1.transpose() * c.X;
  g_enc_b1_ += dP1.colwise().sum().transpose();
  g_enc_wm_ += dMU.transpose() * c.H;
  g_enc_bm_ += dMU.colwise().sum().transpose();
  g_enc_wv_ += dLV.transpose() * c.H;
  g_enc_bv_ += dLV.colwise().sum().transpose();
}

std::vector<ParamRef> VaeMapper::params() {
  if (g_enc_w1_.size() == 0) {
    g_enc_w1_.setZero(enc_w1_.rows(), enc_w1_.cols());
    g_enc_b1_.setZero(enc_b1_.rows(), 1);
    g_enc_wm_.setZero(enc_wm_.rows(), enc_wm_.cols());
    g_enc_bm_.setZero(enc_bm_.rows(), 1);
    g_enc_wv_.setZero(enc_wv_.rows(), enc_wv_.cols());
    g_enc_bv_.setZero(enc_bv_.rows(), 1);
  }
  // encoder only; the decoder stays frozen during training
  return {{"encoder.w1", &enc_w1_, &g_enc_w1_}, {"encoder.b1", &enc_b1_, &g_enc_b1_},
          {"encoder.wm", &enc_wm_, &g_enc_wm_}, {"encoder.bm", &enc_bm_, &g_enc_bm_},
          {"encoder.wv", &enc_wv_, &g_enc_wv_}, {"encoder.bv", &enc_bv_, &g_enc_bv_}};
}

MapperCheckpoint VaeMapper::to_checkpoint(json metadata) const {
  MapperCheckpoint ckpt;
  ckpt.kind = "vae";
  ckpt.config = config_.to_json();
  ckpt.config["decoder_frozen"] = decoder_frozen_;
  ckpt.tensors = {{"encoder.w1", enc_w1_}, {"encoder.b1", enc_b1_}, {"encoder.wm", enc_wm_},
                  {"encoder.bm", enc_bm_}, {"encoder.wv", enc_wv_}, {"encoder.bv", enc_bv_},
                  {"decoder.w1", dec_w1_}, {"decoder.b1", dec_b1_}, {"decoder.w2", dec_w2_},
                  {"decoder.b2", dec_b2_}};
  ckpt.metadata = std::move(metadata);
  return ckpt;
}

Embedding map_signal(TrainableMapper& mapper, const VectorXf& signal, MapperMode mode, Rng* rng) {
  MatrixXd X(1, signal.size());
  X.row(0) = to_double(signal).transpose();
  const MatrixXd F = mapper.forward(X, mode, rng);
  return Embedding{to_float(F.row(0).transpose()), mapper.space_id()};
}

std::unique_ptr<TrainableMapper> mapper_from_checkpoint(const MapperCheckpoint& ckpt) {
  if (ckpt.kind == "linear") return std::make_unique<LinearMapper>(ckpt);
  if (ckpt.kind == "vae") return std::make_unique<VaeMapper>(ckpt);
  throw std::runtime_error("checkpoint kind '" + ckpt.kind + "' is not a mapper");
}

std::unique_ptr<TrainableMapper> mapper_from_checkpoint(const MapperCheckpoint& ckpt,
                                                        int expected_voxel_count) {
  auto mapper = mapper_from_checkpoint(ckpt);
  if (mapper->input_dim() != expected_voxel_count)
    throw std::runtime_error("checkpoint expects " + std::to_string(mapper->input_dim()) +
                             " voxels but the manifest declares " +
                             std::to_string(expected_voxel_count));
  return mapper;
}

// --- decoder pretraining -------------------------------------------------------

DecoderPretrainResult pretrain_decoder(const MatrixXf& image_embeddings,
                                       const DecoderPretrainConfig& config) {
  const Eigen::Index n = image_embeddings.rows();
  if (config.embed_dim <= 0 || image_embeddings.cols() != config.embed_dim)
    throw std::invalid_argument("pretrain_decoder: embedding matrix does not match embed_dim");
  if (n < config.batch_size)
    throw std::invalid_argument("pretrain_decoder: need at least batch_size (" +
                                std::to_string(config.batch_size) + ") embeddings, got " +
                                std::to_string(n));

  Rng rng(config.seed);
  const int hidden = config.hidden_dim, latent = config.latent_dim, dim = config.embed_dim;
  const Activation act = config.activation;

  // auxiliary visual encoder
  MatrixXf v_w1 = init_scaled_normal(hidden, dim, rng.child(10));
  MatrixXf v_b1 = MatrixXf::Zero(hidden, 1);
  MatrixXf v_wm = init_scaled_normal(latent, hidden, rng.child(11));
  MatrixXf v_bm = MatrixXf::Zero(latent, 1);
  MatrixXf v_wv = init_scaled_normal(latent, hidden, rng.child(12));
  MatrixXf v_bv = MatrixXf::Zero(latent, 1);
  // decoder
  MatrixXf d_w1 = init_scaled_normal(hidden, latent, rng.child(13));
  MatrixXf d_b1 = MatrixXf::Zero(hidden, 1);
  MatrixXf d_w2 = init_scaled_normal(dim, hidden, rng.child(14));
  MatrixXf d_b2 = MatrixXf::Zero(dim, 1);

  MatrixXd g_vw1, g_vb1, g_vwm, g_vbm, g_vwv, g_vbv, g_dw1, g_db1, g_dw2, g_db2;
  std::vector<ParamRef> params = {
      {"visual_encoder.w1", &v_w1, &g_vw1}, {"visual_encoder.b1", &v_b1, &g_vb1},
      {"visual_encoder.wm", &v_wm, &g_vwm}, {"visual_encoder.bm", &v_bm, &g_vbm},
      {"visual_encoder.wv", &v_wv, &g_vwv}, {"visual_encoder.bv", &v_bv, &g_vbv},
      {"decoder.w1", &d_w1, &g_dw1},        {"decoder.b1", &d_b1, &g_db1},
      {"decoder.w2", &d_w2, &g_dw2},        {"decoder.b2", &d_b2, &g_db2}};
  AdamW opt(params, AdamWConfig{config.lr, config.beta1, config.beta2, config.eps,
                                config.weight_decay});

  // held-out split for the reconstruction metric
  std::vector<int> order(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<size_t>(i)] = static_cast<int>(i);
  {
    Rng split_rng = rng.child(20);
    split_rng.shuffle(order);
  }
  Eigen::Index holdout = 0;
  if (config.holdout_fraction > 0)
    holdout = std::max<Eigen::Index>(
        1, static_cast<Eigen::Index>(std::llround(config.holdout_fraction * static_cast<double>(n))));
  if (holdout >= n) throw std::invalid_argument("pretrain_decoder: holdout fraction too large");
  std::vector<int> train_idx(order.begin(), order.end() - holdout);
  std::vector<int> hold_idx(order.end() - holdout, order.end());
  if (train_idx.empty()) throw std::invalid_argument("pretrain_decoder: no training embeddings left");

  const MatrixXd E = image_embeddings.cast<double>();

  auto batch_rows = [&](const std::vector<int>& idx, size_t begin, size_t count) {
    MatrixXd B(static_cast<Eigen::Index>(count), dim);
    for (size_t i = 0; i < count; ++i)
      B.row(static_cast<Eigen::Index>(i)) = E.row(idx[begin + i]);
    return B;
  };

  DecoderPretrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng epoch_rng = rng.child(100 + static_cast<uint64_t>(epoch));
    epoch_rng.shuffle(train_idx);
    double epoch_loss = 0.0;
    int batches = 0;

    for (size_t begin = 0; begin < train_idx.size(); begin += static_cast<size_t>(config.batch_size)) {
      const size_t count =
          std::min<size_t>(static_cast<size_t>(config.batch_size), train_idx.size() - begin);
      const MatrixXd B = batch_rows(train_idx, begin, count);
      const auto m = static_cast<double>(B.rows());

      // forward
      MatrixXd P1 = B * v_w1.cast<double>().transpose();
      P1.rowwise() += colvec(v_b1).transpose();
      const MatrixXd H = activate(P1, act);
      MatrixXd MU = H * v_wm.cast<double>().transpose();
      MU.rowwise() += colvec(v_bm).transpose();
      MatrixXd LV = H * v_wv.cast<double>().transpose();
      LV.rowwise() += colvec(v_bv).transpose();
      const MatrixXd N = epoch_rng.normal_matrix(static_cast<int>(B.rows()), latent);
      const MatrixXd SD = (LV.array() / 2.0).exp();
      const MatrixXd Z = MU + SD.cwiseProduct(N);
      MatrixXd P2 = Z * d_w1.cast<double>().transpose();
      P2.rowwise() += colvec(d_b1).transpose();
      const MatrixXd G = activate(P2, act);
      MatrixXd R = G * d_w2.cast<double>().transpose();
      R.rowwise() += colvec(d_b2).transpose();

      // cosine-distance reconstruction + weighted KL
      double recon = 0.0, kl = 0.0;
      MatrixXd dR(R.rows(), R.cols());
      for (Eigen::Index i = 0; i < R.rows(); ++i) {
        const VectorXd e = B.row(i).transpose();
        const VectorXd r = R.row(i).transpose();
        const double ne = e.norm(), nr = r.norm();
        if (nr == 0.0 || ne == 0.0)
          throw std::runtime_error("pretrain-vae: zero-norm embedding in reconstruction loss");
        const double c = e.dot(r) / (ne * nr);
        recon += 1.0 - c;
        // d(1-cos)/dr
        dR.row(i) = (-(e / (ne * nr) - (c / (nr * nr)) * r) / m).transpose();
        kl += kl_divergence(MU.row(i).transpose(), LV.row(i).transpose());
      }
      const double loss = recon / m + config.kl_weight * kl / m;
      if (!std::isfinite(loss))
        throw std::runtime_error("pretrain-vae: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(batches));
      epoch_loss += loss;
      ++batches;

      // backward
      opt.zero_grad();
      const MatrixXd dG = dR * d_w2.cast<double>();
      const MatrixXd dP2 = dG.cwiseProduct(activate_grad(P2, G, act));
      const MatrixXd dZ = dP2 * d_w1.cast<double>();
      g_dw2 += dR.transpose() * G;
      g_db2 += dR.colwise().sum().transpose();
      g_dw1 += dP2.transpose() * Z;
      g_db1 += dP2.colwise().sum().transpose();

      MatrixXd dMU = dZ + (config.kl_weight / m) * MU;
      MatrixXd dLV = 0.5 * dZ.cwiseProduct(N).cwiseProduct(SD) +
                     (config.kl_weight / m * 0.5) * (LV.array().exp() - 1.0).matrix();
      const MatrixXd dH = dMU * v_wm.cast<double>() + dLV * v_wv.cast<double>();
      const MatrixXd dP1 = dH.cwiseProduct(activate_grad(P1, H, act));
      g_vwm += dMU.transpose() * H;
      g_vbm += dMU.colwise().sum().transpose();
      g_vwv += dLV.transpose() * H;
      g_vbv += dLV.colwise().sum().transpose();
      g_vw1 += dP1.transpose() * B;
      g_vb1 += dP1.colwise().sum().transpose();
      opt.step();
    }
    result.epoch_losses.push_back(epoch_loss / std::max(batches, 1));
  }

  // held-out reconstruction through the deterministic (mean) path
  auto reconstruct_mean = [&](const VectorXd& e) {
    const VectorXd p1 = v_w1.cast<double>() * e + colvec(v_b1);
    const VectorXd h = activate(p1, act);
    const VectorXd mu = v_wm.cast<double>() * h + colvec(v_bm);
    const VectorXd p2 = d_w1.cast<double>() * mu + colvec(d_b1);
    const VectorXd g = activate(p2, act);
    return VectorXd(d_w2.cast<double>() * g + colvec(d_b2));
  };
  double hold_cos = 0.0;
  const auto& eval_idx = hold_idx.empty() ? train_idx : hold_idx;
  for (int i : eval_idx) {
    const VectorXd e = E.row(i).transpose();
    hold_cos += cosine(e, reconstruct_mean(e));
  }
  result.holdout_cosine = hold_cos / static_cast<double>(eval_idx.size());

  MapperCheckpoint ckpt;
  ckpt.kind = "vae_decoder";
  ckpt.config = {{"embed_dim", dim},
                 {"hidden_dim", hidden},
                 {"latent_dim", latent},
                 {"activation", activation_name(act)},
                 {"kl_weight", config.kl_weight},
                 {"seed", config.seed},
                 {"space_id", config.space_id}};
  ckpt.tensors = {{"decoder.w1", d_w1},        {"decoder.b1", d_b1},
                  {"decoder.w2", d_w2},        {"decoder.b2", d_b2},
                  {"visual_encoder.w1", v_w1}, {"visual_encoder.b1", v_b1},
                  {"visual_encoder.wm", v_wm}, {"visual_encoder.bm", v_bm},
                  {"visual_encoder.wv", v_wv}, {"visual_encoder.bv", v_bv}};
  ckpt.metadata = {{"holdout_cosine", result.holdout_cosine},
                   {"epochs", config.epochs},
                   {"final_loss", result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back()}};
  result.checkpoint = std::move(ckpt);
  return result;
}

}  // namespace xmd
