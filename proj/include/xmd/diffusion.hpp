#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xmd/common.hpp"
#include "xmd/retrieval.hpp"

namespace xmd {

/// Fixed variance schedule: per-step beta_t and the running products
/// abar_t = prod_{s<=t} (1 - beta_s). Steps are 1-based.
struct DiffusionSchedule {
  int steps = 0;
  VectorXd beta;       // beta[t-1] is beta_t
  VectorXd alpha_bar;  // alpha_bar[t-1] is abar_t

  double beta_at(int t) const;
  double alpha_bar_at(int t) const;  // alpha_bar_at(0) == 1
};

/// Linear beta interpolation between beta_start and beta_end.
DiffusionSchedule make_schedule(int steps, double beta_start, double beta_end);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) epsilon.
VectorXd forward_diffuse(const VectorXd& x0, int t, const VectorXd& epsilon,
                         const DiffusionSchedule& schedule);

/// x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t), with abar_t
/// floored at 1e-12.
VectorXd predict_x0(const VectorXd& x_t, int t, const VectorXd& eps_hat,
                    const DiffusionSchedule& schedule);

enum class EtaRule { SqrtOneMinusAlphaBar, Constant };

double eta_at(int t, const DiffusionSchedule& schedule, EtaRule rule, double constant = 1.0);

/// x_hat = eta * x0_hat + (1 - eta) * x_t.
VectorXd blend_xhat(const VectorXd& x0_hat, const VectorXd& x_t, int t,
                    const DiffusionSchedule& schedule, EtaRule rule, double eta_constant = 1.0);

/// Squared spherical distance between directions:
/// 2 * asin(|a_hat - b_hat| / 2)^2. Zero iff the directions coincide.
double spherical_distance_sq(const VectorXd& a, const VectorXd& b);

/// Gradient of spherical_distance_sq(a, b) with respect to a.
VectorXd spherical_distance_sq_grad_a(const VectorXd& a, const VectorXd& b);

// ---------------------------------------------------------------------------
// Predictors and embedders
// ---------------------------------------------------------------------------

class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual VectorXd predict(const VectorXd& x_t, int t) const = 0;

  /// Vector-Jacobian product of predict at (x_t, t); required when guidance
  /// gradients flow through the predictor.
  virtual bool has_vjp() const { return false; }
  virtual VectorXd vjp(const VectorXd& x_t, int t, const VectorXd& cotangent) const;
};

/// Exact optimal predictor for standard-normal data:
/// eps_hat(x_t, t) = sqrt(1 - abar_t) * x_t, the score relation applied to
/// grad log N(x_t; 0, I) = -x_t.
class ToyGaussianPredictor : public NoisePredictor {
 public:
  explicit ToyGaussianPredictor(DiffusionSchedule schedule) : schedule_(std::move(schedule)) {}
  VectorXd predict(const VectorXd& x_t, int t) const override;
  bool has_vjp() const override { return true; }
  VectorXd vjp(const VectorXd& x_t, int t, const VectorXd& cotangent) const override;

 private:
  DiffusionSchedule schedule_;
};

std::unique_ptr<NoisePredictor> toy_gaussian_predictor(const DiffusionSchedule& schedule);

/// Embedding map with gradient access, the contract guidance needs.
class DifferentiableEmbedder {
 public:
  virtual ~DifferentiableEmbedder() = default;
  virtual int state_dim() const = 0;
  virtual int embed_dim() const = 0;
  virtual VectorXd embed(const VectorXd& x) const = 0;
  virtual VectorXd vjp(const VectorXd& x, const VectorXd& cotangent) const = 0;
};

/// e = A x. The identity matrix makes state space and embedding space
/// coincide, which is how the synthetic pipeline runs.
class LinearEmbedder : public DifferentiableEmbedder {
 public:
  explicit LinearEmbedder(MatrixXd a) : a_(std::move(a)) {}
  static LinearEmbedder identity(int dim) { return LinearEmbedder(MatrixXd::Identity(dim, dim)); }

  int state_dim() const override { return static_cast<int>(a_.cols()); }
  int embed_dim() const override { return static_cast<int>(a_.rows()); }
  VectorXd embed(const VectorXd& x) const override { return a_ * x; }
  VectorXd vjp(const VectorXd&, const VectorXd& cotangent) const override {
    return a_.transpose() * cotangent;
  }

 private:
  MatrixXd a_;
};

// ---------------------------------------------------------------------------
// Guided sampling
// ---------------------------------------------------------------------------

enum class SigmaRule { Beta, BetaTilde };
enum class InitKind { Gaussian, NoisedImage };

struct GuidanceConfig {
  double s = 0.0;  // guidance scale
  EtaRule eta_rule = EtaRule::SqrtOneMinusAlphaBar;
  double eta_constant = 1.0;
  InitKind init = InitKind::Gaussian;
  double t_start_fraction = 0.5;  // noised-image start point as a fraction of T
  SigmaRule sigma_rule = SigmaRule::Beta;
  bool stop_gradient_through_predictor = false;
};

struct GuidanceTarget {
  VectorXd signal_embedding;
  const DifferentiableEmbedder* embedder = nullptr;
};

/// Gradient with respect to x_t of the squared spherical distance between
/// embed(x_hat(x_t)) and the target embedding, with x_hat built from
/// predict_x0 + blend_xhat. Flows through the predictor unless the
/// stop-gradient toggle is set.
VectorXd guidance_gradient(const VectorXd& x_t, int t, const GuidanceTarget& target,
                           const DiffusionSchedule& schedule, const NoisePredictor& predictor,
                           const GuidanceConfig& config);

/// One reverse step: unconditional mean from the predictor, variance
/// sigma_t^2 per sigma_rule, mean shifted by s * sigma_t^2 * (-gradient)
/// when guidance is present, then a draw with z = 0 at t = 1.
VectorXd guided_step(const VectorXd& x_t, int t, const NoisePredictor& predictor,
                     const DiffusionSchedule& schedule, const GuidanceTarget* guidance,
                     const GuidanceConfig& config, Rng& rng);

struct InitState {
  std::string key;  // empty for gaussian init
  int t_start = 0;
  VectorXd state;
};

InitState gaussian_init(const DiffusionSchedule& schedule, int dim, Rng& rng);

/// Pick the prior-pool image closest to the signal embedding and
/// forward-diffuse its state to t_start = round(t_start_fraction * T).
InitState select_init_image(const VectorXd& signal_embedding, const CandidatePool& prior_pool,
                            const std::function<VectorXd(const std::string&)>& state_lookup,
                            const DiffusionSchedule& schedule, double t_start_fraction, Rng& rng);

struct SampleStepLog {
  int t = 0;
  double guidance_loss = 0.0;
};

struct SampleResult {
  VectorXd x0;
  std::vector<SampleStepLog> log;  // populated when guidance is present
};

/// Iterate guided_step from init.t_start down to 1.
SampleResult sample(const NoisePredictor& predictor, const DiffusionSchedule& schedule,
                    const GuidanceTarget* guidance, const GuidanceConfig& config,
                    const InitState& init, Rng& rng);

}  // namespace xmd
