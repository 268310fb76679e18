#include "xmd/diffusion.hpp"

#include <cmath>

namespace xmd {

double DiffusionSchedule::beta_at(int t) const {
  if (t < 1 || t > steps)
    throw std::out_of_range("schedule: t = " + std::to_string(t) + " outside [1, " +
                            std::to_string(steps) + "]");
  return beta[t - 1];
}

double DiffusionSchedule::alpha_bar_at(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > steps)
    throw std::out_of_range("schedule: t = " + std::to_string(t) + " outside [0, " +
                            std::to_string(steps) + "]");
  return alpha_bar[t - 1];
}

DiffusionSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("make_schedule: steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  DiffusionSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha_bar.resize(steps);
  double running = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    running *= 1.0 - s.beta[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

VectorXd forward_diffuse(const VectorXd& x0, int t, const VectorXd& epsilon,
                         const DiffusionSchedule& schedule) {
  if (epsilon.size() != x0.size())
    throw std::invalid_argument("forward_diffuse: shape mismatch");
  if (t < 1) throw std::out_of_range("forward_diffuse: t must be >= 1");
  const double abar = schedule.alpha_bar_at(t);
  return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * epsilon;
}

VectorXd predict_x0(const VectorXd& x_t, int t, const VectorXd& eps_hat,
                    const DiffusionSchedule& schedule) {
  if (eps_hat.size() != x_t.size()) throw std::invalid_argument("predict_x0: shape mismatch");
  if (t < 1) throw std::out_of_range("predict_x0: t must be >= 1");
  double abar = schedule.alpha_bar_at(t);
  if (abar < 1e-12) abar = 1e-12;  // underflow guard
  return (x_t - std::sqrt(1.0 - abar) * eps_hat) / std::sqrt(abar);
}

double eta_at(int t, const DiffusionSchedule& schedule, EtaRule rule, double constant) {
  if (rule == EtaRule::Constant) return constant;
  return std::sqrt(1.0 - schedule.alpha_bar_at(t));
}

VectorXd blend_xhat(const VectorXd& x0_hat, const VectorXd& x_t, int t,
                    const DiffusionSchedule& schedule, EtaRule rule, double eta_constant) {
  if (x0_hat.size() != x_t.size()) throw std::invalid_argument("blend_xhat: shape mismatch");
  const double eta = eta_at(t, schedule, rule, eta_constant);
  return eta * x0_hat + (1.0 - eta) * x_t;
}

double spherical_distance_sq(const VectorXd& a, const VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("spherical_distance_sq: zero vector");
  const double chord = (a / na - b / nb).norm();
  const double u = std::min(chord / 2.0, 1.0);
  const double theta = std::asin(u);
  return 2.0 * theta * theta;
}

VectorXd spherical_distance_sq_grad_a(const VectorXd& a, const VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("spherical_distance_sq: zero vector");
  const VectorXd ah = a / na;
  const VectorXd bh = b / nb;
  const VectorXd d = ah - bh;
  const double chord = d.norm();
  if (chord < 1e-15) return VectorXd::Zero(a.size());
  // dL/du = 4 asin(u) / sqrt(1 - u^2) with u = chord / 2; clamp near the
  // antipodal singularity
  double u = chord / 2.0;
  if (u > 1.0 - 1e-9) u = 1.0 - 1e-9;
  const double factor = 2.0 * std::asin(u) / (chord * std::sqrt(1.0 - u * u));
  const VectorXd g_ah = factor * d;
  // project through the normalization of a
  return (g_ah - ah.dot(g_ah) * ah) / na;
}

VectorXd NoisePredictor::vjp(const VectorXd&, int, const VectorXd&) const {
  throw std::runtime_error("noise predictor does not expose gradients");
}

VectorXd ToyGaussianPredictor::predict(const VectorXd& x_t, int t) const {
  return std::sqrt(1.0 - schedule_.alpha_bar_at(t)) * x_t;
}

VectorXd ToyGaussianPredictor::vjp(const VectorXd&, int t, const VectorXd& cotangent) const {
  return std::sqrt(1.0 - schedule_.alpha_bar_at(t)) * cotangent;
}

std::unique_ptr<NoisePredictor> toy_gaussian_predictor(const DiffusionSchedule& schedule) {
  return std::make_unique<ToyGaussianPredictor>(schedule);
}

VectorXd guidance_gradient(const VectorXd& x_t, int t, const GuidanceTarget& target,
                           const DiffusionSchedule& schedule, const NoisePredictor& predictor,
                           const GuidanceConfig& config) {
  if (!target.embedder) throw std::invalid_argument("guidance: no embedder configured");
  if (target.embedder->state_dim() != x_t.size())
    throw std::invalid_argument("guidance: embedder state dimension mismatch");

  const VectorXd eps = predictor.predict(x_t, t);
  if (eps.size() != x_t.size())
    throw std::runtime_error("noise predictor returned a wrong-shaped output");
  double abar = schedule.alpha_bar_at(t);
  if (abar < 1e-12) abar = 1e-12;
  const double sqrt_abar = std::sqrt(abar);
  const double sqrt_one_minus = std::sqrt(1.0 - abar);
  const VectorXd x0_hat = (x_t - sqrt_one_minus * eps) / sqrt_abar;
  const double eta = eta_at(t, schedule, config.eta_rule, config.eta_constant);
  const VectorXd x_hat = eta * x0_hat + (1.0 - eta) * x_t;

  const VectorXd e = target.embedder->embed(x_hat);
  const VectorXd dL_de = spherical_distance_sq_grad_a(e, target.signal_embedding);
  const VectorXd dL_dxhat = target.embedder->vjp(x_hat, dL_de);

  const VectorXd dL_dx0 = eta * dL_dxhat;
  VectorXd grad = (1.0 - eta) * dL_dxhat + dL_dx0 / sqrt_abar;
  if (!config.stop_gradient_through_predictor) {
    if (!predictor.has_vjp())
      throw std::runtime_error(
          "guidance: predictor lacks gradient capability; set the stop-gradient toggle or use a "
          "differentiable predictor");
    grad -= (sqrt_one_minus / sqrt_abar) * predictor.vjp(x_t, t, dL_dx0);
  }
  return grad;
}

VectorXd guided_step(const VectorXd& x_t, int t, const NoisePredictor& predictor,
                     const DiffusionSchedule& schedule, const GuidanceTarget* guidance,
                     const GuidanceConfig& config, Rng& rng) {
  if (t < 1) throw std::invalid_argument("guided_step: t must be >= 1");
  const double beta = schedule.beta_at(t);
  const double abar = schedule.alpha_bar_at(t);
  const VectorXd eps = predictor.predict(x_t, t);
  if (eps.size() != x_t.size())
    throw std::runtime_error("noise predictor returned a wrong-shaped output");

  VectorXd mu = (x_t - (beta / std::sqrt(1.0 - abar)) * eps) / std::sqrt(1.0 - beta);

  double sigma2 = beta;
  if (config.sigma_rule == SigmaRule::BetaTilde) {
    const double abar_prev = schedule.alpha_bar_at(t - 1);
    sigma2 = (1.0 - abar_prev) / (1.0 - abar) * beta;
  }

  if (guidance && config.s > 0.0) {
    const VectorXd grad = guidance_gradient(x_t, t, *guidance, schedule, predictor, config);
    mu -= config.s * sigma2 * grad;
  }

  VectorXd x_prev = mu;
  if (t > 1) x_prev += std::sqrt(sigma2) * rng.normal_vector(static_cast<int>(x_t.size()));
  if (!x_prev.allFinite())
    throw std::runtime_error("guided_step: non-finite state at t = " + std::to_string(t));
  return x_prev;
}

InitState gaussian_init(const DiffusionSchedule& schedule, int dim, Rng& rng) {
  return InitState{"", schedule.steps, rng.normal_vector(dim)};
}

InitState select_init_image(const VectorXd& signal_embedding, const CandidatePool& prior_pool,
                            const std::function<VectorXd(const std::string&)>& state_lookup,
                            const DiffusionSchedule& schedule, double t_start_fraction, Rng& rng) {
  if (!(t_start_fraction > 0.0 && t_start_fraction <= 1.0))
    throw std::invalid_argument("select_init_image: t_start_fraction must lie in (0, 1]");
  const auto ranked = rank_candidates(signal_embedding, prior_pool);
  const std::string& key = ranked.front().key;
  VectorXd state;
  try {
    state = state_lookup(key);
  } catch (const std::exception& e) {
    throw std::runtime_error("select_init_image: cannot fetch image '" + key + "': " + e.what());
  }
  int t_start = static_cast<int>(std::lround(t_start_fraction * schedule.steps));
  t_start = std::clamp(t_start, 1, schedule.steps);
  const VectorXd eps = rng.normal_vector(static_cast<int>(state.size()));
  return InitState{key, t_start, forward_diffuse(state, t_start, eps, schedule)};
}

SampleResult sample(const NoisePredictor& predictor, const DiffusionSchedule& schedule,
                    const GuidanceTarget* guidance, const GuidanceConfig& config,
                    const InitState& init, Rng& rng) {
  if (init.t_start < 1 || init.t_start > schedule.steps)
    throw std::invalid_argument("sample: t_start outside the schedule");
  SampleResult result;
  VectorXd x = init.state;
  for (int t = init.t_start; t >= 1; --t) {
    if (guidance) {
      const VectorXd eps = predictor.predict(x, t);
      const VectorXd x0_hat = predict_x0(x, t, eps, schedule);
      const VectorXd x_hat =
          blend_xhat(x0_hat, x, t, schedule, config.eta_rule, config.eta_constant);
      result.log.push_back(
          {t, spherical_distance_sq(guidance->embedder->embed(x_hat), guidance->signal_embedding)});
    }
    x = guided_step(x, t, predictor, schedule, guidance, config, rng);
  }
  result.x0 = std::move(x);
  return result;
}

}  // namespace xmd
