#include "xmd/optimizer.hpp"

namespace xmd {

AdamW::AdamW(std::vector<ParamRef> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  if (config_.lr < 0.0) throw std::invalid_argument("adamw: lr must be nonnegative");
  if (config_.eps <= 0.0) throw std::invalid_argument("adamw: eps must be positive");
  state_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.value || !p.grad) throw std::invalid_argument("adamw: null parameter ref");
    if (p.grad->rows() != p.value->rows() || p.grad->cols() != p.value->cols())
      p.grad->setZero(p.value->rows(), p.value->cols());
    state_.push_back({MatrixXd::Zero(p.value->rows(), p.value->cols()),
                      MatrixXd::Zero(p.value->rows(), p.value->cols())});
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.grad->setZero();
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    const MatrixXd& g = *params_[i].grad;
    Moments& s = state_[i];
    MatrixXd theta = params_[i].value->cast<double>();

    theta *= 1.0 - config_.lr * config_.weight_decay;
    s.m = config_.beta1 * s.m + (1.0 - config_.beta1) * g;
    s.v = config_.beta2 * s.v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    const MatrixXd m_hat = s.m / bc1;
    const MatrixXd v_hat = s.v / bc2;
    theta -= config_.lr * (m_hat.array() / (v_hat.array().sqrt() + config_.eps)).matrix();
    *params_[i].value = theta.cast<float>();
  }
}

}  // namespace xmd
