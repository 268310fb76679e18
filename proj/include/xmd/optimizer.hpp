#pragma once

#include <string>
#include <vector>

#include "xmd/common.hpp"

namespace xmd {

/// A named trainable tensor. Values are float32 (the checkpoint storage
/// type); gradients and optimizer state are double.
struct ParamRef {
  std::string name;
  MatrixXf* value = nullptr;
  MatrixXd* grad = nullptr;
};

struct AdamWConfig {
  double lr = 4.5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, scaled by lr
};

/// Adam with decoupled weight decay. The decay term is lr * weight_decay *
/// theta, applied independently of the moment-based step.
class AdamW {
 public:
  AdamW(std::vector<ParamRef> params, AdamWConfig config);

  void zero_grad();
  void step();
  long step_count() const { return t_; }

 private:
  struct Moments {
    MatrixXd m, v;
  };
  std::vector<ParamRef> params_;
  std::vector<Moments> state_;
  AdamWConfig config_;
  long t_ = 0;
};

}  // namespace xmd
