#pragma once

#include "xmd/common.hpp"

namespace xmd {

/// Symmetric InfoNCE objective over row-paired embedding batches.
///
/// contrast(A, B, tau) treats row i of B as the positive for row i of A and
/// every other row as a negative:
///
///   -(1/M) sum_i log[ exp(cos(A_i,B_i)/tau) / sum_j exp(cos(A_i,B_j)/tau) ]
///
/// Similarities are divided by tau before a per-row max subtraction, so
/// temperatures down to 0.01 stay finite.
double contrast(const MatrixXd& A, const MatrixXd& B, double tau);

struct ContrastGrad {
  double loss = 0.0;
  MatrixXd dA;
  MatrixXd dB;
};

/// contrast plus its gradients with respect to both batches.
ContrastGrad contrast_backward(const MatrixXd& A, const MatrixXd& B, double tau);

/// L_FI / L_FT: mean of the two directional contrasts.
double symmetric_contrast(const MatrixXd& A, const MatrixXd& B, double tau);
ContrastGrad symmetric_contrast_backward(const MatrixXd& A, const MatrixXd& B, double tau);

inline double loss_fi(const MatrixXd& F, const MatrixXd& I, double tau1) {
  return symmetric_contrast(F, I, tau1);
}
inline double loss_ft(const MatrixXd& F, const MatrixXd& T, double tau2) {
  return symmetric_contrast(F, T, tau2);
}

struct TotalLoss {
  double total = 0.0;
  double fi = 0.0;  // meaningful when alpha > 0
  double ft = 0.0;  // meaningful when alpha < 1
};

/// alpha * L_FI + (1 - alpha) * L_FT. A batch may be empty (rows() == 0)
/// only if its coefficient is zero.
TotalLoss total_loss(const MatrixXd& F, const MatrixXd& I, const MatrixXd& T, double alpha,
                     double tau1, double tau2);

struct TotalLossGrad {
  TotalLoss value;
  MatrixXd dF;
};

/// total_loss plus its gradient with respect to the signal batch F.
TotalLossGrad total_loss_backward(const MatrixXd& F, const MatrixXd& I, const MatrixXd& T,
                                  double alpha, double tau1, double tau2);

}  // namespace xmd
