#include "xmd/contrastive.hpp"

namespace xmd {

namespace {

void check_batch(const MatrixXd& A, const MatrixXd& B, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("contrast: tau must be positive");
  if (A.rows() == 0) throw std::invalid_argument("contrast: empty batch");
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw std::invalid_argument("contrast: batch shapes differ (" + std::to_string(A.rows()) +
                                "x" + std::to_string(A.cols()) + " vs " +
                                std::to_string(B.rows()) + "x" + std::to_string(B.cols()) + ")");
}

/// Row-normalized copy; throws on zero rows. Norms returned for gradients.
MatrixXd normalize_rows(const MatrixXd& M, VectorXd& norms, const char* which) {
  norms = M.rowwise().norm();
  if ((norms.array() == 0.0).any())
    throw std::invalid_argument(std::string("contrast: zero-norm row in batch ") + which);
  return norms.cwiseInverse().asDiagonal() * M;
}

struct SoftmaxParts {
  MatrixXd C;  // cosine matrix, C(i,j) = cos(A_i, B_j)
  MatrixXd P;  // row softmax of C / tau
  double loss = 0.0;
};

SoftmaxParts softmax_parts(const MatrixXd& An, const MatrixXd& Bn, double tau) {
  SoftmaxParts s;
  s.C = An * Bn.transpose();
  const Eigen::Index M = s.C.rows();
  const MatrixXd S = s.C / tau;
  double loss = 0.0;
  s.P.resize(M, M);
  for (Eigen::Index i = 0; i < M; ++i) {
    const double row_max = S.row(i).maxCoeff();
    const Eigen::ArrayXd e = (S.row(i).array() - row_max).exp();
    const double z = e.sum();
    s.P.row(i) = (e / z).matrix();
    const double lse = row_max + std::log(z);
    loss += lse - S(i, i);
  }
  s.loss = loss / static_cast<double>(M);
  return s;
}

}  // namespace

double contrast(const MatrixXd& A, const MatrixXd& B, double tau) {
  check_batch(A, B, tau);
  VectorXd na, nb;
  const MatrixXd An = normalize_rows(A, na, "A");
  const MatrixXd Bn = normalize_rows(B, nb, "B");
  return softmax_parts(An, Bn, tau).loss;
}

ContrastGrad contrast_backward(const MatrixXd& A, const MatrixXd& B, double tau) {
  check_batch(A, B, tau);
  const Eigen::Index M = A.rows();
  VectorXd na, nb;
  const MatrixXd An = normalize_rows(A, na, "A");
  const MatrixXd Bn = normalize_rows(B, nb, "B");
  const SoftmaxParts s = softmax_parts(An, Bn, tau);

  // dLoss/dC = (P - I) / (M * tau)
  MatrixXd G = s.P;
  G.diagonal().array() -= 1.0;
  G /= static_cast<double>(M) * tau;

  // Through the cosine: dC(i,j)/dA_i = (Bn_j - C(i,j) An_i) / |A_i|.
  const MatrixXd GC = G.cwiseProduct(s.C);
  ContrastGrad out;
  out.loss = s.loss;
  out.dA = na.cwiseInverse().asDiagonal() *
           (G * Bn - GC.rowwise().sum().asDiagonal() * An);
  out.dB = nb.cwiseInverse().asDiagonal() *
           (G.transpose() * An - GC.colwise().sum().transpose().asDiagonal() * Bn);
  return out;
}

double symmetric_contrast(const MatrixXd& A, const MatrixXd& B, double tau) {
  return 0.5 * (contrast(A, B, tau) + contrast(B, A, tau));
}

ContrastGrad symmetric_contrast_backward(const MatrixXd& A, const MatrixXd& B, double tau) {
  const ContrastGrad ab = contrast_backward(A, B, tau);
  const ContrastGrad ba = contrast_backward(B, A, tau);
  ContrastGrad out;
  out.loss = 0.5 * (ab.loss + ba.loss);
  out.dA = 0.5 * (ab.dA + ba.dB);
  out.dB = 0.5 * (ab.dB + ba.dA);
  return out;
}

namespace {

void check_alpha_batches(const MatrixXd& F, const MatrixXd& I, const MatrixXd& T, double alpha) {
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("total_loss: alpha must lie in [0, 1]");
  if (alpha > 0.0 && I.rows() == 0)
    throw std::invalid_argument("total_loss: image batch required when alpha > 0");
  if (alpha < 1.0 && T.rows() == 0)
    throw std::invalid_argument("total_loss: text batch required when alpha < 1");
  if (F.rows() == 0) throw std::invalid_argument("total_loss: empty signal batch");
}

}  // namespace

TotalLoss total_loss(const MatrixXd& F, const MatrixXd& I, const MatrixXd& T, double alpha,
                     double tau1, double tau2) {
  check_alpha_batches(F, I, T, alpha);
  TotalLoss out;
  if (alpha > 0.0) out.fi = loss_fi(F, I, tau1);
  if (alpha < 1.0) out.ft = loss_ft(F, T, tau2);
  out.total = alpha * out.fi + (1.0 - alpha) * out.ft;
  return out;
}

TotalLossGrad total_loss_backward(const MatrixXd& F, const MatrixXd& I, const MatrixXd& T,
                                  double alpha, double tau1, double tau2) {
  check_alpha_batches(F, I, T, alpha);
  TotalLossGrad out;
  out.dF = MatrixXd::Zero(F.rows(), F.cols());
  if (alpha > 0.0) {
    const ContrastGrad g = symmetric_contrast_backward(F, I, tau1);
    out.value.fi = g.loss;
    out.dF += alpha * g.dA;
  }
  if (alpha < 1.0) {
    const ContrastGrad g = symmetric_contrast_backward(F, T, tau2);
    out.value.ft = g.loss;
    out.dF += (1.0 - alpha) * g.dA;
  }
  out.value.total = alpha * out.value.fi + (1.0 - alpha) * out.value.ft;
  return out;
}

}  // namespace xmd
