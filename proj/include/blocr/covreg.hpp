#pragma once

#include <Eigen/Dense>
#include <vector>

#include "blocr/common.hpp"
#include "blocr/partition.hpp"

namespace blocr {

// Regression coefficients of the covariate-linear Cholesky factor.
//
// One scalar beta(q, j, l) per covariate q in [0, p) and strictly
// lower-triangular position (j, l), l < j < J. Storage is the column-stacked
// order used by the block sampler: for each j, the slice beta_j holds
// (beta(0,j,0..j-1), beta(1,j,0..j-1), ..., beta(p-1,j,0..j-1)) contiguously,
// so beta_j has length p*j and beta(q,j,l) sits at offset(j) + q*j + l.
// The per-pair view beta_pair(j, l) strides the same storage; both views
// alias, there is a single copy of every scalar.
class CoefficientSet {
public:
  CoefficientSet(int p, int J) : p_(p), J_(J) {
    if (p < 1 || J < 1) throw validation_error("CoefficientSet: need p >= 1, J >= 1");
    store_.assign(static_cast<std::size_t>(p) * J * (J - 1) / 2, 0.0);
  }

  int covariate_count() const { return p_; }
  int block_count() const { return J_; }
  std::size_t size() const { return store_.size(); }

  double& at(int q, int j, int l) { return store_[index(q, j, l)]; }
  double at(int q, int j, int l) const { return store_[index(q, j, l)]; }

  // Stacked beta_j in R^{p*j}, j >= 1.
  Eigen::Map<Eigen::VectorXd> beta_block(int j) {
    check_j(j);
    return {store_.data() + offset(j), static_cast<Eigen::Index>(p_) * j};
  }
  Eigen::Map<const Eigen::VectorXd> beta_block(int j) const {
    check_j(j);
    return {store_.data() + offset(j), static_cast<Eigen::Index>(p_) * j};
  }

  // Per-pair beta_{jl} in R^p (strided view over the same storage).
  Eigen::Map<Eigen::VectorXd, 0, Eigen::InnerStride<>> beta_pair(int j, int l) {
    return {store_.data() + index(0, j, l), p_, Eigen::InnerStride<>(j)};
  }
  Eigen::Map<const Eigen::VectorXd, 0, Eigen::InnerStride<>> beta_pair(int j, int l) const {
    return {store_.data() + index(0, j, l), p_, Eigen::InnerStride<>(j)};
  }

  Eigen::Map<const Eigen::VectorXd> flat() const {
    return {store_.data(), static_cast<Eigen::Index>(store_.size())};
  }
  Eigen::Map<Eigen::VectorXd> flat() {
    return {store_.data(), static_cast<Eigen::Index>(store_.size())};
  }

  // Position of beta(q, j, l) inside the flat layout.
  static std::size_t flat_index(int p, int J, int q, int j, int l) {
    if (j < 1 || j >= J || l < 0 || l >= j || q < 0 || q >= p)
      throw validation_error("CoefficientSet::flat_index: index out of range");
    return static_cast<std::size_t>(p) * j * (j - 1) / 2 + static_cast<std::size_t>(q) * j + l;
  }

private:
  std::size_t offset(int j) const {
    // sum_{j' < j} p * j'
    return static_cast<std::size_t>(p_) * j * (j - 1) / 2;
  }
  std::size_t index(int q, int j, int l) const {
    check_j(j);
    if (l < 0 || l >= j) throw validation_error("CoefficientSet: need 0 <= l < j");
    if (q < 0 || q >= p_) throw validation_error("CoefficientSet: covariate index out of range");
    return offset(j) + static_cast<std::size_t>(q) * j + l;
  }
  void check_j(int j) const {
    if (j < 1 || j >= J_) throw validation_error("CoefficientSet: need 1 <= j < J");
  }

  int p_, J_;
  std::vector<double> store_;
};

// Factor bundle for one core matrix: unit lower L, its inverse transpose U,
// and the positive scaling diagonal.
struct CholeskyFactors {
  Eigen::MatrixXd unit_lower;
  Eigen::MatrixXd unit_upper;  // (L^{-1})^T, maintained alongside L
  Eigen::VectorXd lambda;

  Eigen::MatrixXd delta() const {
    return unit_lower * lambda.asDiagonal() * unit_lower.transpose();
  }
};

inline CholeskyFactors make_cholesky_factors(const Eigen::MatrixXd& unit_lower,
                                             const Eigen::VectorXd& lambda);

// Per-participant parameters entering the covariance assembly.
struct ParticipantParams {
  Eigen::VectorXd eta;     // J, positive
  Eigen::VectorXd lambda;  // J, positive
  Eigen::VectorXd x;       // p covariates

  void validate() const {
    if ((eta.array() <= 0.0).any()) throw validation_error("ParticipantParams: eta must be positive");
    if ((lambda.array() <= 0.0).any())
      throw validation_error("ParticipantParams: lambda must be positive");
  }
};

// L(j, l) = x . beta_{jl} below the diagonal, unit diagonal, zero above.
inline Eigen::MatrixXd build_L(const Eigen::VectorXd& x, const CoefficientSet& coeffs) {
  if (x.size() != coeffs.covariate_count())
    throw validation_error("build_L: covariate vector length does not match coefficient set");
  const int J = coeffs.block_count();
  Eigen::MatrixXd L = Eigen::MatrixXd::Identity(J, J);
  for (int j = 1; j < J; ++j)
    for (int l = 0; l < j; ++l) L(j, l) = x.dot(coeffs.beta_pair(j, l));
  return L;
}

// Refreshes columns [from, J) of U = (L^{-1})^T by forward substitution:
//   U(l, c) = -L(c, l) - sum_{k = l+1}^{c-1} U(l, k) L(c, k).
// Column c only reads columns < c, so a change to row j of L invalidates
// exactly the columns >= j.
inline void refresh_U_columns(const Eigen::MatrixXd& L, Eigen::MatrixXd& U, int from) {
  const int J = static_cast<int>(L.rows());
  for (int c = std::max(from, 0); c < J; ++c) {
    U(c, c) = 1.0;
    for (int r = c + 1; r < J; ++r) U(r, c) = 0.0;
    for (int l = c - 1; l >= 0; --l) {
      double acc = -L(c, l);
      for (int k = l + 1; k < c; ++k) acc -= U(l, k) * L(c, k);
      U(l, c) = acc;
    }
  }
}

inline Eigen::MatrixXd forward_substitute_U(const Eigen::MatrixXd& L) {
  if (L.rows() != L.cols()) throw validation_error("forward_substitute_U: L must be square");
  Eigen::MatrixXd U(L.rows(), L.cols());
  refresh_U_columns(L, U, 0);
  return U;
}

inline CholeskyFactors make_cholesky_factors(const Eigen::MatrixXd& unit_lower,
                                             const Eigen::VectorXd& lambda) {
  const Eigen::Index J = unit_lower.rows();
  if (unit_lower.cols() != J || lambda.size() != J)
    throw validation_error("cholesky factors: dimension mismatch");
  for (Eigen::Index j = 0; j < J; ++j) {
    if (unit_lower(j, j) != 1.0)
      throw validation_error("cholesky factors: diagonal of L must be 1");
    for (Eigen::Index l = j + 1; l < J; ++l)
      if (unit_lower(j, l) != 0.0)
        throw validation_error("cholesky factors: L must be lower triangular");
  }
  if ((lambda.array() <= 0.0).any())
    throw validation_error("cholesky factors: lambda must be positive");
  return {unit_lower, forward_substitute_U(unit_lower), lambda};
}

// Delta = L diag(lambda) L^T; symmetric positive definite for lambda > 0.
inline Eigen::MatrixXd build_delta(const Eigen::MatrixXd& L, const Eigen::VectorXd& lambda) {
  if (L.rows() != lambda.size()) throw validation_error("build_delta: dimension mismatch");
  if ((lambda.array() <= 0.0).any()) throw validation_error("build_delta: lambda must be positive");
  return L * lambda.asDiagonal() * L.transpose();
}

// Covariance block (j, l): constant off-diagonal blocks, two-valued diagonal
// blocks. Indices in either order; the block is transposed accordingly.
inline Eigen::MatrixXd sigma_block(int j, int l, const BlockPartition& part,
                                   const Eigen::MatrixXd& delta, const Eigen::VectorXd& eta) {
  if (j < 0 || j >= part.J || l < 0 || l >= part.J)
    throw validation_error("sigma_block: block index out of range");
  const int dj = part.d[j];
  const int dl = part.d[l];
  const double scale = delta(j, l) / std::sqrt(static_cast<double>(dj) * dl);
  Eigen::MatrixXd block = Eigen::MatrixXd::Constant(dj, dl, scale);
  if (j == l) {
    if (eta(j) <= 0.0) throw validation_error("sigma_block: eta must be positive");
    // eta_j * P_perp = eta_j * (I - (1/d) ones)
    block.array() -= eta(j) / dj;
    block.diagonal().array() += eta(j);
  }
  return block;
}

// Dense Sigma = Q D Q^T. Oracle scale only.
inline Eigen::MatrixXd assemble_sigma_full(const BlockPartition& part, const Eigen::MatrixXd& delta,
                                           const Eigen::VectorXd& eta,
                                           int threshold = kOracleThreshold) {
  if (part.M > threshold)
    throw validation_error("assemble_sigma_full: M = " + std::to_string(part.M) +
                           " exceeds oracle threshold " + std::to_string(threshold));
  const CanonicalBasis basis = build_basis(part);
  Eigen::MatrixXd dmat = Eigen::MatrixXd::Zero(part.M, part.M);
  dmat.topLeftCorner(part.J, part.J) = delta;
  int pos = part.J;
  for (int j = 0; j < part.J; ++j) {
    for (int k = 0; k < part.d[j] - 1; ++k) dmat(pos + k, pos + k) = eta(j);
    pos += part.d[j] - 1;
  }
  const Eigen::MatrixXd q = basis.materialize_q(threshold);
  return q * dmat * q.transpose();
}

// Dense Sigma^{-1} = nu_tilde Delta^{-1} nu_tilde^T + blockdiag(eta_j^{-1} P_perp).
inline Eigen::MatrixXd precision_full(const BlockPartition& part, const Eigen::MatrixXd& delta,
                                      const Eigen::VectorXd& eta,
                                      int threshold = kOracleThreshold) {
  if (part.M > threshold)
    throw validation_error("precision_full: M exceeds oracle threshold");
  Eigen::LDLT<Eigen::MatrixXd> ldlt(delta);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw numeric_error("precision_full: Delta is not positive definite");
  const CanonicalBasis basis = build_basis(part);
  const Eigen::MatrixXd delta_inv = ldlt.solve(Eigen::MatrixXd::Identity(part.J, part.J));
  Eigen::MatrixXd prec = basis.nu_tilde * delta_inv * basis.nu_tilde.transpose();
  for (int j = 0; j < part.J; ++j) {
    const int dj = part.d[j];
    const int off = part.offsets[j];
    if (eta(j) <= 0.0) throw validation_error("precision_full: eta must be positive");
    Eigen::MatrixXd perp = Eigen::MatrixXd::Constant(dj, dj, -1.0 / dj);
    perp.diagonal().array() += 1.0;
    prec.block(off, off, dj, dj) += perp / eta(j);
  }
  return prec;
}

namespace detail {
// L entry under the unit-diagonal convention; the diagonal is the constant 1,
// never a covariate function.
inline double chol_entry(int r, int c, const Eigen::VectorXd& x, const CoefficientSet& coeffs) {
  if (r == c) return 1.0;
  return x.dot(coeffs.beta_pair(r, c));
}
inline double chol_coeff(int q, int r, int c, const CoefficientSet& coeffs) {
  if (r == c) return 0.0;
  return coeffs.at(q, r, c);
}
}  // namespace detail

// Constant value of d Sigma_{jl} / d x_q:
//   (1/sqrt(d_j d_l)) sum_{k <= min(j,l)} lambda_k (b_{qjk} L_{lk} + b_{qlk} L_{jk}),
// with L the covariate-linear factor at x and b its q-th coefficients
// (zero on the diagonal).
inline double sensitivity_continuous(int q, int j, int l, const Eigen::VectorXd& x,
                                     const CoefficientSet& coeffs, const Eigen::VectorXd& lambda,
                                     const BlockPartition& part) {
  if (q < 0 || q >= coeffs.covariate_count())
    throw validation_error("sensitivity_continuous: covariate index out of range");
  if (j < 0 || j >= part.J || l < 0 || l >= part.J)
    throw validation_error("sensitivity_continuous: block index out of range");
  if (l > j) std::swap(j, l);
  double acc = 0.0;
  for (int k = 0; k <= l; ++k) {
    acc += lambda(k) * (detail::chol_coeff(q, j, k, coeffs) * detail::chol_entry(l, k, x, coeffs) +
                        detail::chol_coeff(q, l, k, coeffs) * detail::chol_entry(j, k, x, coeffs));
  }
  return acc / std::sqrt(static_cast<double>(part.d[j]) * part.d[l]);
}

// Constant value of Sigma_{jl}(x_last = 1) - Sigma_{jl}(x_last = 0) where the
// designated binary covariate is the last one. Only the first p-1 entries of
// x are read.
inline double sensitivity_binary(int j, int l, const Eigen::VectorXd& x,
                                 const CoefficientSet& coeffs, const Eigen::VectorXd& lambda,
                                 const BlockPartition& part) {
  if (j < 0 || j >= part.J || l < 0 || l >= part.J)
    throw validation_error("sensitivity_binary: block index out of range");
  const int p = coeffs.covariate_count();
  if (x.size() < p - 1) throw validation_error("sensitivity_binary: covariate vector too short");
  if (l > j) std::swap(j, l);
  // L entries at x_last = 0; diagonal stays 1.
  auto base_entry = [&](int r, int c) {
    if (r == c) return 1.0;
    double acc = 0.0;
    for (int q = 0; q + 1 < p; ++q) acc += x(q) * coeffs.at(q, r, c);
    return acc;
  };
  double acc = 0.0;
  for (int k = 0; k <= l; ++k) {
    const double bj = detail::chol_coeff(p - 1, j, k, coeffs);
    const double bl = detail::chol_coeff(p - 1, l, k, coeffs);
    acc += lambda(k) * (bj * bl + bj * base_entry(l, k) + bl * base_entry(j, k));
  }
  return acc / std::sqrt(static_cast<double>(part.d[j]) * part.d[l]);
}

}  // namespace blocr
