#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>

#include "surgeon/errors.hpp"

namespace surgeon {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

// Weight matrices W (R x C) are flattened row-major: theta[r * C + c] = W(r, c).
// With this convention the Fisher block of a layer y = W a is (g g^T) kron (a a^T).

inline Vec flatten(const Mat& w) {
  Vec out(w.size());
  for (Index r = 0; r < w.rows(); ++r)
    for (Index c = 0; c < w.cols(); ++c) out(r * w.cols() + c) = w(r, c);
  return out;
}

inline Mat unflatten(const Vec& theta, Index rows, Index cols) {
  if (theta.size() != rows * cols) throw ConfigError("unflatten: size mismatch");
  Mat out(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) out(r, c) = theta(r * cols + c);
  return out;
}

inline Mat kron(const Mat& a, const Mat& b) {
  Mat out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

inline Vec kron(const Vec& a, const Vec& b) {
  Vec out(a.size() * b.size());
  for (Index i = 0; i < a.size(); ++i) out.segment(i * b.size(), b.size()) = a(i) * b;
  return out;
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline double max_asymmetry(const Mat& m) {
  return (m - m.transpose()).cwiseAbs().maxCoeff();
}

inline double relative_error(const Mat& got, const Mat& want) {
  const double denom = std::max(want.norm(), 1e-300);
  return (got - want).norm() / denom;
}

/// Symmetric eigendecomposition with eigenvalues ascending and each eigenvector's
/// largest-magnitude component (first one on ties) made positive.
struct SymEig {
  Mat vectors;
  Vec values;
};

inline SymEig sym_eig(const Mat& m) {
  if (m.rows() != m.cols()) throw ConfigError("sym_eig: matrix not square");
  if (!m.allFinite()) throw NumericError("sym_eig: non-finite input");
  Eigen::SelfAdjointEigenSolver<Mat> solver(m);
  if (solver.info() != Eigen::Success) throw NumericError("sym_eig: eigensolver did not converge");
  SymEig out{solver.eigenvectors(), solver.eigenvalues()};
  for (Index j = 0; j < out.vectors.cols(); ++j) {
    Index arg = 0;
    double best = -1.0;
    for (Index i = 0; i < out.vectors.rows(); ++i) {
      const double v = std::abs(out.vectors(i, j));
      if (v > best + 1e-12) {
        best = v;
        arg = i;
      }
    }
    if (out.vectors(arg, j) < 0.0) out.vectors.col(j) *= -1.0;
  }
  return out;
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
inline Mat spd_inverse(const Mat& m, const std::string& what = "matrix") {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success)
    throw NumericError(what + " is not positive definite");
  Mat inv = llt.solve(Mat::Identity(m.rows(), m.cols()));
  inv = 0.5 * (inv + inv.transpose());
  if (!inv.allFinite()) throw NumericError(what + " inverse is not finite");
  return inv;
}

}  // namespace surgeon
