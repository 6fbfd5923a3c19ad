#pragma once

#include <spdlog/spdlog.h>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "surgeon/curvature.hpp"
#include "surgeon/errors.hpp"
#include "surgeon/linalg.hpp"
#include "surgeon/selection.hpp"

namespace surgeon {

enum class UpdateKind { none, independent, full };

inline std::string to_string(UpdateKind k) {
  switch (k) {
    case UpdateKind::none: return "none";
    case UpdateKind::independent: return "independent";
    case UpdateKind::full: return "full";
  }
  return "?";
}

inline UpdateKind update_kind_from_string(const std::string& s) {
  if (s == "none" || s == "prune-only") return UpdateKind::none;
  if (s == "independent" || s == "independent-structure") return UpdateKind::independent;
  if (s == "full" || s == "full-correlation") return UpdateKind::full;
  throw ConfigError("unknown update policy '" + s + "'");
}

inline constexpr int kDefaultMaxCorrelated = 2048;

struct UpdatePolicy {
  UpdateKind kind = UpdateKind::full;
  int max_correlated = kDefaultMaxCorrelated;  // m: cap on jointly solved weights (unstructured)
};

struct WeightDelta {
  std::string layer_name;
  Mat delta;
};

enum class JointStrategy { fast, oracle };

namespace detail {

inline std::vector<Index> sorted_unique(std::vector<Index> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

/// Forces the selected coordinates of W + delta to exactly zero.
inline void hard_mask(Mat& delta, const Mat& w, const std::vector<Index>& elements, const std::vector<Index>& rows,
                      const std::vector<Index>& cols) {
  const Index C = w.cols();
  for (Index k : elements) delta(k / C, k % C) = -w(k / C, k % C);
  for (Index r : rows) delta.row(r) = -w.row(r);
  for (Index c : cols) delta.col(c) = -w.col(c);
}

inline Mat gather(const Mat& m, const std::vector<Index>& rows, const std::vector<Index>& cols) {
  Mat out(rows.size(), cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = m(rows[i], cols[j]);
  return out;
}

}  // namespace detail

struct GeneralSolution {
  Vec delta;    // over all RC coordinates
  double cost;  // 1/2 theta_bar^T (E F^-1 E^T)^-1 theta_bar
};

/// Closed-form constrained solution on a dense curvature:
///   delta = -F^-1 E^T (E F^-1 E^T)^-1 E theta,  cost = 1/2 (E theta)^T (E F^-1 E^T)^-1 (E theta).
inline GeneralSolution general_update(const Mat& f, const std::vector<Index>& selected, const Vec& theta) {
  const Index P = theta.size();
  if (f.rows() != P || f.cols() != P) throw ConfigError("general_update: curvature does not match parameters");
  if (P > kOracleMaxParams) throw OracleScaleError("general_update refused beyond oracle scale");
  const auto sel = detail::sorted_unique(selected);
  GeneralSolution out{Vec::Zero(P), 0.0};
  if (sel.empty()) return out;
  const Mat f_inv = spd_inverse(f, "dense curvature");
  const Index K = static_cast<Index>(sel.size());
  Mat f_inv_et(P, K);  // F^-1 E^T
  Vec theta_bar(K);
  for (Index i = 0; i < K; ++i) {
    f_inv_et.col(i) = f_inv.col(sel[i]);
    theta_bar(i) = theta(sel[i]);
  }
  Mat m(K, K);
  for (Index i = 0; i < K; ++i) m.row(i) = f_inv_et.row(sel[i]);
  Eigen::LLT<Mat> llt(0.5 * (m + m.transpose()));
  if (llt.info() != Eigen::Success) throw NumericError("general_update: constraint matrix is singular");
  const Vec u = llt.solve(theta_bar);
  out.delta = -f_inv_et * u;
  out.cost = 0.5 * theta_bar.dot(u);
  for (Index k : sel) out.delta(k) = -theta(k);
  return out;
}

/// Removes rows R' jointly: dW = -G^-1 E^T (E G^-1 E^T)^-1 W_bar, inverting only R' x R'.
inline Mat multi_row_update(const FactorInverses& inv, const std::vector<Index>& rows_in, const Mat& w) {
  const auto rows = detail::sorted_unique(rows_in);
  const Index R = w.rows(), C = w.cols();
  if (rows.empty()) return Mat::Zero(R, C);
  if (static_cast<Index>(rows.size()) >= R) throw ConfigError("multi_row_update: cannot remove every row");
  std::vector<Index> all(R);
  for (Index i = 0; i < R; ++i) all[i] = i;
  const Mat g_sel = detail::gather(inv.G_inv, all, rows);  // G^-1 E^T, R x R'
  const Mat m = detail::gather(inv.G_inv, rows, rows);     // R' x R'
  Mat w_bar(rows.size(), C);
  for (std::size_t i = 0; i < rows.size(); ++i) w_bar.row(i) = w.row(rows[i]);
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw NumericError("multi_row_update: selected block of G^-1 is singular");
  Mat delta = -g_sel * llt.solve(w_bar);
  for (Index r : rows) delta.row(r) = -w.row(r);
  return delta;
}

/// Removes columns C' jointly: dW = -W_bar (E A^-1 E^T)^-1 (A^-1 E^T)^T, inverting only C' x C'.
inline Mat multi_col_update(const FactorInverses& inv, const std::vector<Index>& cols_in, const Mat& w) {
  const auto cols = detail::sorted_unique(cols_in);
  const Index R = w.rows(), C = w.cols();
  if (cols.empty()) return Mat::Zero(R, C);
  if (static_cast<Index>(cols.size()) >= C) throw ConfigError("multi_col_update: cannot remove every column");
  std::vector<Index> all(C);
  for (Index i = 0; i < C; ++i) all[i] = i;
  const Mat a_sel = detail::gather(inv.A_inv, cols, all);  // E A^-1, C' x C
  const Mat m = detail::gather(inv.A_inv, cols, cols);
  Mat w_bar(R, cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) w_bar.col(j) = w.col(cols[j]);
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw NumericError("multi_col_update: selected block of A^-1 is singular");
  Mat delta = -(llt.solve(w_bar.transpose())).transpose() * a_sel;
  for (Index c : cols) delta.col(c) = -w.col(c);
  return delta;
}

/// Sum of independent single-row and single-column updates, each against the
/// original W, followed by a hard mask.
inline Mat single_structure_updates(const FactorInverses& inv, const std::vector<Index>& rows,
                                    const std::vector<Index>& cols, const Mat& w) {
  Mat delta = Mat::Zero(w.rows(), w.cols());
  for (Index r : rows) delta.noalias() -= inv.G_inv.col(r) * w.row(r) / inv.G_inv(r, r);
  for (Index c : cols) delta.noalias() -= w.col(c) * inv.A_inv.row(c) / inv.A_inv(c, c);
  detail::hard_mask(delta, w, {}, rows, cols);
  return delta;
}

/// Correlated removal of single weights through the eigenbases of G and A,
/// never forming the RC x RC inverse. `elements` are flat indices; consecutive
/// runs of at most m are solved jointly and their deltas summed.
inline Mat correlated_unstructured_update(const EigenCurvature& eig, const std::vector<Index>& elements,
                                          const Mat& w, int max_correlated) {
  if (max_correlated < 1) throw ConfigError("max correlated weights must be at least 1");
  const Index R = w.rows(), C = w.cols();
  if (eig.K1.rows() != R || eig.K2.rows() != C) throw ConfigError("eigen curvature does not match weight shape");
  const Vec inv_s1 = eig.s1.cwiseInverse(), inv_s2 = eig.s2.cwiseInverse();
  const Mat inv_S = inv_s1 * inv_s2.transpose();
  Mat delta = Mat::Zero(R, C);
  for (std::size_t start = 0; start < elements.size(); start += max_correlated) {
    const std::size_t end = std::min(elements.size(), start + static_cast<std::size_t>(max_correlated));
    const Index K = static_cast<Index>(end - start);
    Mat k1(K, R), k2(K, C);
    Vec theta_bar(K);
    for (Index i = 0; i < K; ++i) {
      const Index flat = elements[start + i], r = flat / C, c = flat % C;
      k1.row(i) = eig.K1.row(r);
      k2.row(i) = eig.K2.row(c);
      theta_bar(i) = w(r, c);
    }
    // M_ij = sum_p sum_q K1[ri,p] K1[rj,p] K2[ci,q] K2[cj,q] / (s1_p s2_q)
    const Mat m = (k1 * inv_s1.asDiagonal() * k1.transpose()).cwiseProduct(k2 * inv_s2.asDiagonal() * k2.transpose());
    Eigen::LLT<Mat> llt(m);
    Vec u;
    if (llt.info() == Eigen::Success) {
      u = llt.solve(theta_bar);
    } else {
      spdlog::warn("correlated update: {}x{} constraint matrix singular; falling back to per-element updates", K, K);
      u = theta_bar.cwiseQuotient(m.diagonal());
    }
    const Mat z = k1.transpose() * u.asDiagonal() * k2;  // R x C
    delta.noalias() -= eig.K1 * z.cwiseProduct(inv_S) * eig.K2.transpose();
  }
  detail::hard_mask(delta, w, elements, {}, {});
  return delta;
}

/// Simultaneous removal of rows and columns of one layer.
///   fast   : multi-row update, then multi-column update on the updated weights.
///   oracle : stacked element constraints (overlaps once) solved densely on G kron A.
inline Mat joint_row_col_update(const KronCurvature& curv, const std::vector<Index>& rows, const std::vector<Index>& cols,
                                const Mat& w, JointStrategy strategy) {
  if (strategy == JointStrategy::oracle) {
    const Index C = w.cols();
    if (w.size() > kOracleMaxParams) throw OracleScaleError("joint oracle update refused beyond oracle scale");
    std::vector<Index> flat;
    for (Index r : rows)
      for (Index c = 0; c < C; ++c) flat.push_back(r * C + c);
    for (Index c : cols)
      for (Index r = 0; r < w.rows(); ++r) flat.push_back(r * C + c);
    const auto sol = general_update(kron(curv.G, curv.A), flat, flatten(w));
    Mat delta = unflatten(sol.delta, w.rows(), w.cols());
    detail::hard_mask(delta, w, {}, rows, cols);
    return delta;
  }
  const FactorInverses inv = factor_inverses(curv);
  Mat delta = multi_row_update(inv, rows, w);
  const Mat w1 = w + delta;
  delta += multi_col_update(inv, cols, w1);
  detail::hard_mask(delta, w, {}, rows, cols);
  return delta;
}

/// Densifies a sum of Kronecker products, optionally dampens it by
/// frac * mean(diag) * I, and solves the constrained problem exactly.
inline GeneralSolution sum_kron_update(const SumKronCurvature& sum, const std::vector<Index>& selected, const Mat& w,
                                       double damp_frac = 0.0) {
  if (w.size() > kOracleMaxParams) throw OracleScaleError("sum-of-Kronecker update is oracle scale only");
  Mat f = sum.densify();
  if (f.rows() != w.size()) throw ConfigError("sum-of-Kronecker curvature does not match weight shape");
  // A deflated second term can make the sum indefinite; clip to the PSD cone first.
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (f + f.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("sum-of-Kronecker eigendecomposition failed");
  if (es.eigenvalues().minCoeff() < 0.0) {
    spdlog::warn("sum-of-Kronecker curvature indefinite (min eigenvalue {:.3g}); clipped to PSD",
                 es.eigenvalues().minCoeff());
    f = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).asDiagonal() * es.eigenvectors().transpose();
  }
  if (damp_frac > 0.0) f.diagonal().array() += damp_frac * f.diagonal().mean();
  return general_update(f, selected, flatten(w));
}

/// Everything the per-layer update needs from one shot's curvature.
struct LayerCurvature {
  KronCurvature curv;
  std::optional<FactorInverses> inv;
  std::optional<EigenCurvature> eig;
};

/// Earlier zeros first, then this shot's removals in cost order. Earlier zeros
/// carry zero cost, so this is the cumulative selection in cost order.
inline std::vector<Index> cumulative_by_cost(const LayerSelection& sel, Index size) {
  std::vector<char> fresh(static_cast<std::size_t>(size), 0);
  for (Index k : sel.new_elements_by_cost) fresh[k] = 1;
  std::vector<Index> out;
  out.reserve(sel.elements.size());
  for (Index k : sel.elements)
    if (!fresh[k]) out.push_back(k);
  out.insert(out.end(), sel.new_elements_by_cost.begin(), sel.new_elements_by_cost.end());
  return out;
}

/// Weight delta for one layer's selection under the given mode and policy.
/// Every update constrains all removed weights, not just this shot's, so the
/// compensation never flows into coordinates the hard mask would discard.
inline WeightDelta layer_update(const LayerCurvature& lc, const LayerSelection& sel, const Mat& w, PruneMode mode,
                                const UpdatePolicy& policy) {
  WeightDelta out{sel.layer_name, Mat::Zero(w.rows(), w.cols())};
  const bool structured = mode == PruneMode::structured;
  if (structured ? sel.new_rows.empty() && sel.new_cols.empty() : sel.new_elements.empty()) {
    detail::hard_mask(out.delta, w, sel.elements, sel.rows, sel.cols);
    return out;
  }
  switch (policy.kind) {
    case UpdateKind::none: break;
    case UpdateKind::independent:
      if (structured) {
        out.delta = single_structure_updates(*lc.inv, sel.new_rows, sel.new_cols, w);
      } else {
        out.delta = correlated_unstructured_update(*lc.eig, cumulative_by_cost(sel, w.size()), w, 1);
      }
      break;
    case UpdateKind::full:
      if (structured) {
        out.delta = multi_row_update(*lc.inv, sel.rows, w);
        const Mat w1 = w + out.delta;
        out.delta += multi_col_update(*lc.inv, sel.cols, w1);
      } else {
        out.delta =
            correlated_unstructured_update(*lc.eig, cumulative_by_cost(sel, w.size()), w, policy.max_correlated);
      }
      break;
  }
  detail::hard_mask(out.delta, w, sel.elements, sel.rows, sel.cols);
  return out;
}

}  // namespace surgeon
