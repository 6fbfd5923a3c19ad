#pragma once

#include <algorithm>
#include <array>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "surgeon/curvature.hpp"
#include "surgeon/errors.hpp"
#include "surgeon/linalg.hpp"

namespace surgeon {

/// Curvature assumed when scoring removals.
///   magnitude : I kron I
///   l_obd     : diag(I kron A)
///   k_obd     : diag(G kron A)
///   kfac_obs  : full G kron A (inverse diagonal)
enum class CostPolicy { magnitude, l_obd, k_obd, kfac_obs };

inline std::string to_string(CostPolicy p) {
  switch (p) {
    case CostPolicy::magnitude: return "magnitude";
    case CostPolicy::l_obd: return "l-obd";
    case CostPolicy::k_obd: return "k-obd";
    case CostPolicy::kfac_obs: return "kfac-obs";
  }
  return "?";
}

inline CostPolicy cost_policy_from_string(const std::string& s) {
  if (s == "magnitude") return CostPolicy::magnitude;
  if (s == "l-obd") return CostPolicy::l_obd;
  if (s == "k-obd") return CostPolicy::k_obd;
  if (s == "kfac-obs") return CostPolicy::kfac_obs;
  throw ConfigError("unknown cost policy '" + s + "'");
}

struct CostTable {
  std::string layer_name;
  Mat element;  // R x C
  Vec row;      // R
  Vec col;      // C
  CostPolicy policy = CostPolicy::kfac_obs;
};

namespace detail {

inline void check_shapes(const Mat& w, const KronCurvature& curv) {
  if (curv.G.rows() != w.rows() || curv.A.rows() != w.cols())
    throw ConfigError("curvature of '" + curv.layer_name + "' does not match weight shape");
}

inline const FactorInverses& need_inverses(const std::optional<FactorInverses>& inv, const KronCurvature& curv,
                                           std::optional<FactorInverses>& storage) {
  if (inv) return *inv;
  storage = factor_inverses(curv);
  return *storage;
}

}  // namespace detail

/// Single-element removal costs L_k, one per weight.
inline Mat element_costs(const Mat& w, const KronCurvature& curv, CostPolicy policy,
                         const std::optional<FactorInverses>& inv = std::nullopt) {
  const Mat sq = w.cwiseAbs2();
  switch (policy) {
    case CostPolicy::magnitude: return 0.5 * sq;
    case CostPolicy::l_obd:
      detail::check_shapes(w, curv);
      return 0.5 * sq * curv.A.diagonal().asDiagonal();
    case CostPolicy::k_obd:
      detail::check_shapes(w, curv);
      return 0.5 * curv.G.diagonal().asDiagonal() * sq * curv.A.diagonal().asDiagonal();
    case CostPolicy::kfac_obs: {
      detail::check_shapes(w, curv);
      std::optional<FactorInverses> storage;
      const auto& fi = detail::need_inverses(inv, curv, storage);
      // [G^-1 kron A^-1]_kk = [G^-1]_rr [A^-1]_cc
      const Mat denom = fi.G_inv.diagonal() * fi.A_inv.diagonal().transpose();
      return 0.5 * sq.cwiseQuotient(denom);
    }
  }
  throw ConfigError("unknown cost policy");
}

/// Whole-row removal costs (one per output unit).
inline Vec row_costs(const Mat& w, const KronCurvature& curv, CostPolicy policy,
                     const std::optional<FactorInverses>& inv = std::nullopt) {
  switch (policy) {
    case CostPolicy::magnitude: return 0.5 * w.rowwise().squaredNorm();
    case CostPolicy::l_obd:
      detail::check_shapes(w, curv);
      return 0.5 * (w.cwiseAbs2() * curv.A.diagonal());
    case CostPolicy::k_obd:
      detail::check_shapes(w, curv);
      return 0.5 * curv.G.diagonal().cwiseProduct((w * curv.A).cwiseProduct(w).rowwise().sum());
    case CostPolicy::kfac_obs: {
      detail::check_shapes(w, curv);
      std::optional<FactorInverses> storage;
      const auto& fi = detail::need_inverses(inv, curv, storage);
      return 0.5 * (w * curv.A).cwiseProduct(w).rowwise().sum().cwiseQuotient(fi.G_inv.diagonal());
    }
  }
  throw ConfigError("unknown cost policy");
}

/// Whole-column removal costs (one per input unit).
inline Vec col_costs(const Mat& w, const KronCurvature& curv, CostPolicy policy,
                     const std::optional<FactorInverses>& inv = std::nullopt) {
  switch (policy) {
    case CostPolicy::magnitude: return 0.5 * w.colwise().squaredNorm().transpose();
    case CostPolicy::l_obd:
      detail::check_shapes(w, curv);
      return 0.5 * curv.A.diagonal().cwiseProduct(w.colwise().squaredNorm().transpose());
    case CostPolicy::k_obd:
      detail::check_shapes(w, curv);
      return 0.5 * curv.A.diagonal().cwiseProduct((curv.G * w).cwiseProduct(w).colwise().sum().transpose());
    case CostPolicy::kfac_obs: {
      detail::check_shapes(w, curv);
      std::optional<FactorInverses> storage;
      const auto& fi = detail::need_inverses(inv, curv, storage);
      return 0.5 * (curv.G * w).cwiseProduct(w).colwise().sum().transpose().cwiseQuotient(fi.A_inv.diagonal());
    }
  }
  throw ConfigError("unknown cost policy");
}

/// Element, row and column costs in one table.
inline CostTable cost_table(const Mat& w, const KronCurvature& curv, CostPolicy policy) {
  std::optional<FactorInverses> inv;
  if (policy == CostPolicy::kfac_obs) inv = factor_inverses(curv);
  CostTable t;
  t.layer_name = curv.layer_name;
  t.policy = policy;
  t.element = element_costs(w, curv, policy, inv);
  t.row = row_costs(w, curv, policy, inv);
  t.col = col_costs(w, curv, policy, inv);
  if (!t.element.allFinite() || !t.row.allFinite() || !t.col.allFinite())
    throw NumericError("non-finite removal costs in layer '" + curv.layer_name + "'");
  return t;
}

// M:N semi-structured blocks run along rows: block j of row r covers columns
// [N*j, N*j + N).
inline constexpr int kBlockM = 2;
inline constexpr int kBlockN = 4;

struct BlockChoice {
  double cost = 0.0;
  std::array<int, kBlockM> offsets{};  // chosen columns within the block, ascending
};

/// The M lowest-cost offsets of one block; ties prefer the lower offset.
inline BlockChoice choose_in_block(const double* costs) {
  std::array<int, kBlockN> idx{0, 1, 2, 3};
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return costs[a] < costs[b]; });
  BlockChoice ch;
  for (int i = 0; i < kBlockM; ++i) {
    ch.offsets[i] = idx[i];
    ch.cost += costs[idx[i]];
  }
  std::sort(ch.offsets.begin(), ch.offsets.end());
  return ch;
}

/// Per-block cost: sum of the 2 smallest element costs in each run of 4 along a row.
inline Mat block_costs_2_4(const Mat& element) {
  if (element.cols() % kBlockN != 0)
    throw ConfigError("row length " + std::to_string(element.cols()) + " is not divisible by " +
                      std::to_string(kBlockN));
  Mat out(element.rows(), element.cols() / kBlockN);
  std::array<double, kBlockN> buf{};
  for (Index r = 0; r < element.rows(); ++r)
    for (Index b = 0; b < out.cols(); ++b) {
      for (int i = 0; i < kBlockN; ++i) buf[i] = element(r, b * kBlockN + i);
      out(r, b) = choose_in_block(buf.data()).cost;
    }
  return out;
}

/// CSV dump: layer,kind,index,cost (element indices are row-major flat).
inline void write_cost_csv(std::ostream& os, const std::vector<CostTable>& tables) {
  os << "layer,kind,index,cost\n";
  os << std::setprecision(17);
  for (const auto& t : tables) {
    for (Index r = 0; r < t.element.rows(); ++r)
      for (Index c = 0; c < t.element.cols(); ++c)
        os << t.layer_name << ",element," << r * t.element.cols() + c << ',' << t.element(r, c) << '\n';
    for (Index r = 0; r < t.row.size(); ++r) os << t.layer_name << ",row," << r << ',' << t.row(r) << '\n';
    for (Index c = 0; c < t.col.size(); ++c) os << t.layer_name << ",col," << c << ',' << t.col(c) << '\n';
  }
}

}  // namespace surgeon
