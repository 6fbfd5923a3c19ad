#pragma once

// Brute-force ground truth for tiny instances. Nothing here calls the factored
// fast paths; everything is dense algebra with its own index bookkeeping.

#include <Eigen/SVD>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "surgeon/errors.hpp"
#include "surgeon/harness.hpp"
#include "surgeon/linalg.hpp"
#include "surgeon/selection.hpp"
#include "surgeon/updates.hpp"

namespace surgeon::oracle {

/// q(theta) = 1/2 (theta - theta*)^T F (theta - theta*)
struct QuadraticObjective {
  Vec theta_star;
  Mat F;
};

inline double eval_quadratic(const QuadraticObjective& obj, const Vec& theta) {
  if (theta.size() != obj.theta_star.size() || obj.F.rows() != theta.size())
    throw ConfigError("eval_quadratic: shape mismatch");
  const Vec d = theta - obj.theta_star;
  return 0.5 * d.dot(obj.F * d);
}

/// Entrywise Kronecker product, written out independently of linalg::kron.
inline Mat kron_entrywise(const Mat& g, const Mat& a) {
  const Index R = g.rows(), C = a.rows();
  Mat f(R * C, R * C);
  for (Index r = 0; r < R; ++r)
    for (Index c = 0; c < C; ++c)
      for (Index rp = 0; rp < R; ++rp)
        for (Index cp = 0; cp < C; ++cp) f(r * C + c, rp * C + cp) = g(r, rp) * a(c, cp);
  return f;
}

/// F[(r,c),(r',c')] = (1/N) sum_n g_r a_c g_r' a_c', summed entry by entry.
inline Mat brute_force_fisher(const LayerTape& tape) {
  const Index R = tape.out_grads.cols(), C = tape.activations.cols(), N = tape.sample_count();
  if (R * C > kOracleMaxParams) throw OracleScaleError("brute-force Fisher refused beyond oracle scale");
  Mat f = Mat::Zero(R * C, R * C);
  for (Index i = 0; i < R * C; ++i)
    for (Index j = 0; j < R * C; ++j) {
      double s = 0.0;
      for (Index n = 0; n < N; ++n)
        s += tape.out_grads(n, i / C) * tape.activations(n, i % C) * tape.out_grads(n, j / C) *
             tape.activations(n, j % C);
      f(i, j) = s / static_cast<double>(N);
    }
  return f;
}

inline double binomial(std::int64_t n, std::int64_t k) {
  if (k < 0 || k > n) return 0.0;
  double out = 1.0;
  for (std::int64_t i = 1; i <= k; ++i) out = out * static_cast<double>(n - k + i) / static_cast<double>(i);
  return out;
}

inline constexpr double kExhaustiveGuard = 1e6;

struct ExhaustiveResult {
  std::vector<Index> best;   // flat indices (unstructured) or structure ids (structured)
  double best_loss = std::numeric_limits<double>::infinity();
  std::int64_t evaluated = 0;
};

/// Every size-k removal set, each solved exactly; returns the one with least loss
/// increase on the quadratic centred at theta. Structured mode enumerates rows
/// (ids 0..R-1) and columns (ids R..R+C-1) of an R x C weight.
inline ExhaustiveResult exhaustive_best_mask(const Mat& f, const Mat& w, int k, PruneMode mode) {
  const Index R = w.rows(), C = w.cols();
  const bool structured = mode == PruneMode::structured;
  const Index n_items = structured ? R + C : R * C;
  if (k < 1 || k > n_items) throw ConfigError("exhaustive search: k out of range");
  if (binomial(n_items, k) > kExhaustiveGuard) throw OracleScaleError("exhaustive search exceeds candidate guard");
  const Vec theta = flatten(w);
  ExhaustiveResult res;
  std::vector<Index> comb(k);
  for (int i = 0; i < k; ++i) comb[i] = i;
  while (true) {
    std::vector<Index> flat;
    for (Index id : comb) {
      if (!structured) {
        flat.push_back(id);
      } else if (id < R) {
        for (Index c = 0; c < C; ++c) flat.push_back(id * C + c);
      } else {
        for (Index r = 0; r < R; ++r) flat.push_back(r * C + (id - R));
      }
    }
    const double loss = general_update(f, flat, theta).cost;
    ++res.evaluated;
    if (loss < res.best_loss) {
      res.best_loss = loss;
      res.best = comb;
    }
    int i = k - 1;
    while (i >= 0 && comb[i] == n_items - k + i) --i;
    if (i < 0) break;
    ++comb[i];
    for (int j = i + 1; j < k; ++j) comb[j] = comb[j - 1] + 1;
  }
  return res;
}

struct NkpOracleResult {
  Mat G;
  Mat A;
  Vec singular_values;  // of the rearranged matrix, descending
  double residual = 0.0;  // ||F - G kron A||_F
};

/// Best single Kronecker product via full SVD of the rearranged matrix.
inline NkpOracleResult rearrange_svd_nkp(const Mat& f, Index R, Index C) {
  if (R * C > kOracleMaxParams) throw OracleScaleError("rearrangement SVD refused beyond oracle scale");
  if (f.rows() != R * C || f.cols() != R * C) throw ConfigError("rearrange_svd_nkp: F is not RC x RC");
  // Row (i, j) of the rearranged matrix is vec of the (i, j) C x C block of F.
  Mat rf(R * R, C * C);
  for (Index i = 0; i < R; ++i)
    for (Index j = 0; j < R; ++j) {
      const Mat block = f.block(i * C, j * C, C, C);
      for (Index p = 0; p < C; ++p)
        for (Index q = 0; q < C; ++q) rf(i * R + j, p * C + q) = block(p, q);
    }
  Eigen::JacobiSVD<Mat> svd(rf, Eigen::ComputeFullU | Eigen::ComputeFullV);
  NkpOracleResult out;
  out.singular_values = svd.singularValues();
  const double s0 = out.singular_values(0);
  Vec u = svd.matrixU().col(0), v = svd.matrixV().col(0);
  Mat g(R, R), a(C, C);
  for (Index i = 0; i < R; ++i)
    for (Index j = 0; j < R; ++j) g(i, j) = u(i * R + j);
  for (Index p = 0; p < C; ++p)
    for (Index q = 0; q < C; ++q) a(p, q) = v(p * C + q);
  if (g.trace() < 0.0) {
    g = -g;
    a = -a;
  }
  out.G = std::sqrt(s0) * g;
  out.A = std::sqrt(s0) * a;
  double tail = 0.0;
  for (Index i = 1; i < out.singular_values.size(); ++i) tail += out.singular_values(i) * out.singular_values(i);
  out.residual = std::sqrt(tail);
  return out;
}

}  // namespace surgeon::oracle
