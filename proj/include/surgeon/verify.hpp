#pragma once

// Randomized fast-path-vs-oracle suites shared by the `verify` subcommand and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "surgeon/costs.hpp"
#include "surgeon/curvature.hpp"
#include "surgeon/harness.hpp"
#include "surgeon/oracle.hpp"
#include "surgeon/selection.hpp"
#include "surgeon/updates.hpp"

namespace surgeon::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  double worst = 0.0;  // worst observed error (or gap) for the suite
  std::string detail;
};

inline LayerTape random_tape(Index R, Index C, Index N, Rng& rng) {
  LayerTape t;
  t.layer_name = "synthetic";
  t.activations = random_normal(N, C, rng);
  t.out_grads = random_normal(N, R, rng);
  return t;
}

/// Dampened KFAC factors of a random tape plus a random weight.
struct Instance {
  KronCurvature curv;
  FactorInverses inv;
  EigenCurvature eig;
  Mat F;  // dense G kron A, built entry by entry
  Mat W;
};

inline Instance random_instance(Index R, Index C, Index N, Rng& rng, double frac = 0.01) {
  Instance in;
  in.curv = dampen(accumulate_kfac(random_tape(R, C, N, rng)), frac, frac);
  in.inv = factor_inverses(in.curv);
  in.eig = eigendecompose(in.curv);
  in.F = oracle::kron_entrywise(in.curv.G, in.curv.A);
  in.W = random_normal(R, C, rng);
  return in;
}

inline double rel(double got, double want) { return std::abs(got - want) / std::max(std::abs(want), 1e-300); }
inline double rel(const Mat& got, const Mat& want) {
  return (got - want).norm() / std::max(want.norm(), 1e-300);
}

inline std::vector<Index> random_subset(Index n, Index k, Rng& rng) {
  std::vector<Index> all(n);
  for (Index i = 0; i < n; ++i) all[i] = i;
  shuffle(all, rng);
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

inline std::vector<Index> row_flat(const std::vector<Index>& rows, Index C) {
  std::vector<Index> f;
  for (Index r : rows)
    for (Index c = 0; c < C; ++c) f.push_back(r * C + c);
  return f;
}

inline std::vector<Index> col_flat(const std::vector<Index>& cols, Index R, Index C) {
  std::vector<Index> f;
  for (Index c : cols)
    for (Index r = 0; r < R; ++r) f.push_back(r * C + c);
  return f;
}

/// Every factored fast path against the dense constrained solution.
inline CheckResult oracle_equivalence(int instances, std::uint64_t seed, double tol = 1e-8) {
  Rng rng(seed);
  double worst = 0.0;
  std::string worst_what;
  auto track = [&](double e, const std::string& what) {
    if (!(e <= worst) || std::isnan(e)) {
      worst = std::isnan(e) ? INFINITY : e;
      worst_what = what;
    }
  };
  for (int it = 0; it < instances; ++it) {
    const Index R = 2 + static_cast<Index>(rng.below(7)), C = 2 + static_cast<Index>(rng.below(7));
    const Index N = 1 + static_cast<Index>(rng.below(16));
    const Instance in = random_instance(R, C, N, rng);
    const Vec theta = flatten(in.W);

    const Mat ec = element_costs(in.W, in.curv, CostPolicy::kfac_obs, in.inv);
    for (Index k = 0; k < R * C; ++k) track(rel(ec(k / C, k % C), general_update(in.F, {k}, theta).cost), "element cost");
    const Vec rc = row_costs(in.W, in.curv, CostPolicy::kfac_obs, in.inv);
    const Vec cc = col_costs(in.W, in.curv, CostPolicy::kfac_obs, in.inv);
    for (Index r = 0; r < R; ++r) {
      const auto g = general_update(in.F, row_flat({r}, C), theta);
      track(rel(rc(r), g.cost), "row cost");
      track(rel(flatten(single_structure_updates(in.inv, {r}, {}, in.W)), g.delta), "single row update");
    }
    for (Index c = 0; c < C; ++c) {
      const auto g = general_update(in.F, col_flat({c}, R, C), theta);
      track(rel(cc(c), g.cost), "col cost");
      track(rel(flatten(single_structure_updates(in.inv, {}, {c}, in.W)), g.delta), "single col update");
    }
    const auto rows = random_subset(R, 1 + static_cast<Index>(rng.below(R - 1)), rng);
    track(rel(flatten(multi_row_update(in.inv, rows, in.W)), general_update(in.F, row_flat(rows, C), theta).delta),
          "multi-row update");
    const auto cols = random_subset(C, 1 + static_cast<Index>(rng.below(C - 1)), rng);
    track(rel(flatten(multi_col_update(in.inv, cols, in.W)), general_update(in.F, col_flat(cols, R, C), theta).delta),
          "multi-col update");
    const Index k = 1 + static_cast<Index>(rng.below(R * C - 1));
    const auto elems = random_subset(R * C, k, rng);
    track(rel(flatten(correlated_unstructured_update(in.eig, elems, in.W, static_cast<int>(k))),
              general_update(in.F, elems, theta).delta),
          "correlated unstructured update");
  }
  std::ostringstream os;
  os << instances << " instances, worst relative error " << worst << " (" << worst_what << ")";
  return {"oracle equivalence", worst <= tol, worst, os.str()};
}

/// Predicted removal cost vs realized quadratic increase after the fast-path update.
inline CheckResult quadratic_exactness(int removals, std::uint64_t seed, double tol = 1e-8) {
  Rng rng(seed);
  double worst = 0.0;
  for (int it = 0; it < removals; ++it) {
    const Index R = 2 + static_cast<Index>(rng.below(5)), C = 2 + static_cast<Index>(rng.below(5));
    const Instance in = random_instance(R, C, 1 + static_cast<Index>(rng.below(16)), rng);
    const oracle::QuadraticObjective q{flatten(in.W), in.F};
    const Vec theta = flatten(in.W);
    double predicted = 0.0;
    Mat delta;
    switch (it % 4) {
      case 0: {  // single weight
        const Index k = static_cast<Index>(rng.below(R * C));
        predicted = element_costs(in.W, in.curv, CostPolicy::kfac_obs, in.inv)(k / C, k % C);
        delta = correlated_unstructured_update(in.eig, {k}, in.W, 1);
        break;
      }
      case 1: {  // several weights
        const auto e = random_subset(R * C, 1 + static_cast<Index>(rng.below(R * C - 1)), rng);
        predicted = general_update(in.F, e, theta).cost;
        delta = correlated_unstructured_update(in.eig, e, in.W, static_cast<int>(e.size()));
        break;
      }
      case 2: {  // one or more rows
        const auto rows = random_subset(R, 1 + static_cast<Index>(rng.below(R - 1)), rng);
        predicted = rows.size() == 1 ? row_costs(in.W, in.curv, CostPolicy::kfac_obs, in.inv)(rows[0])
                                     : general_update(in.F, row_flat(rows, C), theta).cost;
        delta = multi_row_update(in.inv, rows, in.W);
        break;
      }
      default: {  // one or more columns
        const auto cols = random_subset(C, 1 + static_cast<Index>(rng.below(C - 1)), rng);
        predicted = cols.size() == 1 ? col_costs(in.W, in.curv, CostPolicy::kfac_obs, in.inv)(cols[0])
                                     : general_update(in.F, col_flat(cols, R, C), theta).cost;
        delta = multi_col_update(in.inv, cols, in.W);
        break;
      }
    }
    const double realized = oracle::eval_quadratic(q, theta + flatten(delta)) - oracle::eval_quadratic(q, theta);
    worst = std::max(worst, rel(realized, predicted));
  }
  std::ostringstream os;
  os << removals << " removals, worst relative gap " << worst;
  return {"quadratic exactness", worst <= tol, worst, os.str()};
}

/// Power method vs rearrangement SVD; monotone sigma; rank-2 residual no worse than rank-1.
inline CheckResult nearest_kronecker(int instances, std::uint64_t seed, double tol = 1e-6) {
  Rng rng(seed);
  double worst = 0.0;
  bool monotone = true, residual_ok = true;
  for (int it = 0; it < instances; ++it) {
    const Index R = 2 + static_cast<Index>(rng.below(5)), C = 2 + static_cast<Index>(rng.below(5));
    const LayerTape tape = random_tape(R, C, 2 + static_cast<Index>(rng.below(15)), rng);
    const Mat F = oracle::brute_force_fisher(tape);
    const auto svd = oracle::rearrange_svd_nkp(F, R, C);
    const NkpResult pm = nkp_power_method(TapeRearrangedOperator(tape), std::nullopt, 2000);
    worst = std::max(worst, (kron(pm.G, pm.A) - kron(svd.G, svd.A)).norm());
    for (std::size_t i = 1; i < pm.sigma_history.size(); ++i)
      if (pm.sigma_history[i] < pm.sigma_history[i - 1] * (1.0 - 1e-12)) monotone = false;
    const double r1 = (F - sum_kron_fit(tape, 1, 200).densify()).norm();
    const double r2 = (F - sum_kron_fit(tape, 2, 200).densify()).norm();
    if (r2 > r1 * (1.0 + 1e-12)) residual_ok = false;
  }
  std::ostringstream os;
  os << instances << " Fishers, worst Frobenius gap " << worst << ", sigma monotone " << (monotone ? "yes" : "no")
     << ", rank-2 residual <= rank-1 " << (residual_ok ? "yes" : "no");
  return {"nearest Kronecker", worst <= tol && monotone && residual_ok, worst, os.str()};
}

/// Greedy cost-ordered selection vs exhaustive search on 3x3 weights, k = 2.
inline CheckResult greedy_vs_exhaustive(int instances, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> ratios;
  double worst_violation = 0.0;
  for (int it = 0; it < instances; ++it) {
    const Instance in = random_instance(3, 3, 1 + static_cast<Index>(rng.below(16)), rng);
    CostTable t = cost_table(in.W, in.curv, CostPolicy::kfac_obs);
    const Mat mask = Mat::Ones(3, 3);
    const auto sel = select_unstructured({SelectionLayer{&t, &mask}}, 1.0 - 2.0 / 9.0);
    const double greedy = general_update(in.F, sel.layers[0].elements, flatten(in.W)).cost;
    const auto best = oracle::exhaustive_best_mask(in.F, in.W, 2, PruneMode::unstructured);
    worst_violation = std::max(worst_violation, best.best_loss - greedy);
    ratios.push_back(greedy / best.best_loss);
  }
  std::sort(ratios.begin(), ratios.end());
  const double median = ratios[ratios.size() / 2];
  std::ostringstream os;
  os << instances << " instances, greedy/optimal loss ratio median " << median << " p90 "
     << ratios[ratios.size() * 9 / 10] << " max " << ratios.back() << ", optimum exceeded greedy by at most "
     << std::max(worst_violation, 0.0);
  return {"greedy vs exhaustive", worst_violation <= 1e-9, ratios.back(), os.str()};
}

}  // namespace surgeon::verify
