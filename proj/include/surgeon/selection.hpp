#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <tuple>
#include <vector>

#include "surgeon/checkpoint.hpp"
#include "surgeon/costs.hpp"
#include "surgeon/errors.hpp"
#include "surgeon/linalg.hpp"

namespace surgeon {

enum class PruneMode { unstructured, semi_2_4, structured };

inline std::string to_string(PruneMode m) {
  switch (m) {
    case PruneMode::unstructured: return "unstructured";
    case PruneMode::semi_2_4: return "semi-2:4";
    case PruneMode::structured: return "structured";
  }
  return "?";
}

inline PruneMode prune_mode_from_string(const std::string& s) {
  if (s == "unstructured") return PruneMode::unstructured;
  if (s == "semi-2:4" || s == "semi" || s == "2:4") return PruneMode::semi_2_4;
  if (s == "structured") return PruneMode::structured;
  throw ConfigError("unknown pruning mode '" + s + "'");
}

/// Per-layer removal sets. `elements`, `rows`, `cols` are cumulative (everything
/// that is zero after this shot); the `new_*` lists hold only this shot's additions.
/// Element indices are row-major flat indices r * C + c. All lists sorted.
struct LayerSelection {
  std::string layer_name;
  Index rows_dim = 0;
  Index cols_dim = 0;
  std::vector<Index> elements;
  std::vector<Index> rows;
  std::vector<Index> cols;
  std::vector<Index> new_elements;
  std::vector<Index> new_rows;
  std::vector<Index> new_cols;
  /// New elements in ascending cost order (for correlation batching).
  std::vector<Index> new_elements_by_cost;

  /// Number of weights zero after applying the selection.
  Index removed_count() const {
    if (!elements.empty()) return static_cast<Index>(elements.size());
    const auto nr = static_cast<Index>(rows.size()), nc = static_cast<Index>(cols.size());
    return nr * cols_dim + nc * rows_dim - nr * nc;
  }

  /// 0/1 mask of live weights implied by the cumulative sets.
  Mat live_mask() const {
    Mat m = Mat::Ones(rows_dim, cols_dim);
    for (Index k : elements) m(k / cols_dim, k % cols_dim) = 0.0;
    for (Index r : rows) m.row(r).setZero();
    for (Index c : cols) m.col(c).setZero();
    return m;
  }
};

struct RemovalSelection {
  PruneMode mode = PruneMode::unstructured;
  std::vector<LayerSelection> layers;
  double tau = -std::numeric_limits<double>::infinity();
  double target_size = 1.0;
  double realized_size = 1.0;

  bool has_new() const {
    for (const auto& l : layers)
      if (!l.new_elements.empty() || !l.new_rows.empty() || !l.new_cols.empty()) return true;
    return false;
  }
};

/// What selection needs to know about a prunable layer.
struct SelectionLayer {
  const CostTable* costs = nullptr;
  const Mat* mask = nullptr;  // current live mask (1 live, 0 pruned)
};

namespace detail {

inline void check_alpha(double alpha, double lo, bool lo_inclusive) {
  const bool ok_lo = lo_inclusive ? alpha >= lo : alpha > lo;
  if (!(ok_lo && alpha <= 1.0))
    throw ConfigError("target size " + std::to_string(alpha) + " out of range");
}

/// floor((1 - alpha) * P), robust to representation error in 1 - alpha.
inline std::int64_t removal_target(double alpha, std::int64_t total) {
  return static_cast<std::int64_t>(std::floor((1.0 - alpha) * static_cast<double>(total) + 1e-9));
}

inline std::int64_t total_weights(const std::vector<SelectionLayer>& layers) {
  std::int64_t p = 0;
  for (const auto& l : layers) p += l.mask->size();
  return p;
}

inline void check_inputs(const std::vector<SelectionLayer>& layers) {
  for (const auto& l : layers) {
    if (!l.costs || !l.mask) throw ConfigError("selection input missing costs or mask");
    if (l.costs->element.rows() != l.mask->rows() || l.costs->element.cols() != l.mask->cols())
      throw ConfigError("cost table of '" + l.costs->layer_name + "' does not match its mask");
  }
}

inline LayerSelection empty_selection(const SelectionLayer& l) {
  LayerSelection s;
  s.layer_name = l.costs->layer_name;
  s.rows_dim = l.mask->rows();
  s.cols_dim = l.mask->cols();
  return s;
}

inline void finish(RemovalSelection& sel, std::int64_t total) {
  std::int64_t removed = 0;
  for (auto& l : sel.layers) {
    for (auto* v : {&l.elements, &l.rows, &l.cols, &l.new_elements, &l.new_rows, &l.new_cols})
      std::sort(v->begin(), v->end());
    removed += l.removed_count();
  }
  sel.realized_size = total == 0 ? 1.0 : 1.0 - static_cast<double>(removed) / static_cast<double>(total);
}

}  // namespace detail

/// Global threshold over single-weight costs. Removes exactly floor((1-alpha) P)
/// weights network-wide; already-pruned weights stay selected.
inline RemovalSelection select_unstructured(const std::vector<SelectionLayer>& layers, double alpha) {
  detail::check_alpha(alpha, 0.0, false);
  detail::check_inputs(layers);
  RemovalSelection sel;
  sel.mode = PruneMode::unstructured;
  sel.target_size = alpha;
  const std::int64_t total = detail::total_weights(layers);
  const std::int64_t target = detail::removal_target(alpha, total);

  struct Cand {
    double cost;
    std::size_t layer;
    Index flat;
  };
  std::vector<Cand> live;
  std::int64_t forced = 0;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    auto s = detail::empty_selection(l);
    const Index C = l.mask->cols();
    for (Index r = 0; r < l.mask->rows(); ++r)
      for (Index c = 0; c < C; ++c) {
        if ((*l.mask)(r, c) == 0.0) {
          s.elements.push_back(r * C + c);
          ++forced;
        } else {
          live.push_back({l.costs->element(r, c), li, r * C + c});
        }
      }
    sel.layers.push_back(std::move(s));
  }
  const std::int64_t need = std::max<std::int64_t>(0, target - forced);
  if (need > 0) {
    auto less = [](const Cand& a, const Cand& b) {
      return std::tie(a.cost, a.layer, a.flat) < std::tie(b.cost, b.layer, b.flat);
    };
    const auto cut = live.begin() + static_cast<std::ptrdiff_t>(std::min<std::int64_t>(need, live.size()));
    std::partial_sort(live.begin(), cut, live.end(), less);
    for (auto it = live.begin(); it != cut; ++it) {
      auto& s = sel.layers[it->layer];
      s.elements.push_back(it->flat);
      s.new_elements.push_back(it->flat);
      s.new_elements_by_cost.push_back(it->flat);
      sel.tau = it->cost;
    }
  }
  detail::finish(sel, total);
  return sel;
}

/// Global threshold over 2:4 block costs. Whole blocks are pruned (the 2 cheapest
/// of each 4), so intermediate shots are unions of valid 2:4 blocks and untouched
/// blocks; at alpha = 0.5 every block is pruned.
inline RemovalSelection select_semi_2_4(const std::vector<SelectionLayer>& layers, double alpha) {
  if (!(alpha >= 0.5 && alpha <= 1.0))
    throw ConfigError("target size " + std::to_string(alpha) + " is infeasible for 2:4 sparsity (needs >= 0.5)");
  detail::check_inputs(layers);
  RemovalSelection sel;
  sel.mode = PruneMode::semi_2_4;
  sel.target_size = alpha;
  const std::int64_t total = detail::total_weights(layers);
  const std::int64_t blocks_needed = detail::removal_target(alpha, total) / kBlockM;

  struct Cand {
    double cost;
    std::size_t layer;
    Index row;
    Index block;
    BlockChoice choice;
  };
  std::vector<Cand> live;
  std::int64_t forced = 0;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    const Index C = l.mask->cols();
    if (C % kBlockN != 0)
      throw ConfigError("layer '" + l.costs->layer_name + "' row length " + std::to_string(C) +
                        " is not divisible by " + std::to_string(kBlockN));
    auto s = detail::empty_selection(l);
    std::array<double, kBlockN> buf{};
    for (Index r = 0; r < l.mask->rows(); ++r)
      for (Index b = 0; b < C / kBlockN; ++b) {
        bool touched = false;
        for (int i = 0; i < kBlockN; ++i) {
          const Index c = b * kBlockN + i;
          if ((*l.mask)(r, c) == 0.0) {
            touched = true;
            s.elements.push_back(r * C + c);
          }
          buf[i] = l.costs->element(r, c);
        }
        if (touched)
          ++forced;
        else
          live.push_back({0.0, li, r, b, choose_in_block(buf.data())});
      }
    sel.layers.push_back(std::move(s));
  }
  for (auto& c : live) c.cost = c.choice.cost;
  const std::int64_t need = std::max<std::int64_t>(0, blocks_needed - forced);
  if (need > 0) {
    auto less = [](const Cand& a, const Cand& b) {
      return std::tie(a.cost, a.layer, a.row, a.block) < std::tie(b.cost, b.layer, b.row, b.block);
    };
    const auto cut = live.begin() + static_cast<std::ptrdiff_t>(std::min<std::int64_t>(need, live.size()));
    std::partial_sort(live.begin(), cut, live.end(), less);
    std::vector<std::vector<std::pair<double, Index>>> by_cost(layers.size());
    for (auto it = live.begin(); it != cut; ++it) {
      auto& s = sel.layers[it->layer];
      const Index C = s.cols_dim;
      for (int off : it->choice.offsets) {
        const Index flat = it->row * C + it->block * kBlockN + off;
        s.elements.push_back(flat);
        s.new_elements.push_back(flat);
        by_cost[it->layer].emplace_back(layers[it->layer].costs->element(it->row, it->block * kBlockN + off), flat);
      }
      sel.tau = it->cost;
    }
    for (std::size_t li = 0; li < layers.size(); ++li) {
      std::sort(by_cost[li].begin(), by_cost[li].end());
      for (const auto& [cost, flat] : by_cost[li]) sel.layers[li].new_elements_by_cost.push_back(flat);
    }
  }
  detail::finish(sel, total);
  return sel;
}

/// Global threshold over rows and columns scored by cost per live element.
/// Candidates are admitted cheapest-first until (1-alpha) P weights are removed,
/// counting row/column overlaps once. The last live row or column of a layer is
/// never removed.
inline RemovalSelection select_structured(const std::vector<SelectionLayer>& layers, double alpha) {
  detail::check_alpha(alpha, 0.0, false);
  detail::check_inputs(layers);
  RemovalSelection sel;
  sel.mode = PruneMode::structured;
  sel.target_size = alpha;
  const std::int64_t total = detail::total_weights(layers);
  const std::int64_t target = detail::removal_target(alpha, total);

  struct Cand {
    double score;
    std::size_t layer;
    int is_col;
    Index index;
  };
  std::vector<Cand> cands;
  std::vector<Index> live_rows(layers.size()), live_cols(layers.size());
  std::int64_t removed = 0;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    const Mat& mask = *l.mask;
    auto s = detail::empty_selection(l);
    for (Index r = 0; r < mask.rows(); ++r)
      if (mask.row(r).sum() == 0.0) s.rows.push_back(r);
    for (Index c = 0; c < mask.cols(); ++c)
      if (mask.col(c).sum() == 0.0) s.cols.push_back(c);
    live_rows[li] = mask.rows() - static_cast<Index>(s.rows.size());
    live_cols[li] = mask.cols() - static_cast<Index>(s.cols.size());
    if (live_rows[li] == 0 || live_cols[li] == 0)
      throw InfeasibleError(s.layer_name, "layer '" + s.layer_name + "' is already empty");
    removed += s.removed_count();
    // Structured masks must be exactly rows x cols unions.
    if (static_cast<std::int64_t>(mask.size() - mask.sum()) != s.removed_count())
      throw ConfigError("layer '" + s.layer_name + "' carries a mask that is not row/column structured");
    std::vector<bool> dead_r(mask.rows(), false), dead_c(mask.cols(), false);
    for (Index r : s.rows) dead_r[r] = true;
    for (Index c : s.cols) dead_c[c] = true;
    for (Index r = 0; r < mask.rows(); ++r)
      if (!dead_r[r])
        cands.push_back({l.costs->row(r) / static_cast<double>(live_cols[li]), li, 0, r});
    for (Index c = 0; c < mask.cols(); ++c)
      if (!dead_c[c])
        cands.push_back({l.costs->col(c) / static_cast<double>(live_rows[li]), li, 1, c});
    sel.layers.push_back(std::move(s));
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    return std::tie(a.score, a.layer, a.is_col, a.index) < std::tie(b.score, b.layer, b.is_col, b.index);
  });
  std::string blocked;
  for (const auto& c : cands) {
    if (removed >= target) break;
    auto& s = sel.layers[c.layer];
    if (c.is_col == 0) {
      if (live_rows[c.layer] <= 1) {
        blocked = s.layer_name;
        continue;
      }
      removed += live_cols[c.layer];
      --live_rows[c.layer];
      s.rows.push_back(c.index);
      s.new_rows.push_back(c.index);
    } else {
      if (live_cols[c.layer] <= 1) {
        blocked = s.layer_name;
        continue;
      }
      removed += live_rows[c.layer];
      --live_cols[c.layer];
      s.cols.push_back(c.index);
      s.new_cols.push_back(c.index);
    }
    sel.tau = c.score;
  }
  if (removed < target) {
    if (blocked.empty() && !sel.layers.empty()) blocked = sel.layers.front().layer_name;
    throw InfeasibleError(blocked, "structured target " + std::to_string(alpha) +
                                       " unreachable without emptying layer '" + blocked + "'");
  }
  detail::finish(sel, total);
  return sel;
}

inline RemovalSelection select(PruneMode mode, const std::vector<SelectionLayer>& layers, double alpha) {
  switch (mode) {
    case PruneMode::unstructured: return select_unstructured(layers, alpha);
    case PruneMode::semi_2_4: return select_semi_2_4(layers, alpha);
    case PruneMode::structured: return select_structured(layers, alpha);
  }
  throw ConfigError("unknown pruning mode");
}

inline Json selection_to_json(const RemovalSelection& sel) {
  Json layers = Json::array();
  for (const auto& l : sel.layers)
    layers.push_back({{"layer", l.layer_name}, {"rows", l.rows}, {"cols", l.cols}, {"elements", l.elements}});
  Json out{{"mode", to_string(sel.mode)},
           {"target_size", sel.target_size},
           {"realized_size", sel.realized_size},
           {"layers", layers}};
  out["tau"] = std::isfinite(sel.tau) ? Json(sel.tau) : Json(nullptr);
  return out;
}

}  // namespace surgeon
