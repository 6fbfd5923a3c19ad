#pragma once

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "surgeon/checkpoint.hpp"
#include "surgeon/config.hpp"
#include "surgeon/costs.hpp"
#include "surgeon/curvature.hpp"
#include "surgeon/data.hpp"
#include "surgeon/errors.hpp"
#include "surgeon/harness.hpp"
#include "surgeon/model.hpp"
#include "surgeon/selection.hpp"
#include "surgeon/updates.hpp"

namespace surgeon {

struct Schedule {
  std::vector<double> alphas;  // alphas[0] = 1, alphas[T] = target

  int shots() const { return static_cast<int>(alphas.size()) - 1; }
  double target() const { return alphas.back(); }
};

/// alpha_t = 1 - t (1 - alpha) / T.
inline Schedule make_schedule(double alpha, int shots) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("schedule target must be in (0, 1)");
  if (shots < 1) throw ConfigError("schedule needs at least one shot");
  Schedule s;
  s.alphas.resize(shots + 1);
  const double step = (1.0 - alpha) / static_cast<double>(shots);
  for (int t = 0; t <= shots; ++t) s.alphas[t] = 1.0 - static_cast<double>(t) * step;
  s.alphas[0] = 1.0;
  s.alphas[shots] = alpha;
  return s;
}

/// Schedule used by run(): alpha = 1 gives T no-op shots.
inline Schedule run_schedule(double alpha, int shots) {
  if (alpha == 1.0) {
    if (shots < 1) throw ConfigError("schedule needs at least one shot");
    return Schedule{std::vector<double>(shots + 1, 1.0)};
  }
  return make_schedule(alpha, shots);
}

struct LowRankCorrection {
  Mat U;  // R x r
  Mat V;  // r x C
  int rank = 0;
  int steps = 0;
  double learning_rate = 0.0;

  /// U V with pruned cells zeroed.
  Mat absorbed(const Mat& mask) const { return (U * V).cwiseProduct(mask); }
};

struct LoraOutcome {
  Model model;
  double loss_before = 0.0;
  double loss_after = 0.0;
  bool reverted = false;
  std::vector<std::pair<std::string, Mat>> corrections;  // masked U V actually absorbed, per prunable layer
};

/// Gradient descent on U, V (U = 0, V ~ N(0, 1/C)) with base weights and aux
/// parameters frozen, then W <- W + mask .* (U V). Reverts if the training loss
/// after absorption exceeds the loss before by more than 1e-6.
inline LoraOutcome lora_correct(const Model& model, const Batch& data, const LoraConfig& cfg, std::uint64_t seed) {
  if (cfg.rank < 1) throw ConfigError("low-rank correction rank must be at least 1");
  if (cfg.steps < 0) throw ConfigError("low-rank correction steps must be non-negative");
  if (!(cfg.lr > 0.0)) throw ConfigError("low-rank correction learning rate must be positive");
  LoraOutcome out;
  out.model = model;
  out.loss_before = evaluate_loss(model, data);
  out.loss_after = out.loss_before;
  if (cfg.steps == 0) return out;

  Rng rng(seed);
  std::map<std::size_t, LowRankCorrection> lr;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    if (!l.prunable) continue;
    const Index R = l.weight.rows(), C = l.weight.cols();
    const int r = static_cast<int>(std::min<Index>(cfg.rank, std::min(R, C)));
    LowRankCorrection c;
    c.rank = r;
    c.steps = cfg.steps;
    c.learning_rate = cfg.lr;
    c.U = Mat::Zero(R, r);
    c.V = random_normal(r, C, rng) / std::sqrt(static_cast<double>(C));
    lr.emplace(i, std::move(c));
  }

  Model work = model;
  for (int step = 0; step < cfg.steps; ++step) {
    for (auto& [i, c] : lr) work.layers[i].weight = model.layers[i].weight + c.absorbed(model.layers[i].mask);
    const PassResult pass = forward_backward(work, data, PassOptions{true, false});
    for (auto& [i, c] : lr) {
      const Mat dw = pass.weight_grads[i].cwiseProduct(model.layers[i].mask);
      const Mat du = dw * c.V.transpose();
      const Mat dv = c.U.transpose() * dw;
      c.U -= cfg.lr * du;
      c.V -= cfg.lr * dv;
    }
  }

  for (auto& [i, c] : lr) {
    Layer& l = out.model.layers[i];
    const Mat delta = c.absorbed(l.mask);
    l.weight += delta;
    l.apply_mask();
    out.corrections.emplace_back(l.name, delta);
  }
  out.loss_after = evaluate_loss(out.model, data);
  if (!std::isfinite(out.loss_after) || out.loss_after > out.loss_before + 1e-6) {
    spdlog::warn("low-rank correction raised training loss {:.9g} -> {:.9g}; reverted", out.loss_before,
                 out.loss_after);
    out.model = model;
    out.loss_after = out.loss_before;
    out.reverted = true;
    out.corrections.clear();
  }
  return out;
}

struct LayerShotReport {
  std::string name;
  LayerKind kind = LayerKind::linear;
  Index depth = 0;  // position among prunable layers
  Index rows = 0;
  Index cols = 0;
  Index live_elements = 0;
  Index removed_elements = 0;
  Index removed_rows = 0;  // rows with no live weight
  Index removed_cols = 0;
  Index new_elements = 0;  // weights zeroed this shot
  double update_norm = 0.0;
  double lora_norm = 0.0;

  Index total() const { return rows * cols; }
  double sparsity() const { return total() == 0 ? 0.0 : static_cast<double>(removed_elements) / total(); }
};

struct ShotReport {
  int shot = 0;
  double alpha_t = 1.0;
  double realized_size = 1.0;
  double tau = -std::numeric_limits<double>::infinity();
  double train_loss_before = 0.0;
  double train_loss_after = 0.0;  // after update and hard mask
  double train_loss_final = 0.0;  // after the optional low-rank correction
  std::optional<double> test_loss;
  bool lora_applied = false;
  bool lora_reverted = false;
  std::vector<LayerShotReport> layers;
  std::optional<double> wall_seconds;
};

inline Json to_json(const LayerShotReport& l) {
  return Json{{"layer", l.name},
              {"kind", to_string(l.kind)},
              {"depth", l.depth},
              {"rows", l.rows},
              {"cols", l.cols},
              {"live_elements", l.live_elements},
              {"removed_elements", l.removed_elements},
              {"removed_rows", l.removed_rows},
              {"removed_cols", l.removed_cols},
              {"new_elements", l.new_elements},
              {"sparsity", l.sparsity()},
              {"update_norm", l.update_norm},
              {"lora_norm", l.lora_norm}};
}

inline Json to_json(const ShotReport& r) {
  Json layers = Json::array();
  for (const auto& l : r.layers) layers.push_back(to_json(l));
  Json j{{"shot", r.shot},
         {"alpha_t", r.alpha_t},
         {"realized_size", r.realized_size},
         {"train_loss_before", r.train_loss_before},
         {"train_loss_after", r.train_loss_after},
         {"train_loss_final", r.train_loss_final},
         {"lora_applied", r.lora_applied},
         {"lora_reverted", r.lora_reverted},
         {"layers", layers}};
  j["tau"] = std::isfinite(r.tau) ? Json(r.tau) : Json(nullptr);
  j["test_loss"] = r.test_loss ? Json(*r.test_loss) : Json(nullptr);
  if (r.wall_seconds) j["wall_seconds"] = *r.wall_seconds;
  return j;
}

inline ShotReport shot_report_from_json(const Json& j) {
  try {
    ShotReport r;
    r.shot = j.at("shot").get<int>();
    r.alpha_t = j.at("alpha_t").get<double>();
    r.realized_size = j.at("realized_size").get<double>();
    r.train_loss_before = j.at("train_loss_before").get<double>();
    r.train_loss_after = j.at("train_loss_after").get<double>();
    r.train_loss_final = j.at("train_loss_final").get<double>();
    r.lora_applied = j.at("lora_applied").get<bool>();
    r.lora_reverted = j.at("lora_reverted").get<bool>();
    if (!j.at("tau").is_null()) r.tau = j["tau"].get<double>();
    if (!j.at("test_loss").is_null()) r.test_loss = j["test_loss"].get<double>();
    if (j.contains("wall_seconds")) r.wall_seconds = j["wall_seconds"].get<double>();
    for (const auto& e : j.at("layers")) {
      LayerShotReport l;
      l.name = e.at("layer").get<std::string>();
      l.kind = layer_kind_from_string(e.at("kind").get<std::string>());
      l.depth = e.at("depth").get<Index>();
      l.rows = e.at("rows").get<Index>();
      l.cols = e.at("cols").get<Index>();
      l.live_elements = e.at("live_elements").get<Index>();
      l.removed_elements = e.at("removed_elements").get<Index>();
      l.removed_rows = e.at("removed_rows").get<Index>();
      l.removed_cols = e.at("removed_cols").get<Index>();
      l.new_elements = e.at("new_elements").get<Index>();
      l.update_norm = e.at("update_norm").get<double>();
      l.lora_norm = e.at("lora_norm").get<double>();
      r.layers.push_back(std::move(l));
    }
    return r;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed shot report: ") + e.what());
  }
}

/// Curvature data is fixed for the run; tapes are recomputed from it every shot.
struct PruneData {
  Batch curvature;
  std::vector<Batch> test;  // may be empty
};

inline PruneData make_prune_data(const Corpus& corpus, const PruneConfig& cfg) {
  BatchOptions opt{cfg.seq_len, cfg.batch_count, cfg.batch_size, cfg.seed};
  PruneData d;
  d.curvature = concat_batches(make_batches(corpus, Split::train, opt));
  if (!corpus.test.empty()) d.test = make_batches(corpus, Split::test, opt);
  return d;
}

/// Undamped factors from the previous shot, keyed by layer; power-method warm starts only.
using WarmStart = std::map<std::string, std::pair<Mat, Mat>>;

struct ShotResult {
  Model model;
  ShotReport report;
  RemovalSelection selection;
  WarmStart warm;
};

inline std::uint64_t shot_seed(std::uint64_t seed, int shot) {
  return seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(shot + 1));
}

/// One shot: tapes -> curvature -> dampen -> costs -> select at alpha_t -> update ->
/// hard mask -> optional low-rank correction. The input model is never modified.
inline ShotResult run_shot(const Model& model, const PruneData& data, const PruneConfig& cfg, int shot,
                           double alpha_t, const WarmStart& warm = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ShotResult res;
  res.model = model;
  Model& m = res.model;
  ShotReport& rep = res.report;
  rep.shot = shot;
  rep.alpha_t = alpha_t;

  const PassResult pass = forward_backward(model, data.curvature, PassOptions{false, true});
  rep.train_loss_before = pass.loss;

  const bool structured = cfg.mode == PruneMode::structured;
  const bool need_inv = cfg.policy == CostPolicy::kfac_obs || (structured && cfg.update.kind != UpdateKind::none);
  const bool need_eig = !structured && cfg.update.kind != UpdateKind::none;

  std::vector<std::size_t> idx;
  std::vector<LayerCurvature> curvs;
  std::vector<CostTable> costs;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (!m.layers[i].prunable) continue;
    const LayerTape& tape = pass.tapes[i];
    KronCurvature k;
    if (cfg.curvature == CurvatureKind::kfac) {
      k = accumulate_kfac(tape);
    } else {
      auto it = warm.find(tape.layer_name);
      std::optional<std::pair<Mat, Mat>> init;
      if (it != warm.end()) init = it->second;
      const NkpResult nkp =
          nkp_power_method(TapeRearrangedOperator(tape), init, init ? kPowerItersWarm : cfg.power_iters);
      k.layer_name = tape.layer_name;
      k.G = nkp.G;
      k.A = nkp.A;
      k.sample_count = tape.sample_count();
      res.warm[tape.layer_name] = {nkp.G, nkp.A};
    }
    LayerCurvature lc{dampen(std::move(k), cfg.resolved_damp_g(), cfg.damp_a), std::nullopt, std::nullopt};
    if (need_inv) lc.inv = factor_inverses(lc.curv);
    if (need_eig) lc.eig = eigendecompose(lc.curv);
    costs.push_back(cost_table(m.layers[i].weight, lc.curv, cfg.policy));
    curvs.push_back(std::move(lc));
    idx.push_back(i);
  }

  std::vector<SelectionLayer> sl;
  for (std::size_t j = 0; j < idx.size(); ++j) sl.push_back({&costs[j], &model.layers[idx[j]].mask});
  res.selection = select(cfg.mode, sl, alpha_t);
  const RemovalSelection& sel = res.selection;
  rep.tau = sel.tau;
  const bool changed = sel.has_new();

  std::vector<double> update_norms(idx.size(), 0.0);
  if (changed) {
    for (std::size_t j = 0; j < idx.size(); ++j) {
      Layer& l = m.layers[idx[j]];
      const WeightDelta d = layer_update(curvs[j], sel.layers[j], l.weight, cfg.mode, cfg.update);
      update_norms[j] = d.delta.norm();
      l.weight += d.delta;
      l.mask = l.mask.cwiseProduct(sel.layers[j].live_mask());
      l.apply_mask();
      if (!l.weight.allFinite()) throw NumericError("non-finite weights after update of '" + l.name + "'");
    }
    rep.train_loss_after = evaluate_loss(m, data.curvature);
  } else {
    rep.train_loss_after = rep.train_loss_before;
  }
  rep.train_loss_final = rep.train_loss_after;

  std::map<std::string, double> lora_norms;
  if (cfg.lora.enabled && changed) {
    LoraOutcome lo = lora_correct(m, data.curvature, cfg.lora, shot_seed(cfg.seed, shot));
    rep.lora_applied = true;
    rep.lora_reverted = lo.reverted;
    rep.train_loss_final = lo.loss_after;
    for (const auto& [name, delta] : lo.corrections) lora_norms[name] = delta.norm();
    m = std::move(lo.model);
  }

  if (!data.test.empty()) rep.test_loss = evaluate_loss(m, data.test);

  for (std::size_t j = 0; j < idx.size(); ++j) {
    const Layer& l = m.layers[idx[j]];
    LayerShotReport lr;
    lr.name = l.name;
    lr.kind = l.kind;
    lr.depth = static_cast<Index>(j);
    lr.rows = l.weight.rows();
    lr.cols = l.weight.cols();
    lr.live_elements = static_cast<Index>(l.mask.sum());
    lr.removed_elements = lr.total() - lr.live_elements;
    for (Index r = 0; r < lr.rows; ++r) lr.removed_rows += l.mask.row(r).sum() == 0.0;
    for (Index c = 0; c < lr.cols; ++c) lr.removed_cols += l.mask.col(c).sum() == 0.0;
    lr.new_elements =
        static_cast<Index>(model.layers[idx[j]].mask.sum()) - lr.live_elements;
    lr.update_norm = update_norms[j];
    if (auto it = lora_norms.find(l.name); it != lora_norms.end()) lr.lora_norm = it->second;
    rep.layers.push_back(lr);
  }
  rep.realized_size = m.realized_size();
  if (std::abs(rep.realized_size - sel.realized_size) > 1e-12)
    throw NumericError("realized size drifted from the selection");
  if (cfg.report_timing)
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// Position in the schedule plus power-method warm starts: enough to resume a run
/// from the last completed shot's checkpoint.
struct RunState {
  int completed = 0;
  WarmStart warm;
};

struct RunResult {
  Model model;
  std::vector<ShotReport> reports;
  Schedule schedule;
};

using ShotCallback = std::function<void(const Model&, const ShotReport&, const RunState&)>;

/// Multi-shot loop over the linear schedule. `state` resumes after
/// state.completed shots; `on_shot` sees every completed shot before the next starts.
inline RunResult run(const Model& model, const PruneData& data, const PruneConfig& cfg, RunState state = {},
                     const ShotCallback& on_shot = {}) {
  cfg.validate();
  RunResult out;
  out.schedule = run_schedule(cfg.alpha, cfg.shots);
  if (state.completed < 0 || state.completed > cfg.shots) throw ConfigError("resume position outside the schedule");
  out.model = model;
  for (int t = state.completed + 1; t <= cfg.shots; ++t) {
    ShotResult sr = run_shot(out.model, data, cfg, t, out.schedule.alphas[t], state.warm);
    out.model = std::move(sr.model);
    state.completed = t;
    state.warm = std::move(sr.warm);
    if (on_shot) on_shot(out.model, sr.report, state);
    out.reports.push_back(std::move(sr.report));
  }
  return out;
}

// Resume record: <dir>/state.json plus the checkpoint it names and, for power-method
// runs, a curvature snapshot holding the warm-start factors.

inline void save_run_state(const std::filesystem::path& dir, const RunState& state, const PruneConfig& cfg,
                           const std::string& checkpoint_name) {
  std::vector<KronCurvature> warm;
  for (const auto& [name, ga] : state.warm) {
    KronCurvature k;
    k.layer_name = name;
    k.G = ga.first;
    k.A = ga.second;
    warm.push_back(std::move(k));
  }
  Json j{{"format", "surgeon-resume-v1"},
         {"completed_shots", state.completed},
         {"schedule", run_schedule(cfg.alpha, cfg.shots).alphas},
         {"config", to_json(cfg)},
         {"checkpoint", checkpoint_name},
         {"warm_start", warm.empty() ? Json(nullptr) : Json("warm")}};
  if (!warm.empty()) write_tensor_file(curvature_snapshot(warm), dir / "warm");
  const auto tmp = dir / "state.json.tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IngestionError("cannot write resume state in " + dir.string());
    os << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, dir / "state.json");
}

struct LoadedRunState {
  RunState state;
  PruneConfig config;
  std::string checkpoint_name;
};

inline LoadedRunState load_run_state(const std::filesystem::path& dir) {
  const Json j = Json::parse(detail::read_all(dir / "state.json"), nullptr, false);
  if (j.is_discarded() || j.value("format", "") != "surgeon-resume-v1")
    throw ConfigError("not a resume state: " + (dir / "state.json").string());
  LoadedRunState out;
  out.config = prune_config_from_json(j.at("config"));
  out.state.completed = j.at("completed_shots").get<int>();
  out.checkpoint_name = j.at("checkpoint").get<std::string>();
  if (!j.at("warm_start").is_null())
    for (auto& k : curvature_from_snapshot(read_tensor_file(dir / j["warm_start"].get<std::string>())))
      out.state.warm[k.layer_name] = {std::move(k.G), std::move(k.A)};
  return out;
}

}  // namespace surgeon
