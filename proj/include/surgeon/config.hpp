#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "surgeon/checkpoint.hpp"
#include "surgeon/costs.hpp"
#include "surgeon/errors.hpp"
#include "surgeon/selection.hpp"
#include "surgeon/updates.hpp"

namespace surgeon {

enum class CurvatureKind { kfac, nkp };

inline std::string to_string(CurvatureKind k) { return k == CurvatureKind::kfac ? "kfac" : "nkp"; }

inline CurvatureKind curvature_kind_from_string(const std::string& s) {
  if (s == "kfac") return CurvatureKind::kfac;
  if (s == "nkp") return CurvatureKind::nkp;
  throw ConfigError("unknown curvature estimator '" + s + "'");
}

struct LoraConfig {
  bool enabled = false;
  int rank = 4;
  int steps = 50;
  double lr = 1e-2;
};

struct PruneConfig {
  PruneMode mode = PruneMode::unstructured;
  double alpha = 0.5;
  int shots = 5;
  CostPolicy policy = CostPolicy::kfac_obs;
  UpdatePolicy update{};
  std::optional<double> damp_g;  // unset: 0.1 structured, 0.01 otherwise
  double damp_a = 0.01;
  CurvatureKind curvature = CurvatureKind::kfac;
  int power_iters = kPowerItersCold;
  LoraConfig lora{};
  std::uint64_t seed = 0;
  std::string corpus;
  int seq_len = 64;
  int batch_count = 32;
  int batch_size = 1;
  double test_fraction = 0.1;
  bool report_timing = false;  // wall-clock fields make reports non-reproducible

  double resolved_damp_g() const {
    if (damp_g) return *damp_g;
    return mode == PruneMode::structured ? 0.1 : 0.01;
  }

  /// Default shot counts: 10 structured, 5 otherwise.
  static int default_shots(PruneMode m) { return m == PruneMode::structured ? 10 : 5; }

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in (0, 1]");
    if (mode == PruneMode::semi_2_4 && alpha < 0.5) throw ConfigError("2:4 sparsity needs alpha >= 0.5");
    if (shots < 1) throw ConfigError("shots must be at least 1");
    if (update.max_correlated < 1) throw ConfigError("max_correlated must be at least 1");
    if (!(resolved_damp_g() > 0.0) || !(damp_a > 0.0)) throw ConfigError("dampening fractions must be positive");
    if (power_iters < 1) throw ConfigError("power_iters must be at least 1");
    if (lora.enabled && (lora.rank < 1 || lora.steps < 0 || !(lora.lr > 0.0)))
      throw ConfigError("invalid low-rank correction settings");
    if (seq_len < 1 || batch_count < 1 || batch_size < 1) throw ConfigError("batch settings must be positive");
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must be in [0, 1)");
  }
};

/// Resolved config: every knob with its effective value.
inline Json to_json(const PruneConfig& c) {
  return Json{{"mode", to_string(c.mode)},
              {"alpha", c.alpha},
              {"shots", c.shots},
              {"policy", to_string(c.policy)},
              {"update", to_string(c.update.kind)},
              {"max_correlated", c.update.max_correlated},
              {"damp_g", c.resolved_damp_g()},
              {"damp_a", c.damp_a},
              {"curvature", to_string(c.curvature)},
              {"power_iters", c.power_iters},
              {"lora", {{"enabled", c.lora.enabled}, {"rank", c.lora.rank}, {"steps", c.lora.steps}, {"lr", c.lora.lr}}},
              {"seed", c.seed},
              {"corpus", c.corpus},
              {"seq_len", c.seq_len},
              {"batch_count", c.batch_count},
              {"batch_size", c.batch_size},
              {"test_fraction", c.test_fraction},
              {"report_timing", c.report_timing}};
}

/// Reads a (possibly partial) config object; keys absent from `j` keep `base` values.
/// Unknown keys are rejected.
inline PruneConfig prune_config_from_json(const Json& j, PruneConfig base = {}) {
  static const char* known[] = {"mode",  "alpha",      "shots",  "policy",       "update",        "max_correlated",
                                "damp_g", "damp_a",    "curvature", "power_iters", "lora",         "seed",
                                "corpus", "seq_len",   "batch_count", "batch_size", "test_fraction", "report_timing"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown config key '" + key + "'");
  }
  PruneConfig c = base;
  try {
    bool shots_given = j.contains("shots");
    if (j.contains("mode")) {
      c.mode = prune_mode_from_string(j["mode"].get<std::string>());
      if (!shots_given) c.shots = PruneConfig::default_shots(c.mode);
    }
    if (shots_given) c.shots = j["shots"].get<int>();
    if (j.contains("alpha")) c.alpha = j["alpha"].get<double>();
    if (j.contains("policy")) c.policy = cost_policy_from_string(j["policy"].get<std::string>());
    if (j.contains("update")) c.update.kind = update_kind_from_string(j["update"].get<std::string>());
    if (j.contains("max_correlated")) c.update.max_correlated = j["max_correlated"].get<int>();
    if (j.contains("damp_g")) c.damp_g = j["damp_g"].get<double>();
    if (j.contains("damp_a")) c.damp_a = j["damp_a"].get<double>();
    if (j.contains("curvature")) c.curvature = curvature_kind_from_string(j["curvature"].get<std::string>());
    if (j.contains("power_iters")) c.power_iters = j["power_iters"].get<int>();
    if (j.contains("lora")) {
      const auto& l = j["lora"];
      c.lora.enabled = l.value("enabled", c.lora.enabled);
      c.lora.rank = l.value("rank", c.lora.rank);
      c.lora.steps = l.value("steps", c.lora.steps);
      c.lora.lr = l.value("lr", c.lora.lr);
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("corpus")) c.corpus = j["corpus"].get<std::string>();
    if (j.contains("seq_len")) c.seq_len = j["seq_len"].get<int>();
    if (j.contains("batch_count")) c.batch_count = j["batch_count"].get<int>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("test_fraction")) c.test_fraction = j["test_fraction"].get<double>();
    if (j.contains("report_timing")) c.report_timing = j["report_timing"].get<bool>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  return c;
}

}  // namespace surgeon
