#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "surgeon/checkpoint.hpp"
#include "surgeon/config.hpp"
#include "surgeon/data.hpp"
#include "surgeon/errors.hpp"
#include "surgeon/harness.hpp"
#include "surgeon/model.hpp"
#include "surgeon/report.hpp"
#include "surgeon/surgeon.hpp"
#include "surgeon/train.hpp"
#include "surgeon/verify.hpp"

namespace fs = std::filesystem;
using namespace surgeon;

namespace {

Json read_json_file(const std::string& path) {
  const Json j = Json::parse(detail::read_all(path), nullptr, false);
  if (j.is_discarded()) throw ConfigError("'" + path + "' is not valid JSON");
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << text;
  if (!os) throw IngestionError("failed writing '" + path.string() + "'");
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config, out, corpus, arch;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, seq_len, batch_count, batch_size;
  std::optional<double> lr;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) cfg = train_config_from_json(read_json_file(a.config));
  if (!a.corpus.empty()) cfg.corpus = a.corpus;
  if (!a.arch.empty()) cfg.model.arch = arch_from_string(a.arch);
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.lr) cfg.lr = *a.lr;
  if (a.seq_len) cfg.seq_len = *a.seq_len;
  if (a.batch_count) cfg.batch_count = *a.batch_count;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (cfg.corpus.empty()) throw ConfigError("train needs a corpus");
  if (cfg.model.arch == Arch::regression) throw ConfigError("train supports language-model architectures only");

  const Corpus corpus = load_corpus(cfg.corpus, cfg.test_fraction, cfg.model.alphabet);
  cfg.model.alphabet = corpus.alphabet;
  cfg.model.vocab_size = static_cast<int>(corpus.alphabet.size());
  const TrainResult res = train_model(build_model(cfg.model, cfg.seed), corpus, cfg);
  save_model(res.model, a.out);

  Json epochs = Json::array();
  for (const auto& e : res.log)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"test_loss", e.test_loss}});
  BatchOptions opt{cfg.seq_len, cfg.batch_count, cfg.batch_size, cfg.seed};
  const double baseline = corpus.test.empty() ? NAN : evaluate_loss(res.model, make_batches(corpus, Split::test, opt));
  Json log{{"resolved_config", to_json(cfg)}, {"epochs", epochs}, {"checkpoint", a.out}};
  log["baseline_test_loss"] = std::isfinite(baseline) ? Json(baseline) : Json(nullptr);
  write_text(a.out + ".train_log.json", dump(log));
  std::cout << dump(log);
  return 0;
}

// --- prune -------------------------------------------------------------------

struct PruneArgs {
  std::string config, checkpoint, corpus, out_dir;
  std::optional<std::string> mode, policy, update, curvature;
  std::optional<double> alpha, damp_g, damp_a, lora_lr, test_fraction;
  std::optional<int> shots, max_correlated, power_iters, lora_rank, lora_steps, seq_len, batch_count, batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<int> stop_after;
  bool lora = false, report_timing = false, resume = false;
};

struct StopRequested {};

PruneConfig resolve_prune_config(const PruneArgs& a) {
  PruneConfig c;
  if (!a.config.empty()) c = prune_config_from_json(read_json_file(a.config));
  if (a.mode) {
    const bool shots_set_by_file = !a.config.empty() && read_json_file(a.config).contains("shots");
    c.mode = prune_mode_from_string(*a.mode);
    if (!shots_set_by_file) c.shots = PruneConfig::default_shots(c.mode);
  }
  if (a.shots) c.shots = *a.shots;
  if (a.alpha) c.alpha = *a.alpha;
  if (a.policy) c.policy = cost_policy_from_string(*a.policy);
  if (a.update) c.update.kind = update_kind_from_string(*a.update);
  if (a.max_correlated) c.update.max_correlated = *a.max_correlated;
  if (a.damp_g) c.damp_g = *a.damp_g;
  if (a.damp_a) c.damp_a = *a.damp_a;
  if (a.curvature) c.curvature = curvature_kind_from_string(*a.curvature);
  if (a.power_iters) c.power_iters = *a.power_iters;
  if (a.lora) c.lora.enabled = true;
  if (a.lora_rank) c.lora.rank = *a.lora_rank;
  if (a.lora_steps) c.lora.steps = *a.lora_steps;
  if (a.lora_lr) c.lora.lr = *a.lora_lr;
  if (a.seed) c.seed = *a.seed;
  if (!a.corpus.empty()) c.corpus = a.corpus;
  if (a.seq_len) c.seq_len = *a.seq_len;
  if (a.batch_count) c.batch_count = *a.batch_count;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.test_fraction) c.test_fraction = *a.test_fraction;
  if (a.report_timing) c.report_timing = true;
  c.validate();
  return c;
}

/// Removed structures read off the masks (cumulative over all shots).
Json removal_dump(const Model& m) {
  Json layers = Json::array();
  for (const auto& l : m.layers) {
    if (!l.prunable) continue;
    std::vector<Index> rows, cols, elements;
    for (Index r = 0; r < l.mask.rows(); ++r)
      if (l.mask.row(r).sum() == 0.0) rows.push_back(r);
    for (Index c = 0; c < l.mask.cols(); ++c)
      if (l.mask.col(c).sum() == 0.0) cols.push_back(c);
    for (Index r = 0; r < l.mask.rows(); ++r)
      for (Index c = 0; c < l.mask.cols(); ++c)
        if (l.mask(r, c) == 0.0) elements.push_back(r * l.mask.cols() + c);
    layers.push_back({{"layer", l.name}, {"rows", rows}, {"cols", cols}, {"elements", elements}});
  }
  return Json{{"prunable_parameters", m.prunable_count()},
              {"removed_parameters", m.prunable_count() - m.live_prunable_count()},
              {"layers", layers}};
}

std::string shot_name(int t) { return "shot_" + std::to_string(t); }

int cmd_prune(const PruneArgs& a) {
  const fs::path dir = a.out_dir;
  PruneConfig cfg;
  RunState state;
  Model model;
  if (a.resume) {
    LoadedRunState loaded = load_run_state(dir);
    cfg = loaded.config;
    state = std::move(loaded.state);
    model = state.completed == 0 ? load_model(a.checkpoint) : load_model(dir / loaded.checkpoint_name);
  } else {
    cfg = resolve_prune_config(a);
    model = load_model(a.checkpoint);
    fs::create_directories(dir);
  }
  if (model.config.arch == Arch::regression) throw ConfigError("prune needs a language-model checkpoint");
  if (cfg.corpus.empty()) throw ConfigError("prune needs a corpus");
  const Corpus corpus = load_corpus(cfg.corpus, cfg.test_fraction, model.config.alphabet);
  const PruneData data = make_prune_data(corpus, cfg);

  write_text(dir / "resolved_config.json", dump(to_json(cfg)));
  // Keep exactly the report lines of completed shots so a resumed log matches an uninterrupted one.
  std::vector<std::string> lines;
  if (a.resume && fs::exists(dir / "shots.jsonl")) {
    std::ifstream is(dir / "shots.jsonl");
    std::string line;
    while (static_cast<int>(lines.size()) < state.completed && std::getline(is, line)) lines.push_back(line);
  }
  {
    std::ostringstream os;
    for (const auto& l : lines) os << l << '\n';
    write_text(dir / "shots.jsonl", os.str());
  }
  if (!a.resume) save_run_state(dir, state, cfg, "");

  RunResult res;
  try {
    res = run(model, data, cfg, state, [&](const Model& m, const ShotReport& r, const RunState& s) {
    save_model(m, dir / shot_name(r.shot));
    std::ofstream os(dir / "shots.jsonl", std::ios::app);
    os << to_json(r).dump() << '\n';
    if (!os) throw IngestionError("failed appending shot report");
    save_run_state(dir, s, cfg, shot_name(r.shot));
    spdlog::info("shot {}/{}: alpha_t {:.4f}, train loss {:.5f} -> {:.5f}", r.shot, cfg.shots, r.alpha_t,
                 r.train_loss_before, r.train_loss_final);
    if (a.stop_after && s.completed >= *a.stop_after && s.completed < cfg.shots) throw StopRequested{};
    });
  } catch (const StopRequested&) {
    spdlog::info("stopped after shot {}; continue with --resume", *a.stop_after);
    return 0;
  }
  save_model(res.model, dir / "model");
  write_text(dir / "removal.json", dump(removal_dump(res.model)));
  Json summary{{"checkpoint", (dir / "model").string()},
               {"realized_size", res.model.realized_size()},
               {"shots", cfg.shots},
               {"schedule", res.schedule.alphas}};
  std::cout << dump(summary);
  return 0;
}

// --- eval --------------------------------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& corpus_path, int seq_len, double test_fraction,
             const std::string& out) {
  const Model m = load_model(checkpoint);
  if (m.config.arch == Arch::regression) throw ConfigError("eval needs a language-model checkpoint");
  const Corpus corpus = load_corpus(corpus_path, test_fraction, m.config.alphabet);
  if (corpus.test.empty()) throw IngestionError("corpus has no test split");
  const auto batches = make_batches(corpus, Split::test, BatchOptions{seq_len, 1, 1, 0});
  if (batches.empty()) throw IngestionError("test split shorter than one window");
  Index tokens = 0;
  for (const auto& b : batches) tokens += b.sample_count();
  const double loss = evaluate_loss(m, batches);
  if (!std::isfinite(loss)) throw NumericError("non-finite test loss");
  const std::int64_t removed = m.prunable_count() - m.live_prunable_count();
  Json j{{"test_loss", loss},
         {"perplexity", std::exp(loss)},
         {"test_tokens", tokens},
         {"total_parameters", m.total_parameter_count()},
         {"removed_parameters", removed},
         {"live_parameters", m.total_parameter_count() - removed},
         {"realized_size", m.realized_size()}};
  if (!out.empty()) write_text(out, dump(j));
  std::cout << dump(j);
  return 0;
}

// --- report ------------------------------------------------------------------

int cmd_report(const std::string& shots, const std::string& out_dir) {
  std::ifstream is(shots);
  if (!is) throw IngestionError("cannot open '" + shots + "'");
  const SparsitySummary s = summarize(read_shot_reports(is));
  std::ostringstream layers, types;
  write_layer_csv(layers, s);
  write_type_csv(types, s);
  if (!out_dir.empty()) {
    write_text(fs::path(out_dir) / "layers.csv", layers.str());
    write_text(fs::path(out_dir) / "types.csv", types.str());
    write_text(fs::path(out_dir) / "summary.json", dump(to_json(s)));
  }
  std::cout << layers.str() << '\n' << types.str();
  return 0;
}

// --- verify ------------------------------------------------------------------

int cmd_verify(int instances, std::uint64_t seed) {
  const std::vector<verify::CheckResult> results{
      verify::oracle_equivalence(instances, seed), verify::quadratic_exactness(2 * instances, seed + 1),
      verify::nearest_kronecker(std::max(1, instances / 2), seed + 2),
      verify::greedy_vs_exhaustive(instances, seed + 3)};
  bool ok = true;
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    ok = ok && r.passed;
  }
  return ok ? 0 : static_cast<int>(ExitCode::numeric);
}

void report_error(const std::string& kind, const std::string& message, const std::string& layer = {}) {
  Json j{{"error", kind}, {"message", message}};
  if (!layer.empty()) j["layer"] = layer;
  std::cerr << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("surgeon"));
  CLI::App app{"Second-order pruning of small language models"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a toy character-level model");
  train->add_option("--config", ta.config, "JSON train config");
  train->add_option("--corpus", ta.corpus, "Text corpus");
  train->add_option("--arch", ta.arch, "mlp or transformer");
  train->add_option("--out", ta.out, "Checkpoint prefix")->required();
  train->add_option("--seed", ta.seed);
  train->add_option("--epochs", ta.epochs);
  train->add_option("--lr", ta.lr);
  train->add_option("--seq-len", ta.seq_len);
  train->add_option("--batch-count", ta.batch_count);
  train->add_option("--batch-size", ta.batch_size);

  PruneArgs pa;
  auto* prune = app.add_subcommand("prune", "Compress a checkpoint");
  prune->add_option("--config", pa.config, "JSON prune config (flags override)");
  prune->add_option("--checkpoint", pa.checkpoint, "Input checkpoint prefix")->required();
  prune->add_option("--corpus", pa.corpus);
  prune->add_option("--out-dir", pa.out_dir, "Output directory")->required();
  prune->add_option("--mode", pa.mode, "unstructured, semi-2:4 or structured");
  prune->add_option("--alpha", pa.alpha, "Target fraction of prunable weights kept");
  prune->add_option("--shots", pa.shots);
  prune->add_option("--policy", pa.policy, "magnitude, l-obd, k-obd or kfac-obs");
  prune->add_option("--update", pa.update, "none, independent or full");
  prune->add_option("--max-correlated", pa.max_correlated);
  prune->add_option("--damp-g", pa.damp_g);
  prune->add_option("--damp-a", pa.damp_a);
  prune->add_option("--curvature", pa.curvature, "kfac or nkp");
  prune->add_option("--power-iters", pa.power_iters);
  prune->add_flag("--lora", pa.lora, "Interleave low-rank corrections");
  prune->add_option("--lora-rank", pa.lora_rank);
  prune->add_option("--lora-steps", pa.lora_steps);
  prune->add_option("--lora-lr", pa.lora_lr);
  prune->add_option("--seed", pa.seed);
  prune->add_option("--seq-len", pa.seq_len);
  prune->add_option("--batch-count", pa.batch_count);
  prune->add_option("--batch-size", pa.batch_size);
  prune->add_option("--test-fraction", pa.test_fraction);
  prune->add_flag("--report-timing", pa.report_timing, "Add wall-clock fields to shot reports");
  prune->add_flag("--resume", pa.resume, "Continue from the state record in --out-dir");
  prune->add_option("--stop-after", pa.stop_after, "Stop once this many shots are complete");

  std::string e_ckpt, e_corpus, e_out;
  int e_seq = 64;
  double e_tf = 0.1;
  auto* eval = app.add_subcommand("eval", "Test loss, perplexity and live parameters");
  eval->add_option("--checkpoint", e_ckpt)->required();
  eval->add_option("--corpus", e_corpus)->required();
  eval->add_option("--seq-len", e_seq);
  eval->add_option("--test-fraction", e_tf);
  eval->add_option("--out", e_out, "Also write metrics JSON here");

  std::string r_shots, r_out;
  auto* report = app.add_subcommand("report", "Sparsity by layer depth and type");
  report->add_option("--shots", r_shots, "shots.jsonl from a prune run")->required();
  report->add_option("--out-dir", r_out);

  int v_instances = 50;
  std::uint64_t v_seed = 1;
  auto* ver = app.add_subcommand("verify", "Fast paths against dense oracles");
  ver->add_option("--instances", v_instances);
  ver->add_option("--seed", v_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
  }

  try {
    if (*train) return cmd_train(ta);
    if (*prune) return cmd_prune(pa);
    if (*eval) return cmd_eval(e_ckpt, e_corpus, e_seq, e_tf, e_out);
    if (*report) return cmd_report(r_shots, r_out);
    if (*ver) return cmd_verify(v_instances, v_seed);
  } catch (const InfeasibleError& e) {
    report_error("infeasible", e.what(), e.layer());
    return static_cast<int>(e.exit_code());
  } catch (const ConfigError& e) {
    report_error("config", e.what());
    return static_cast<int>(e.exit_code());
  } catch (const Error& e) {
    report_error("numeric", e.what());
    return static_cast<int>(e.exit_code());
  } catch (const Json::exception& e) {
    report_error("config", e.what());
    return static_cast<int>(ExitCode::config);
  } catch (const fs::filesystem_error& e) {
    report_error("config", e.what());
    return static_cast<int>(ExitCode::config);
  }
  return 0;
}
