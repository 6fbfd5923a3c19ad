// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <iostream>
#include <sstream>

#include "common.hpp"
#include "surgeon/report.hpp"
#include "surgeon/surgeon.hpp"
#include "surgeon/verify.hpp"

using namespace surgeon;
using namespace testing_util;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool passed = false;
  std::string detail;
};

constexpr int kSeeds = 5;

const Corpus& corpus() {
  static const Corpus c = load_corpus(SURGEON_CORPUS);
  return c;
}

/// Dense models trained once per seed and shared by the char-LM criteria.
const Model& char_lm(std::uint64_t seed) {
  static std::map<std::uint64_t, Model> cache;
  auto it = cache.find(seed);
  if (it == cache.end()) it = cache.emplace(seed, trained_char_lm(corpus(), seed, 4)).first;
  return it->second;
}

PruneConfig char_config(PruneMode mode, double alpha, std::uint64_t seed) {
  PruneConfig c;
  c.mode = mode;
  c.alpha = alpha;
  c.shots = PruneConfig::default_shots(mode);
  c.seed = seed;
  c.seq_len = 32;
  c.batch_count = 16;
  c.batch_size = 2;
  return c;
}

double final_test_loss(const PruneConfig& c) {
  const RunResult r = run(char_lm(c.seed), make_prune_data(corpus(), c), c);
  return *r.reports.back().test_loss;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

int sh(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome from_check(const verify::CheckResult& r, double secs, double budget) {
  std::ostringstream os;
  os << r.detail << "; " << secs << " s (budget " << budget << " s)";
  return {r.passed && secs < budget, os.str()};
}

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  const auto r = verify::oracle_equivalence(50, 1);
  return from_check(r, seconds_since(t0), 30.0);
}

Outcome quadratic_exactness() {
  const auto t0 = Clock::now();
  const auto r = verify::quadratic_exactness(100, 2);
  return from_check(r, seconds_since(t0), 10.0);
}

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  struct Case {
    ModelConfig cfg;
    Batch batch;
  };
  const Case cases[] = {{tiny_mlp(6), random_token_batch(6, 3, 6, 1)},
                        {tiny_transformer(6), random_token_batch(6, 2, 6, 2)},
                        {tiny_regression({5, 4}), random_regression_batch(8, 4, 3, 3)}};
  int checked = 0;
  double worst = 0.0;
  std::string where;
  for (const auto& c : cases) {
    const GradCheck g = grad_check(build_model(c.cfg, 7), c.batch, 20, 11);
    checked += g.checked;
    if (g.worst > worst) {
      worst = g.worst;
      where = to_string(c.cfg.arch) + ":" + g.worst_at;
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << checked << " weights over embedding, attention, linear and aux tensors; worst rel. err " << worst << " at "
     << where << "; " << secs << " s";
  return {checked >= 200 && worst <= 1e-4 && secs < 60.0, os.str()};
}

Outcome nearest_kronecker() {
  const auto r = verify::nearest_kronecker(20, 4);
  return {r.passed, r.detail};
}

Outcome mask_validity() {
  const Model& base = char_lm(1);
  std::ostringstream os;
  bool ok = true;

  PruneConfig semi = char_config(PruneMode::semi_2_4, 0.5, 1);
  const Model ms = run(base, make_prune_data(corpus(), semi), semi).model;
  Index bad_blocks = 0, blocks = 0;
  for (const auto& l : ms.layers) {
    if (!l.prunable) continue;
    for (Index r = 0; r < l.mask.rows(); ++r)
      for (Index b = 0; b < l.mask.cols() / 4; ++b, ++blocks) bad_blocks += l.mask.row(r).segment(4 * b, 4).sum() != 2.0;
    for (Index k = 0; k < l.weight.size(); ++k) ok = ok && (l.mask.data()[k] != 0.0 || l.weight.data()[k] == 0.0);
  }
  ok = ok && bad_blocks == 0;
  os << "semi-2:4: " << blocks - bad_blocks << "/" << blocks << " blocks with exactly 2 zeros";

  PruneConfig st = char_config(PruneMode::structured, 0.6, 1);
  st.shots = 3;
  const Model mst = run(base, make_prune_data(corpus(), st), st).model;
  Index stray = 0;
  for (const auto& l : mst.layers) {
    if (!l.prunable) continue;
    for (Index r = 0; r < l.mask.rows(); ++r)
      for (Index c = 0; c < l.mask.cols(); ++c)
        if (l.mask(r, c) == 0.0 && l.mask.row(r).sum() != 0.0 && l.mask.col(c).sum() != 0.0) ++stray;
  }
  ok = ok && stray == 0;
  os << "; structured: " << stray << " zeros outside whole rows/cols (size " << mst.realized_size() << ")";

  for (double alpha : {0.5, 0.35}) {
    const PruneConfig un = char_config(PruneMode::unstructured, alpha, 1);
    const Model mu = run(base, make_prune_data(corpus(), un), un).model;
    const auto p = mu.prunable_count();
    const auto want = static_cast<std::int64_t>(std::floor((1.0 - alpha) * static_cast<double>(p) + 1e-9));
    const auto removed = p - mu.live_prunable_count();
    ok = ok && removed == want;
    os << "; unstructured alpha " << alpha << ": removed " << removed << " of " << p << " (floor target " << want << ")";
  }
  return {ok, os.str()};
}

Outcome multi_shot_benefit() {
  std::vector<double> one, ten;
  for (std::uint64_t s = 1; s <= kSeeds; ++s) {
    PruneConfig c = char_config(PruneMode::structured, 0.5, s);
    c.shots = 1;
    one.push_back(final_test_loss(c));
    c.shots = 10;
    ten.push_back(final_test_loss(c));
  }
  const double m1 = median(one), m10 = median(ten);
  std::ostringstream os;
  os << "structured alpha 0.5, median test loss over " << kSeeds << " seeds: T=10 " << m10 << ", T=1 " << m1
     << ", gap (T=1 - T=10) " << m1 - m10;
  return {m10 <= m1, os.str()};
}

Outcome method_ordering() {
  const auto t0 = Clock::now();
  struct Method {
    const char* name;
    CostPolicy policy;
    UpdateKind update;
  };
  const Method methods[] = {{"full", CostPolicy::kfac_obs, UpdateKind::full},
                            {"independent", CostPolicy::kfac_obs, UpdateKind::independent},
                            {"k-obd", CostPolicy::k_obd, UpdateKind::none},
                            {"magnitude", CostPolicy::magnitude, UpdateKind::none}};
  std::ostringstream os;
  bool ok = true;
  for (double alpha : {0.8, 0.7}) {
    std::map<std::string, double> med;
    for (const auto& m : methods) {
      std::vector<double> losses;
      for (std::uint64_t s = 1; s <= kSeeds; ++s) {
        PruneConfig c = char_config(PruneMode::structured, alpha, s);
        c.policy = m.policy;
        c.update.kind = m.update;
        losses.push_back(final_test_loss(c));
      }
      med[m.name] = median(losses);
    }
    const bool order = med["full"] <= med["k-obd"] && med["k-obd"] <= med["magnitude"];
    const bool corr = med["full"] <= med["independent"];
    ok = ok && order && corr;
    os << "alpha " << alpha << ": full " << med["full"] << ", independent " << med["independent"] << ", k-obd "
       << med["k-obd"] << ", magnitude " << med["magnitude"] << (order && corr ? " (ordered)" : " (ORDER VIOLATED)")
       << "; ";
  }
  const double secs = seconds_since(t0);
  os << secs << " s";
  return {ok && secs < 900.0, os.str()};
}

Outcome dynamic_allocation() {
  Rng rng(8);
  const Index R = 6, C = 6;
  std::vector<KronCurvature> curv;
  std::vector<Mat> weights;
  for (int l = 0; l < 2; ++l) {
    KronCurvature k = dampen(accumulate_kfac(verify::random_tape(R, C, 12, rng)), 0.01, 0.01);
    if (l == 1) k.G *= 100.0;
    curv.push_back(k);
    weights.push_back(random_normal(R, C, rng));
  }
  std::vector<CostTable> tables;
  for (int l = 0; l < 2; ++l) {
    tables.push_back(cost_table(weights[l], curv[l], CostPolicy::kfac_obs));
    tables.back().layer_name = l == 0 ? "flat" : "stiff";
  }
  const Mat ones = Mat::Ones(R, C);
  const RemovalSelection sel = select_unstructured({{&tables[0], &ones}, {&tables[1], &ones}}, 0.5);
  const auto low = sel.layers[0].elements.size(), high = sel.layers[1].elements.size();
  const double share = static_cast<double>(low) / static_cast<double>(low + high);

  // Feed the allocation through the report command.
  ShotReport rep;
  rep.shot = 1;
  rep.alpha_t = 0.5;
  rep.realized_size = sel.realized_size;
  rep.tau = sel.tau;
  for (int l = 0; l < 2; ++l) {
    LayerShotReport lr;
    lr.name = tables[l].layer_name;
    lr.depth = l;
    lr.rows = R;
    lr.cols = C;
    lr.removed_elements = static_cast<Index>(sel.layers[l].elements.size());
    lr.live_elements = lr.total() - lr.removed_elements;
    lr.new_elements = lr.removed_elements;
    rep.layers.push_back(lr);
  }
  const fs::path dir = temp_dir("acceptance_alloc");
  std::ofstream(dir / "shots.jsonl") << to_json(rep).dump() << '\n';
  const int code = sh(std::string(SURGEON_CLI) + " report --shots " + (dir / "shots.jsonl").string() + " --out-dir " +
                      dir.string() + " > " + (dir / "table.txt").string());
  const std::string table = detail::read_all(dir / "layers.csv");
  std::ostringstream want;
  write_layer_csv(want, summarize({rep}));
  std::cout << "    allocation table (report command):\n";
  std::istringstream lines(table);
  for (std::string line; std::getline(lines, line);) std::cout << "      " << line << '\n';
  std::ostringstream os;
  os << low << " of " << low + high << " removals (" << 100.0 * share
     << "%) from the low-curvature layer; report table " << (code == 0 && table == want.str() ? "matches" : "MISMATCH");
  return {share >= 0.9 && code == 0 && table == want.str(), os.str()};
}

Outcome greedy_gap() {
  const auto r = verify::greedy_vs_exhaustive(200, 9);
  return {r.passed, r.detail};
}

Outcome determinism() {
  const std::string cli = SURGEON_CLI, corp = SURGEON_CORPUS;
  std::vector<std::string> blobs[2];
  for (int k = 0; k < 2; ++k) {
    const fs::path dir = temp_dir("acceptance_det_" + std::to_string(k));
    const std::string quiet = " > /dev/null 2>&1";
    int code = sh(cli + " train --corpus " + corp + " --seed 4 --epochs 1 --batch-count 16 --seq-len 32 --out " +
                  (dir / "base").string() + quiet);
    code |= sh(cli + " prune --checkpoint " + (dir / "base").string() + " --corpus " + corp + " --out-dir " +
               (dir / "run").string() + " --mode structured --alpha 0.7 --shots 3 --lora --lora-steps 5 --seed 4" +
               " --seq-len 32 --batch-count 8 --batch-size 2" + quiet);
    code |= sh(cli + " report --shots " + (dir / "run" / "shots.jsonl").string() + " --out-dir " +
               (dir / "rep").string() + quiet);
    if (code != 0) return {false, "a CLI step failed in run " + std::to_string(k)};
    for (const char* f : {"base.bin", "base.json", "run/model.bin", "run/model.json", "run/shot_1.bin",
                          "run/shots.jsonl", "run/removal.json", "run/state.json", "rep/layers.csv", "rep/types.csv",
                          "rep/summary.json"})
      blobs[k].push_back(detail::read_all(dir / f));
  }
  const bool same = blobs[0] == blobs[1];
  std::size_t bytes = 0;
  for (const auto& b : blobs[0]) bytes += b.size();
  return {same, std::to_string(blobs[0].size()) + " artifacts (" + std::to_string(bytes) + " bytes) " +
                    (same ? "byte-identical" : "DIFFER") + " across two train+prune+report runs"};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"oracle equivalence", oracle_equivalence},
      {"quadratic exactness", quadratic_exactness},
      {"gradient checks", gradient_checks},
      {"nearest Kronecker", nearest_kronecker},
      {"mask validity", mask_validity},
      {"multi-shot benefit", multi_shot_benefit},
      {"method ordering", method_ordering},
      {"dynamic allocation", dynamic_allocation},
      {"greedy vs exhaustive", greedy_gap},
      {"determinism", determinism}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << (o.passed ? "PASS " : "FAIL ") << i + 1 << " " << criteria[i].first << ": " << o.detail << " ["
              << seconds_since(t0) << " s]" << std::endl;
  }
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
