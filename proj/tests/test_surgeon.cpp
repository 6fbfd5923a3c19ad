#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "common.hpp"
#include "surgeon/report.hpp"
#include "surgeon/surgeon.hpp"

using namespace surgeon;
using namespace testing_util;

namespace {

const Corpus& char_corpus() {
  static const Corpus c = load_corpus(SURGEON_CORPUS);
  return c;
}

PruneConfig char_config(PruneMode mode, double alpha, int shots, std::uint64_t seed) {
  PruneConfig c;
  c.mode = mode;
  c.alpha = alpha;
  c.shots = shots;
  c.seed = seed;
  c.seq_len = 32;
  c.batch_count = 8;
  c.batch_size = 2;
  return c;
}

bool same_weights(const Model& a, const Model& b) {
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (a.layers[i].weight != b.layers[i].weight || a.layers[i].mask != b.layers[i].mask) return false;
  for (std::size_t i = 0; i < a.aux.size(); ++i)
    if (a.aux[i].value != b.aux[i].value) return false;
  return true;
}

PruneData regression_data(Index n, Index in, Index out, std::uint64_t seed) {
  return PruneData{random_regression_batch(n, in, out, seed), {random_regression_batch(n, in, out, seed + 100)}};
}

Index matrix_rank(const Mat& m) {
  Eigen::JacobiSVD<Mat> svd(m);
  Index r = 0;
  for (Index i = 0; i < svd.singularValues().size(); ++i) r += svd.singularValues()(i) > 1e-10;
  return r;
}

}  // namespace

TEST(Schedule, FortyShotsHitsIntermediateTargets) {
  const Schedule s = make_schedule(0.5, 40);
  ASSERT_EQ(s.shots(), 40);
  EXPECT_NEAR(s.alphas[8], 0.9, 1e-12);
  EXPECT_NEAR(s.alphas[16], 0.8, 1e-12);
  EXPECT_NEAR(s.alphas[24], 0.7, 1e-12);
  EXPECT_NEAR(s.alphas[32], 0.6, 1e-12);
  EXPECT_EQ(s.alphas[0], 1.0);
  EXPECT_EQ(s.target(), 0.5);
}

TEST(Schedule, SmallCases) {
  EXPECT_EQ(make_schedule(0.3, 1).alphas, (std::vector<double>{1.0, 0.3}));
  const Schedule s = make_schedule(0.9, 2);
  ASSERT_EQ(s.alphas.size(), 3u);
  EXPECT_NEAR(s.alphas[1], 0.95, 1e-12);
  EXPECT_EQ(s.alphas[2], 0.9);
  for (int t = 1; t <= 40; ++t) EXPECT_LT(make_schedule(0.5, 40).alphas[t], make_schedule(0.5, 40).alphas[t - 1]);
}

TEST(Schedule, OutOfRangeRejected) {
  EXPECT_THROW(make_schedule(0.0, 3), ConfigError);
  EXPECT_THROW(make_schedule(1.0, 3), ConfigError);
  EXPECT_THROW(make_schedule(0.5, 0), ConfigError);
  EXPECT_EQ(run_schedule(1.0, 3).alphas, std::vector<double>(4, 1.0));
}

TEST(RunShot, AlphaAtCurrentSizeIsNoOp) {
  const Model m = build_model(tiny_regression({5}), 1);
  PruneConfig c;
  const ShotResult r = run_shot(m, regression_data(20, 4, 3, 2), c, 1, 1.0);
  EXPECT_TRUE(same_weights(m, r.model));
  for (const auto& l : r.report.layers) {
    EXPECT_EQ(l.new_elements, 0);
    EXPECT_EQ(l.update_norm, 0.0);
  }
  EXPECT_EQ(r.report.train_loss_before, r.report.train_loss_after);
}

TEST(RunShot, MagnitudePruneOnlyZeroesSmallestWeights) {
  const Model m = build_model(tiny_regression({}, 4, 3), 2);
  PruneConfig c;
  c.policy = CostPolicy::magnitude;
  c.update.kind = UpdateKind::none;
  const ShotResult r = run_shot(m, regression_data(20, 4, 3, 3), c, 1, 0.5);
  const Mat& w0 = m.layers[0].weight;
  std::vector<double> mags(w0.data(), w0.data() + w0.size());
  for (auto& x : mags) x = std::abs(x);
  std::sort(mags.begin(), mags.end());
  const double cut = mags[5];  // six of twelve removed
  const Mat& w1 = r.model.layers[0].weight;
  for (Index k = 0; k < w0.size(); ++k) {
    if (std::abs(w0.data()[k]) <= cut) EXPECT_EQ(w1.data()[k], 0.0);
    else EXPECT_EQ(w1.data()[k], w0.data()[k]);
  }
}

TEST(RunShot, KobdWithoutUpdateLeavesSurvivorsUntouched) {
  const Model m = build_model(tiny_regression({6}), 4);
  PruneConfig c;
  c.policy = CostPolicy::k_obd;
  c.update.kind = UpdateKind::none;
  const ShotResult r = run_shot(m, regression_data(30, 4, 3, 5), c, 1, 0.6);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& l = r.model.layers[i];
    for (Index k = 0; k < l.weight.size(); ++k)
      EXPECT_EQ(l.weight.data()[k], l.mask.data()[k] == 0.0 ? 0.0 : m.layers[i].weight.data()[k]);
  }
  EXPECT_NEAR(r.report.realized_size, r.selection.realized_size, 1e-15);
}

TEST(Run, StructuredQuarterOfSquareLayerRemovesOneStructure) {
  const Model m = build_model(tiny_regression({}, 4, 4), 6);
  PruneConfig c;
  c.mode = PruneMode::structured;
  c.alpha = 0.75;
  c.shots = 1;
  const RunResult r = run(m, regression_data(25, 4, 4, 7), c);
  const Mat& mask = r.model.layers[0].mask;
  EXPECT_EQ(mask.size() - mask.sum(), 4.0);
  const Index zero_rows = (mask.rowwise().sum().array() == 0.0).count();
  const Index zero_cols = (mask.colwise().sum().array() == 0.0).count();
  EXPECT_EQ(zero_rows + zero_cols, 1);
}

TEST(Run, AlphaOneLeavesModelUnchanged) {
  const Model m = build_model(tiny_mlp(6), 3);
  PruneConfig c;
  c.alpha = 1.0;
  c.shots = 3;
  const RunResult r = run(m, PruneData{random_token_batch(6, 3, 6, 1), {}}, c);
  EXPECT_TRUE(same_weights(m, r.model));
  EXPECT_EQ(r.reports.size(), 3u);
}

TEST(Run, TwoShotsToPointEightOnCharLm) {
  const Model m = trained_char_lm(char_corpus(), 1, 1);
  const PruneConfig c = char_config(PruneMode::unstructured, 0.8, 2, 1);
  std::vector<Mat> prev;
  for (const auto& l : m.layers) prev.push_back(l.mask);
  const RunResult r = run(m, make_prune_data(char_corpus(), c), c, {}, [&](const Model& cur, const ShotReport&, const RunState&) {
    for (std::size_t i = 0; i < cur.layers.size(); ++i) {
      EXPECT_EQ((cur.layers[i].mask.array() > prev[i].array()).count(), 0) << "mask resurrected";
      prev[i] = cur.layers[i].mask;
    }
  });
  const double p = static_cast<double>(m.prunable_count());
  EXPECT_NEAR(r.model.realized_size(), 0.8, 1.0 / p + 1e-12);
  EXPECT_NEAR(r.reports[0].alpha_t, 0.9, 1e-12);
  ASSERT_TRUE(r.reports.back().test_loss.has_value());
  EXPECT_TRUE(std::isfinite(*r.reports.back().test_loss));
}

TEST(Run, MoreShotsNoWorseUnstructured) {
  std::vector<double> one, five;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Model m = trained_char_lm(char_corpus(), seed, 1);
    for (int shots : {1, 5}) {
      const PruneConfig c = char_config(PruneMode::unstructured, 0.5, shots, seed);
      const RunResult r = run(m, make_prune_data(char_corpus(), c), c);
      (shots == 1 ? one : five).push_back(*r.reports.back().test_loss);
    }
  }
  std::sort(one.begin(), one.end());
  std::sort(five.begin(), five.end());
  EXPECT_LE(five[2], one[2]) << "T=5 median " << five[2] << " vs T=1 median " << one[2];
}

TEST(Run, ResumeMatchesUninterruptedRun) {
  for (CurvatureKind ck : {CurvatureKind::kfac, CurvatureKind::nkp}) {
    const Model m = build_model(tiny_mlp(6), 9);
    PruneConfig c;
    c.alpha = 0.4;
    c.shots = 3;
    c.curvature = ck;
    const PruneData data{random_token_batch(6, 4, 6, 2), {random_token_batch(6, 2, 6, 3)}};
    const RunResult full = run(m, data, c);

    const auto dir = temp_dir("resume");
    run(m, data, c, {}, [&](const Model& cur, const ShotReport& rep, const RunState& s) {
      if (rep.shot == 1) {
        save_model(cur, dir / "shot_1");
        save_run_state(dir, s, c, "shot_1");
      }
    });
    const LoadedRunState loaded = load_run_state(dir);
    EXPECT_EQ(loaded.state.completed, 1);
    EXPECT_EQ(loaded.state.warm.empty(), ck == CurvatureKind::kfac);
    const RunResult resumed = run(load_model(dir / loaded.checkpoint_name), data, loaded.config, loaded.state);
    ASSERT_EQ(resumed.reports.size(), 2u);
    EXPECT_TRUE(same_weights(full.model, resumed.model));
    EXPECT_EQ(to_json(full.reports.back()).dump(), to_json(resumed.reports.back()).dump());
  }
}

TEST(Lora, ZeroStepsIsIdentity) {
  const Model m = build_model(tiny_regression({5}), 1);
  const Batch b = random_regression_batch(10, 4, 3, 1);
  LoraConfig c;
  c.steps = 0;
  const LoraOutcome o = lora_correct(m, b, c, 1);
  EXPECT_TRUE(same_weights(m, o.model));
  EXPECT_EQ(o.loss_before, o.loss_after);
}

TEST(Lora, FullRankTracksGradientDescentOnRegression) {
  const Model m = build_model(tiny_regression({}, 4, 3), 2);
  const Batch b = random_regression_batch(64, 4, 3, 2);
  LoraConfig c;
  c.rank = 3;
  c.steps = 2000;
  c.lr = 0.05;
  const LoraOutcome o = lora_correct(m, b, c, 3);
  ASSERT_FALSE(o.reverted);

  Model gd = m;
  for (int s = 0; s < c.steps; ++s) {
    const PassResult r = forward_backward(gd, b, PassOptions{true, false});
    gd.layers[0].weight -= c.lr * r.weight_grads[0];
  }
  const double gd_loss = evaluate_loss(gd, b);
  EXPECT_LT(o.loss_after, o.loss_before);
  EXPECT_LE(std::abs(o.loss_after - gd_loss), 1e-3 * (o.loss_before - gd_loss));
}

TEST(Lora, CumulativeCorrectionRankGrows) {
  Model m = build_model(tiny_regression({}, 6, 5), 3);
  const Batch b = random_regression_batch(40, 6, 5, 3);
  LoraConfig c;
  c.rank = 1;
  c.steps = 30;
  c.lr = 0.05;
  const LoraOutcome first = lora_correct(m, b, c, 11);
  const LoraOutcome second = lora_correct(first.model, b, c, 12);
  ASSERT_FALSE(first.reverted);
  ASSERT_FALSE(second.reverted);
  const Mat d1 = first.corrections[0].second, d2 = second.corrections[0].second;
  EXPECT_EQ(matrix_rank(d1), 1);
  EXPECT_EQ(matrix_rank(d2), 1);
  EXPECT_GE(matrix_rank(d1 + d2), std::max(matrix_rank(d1), matrix_rank(d2)));
  EXPECT_LE((second.model.layers[0].weight - m.layers[0].weight - d1 - d2).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Lora, MaskedCellsStayZero) {
  Model m = build_model(tiny_regression({}, 4, 4), 4);
  m.layers[0].mask(1, 2) = 0.0;
  m.layers[0].mask.row(3).setZero();
  m.layers[0].apply_mask();
  LoraConfig c;
  c.steps = 20;
  c.lr = 0.05;
  const LoraOutcome o = lora_correct(m, random_regression_batch(30, 4, 4, 4), c, 5);
  EXPECT_EQ(o.model.layers[0].mask, m.layers[0].mask);
  EXPECT_EQ(o.model.layers[0].weight(1, 2), 0.0);
  EXPECT_EQ(o.model.layers[0].weight.row(3).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Lora, InShotReportsApplication) {
  const Model m = build_model(tiny_regression({5}), 5);
  PruneConfig c;
  c.lora.enabled = true;
  c.lora.steps = 10;
  const ShotResult r = run_shot(m, regression_data(30, 4, 3, 6), c, 1, 0.7);
  EXPECT_TRUE(r.report.lora_applied);
  EXPECT_LE(r.report.train_loss_final, r.report.train_loss_after + 1e-6);
  EXPECT_NEAR(r.model.realized_size(), r.selection.realized_size, 1e-15);
}

TEST(Report, SingleLayerSummary) {
  const Model m = build_model(tiny_regression({}, 4, 4), 6);
  PruneConfig c;
  c.alpha = 0.5;
  c.shots = 1;
  const RunResult r = run(m, regression_data(20, 4, 4, 7), c);
  const SparsitySummary s = summarize(r.reports);
  ASSERT_EQ(s.layers.size(), 1u);
  ASSERT_EQ(s.types.size(), 1u);
  EXPECT_EQ(s.types[0].type, "fully-connected");
  EXPECT_EQ(s.removed, 8);
  EXPECT_EQ(s.global_sparsity, 0.5);
  std::ostringstream os;
  write_layer_csv(os, s);
  EXPECT_EQ(os.str(), "depth,layer,type,rows,cols,total,removed,sparsity,removed_rows,removed_cols\n0,out,fully-connected,4,4,16,8,0.5," +
                          std::to_string(s.layers[0].removed_rows) + "," + std::to_string(s.layers[0].removed_cols) + "\n");
}

TEST(Report, TypeContributionsSumToGlobal) {
  const Model m = build_model(tiny_transformer(6), 7);
  PruneConfig c;
  c.alpha = 0.6;
  c.shots = 2;
  const RunResult r = run(m, PruneData{random_token_batch(6, 3, 6, 8), {}}, c);
  const SparsitySummary s = summarize(r.reports);
  double sum = 0.0;
  std::int64_t removed = 0;
  for (const auto& t : s.types) {
    sum += t.contribution;
    removed += t.removed;
  }
  EXPECT_NEAR(sum, s.global_sparsity, 1e-12);
  EXPECT_EQ(removed, s.removed);
  EXPECT_EQ(s.types[0].type, "attention");

  std::stringstream jsonl;
  for (const auto& rep : r.reports) jsonl << to_json(rep).dump() << '\n';
  const auto back = read_shot_reports(jsonl);
  ASSERT_EQ(back.size(), r.reports.size());
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(to_json(back[i]).dump(), to_json(r.reports[i]).dump());
}

TEST(Config, JsonRoundTripAndDefaults) {
  PruneConfig c;
  c.mode = PruneMode::semi_2_4;
  c.lora.enabled = true;
  c.seed = 17;
  const PruneConfig back = prune_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());

  const PruneConfig s = prune_config_from_json(Json{{"mode", "structured"}});
  EXPECT_EQ(s.shots, 10);
  EXPECT_EQ(s.resolved_damp_g(), 0.1);
  EXPECT_EQ(prune_config_from_json(Json{{"mode", "structured"}, {"shots", 3}}).shots, 3);
  EXPECT_EQ(PruneConfig{}.resolved_damp_g(), 0.01);
  EXPECT_THROW(prune_config_from_json(Json{{"alpah", 0.5}}), ConfigError);
  EXPECT_THROW(prune_config_from_json(Json{{"alpha", "half"}}), ConfigError);
  PruneConfig bad;
  bad.alpha = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
}
