#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <string>

#include "common.hpp"
#include "surgeon/checkpoint.hpp"
#include "surgeon/data.hpp"
#include "surgeon/harness.hpp"
#include "surgeon/model.hpp"

using namespace surgeon;
using namespace testing_util;

namespace {

bool same_weights(const Model& a, const Model& b) {
  if (a.layers.size() != b.layers.size() || a.aux.size() != b.aux.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (a.layers[i].weight != b.layers[i].weight || a.layers[i].mask != b.layers[i].mask) return false;
  for (std::size_t i = 0; i < a.aux.size(); ++i)
    if (a.aux[i].value != b.aux[i].value) return false;
  return true;
}

}  // namespace

TEST(BuildModel, MlpShapesCompose) {
  ModelConfig c;
  c.hidden_dims = {32, 32};
  const Model m = build_model(c, 7);
  ASSERT_EQ(m.layers.size(), 4u);
  for (const auto& l : m.layers) EXPECT_TRUE(l.prunable);
  for (std::size_t i = 1; i < m.layers.size(); ++i) EXPECT_EQ(m.layers[i].cols(), m.layers[i - 1].rows());
  EXPECT_EQ(m.layers.front().cols(), 27 * c.context);
  EXPECT_EQ(m.layers.back().rows(), 27);
  EXPECT_NO_THROW(validate_model(m));
}

TEST(BuildModel, SameSeedIsBitIdentical) {
  const Model a = build_model(ModelConfig{}, 7), b = build_model(ModelConfig{}, 7), c = build_model(ModelConfig{}, 8);
  EXPECT_TRUE(same_weights(a, b));
  EXPECT_FALSE(same_weights(a, c));
}

TEST(BuildModel, TransformerHasPrunableProjections) {
  ModelConfig c;
  c.arch = Arch::transformer_lm;
  const Model m = build_model(c, 1);
  for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"}) {
    EXPECT_TRUE(m.layer(n).prunable) << n;
  }
  EXPECT_EQ(m.layer("attn.q").kind, LayerKind::attention_projection);
  EXPECT_EQ(m.layer("mlp.up").kind, LayerKind::linear);
}

TEST(BuildModel, InvalidDimsRejected) {
  ModelConfig c;
  c.hidden_dims = {0};
  EXPECT_THROW(build_model(c, 0), ConfigError);
  c = ModelConfig{};
  c.vocab_size = 1;
  EXPECT_THROW(build_model(c, 0), ConfigError);
}

TEST(ForwardBackward, SingleLinearSampleGradientIsOuterProduct) {
  Model m = build_model(tiny_regression({}, 3, 2), 3);
  const Batch b = random_regression_batch(1, 3, 2, 4);
  const PassResult r = forward_backward(m, b);
  const Mat y = b.features * m.layer("out").weight.transpose();
  const Mat g = (y - b.targets).transpose();  // R x 1
  const Mat want = g * b.features;             // g a^T
  EXPECT_EQ(r.weight_grads[0], want);
  EXPECT_DOUBLE_EQ(r.loss, 0.5 * (y - b.targets).squaredNorm());
}

TEST(ForwardBackward, ZeroWeightsGiveLogVocab) {
  for (auto cfg : {tiny_mlp(6)}) {
    Model m = build_model(cfg, 1);
    for (auto& l : m.layers) l.weight.setZero();
    const Batch b = random_token_batch(6, 3, 5, 2);
    EXPECT_NEAR(evaluate_loss(m, b), std::log(6.0), 1e-12);
  }
}

TEST(ForwardBackward, MlpGradientsMatchFiniteDifferences) {
  const Model m = build_model(tiny_mlp(), 11);
  const GradCheck gc = grad_check(m, random_token_batch(6, 2, 5, 3), 12, 5);
  EXPECT_LE(gc.worst, 1e-4) << gc.worst_at;
  EXPECT_GT(gc.checked, 50);
}

TEST(ForwardBackward, TransformerGradientsMatchFiniteDifferences) {
  const Model m = build_model(tiny_transformer(), 12);
  const GradCheck gc = grad_check(m, random_token_batch(6, 2, 6, 4), 10, 6);
  EXPECT_LE(gc.worst, 1e-4) << gc.worst_at;
  EXPECT_GT(gc.checked, 100);
}

TEST(ForwardBackward, RegressionGradientsMatchFiniteDifferences) {
  const Model m = build_model(tiny_regression({5, 4}), 13);
  const GradCheck gc = grad_check(m, random_regression_batch(7, 4, 3, 5), 15, 7);
  EXPECT_LE(gc.worst, 1e-4) << gc.worst_at;
}

TEST(ForwardBackward, TapesReproduceWeightGradients) {
  const Model models[] = {build_model(tiny_mlp(), 1), build_model(tiny_transformer(), 2),
                          build_model(tiny_regression({5}), 3)};
  const Batch batches[] = {random_token_batch(6, 3, 7, 1), random_token_batch(6, 2, 8, 2),
                           random_regression_batch(9, 4, 3, 3)};
  for (int k = 0; k < 3; ++k) {
    const PassResult r = forward_backward(models[k], batches[k]);
    ASSERT_EQ(r.tapes.size(), models[k].layers.size());
    for (std::size_t i = 0; i < r.tapes.size(); ++i) {
      const LayerTape& t = r.tapes[i];
      EXPECT_EQ(t.sample_count(), batches[k].sample_count());
      const Mat rebuilt = t.out_grads.transpose() * t.activations / static_cast<double>(t.sample_count());
      EXPECT_LE((rebuilt - r.weight_grads[i]).cwiseAbs().maxCoeff(), 1e-10) << t.layer_name;
    }
  }
}

TEST(ForwardBackward, MismatchedBatchIsHarnessError) {
  const Model m = build_model(tiny_mlp(6), 1);
  EXPECT_THROW(forward_backward(m, random_regression_batch(3, 4, 3, 1)), HarnessError);
  Batch b = random_token_batch(6, 1, 4, 1);
  b.tokens(0, 2) = 6;
  EXPECT_THROW(forward_backward(m, b), HarnessError);
  const Model t = build_model(tiny_transformer(6), 1);
  EXPECT_THROW(forward_backward(t, random_token_batch(6, 1, 9, 1)), HarnessError);  // longer than max_seq_len
}

TEST(ForwardBackward, DeterministicTapes) {
  const Model m = build_model(tiny_transformer(), 5);
  const Batch b = random_token_batch(6, 2, 6, 9);
  const PassResult a = forward_backward(m, b), c = forward_backward(m, b);
  EXPECT_EQ(a.loss, c.loss);
  for (std::size_t i = 0; i < a.tapes.size(); ++i) {
    EXPECT_EQ(a.tapes[i].activations, c.tapes[i].activations);
    EXPECT_EQ(a.tapes[i].out_grads, c.tapes[i].out_grads);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = temp_dir("ckpt");
  Model m = build_model(tiny_transformer(), 3);
  m.layers[1].mask(0, 0) = 0.0;
  m.layers[1].apply_mask();
  m.layers[2].weight(1, 1) = -0.0;
  m.layers[2].weight(0, 1) = 1e-310;  // subnormal
  save_model(m, dir / "m");
  const Model back = load_model(dir / "m");
  EXPECT_TRUE(same_weights(m, back));
  EXPECT_EQ(std::signbit(back.layers[2].weight(1, 1)), true);
  save_model(back, dir / "m2");
  EXPECT_EQ(detail::read_all(dir / "m.bin"), detail::read_all(dir / "m2.bin"));
  Json a = Json::parse(detail::read_all(dir / "m.json")), b = Json::parse(detail::read_all(dir / "m2.json"));
  EXPECT_EQ(a["blob"], "m.bin");
  a.erase("blob");
  b.erase("blob");
  EXPECT_EQ(a, b);
}

TEST(Checkpoint, ManifestDescribesTensors) {
  const auto dir = temp_dir("manifest");
  save_model(build_model(tiny_mlp(), 1), dir / "m");
  const Json j = Json::parse(detail::read_all(dir / "m.json"));
  ASSERT_TRUE(j.contains("tensors"));
  std::int64_t expect_offset = 0;
  for (const auto& t : j["tensors"]) {
    EXPECT_EQ(t["dtype"], "f64");
    EXPECT_EQ(t["offset"].get<std::int64_t>(), expect_offset);
    expect_offset += t["length"].get<std::int64_t>();
  }
  EXPECT_EQ(static_cast<std::int64_t>(detail::read_all(dir / "m.bin").size()), expect_offset);
}

TEST(Checkpoint, TruncatedBlobRejected) {
  const auto dir = temp_dir("trunc");
  save_model(build_model(tiny_mlp(), 1), dir / "m");
  std::filesystem::resize_file(dir / "m.bin", 16);
  EXPECT_THROW(load_model(dir / "m"), IngestionError);
}

TEST(Corpus, WindowCountArithmetic) {
  EXPECT_EQ(window_count(1024, 64), (1024u - 1) / 64);
  EXPECT_EQ(window_count(0, 64), 0u);
}

TEST(Corpus, SplitsAreDisjointTail) {
  const auto dir = temp_dir("corpus");
  std::string text;
  for (int i = 0; i < 1024; ++i) text += static_cast<char>('a' + i % 7);
  std::ofstream(dir / "c.txt") << text;
  const Corpus c = load_corpus(dir / "c.txt", 0.25);
  EXPECT_EQ(c.train.size() + c.test.size(), 1024u);
  EXPECT_EQ(c.test.size(), 256u);
  const auto all = tokenize(text, c.alphabet);
  EXPECT_TRUE(std::equal(c.test.begin(), c.test.end(), all.end() - 256));
  const auto train = make_batches(c, Split::train, BatchOptions{64, 1000, 1, 3});
  EXPECT_EQ(train.size(), window_count(c.train.size(), 64));
}

TEST(Corpus, SameSeedSameStream) {
  const auto dir = temp_dir("stream");
  std::string text;
  for (int i = 0; i < 3000; ++i) text += static_cast<char>('a' + (i * 7 + i / 13) % 11);
  std::ofstream(dir / "c.txt") << text;
  const Corpus c = load_corpus(dir / "c.txt");
  const auto a = make_batches(c, Split::train, BatchOptions{16, 8, 2, 42});
  const auto b = make_batches(c, Split::train, BatchOptions{16, 8, 2, 42});
  const auto d = make_batches(c, Split::train, BatchOptions{16, 8, 2, 43});
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    differs = differs || a[i].tokens != d[i].tokens;
  }
  EXPECT_TRUE(differs);
}

TEST(Corpus, EmptyFileIsIngestionError) {
  const auto dir = temp_dir("empty");
  std::ofstream(dir / "e.txt").close();
  EXPECT_THROW(load_corpus(dir / "e.txt"), IngestionError);
  EXPECT_THROW(load_corpus(dir / "missing.txt"), IngestionError);
}

TEST(Corpus, VocabularyMismatchRejected) {
  EXPECT_THROW(tokenize("abcz", "abc"), ConfigError);
}
