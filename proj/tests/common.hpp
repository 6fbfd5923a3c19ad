#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "surgeon/data.hpp"
#include "surgeon/harness.hpp"
#include "surgeon/linalg.hpp"
#include "surgeon/model.hpp"
#include "surgeon/train.hpp"

namespace testing_util {

using namespace surgeon;

inline ModelConfig tiny_mlp(int vocab = 6) {
  ModelConfig c;
  c.arch = Arch::mlp_lm;
  c.vocab_size = vocab;
  c.context = 2;
  c.hidden_dims = {5, 4};
  return c;
}

inline ModelConfig tiny_transformer(int vocab = 6) {
  ModelConfig c;
  c.arch = Arch::transformer_lm;
  c.vocab_size = vocab;
  c.d_model = 4;
  c.ff_dim = 6;
  c.max_seq_len = 8;
  return c;
}

inline ModelConfig tiny_regression(std::vector<int> hidden = {5}, int in = 4, int out = 3) {
  ModelConfig c;
  c.arch = Arch::regression;
  c.input_dim = in;
  c.output_dim = out;
  c.hidden_dims = std::move(hidden);
  return c;
}

inline Batch random_token_batch(int vocab, Index rows, Index seq_len, std::uint64_t seed) {
  Rng rng(seed);
  Batch b;
  b.loss = LossKind::cross_entropy;
  b.tokens.resize(rows, seq_len + 1);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c <= seq_len; ++c) b.tokens(r, c) = static_cast<int>(rng.below(vocab));
  return b;
}

inline Batch random_regression_batch(Index n, Index in, Index out, std::uint64_t seed) {
  Rng rng(seed);
  Batch b;
  b.loss = LossKind::squared_error;
  b.features = random_normal(n, in, rng);
  b.targets = random_normal(n, out, rng);
  return b;
}

/// Desk-scale character LM used by the end-to-end tests.
inline ModelConfig small_char_mlp(const std::string& alphabet) {
  ModelConfig c;
  c.arch = Arch::mlp_lm;
  c.alphabet = alphabet;
  c.vocab_size = static_cast<int>(alphabet.size());
  c.context = 4;
  c.embed_dim = 16;
  c.hidden_dims = {24};
  return c;
}

/// Small character LM trained briefly on `corpus`; the fixture for end-to-end tests.
inline Model trained_char_lm(const Corpus& corpus, std::uint64_t seed, int epochs = 2) {
  TrainConfig tc;
  tc.model = small_char_mlp(corpus.alphabet);
  tc.seed = seed;
  tc.epochs = epochs;
  tc.lr = 1e-2;
  tc.seq_len = 32;
  tc.batch_count = 32;
  tc.batch_size = 4;
  return train_model(build_model(tc.model, seed), corpus, tc).model;
}

struct GradCheck {
  int checked = 0;
  double worst = 0.0;  // worst relative error
  std::string worst_at;
};

/// Central differences (step h) on up to `per_tensor` random entries of every
/// weight and aux tensor. Relative error uses max(|fd|, |analytic|, 1e-6).
inline GradCheck grad_check(const Model& model, const Batch& batch, int per_tensor, std::uint64_t seed,
                            double h = 1e-5) {
  const PassResult base = forward_backward(model, batch, PassOptions{true, false});
  Rng rng(seed);
  GradCheck out;
  Model m = model;
  auto probe = [&](Mat& p, const Mat& grad, const std::string& name) {
    const int count = std::min<int>(per_tensor, static_cast<int>(p.size()));
    for (int i = 0; i < count; ++i) {
      const Index k = static_cast<Index>(rng.below(p.size()));
      const Index r = k / p.cols(), c = k % p.cols();
      const double orig = p(r, c);
      p(r, c) = orig + h;
      const double lp = evaluate_loss(m, batch);
      p(r, c) = orig - h;
      const double lm = evaluate_loss(m, batch);
      p(r, c) = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = grad(r, c);
      const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      ++out.checked;
      if (err > out.worst) {
        out.worst = err;
        out.worst_at = name + "(" + std::to_string(r) + "," + std::to_string(c) + ")";
      }
    }
  };
  for (std::size_t i = 0; i < m.layers.size(); ++i) probe(m.layers[i].weight, base.weight_grads[i], m.layers[i].name);
  for (std::size_t i = 0; i < m.aux.size(); ++i) probe(m.aux[i].value, base.aux_grads[i], m.aux[i].name);
  return out;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("surgeon_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_util
