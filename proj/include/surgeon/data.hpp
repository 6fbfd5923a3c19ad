#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "surgeon/checkpoint.hpp"
#include "surgeon/errors.hpp"
#include "surgeon/linalg.hpp"
#include "surgeon/model.hpp"

namespace surgeon {

using TokenMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One unit of data for forward_backward.
///
/// Language models: `tokens` is B x (S+1); position p of row b is predicted from
/// the tokens up to and including p, so every row yields S (sequence, position)
/// samples. Regression: `features` N x D and `targets` N x O.
struct Batch {
  LossKind loss = LossKind::cross_entropy;
  TokenMatrix tokens;
  Mat features;
  Mat targets;

  Index sample_count() const {
    if (loss == LossKind::squared_error) return features.rows();
    return tokens.rows() * std::max<Index>(tokens.cols() - 1, 0);
  }
};

enum class Split { train, test };

struct Corpus {
  std::string alphabet;  // sorted distinct bytes; token id = position in alphabet
  std::vector<int> train;
  std::vector<int> test;
};

struct BatchOptions {
  int seq_len = 64;
  int batch_count = 32;
  int batch_size = 1;  // sequences per batch
  std::uint64_t seed = 0;
};

/// Number of full next-token windows of length seq_len in n tokens.
inline std::size_t window_count(std::size_t n_tokens, int seq_len) {
  if (n_tokens < 1 || seq_len < 1) return 0;
  return (n_tokens - 1) / static_cast<std::size_t>(seq_len);
}

inline std::vector<int> tokenize(const std::string& text, const std::string& alphabet) {
  std::array<int, 256> lut;
  lut.fill(-1);
  for (std::size_t i = 0; i < alphabet.size(); ++i) lut[static_cast<unsigned char>(alphabet[i])] = static_cast<int>(i);
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char ch : text) {
    if (lut[ch] < 0)
      throw ConfigError("vocabulary mismatch: byte " + std::to_string(ch) + " is not in the model alphabet");
    out.push_back(lut[ch]);
  }
  return out;
}

/// Byte-level corpus. The alphabet is the set of bytes present in the file unless
/// one is supplied (e.g. from a checkpoint), in which case unknown bytes are an error.
/// The test split is the final `test_fraction` of the file.
inline Corpus load_corpus(const std::filesystem::path& path, double test_fraction = 0.1,
                          const std::string& alphabet = {}) {
  std::string text;
  try {
    text = detail::read_all(path);
  } catch (const IngestionError&) {
    throw IngestionError("corpus '" + path.string() + "' is not readable");
  }
  if (text.empty()) throw IngestionError("corpus '" + path.string() + "' is empty");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must be in [0, 1)");
  Corpus c;
  if (alphabet.empty()) {
    std::array<bool, 256> seen{};
    for (unsigned char ch : text) seen[ch] = true;
    for (int b = 0; b < 256; ++b)
      if (seen[b]) c.alphabet.push_back(static_cast<char>(b));
  } else {
    c.alphabet = alphabet;
  }
  const auto tokens = tokenize(text, c.alphabet);
  const auto n_test = static_cast<std::size_t>(test_fraction * static_cast<double>(tokens.size()));
  const auto n_train = tokens.size() - n_test;
  c.train.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n_train));
  c.test.assign(tokens.begin() + static_cast<std::ptrdiff_t>(n_train), tokens.end());
  return c;
}

/// Cuts a split into non-overlapping windows of seq_len + 1 tokens.
///
/// Train: windows are shuffled once with the seed and drawn without replacement,
/// at most batch_count batches of batch_size windows. Test: every window, in file
/// order, batch_size per batch.
inline std::vector<Batch> make_batches(const Corpus& corpus, Split split, const BatchOptions& opt) {
  if (opt.seq_len < 1 || opt.batch_size < 1 || opt.batch_count < 1)
    throw ConfigError("batch options must be positive");
  const auto& toks = split == Split::train ? corpus.train : corpus.test;
  const std::size_t n_windows = window_count(toks.size(), opt.seq_len);
  if (n_windows == 0)
    throw IngestionError(std::string(split == Split::train ? "train" : "test") +
                         " split is shorter than one sequence");
  std::vector<std::size_t> order(n_windows);
  for (std::size_t i = 0; i < n_windows; ++i) order[i] = i;
  std::size_t n_batches = (n_windows + opt.batch_size - 1) / opt.batch_size;
  if (split == Split::train) {
    Rng rng(opt.seed);
    shuffle(order, rng);
    n_batches = std::min<std::size_t>(n_windows / opt.batch_size, static_cast<std::size_t>(opt.batch_count));
    if (n_batches == 0) n_batches = 1;
  }
  std::vector<Batch> out;
  for (std::size_t b = 0; b < n_batches; ++b) {
    const std::size_t first = b * opt.batch_size;
    const std::size_t rows = std::min<std::size_t>(opt.batch_size, n_windows - first);
    Batch batch;
    batch.loss = LossKind::cross_entropy;
    batch.tokens.resize(static_cast<Index>(rows), opt.seq_len + 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t start = order[first + r] * opt.seq_len;
      for (int p = 0; p <= opt.seq_len; ++p) batch.tokens(static_cast<Index>(r), p) = toks[start + p];
    }
    out.push_back(std::move(batch));
  }
  return out;
}

/// Concatenates LM batches (same sequence length) into one.
inline Batch concat_batches(const std::vector<Batch>& batches) {
  if (batches.empty()) throw ConfigError("no batches to concatenate");
  Batch out;
  out.loss = batches.front().loss;
  if (out.loss == LossKind::squared_error) {
    Index n = 0;
    for (const auto& b : batches) n += b.features.rows();
    out.features.resize(n, batches.front().features.cols());
    out.targets.resize(n, batches.front().targets.cols());
    Index at = 0;
    for (const auto& b : batches) {
      out.features.middleRows(at, b.features.rows()) = b.features;
      out.targets.middleRows(at, b.targets.rows()) = b.targets;
      at += b.features.rows();
    }
    return out;
  }
  Index rows = 0;
  for (const auto& b : batches) {
    if (b.tokens.cols() != batches.front().tokens.cols()) throw ConfigError("batches differ in sequence length");
    rows += b.tokens.rows();
  }
  out.tokens.resize(rows, batches.front().tokens.cols());
  Index at = 0;
  for (const auto& b : batches) {
    out.tokens.middleRows(at, b.tokens.rows()) = b.tokens;
    at += b.tokens.rows();
  }
  return out;
}

}  // namespace surgeon
