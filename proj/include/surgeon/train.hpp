#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "surgeon/checkpoint.hpp"
#include "surgeon/data.hpp"
#include "surgeon/errors.hpp"
#include "surgeon/harness.hpp"
#include "surgeon/model.hpp"

namespace surgeon {

struct TrainConfig {
  ModelConfig model{};
  std::uint64_t seed = 0;
  int epochs = 8;
  double lr = 3e-3;  // Adam
  int seq_len = 64;
  int batch_count = 64;
  int batch_size = 4;
  double test_fraction = 0.1;
  std::string corpus;
};

inline Json to_json(const TrainConfig& c) {
  return Json{{"model", config_to_json(c.model)},
              {"seed", c.seed},
              {"epochs", c.epochs},
              {"lr", c.lr},
              {"seq_len", c.seq_len},
              {"batch_count", c.batch_count},
              {"batch_size", c.batch_size},
              {"test_fraction", c.test_fraction},
              {"corpus", c.corpus}};
}

inline TrainConfig train_config_from_json(const Json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c = base;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "model") c.model = config_from_json(v);
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "seq_len") c.seq_len = v.get<int>();
      else if (key == "batch_count") c.batch_count = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "test_fraction") c.test_fraction = v.get<double>();
      else if (key == "corpus") c.corpus = v.get<std::string>();
      else throw ConfigError("unknown train config key '" + key + "'");
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid train config value: ") + e.what());
  }
  return c;
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;  // mean over the epoch's batches, measured before each step
  double test_loss = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
};

namespace detail {

struct AdamSlot {
  Mat m, v;
};

inline void adam_step(Mat& p, const Mat& g, AdamSlot& s, double lr, int t) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (s.m.size() == 0) {
    s.m = Mat::Zero(p.rows(), p.cols());
    s.v = Mat::Zero(p.rows(), p.cols());
  }
  s.m = b1 * s.m + (1.0 - b1) * g;
  s.v = b2 * s.v + (1.0 - b2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  p.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps);
}

}  // namespace detail

/// Adam over every parameter; a fresh shuffle of training windows each epoch.
inline TrainResult train_model(Model model, const Corpus& corpus, const TrainConfig& cfg) {
  if (cfg.epochs < 0 || !(cfg.lr > 0.0)) throw ConfigError("training needs epochs >= 0 and lr > 0");
  TrainResult out;
  std::vector<detail::AdamSlot> wslots(model.layers.size()), aslots(model.aux.size());
  BatchOptions test_opt{cfg.seq_len, cfg.batch_count, cfg.batch_size, cfg.seed};
  const auto test = corpus.test.empty() ? std::vector<Batch>{} : make_batches(corpus, Split::test, test_opt);
  int step = 0;
  for (int e = 1; e <= cfg.epochs; ++e) {
    BatchOptions opt{cfg.seq_len, cfg.batch_count, cfg.batch_size, cfg.seed + static_cast<std::uint64_t>(e)};
    const auto batches = make_batches(corpus, Split::train, opt);
    if (batches.empty()) throw IngestionError("corpus too short for one training window");
    double sum = 0.0;
    for (const auto& b : batches) {
      const PassResult r = forward_backward(model, b, PassOptions{true, false});
      if (!std::isfinite(r.loss)) throw NumericError("non-finite training loss at epoch " + std::to_string(e));
      sum += r.loss;
      ++step;
      for (std::size_t i = 0; i < model.layers.size(); ++i)
        detail::adam_step(model.layers[i].weight, r.weight_grads[i], wslots[i], cfg.lr, step);
      for (std::size_t i = 0; i < model.aux.size(); ++i)
        detail::adam_step(model.aux[i].value, r.aux_grads[i], aslots[i], cfg.lr, step);
    }
    EpochLog log{e, sum / static_cast<double>(batches.size()), test.empty() ? 0.0 : evaluate_loss(model, test)};
    if (!std::isfinite(log.test_loss)) throw NumericError("non-finite test loss at epoch " + std::to_string(e));
    out.log.push_back(log);
  }
  out.model = std::move(model);
  return out;
}

}  // namespace surgeon
