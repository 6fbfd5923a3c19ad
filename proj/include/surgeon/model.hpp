#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "surgeon/checkpoint.hpp"
#include "surgeon/errors.hpp"
#include "surgeon/linalg.hpp"

namespace surgeon {

enum class Arch { mlp_lm, transformer_lm, regression };
enum class LayerKind { embedding, linear, attention_projection };
enum class LossKind { cross_entropy, squared_error };

inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::mlp_lm: return "mlp";
    case Arch::transformer_lm: return "transformer";
    case Arch::regression: return "regression";
  }
  return "?";
}

inline Arch arch_from_string(const std::string& s) {
  if (s == "mlp") return Arch::mlp_lm;
  if (s == "transformer") return Arch::transformer_lm;
  if (s == "regression") return Arch::regression;
  throw ConfigError("unknown architecture '" + s + "'");
}

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::embedding: return "embedding";
    case LayerKind::linear: return "linear";
    case LayerKind::attention_projection: return "attention-projection";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "embedding") return LayerKind::embedding;
  if (s == "linear") return LayerKind::linear;
  if (s == "attention-projection") return LayerKind::attention_projection;
  throw IngestionError("unknown layer kind '" + s + "'");
}

struct ModelConfig {
  Arch arch = Arch::mlp_lm;
  int vocab_size = 27;
  std::string alphabet;           // byte alphabet, vocab_size symbols (LMs only)
  int context = 4;                // mlp: tokens of left context
  int embed_dim = 0;              // mlp: 0 means hidden_dims[0]
  std::vector<int> hidden_dims{32, 32};
  int d_model = 32;               // transformer
  int ff_dim = 64;                // transformer
  int max_seq_len = 64;           // transformer positional table
  int input_dim = 8;              // regression
  int output_dim = 4;             // regression
  bool tanh_hidden = true;        // regression: tanh between layers

  int resolved_embed_dim() const {
    return embed_dim > 0 ? embed_dim : (hidden_dims.empty() ? 0 : hidden_dims.front());
  }
  LossKind loss_kind() const {
    return arch == Arch::regression ? LossKind::squared_error : LossKind::cross_entropy;
  }
};

struct Layer {
  std::string name;
  LayerKind kind = LayerKind::linear;
  Mat weight;   // R x C, y = W a
  Mat mask;     // 1 = live, 0 = pruned; same shape as weight
  bool prunable = true;

  Index rows() const { return weight.rows(); }
  Index cols() const { return weight.cols(); }
  void apply_mask() { weight = weight.cwiseProduct(mask); }
};

/// Non-prunable parameters: biases, layer-norm gains/offsets, positional table.
struct AuxParam {
  std::string name;
  Mat value;
};

struct Model {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<Layer> layers;
  std::vector<AuxParam> aux;

  Layer& layer(const std::string& name) {
    for (auto& l : layers)
      if (l.name == name) return l;
    throw ConfigError("no layer named '" + name + "'");
  }
  const Layer& layer(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return l;
    throw ConfigError("no layer named '" + name + "'");
  }
  Mat& param(const std::string& name) {
    for (auto& p : aux)
      if (p.name == name) return p.value;
    throw ConfigError("no parameter named '" + name + "'");
  }
  const Mat& param(const std::string& name) const {
    for (const auto& p : aux)
      if (p.name == name) return p.value;
    throw ConfigError("no parameter named '" + name + "'");
  }

  std::int64_t prunable_count() const {
    std::int64_t n = 0;
    for (const auto& l : layers)
      if (l.prunable) n += l.weight.size();
    return n;
  }
  std::int64_t live_prunable_count() const {
    std::int64_t n = 0;
    for (const auto& l : layers)
      if (l.prunable) n += static_cast<std::int64_t>(l.mask.sum());
    return n;
  }
  /// Fraction of prunable weights still live.
  double realized_size() const {
    const auto p = prunable_count();
    return p == 0 ? 1.0 : static_cast<double>(live_prunable_count()) / static_cast<double>(p);
  }
  std::int64_t total_parameter_count() const {
    std::int64_t n = 0;
    for (const auto& l : layers) n += l.weight.size();
    for (const auto& p : aux) n += p.value.size();
    return n;
  }
};

/// Uniform draws from raw 64-bit engine output so streams do not depend on the
/// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    // Box-Muller; one draw per call keeps the stream simple to reason about.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }
  std::uint64_t next() { return engine_(); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

inline Mat random_uniform(Index rows, Index cols, double scale, Rng& rng) {
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-scale, scale);
  return m;
}

inline Mat random_normal(Index rows, Index cols, Rng& rng) {
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

namespace detail {

inline Layer make_layer(std::string name, LayerKind kind, Index rows, Index cols, double scale, Rng& rng) {
  Layer l;
  l.name = std::move(name);
  l.kind = kind;
  l.weight = random_uniform(rows, cols, scale, rng);
  l.mask = Mat::Ones(rows, cols);
  l.prunable = true;
  return l;
}

inline void validate_config(const ModelConfig& c) {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + what + " must be positive");
  };
  for (int h : c.hidden_dims) positive(h, "hidden dims");
  switch (c.arch) {
    case Arch::mlp_lm:
      if (c.vocab_size < 2) throw ConfigError("model config: vocab_size must be at least 2");
      positive(c.context, "context");
      if (c.hidden_dims.empty()) throw ConfigError("model config: mlp needs at least one hidden dim");
      positive(c.resolved_embed_dim(), "embed_dim");
      break;
    case Arch::transformer_lm:
      if (c.vocab_size < 2) throw ConfigError("model config: vocab_size must be at least 2");
      positive(c.d_model, "d_model");
      positive(c.ff_dim, "ff_dim");
      positive(c.max_seq_len, "max_seq_len");
      break;
    case Arch::regression:
      positive(c.input_dim, "input_dim");
      positive(c.output_dim, "output_dim");
      break;
  }
  if (!c.alphabet.empty() && static_cast<int>(c.alphabet.size()) != c.vocab_size)
    throw ConfigError("model config: alphabet size differs from vocab_size");
}

}  // namespace detail

/// Deterministic initialization: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for dense
/// layers; embeddings use uniform(-1, 1)/sqrt(context) so one-hot inputs see unit scale.
inline Model build_model(const ModelConfig& config, std::uint64_t seed) {
  detail::validate_config(config);
  Model m;
  m.config = config;
  m.seed = seed;
  Rng rng(seed);
  auto dense_scale = [](Index fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
  switch (config.arch) {
    case Arch::mlp_lm: {
      const Index emb = config.resolved_embed_dim();
      const Index in = static_cast<Index>(config.vocab_size) * config.context;
      m.layers.push_back(detail::make_layer("embed", LayerKind::embedding, emb, in,
                                            1.0 / std::sqrt(static_cast<double>(config.context)), rng));
      Index prev = emb;
      for (std::size_t i = 0; i < config.hidden_dims.size(); ++i) {
        const Index h = config.hidden_dims[i];
        m.layers.push_back(detail::make_layer("fc" + std::to_string(i), LayerKind::linear, h, prev,
                                              dense_scale(prev), rng));
        m.aux.push_back({"fc" + std::to_string(i) + ".bias", Mat::Zero(h, 1)});
        prev = h;
      }
      m.layers.push_back(detail::make_layer("head", LayerKind::linear, config.vocab_size, prev,
                                            dense_scale(prev), rng));
      m.aux.push_back({"head.bias", Mat::Zero(config.vocab_size, 1)});
      break;
    }
    case Arch::transformer_lm: {
      const Index d = config.d_model, f = config.ff_dim, v = config.vocab_size;
      Layer embed = detail::make_layer("embed", LayerKind::embedding, d, v, 1.0, rng);
      embed.prunable = false;
      m.layers.push_back(std::move(embed));
      for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o"})
        m.layers.push_back(detail::make_layer(n, LayerKind::attention_projection, d, d, dense_scale(d), rng));
      m.layers.push_back(detail::make_layer("mlp.up", LayerKind::linear, f, d, dense_scale(d), rng));
      m.layers.push_back(detail::make_layer("mlp.down", LayerKind::linear, d, f, dense_scale(f), rng));
      Layer head = detail::make_layer("head", LayerKind::linear, v, d, dense_scale(d), rng);
      head.prunable = false;
      m.layers.push_back(std::move(head));
      m.aux.push_back({"pos", random_uniform(config.max_seq_len, d, 0.1, rng)});
      m.aux.push_back({"ln1.gain", Mat::Ones(d, 1)});
      m.aux.push_back({"ln1.bias", Mat::Zero(d, 1)});
      m.aux.push_back({"ln2.gain", Mat::Ones(d, 1)});
      m.aux.push_back({"ln2.bias", Mat::Zero(d, 1)});
      m.aux.push_back({"mlp.up.bias", Mat::Zero(f, 1)});
      m.aux.push_back({"mlp.down.bias", Mat::Zero(d, 1)});
      m.aux.push_back({"lnf.gain", Mat::Ones(d, 1)});
      m.aux.push_back({"lnf.bias", Mat::Zero(d, 1)});
      m.aux.push_back({"head.bias", Mat::Zero(v, 1)});
      break;
    }
    case Arch::regression: {
      Index prev = config.input_dim;
      for (std::size_t i = 0; i < config.hidden_dims.size(); ++i) {
        const Index h = config.hidden_dims[i];
        m.layers.push_back(detail::make_layer("fc" + std::to_string(i), LayerKind::linear, h, prev,
                                              dense_scale(prev), rng));
        prev = h;
      }
      m.layers.push_back(detail::make_layer("out", LayerKind::linear, config.output_dim, prev,
                                            dense_scale(prev), rng));
      break;
    }
  }
  return m;
}

/// Checks shape composition along the forward path and finiteness of prunable weights.
inline void validate_model(const Model& m) {
  for (const auto& l : m.layers) {
    if (l.mask.rows() != l.weight.rows() || l.mask.cols() != l.weight.cols())
      throw ConfigError("layer '" + l.name + "': mask shape differs from weight");
    if (l.prunable && !l.weight.allFinite())
      throw NumericError("layer '" + l.name + "' has non-finite weights");
  }
  const auto& c = m.config;
  auto expect = [&](const std::string& name, Index r, Index cols) {
    const auto& l = m.layer(name);
    if (l.rows() != r || l.cols() != cols)
      throw ConfigError("layer '" + name + "' has shape " + std::to_string(l.rows()) + "x" +
                        std::to_string(l.cols()) + ", expected " + std::to_string(r) + "x" +
                        std::to_string(cols));
  };
  switch (c.arch) {
    case Arch::mlp_lm: {
      Index prev = c.resolved_embed_dim();
      expect("embed", prev, static_cast<Index>(c.vocab_size) * c.context);
      for (std::size_t i = 0; i < c.hidden_dims.size(); ++i) {
        expect("fc" + std::to_string(i), c.hidden_dims[i], prev);
        prev = c.hidden_dims[i];
      }
      expect("head", c.vocab_size, prev);
      break;
    }
    case Arch::transformer_lm: {
      const Index d = c.d_model;
      expect("embed", d, c.vocab_size);
      for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o"}) expect(n, d, d);
      expect("mlp.up", c.ff_dim, d);
      expect("mlp.down", d, c.ff_dim);
      expect("head", c.vocab_size, d);
      break;
    }
    case Arch::regression: {
      Index prev = c.input_dim;
      for (std::size_t i = 0; i < c.hidden_dims.size(); ++i) {
        expect("fc" + std::to_string(i), c.hidden_dims[i], prev);
        prev = c.hidden_dims[i];
      }
      expect("out", c.output_dim, prev);
      break;
    }
  }
}

inline Json config_to_json(const ModelConfig& c) {
  return Json{{"arch", to_string(c.arch)},       {"vocab_size", c.vocab_size},
              {"alphabet", c.alphabet},          {"context", c.context},
              {"embed_dim", c.embed_dim},        {"hidden_dims", c.hidden_dims},
              {"d_model", c.d_model},            {"ff_dim", c.ff_dim},
              {"max_seq_len", c.max_seq_len},    {"input_dim", c.input_dim},
              {"output_dim", c.output_dim},      {"tanh_hidden", c.tanh_hidden}};
}

inline ModelConfig config_from_json(const Json& j) {
  ModelConfig c;
  c.arch = arch_from_string(j.value("arch", std::string("mlp")));
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.alphabet = j.value("alphabet", c.alphabet);
  c.context = j.value("context", c.context);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden_dims = j.value("hidden_dims", c.hidden_dims);
  c.d_model = j.value("d_model", c.d_model);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.input_dim = j.value("input_dim", c.input_dim);
  c.output_dim = j.value("output_dim", c.output_dim);
  c.tanh_hidden = j.value("tanh_hidden", c.tanh_hidden);
  return c;
}

inline TensorFile to_tensor_file(const Model& m) {
  TensorFile f;
  Json layers = Json::array();
  for (const auto& l : m.layers) {
    layers.push_back({{"name", l.name}, {"kind", to_string(l.kind)}, {"prunable", l.prunable}});
    f.tensors.push_back(Tensor::from_matrix(l.name + ".weight", l.weight));
    f.tensors.push_back(Tensor::from_matrix(l.name + ".mask", l.mask));
  }
  Json aux = Json::array();
  for (const auto& p : m.aux) {
    aux.push_back(p.name);
    f.tensors.push_back(Tensor::from_matrix(p.name, p.value));
  }
  f.meta = Json{{"format", "surgeon-checkpoint-v1"},
                {"config", config_to_json(m.config)},
                {"seed", m.seed},
                {"layers", layers},
                {"aux", aux}};
  return f;
}

inline Model from_tensor_file(const TensorFile& f) {
  Model m;
  if (!f.meta.contains("config")) throw IngestionError("checkpoint manifest has no model config");
  m.config = config_from_json(f.meta.at("config"));
  m.seed = f.meta.value("seed", std::uint64_t{0});
  for (const auto& e : f.meta.at("layers")) {
    Layer l;
    l.name = e.at("name").get<std::string>();
    l.kind = layer_kind_from_string(e.at("kind").get<std::string>());
    l.prunable = e.at("prunable").get<bool>();
    l.weight = f.get(l.name + ".weight").to_matrix();
    l.mask = f.get(l.name + ".mask").to_matrix();
    m.layers.push_back(std::move(l));
  }
  for (const auto& name : f.meta.at("aux")) {
    const auto n = name.get<std::string>();
    m.aux.push_back({n, f.get(n).to_matrix()});
  }
  validate_model(m);
  return m;
}

inline void save_model(const Model& m, const std::filesystem::path& prefix) {
  write_tensor_file(to_tensor_file(m), prefix);
}

inline Model load_model(const std::filesystem::path& prefix) {
  return from_tensor_file(read_tensor_file(prefix));
}

}  // namespace surgeon
