#pragma once

// Exact forward/backward passes for the desk-scale models, with per-sample capture
// of layer inputs and output gradients.
//
// Convention: the reported loss is the mean over samples, while tape gradients
// g_n are gradients of the per-sample loss sum with respect to the layer output
// y_n = W a_n. Hence weight_grad = (1/N) * sum_n g_n a_n^T.

#include <cmath>
#include <string>
#include <vector>

#include "surgeon/data.hpp"
#include "surgeon/errors.hpp"
#include "surgeon/linalg.hpp"
#include "surgeon/model.hpp"

namespace surgeon {

struct LayerTape {
  std::string layer_name;
  Mat activations;  // N x C
  Mat out_grads;    // N x R

  Index sample_count() const { return activations.rows(); }

  void check() const {
    if (activations.rows() != out_grads.rows())
      throw NumericError("tape '" + layer_name + "': activations and gradients differ in sample count");
    if (!activations.allFinite() || !out_grads.allFinite())
      throw NumericError("tape '" + layer_name + "' has non-finite entries");
  }

  /// Appends another tape's samples (tape accumulation over batches).
  void append(const LayerTape& other) {
    if (activations.size() == 0) {
      activations = other.activations;
      out_grads = other.out_grads;
      return;
    }
    Mat a(activations.rows() + other.activations.rows(), activations.cols());
    a << activations, other.activations;
    Mat g(out_grads.rows() + other.out_grads.rows(), out_grads.cols());
    g << out_grads, other.out_grads;
    activations = std::move(a);
    out_grads = std::move(g);
  }
};

struct PassResult {
  double loss = 0.0;
  Index samples = 0;
  std::vector<LayerTape> tapes;   // one per model layer, same order (empty unless requested)
  std::vector<Mat> weight_grads;  // one per model layer
  std::vector<Mat> aux_grads;     // one per aux parameter
};

struct PassOptions {
  bool gradients = true;
  bool tapes = true;
};

namespace detail {

inline double log_softmax_row(const Eigen::Ref<const Eigen::RowVectorXd>& logits, Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> probs) {
  const double mx = logits.maxCoeff();
  probs = (logits.array() - mx).exp();
  const double z = probs.sum();
  probs /= z;
  return mx + std::log(z);
}

struct LayerNormCache {
  Mat xhat;  // rows normalized
  Vec inv_std;
};

constexpr double kLayerNormEps = 1e-5;

inline Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, LayerNormCache& cache) {
  const Index n = x.rows(), d = x.cols();
  cache.xhat.resize(n, d);
  cache.inv_std.resize(n);
  Mat y(n, d);
  for (Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(i) = inv;
    cache.xhat.row(i) = (x.row(i).array() - mu) * inv;
    y.row(i) = cache.xhat.row(i).cwiseProduct(gain.col(0).transpose()) + bias.col(0).transpose();
  }
  return y;
}

/// Returns dx; accumulates into dgain, dbias (column vectors).
inline Mat layer_norm_backward(const Mat& dy, const Mat& gain, const LayerNormCache& cache, Mat& dgain, Mat& dbias) {
  const Index n = dy.rows(), d = dy.cols();
  Mat dx(n, d);
  for (Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(gain.col(0).transpose());
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
    dx.row(i) = cache.inv_std(i) * (dxhat.array() - m1 - cache.xhat.row(i).array() * m2);
    dgain.col(0) += dy.row(i).cwiseProduct(cache.xhat.row(i)).transpose();
    dbias.col(0) += dy.row(i).transpose();
  }
  return dx;
}

inline Index aux_index(const Model& m, const std::string& name) {
  for (std::size_t i = 0; i < m.aux.size(); ++i)
    if (m.aux[i].name == name) return static_cast<Index>(i);
  throw ConfigError("no parameter named '" + name + "'");
}

inline Index layer_index(const Model& m, const std::string& name) {
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].name == name) return static_cast<Index>(i);
  throw ConfigError("no layer named '" + name + "'");
}

class PassBuilder {
 public:
  PassBuilder(const Model& m, const PassOptions& opt, Index samples) : m_(m), opt_(opt) {
    r_.samples = samples;
    if (opt.tapes) {
      r_.tapes.resize(m.layers.size());
      for (std::size_t i = 0; i < m.layers.size(); ++i) r_.tapes[i].layer_name = m.layers[i].name;
    }
    if (opt.gradients) {
      for (const auto& l : m.layers) r_.weight_grads.push_back(Mat::Zero(l.rows(), l.cols()));
      for (const auto& p : m.aux) r_.aux_grads.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
    }
  }

  /// Records a linear use y = W a for a block of samples (rows).
  void record(const std::string& layer, const Mat& a, const Mat& g) {
    const Index li = layer_index(m_, layer);
    if (opt_.tapes) {
      LayerTape piece{layer, a, g};
      r_.tapes[li].append(piece);
    }
    if (opt_.gradients) r_.weight_grads[li].noalias() += g.transpose() * a;
  }

  Mat& aux_grad(const std::string& name) { return r_.aux_grads[aux_index(m_, name)]; }

  PassResult finish(double loss_sum) {
    const double inv_n = 1.0 / static_cast<double>(r_.samples);
    r_.loss = loss_sum * inv_n;
    for (auto& g : r_.weight_grads) g *= inv_n;
    for (auto& g : r_.aux_grads) g *= inv_n;
    return std::move(r_);
  }

 private:
  const Model& m_;
  PassOptions opt_;
  PassResult r_;
};

inline PassResult mlp_pass(const Model& m, const Batch& batch, const PassOptions& opt) {
  const auto& c = m.config;
  const Index B = batch.tokens.rows(), S = batch.tokens.cols() - 1, N = B * S;
  const Index V = c.vocab_size, ctx = c.context;
  if (S < 1) throw HarnessError("batch has no positions");
  Mat x0 = Mat::Zero(N, V * ctx);
  Eigen::VectorXi target(N);
  for (Index b = 0; b < B; ++b)
    for (Index p = 0; p < S; ++p) {
      const Index n = b * S + p;
      for (Index slot = 0; slot < ctx; ++slot) {
        const Index pos = p - (ctx - 1 - slot);
        const int tok = pos >= 0 ? batch.tokens(b, pos) : 0;
        if (tok < 0 || tok >= V) throw HarnessError("token id out of vocabulary range");
        x0(n, slot * V + tok) = 1.0;
      }
      target(n) = batch.tokens(b, p + 1);
      if (target(n) < 0 || target(n) >= V) throw HarnessError("token id out of vocabulary range");
    }

  const std::size_t H = c.hidden_dims.size();
  std::vector<Mat> acts;  // acts[0] = embedding output, acts[i+1] = tanh(fc_i)
  acts.push_back(x0 * m.layer("embed").weight.transpose());
  for (std::size_t i = 0; i < H; ++i) {
    const auto name = "fc" + std::to_string(i);
    Mat z = acts.back() * m.layer(name).weight.transpose();
    z.rowwise() += m.param(name + ".bias").col(0).transpose();
    acts.push_back(z.array().tanh().matrix());
  }
  Mat logits = acts.back() * m.layer("head").weight.transpose();
  logits.rowwise() += m.param("head.bias").col(0).transpose();

  Mat probs(N, V);
  double loss_sum = 0.0;
  for (Index n = 0; n < N; ++n) {
    const double lse = log_softmax_row(logits.row(n), probs.row(n));
    loss_sum += lse - logits(n, target(n));
  }
  PassBuilder pb(m, opt, N);
  if (!opt.gradients && !opt.tapes) return pb.finish(loss_sum);

  Mat g = probs;
  for (Index n = 0; n < N; ++n) g(n, target(n)) -= 1.0;
  pb.record("head", acts.back(), g);
  if (opt.gradients) pb.aux_grad("head.bias").col(0) += g.colwise().sum().transpose();
  Mat dh = g * m.layer("head").weight;
  for (std::size_t k = H; k-- > 0;) {
    const auto name = "fc" + std::to_string(k);
    Mat dz = dh.cwiseProduct((1.0 - acts[k + 1].array().square()).matrix());
    pb.record(name, acts[k], dz);
    if (opt.gradients) pb.aux_grad(name + ".bias").col(0) += dz.colwise().sum().transpose();
    dh = dz * m.layer(name).weight;
  }
  pb.record("embed", x0, dh);
  return pb.finish(loss_sum);
}

inline PassResult transformer_pass(const Model& m, const Batch& batch, const PassOptions& opt) {
  const auto& c = m.config;
  const Index B = batch.tokens.rows(), S = batch.tokens.cols() - 1, V = c.vocab_size, d = c.d_model;
  if (S < 1) throw HarnessError("batch has no positions");
  if (S > c.max_seq_len) throw HarnessError("sequence longer than the positional table");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const Mat& We = m.layer("embed").weight;
  const Mat& Wq = m.layer("attn.q").weight;
  const Mat& Wk = m.layer("attn.k").weight;
  const Mat& Wv = m.layer("attn.v").weight;
  const Mat& Wo = m.layer("attn.o").weight;
  const Mat& Wup = m.layer("mlp.up").weight;
  const Mat& Wdown = m.layer("mlp.down").weight;
  const Mat& Wh = m.layer("head").weight;

  PassBuilder pb(m, opt, B * S);
  const bool backward = opt.gradients || opt.tapes;
  double loss_sum = 0.0;
  for (Index b = 0; b < B; ++b) {
    Mat onehot = Mat::Zero(S, V);
    Eigen::VectorXi target(S);
    for (Index p = 0; p < S; ++p) {
      const int tok = batch.tokens(b, p), tgt = batch.tokens(b, p + 1);
      if (tok < 0 || tok >= V || tgt < 0 || tgt >= V) throw HarnessError("token id out of vocabulary range");
      onehot(p, tok) = 1.0;
      target(p) = tgt;
    }
    const Mat x = onehot * We.transpose() + m.param("pos").topRows(S);
    LayerNormCache ln1, ln2, lnf;
    const Mat u = layer_norm(x, m.param("ln1.gain"), m.param("ln1.bias"), ln1);
    const Mat q = u * Wq.transpose(), k = u * Wk.transpose(), v = u * Wv.transpose();
    Mat att = Mat::Zero(S, S);
    for (Index i = 0; i < S; ++i) {
      Eigen::RowVectorXd sc = (q.row(i) * k.topRows(i + 1).transpose()) * scale;
      Eigen::RowVectorXd pr(i + 1);
      log_softmax_row(sc, pr);
      att.row(i).head(i + 1) = pr;
    }
    const Mat z = att * v;
    const Mat x2 = x + z * Wo.transpose();
    const Mat w2 = layer_norm(x2, m.param("ln2.gain"), m.param("ln2.bias"), ln2);
    Mat hpre = w2 * Wup.transpose();
    hpre.rowwise() += m.param("mlp.up.bias").col(0).transpose();
    const Mat h = hpre.array().tanh().matrix();
    Mat x3 = x2 + h * Wdown.transpose();
    x3.rowwise() += m.param("mlp.down.bias").col(0).transpose();
    const Mat xf = layer_norm(x3, m.param("lnf.gain"), m.param("lnf.bias"), lnf);
    Mat logits = xf * Wh.transpose();
    logits.rowwise() += m.param("head.bias").col(0).transpose();
    Mat probs(S, V);
    for (Index p = 0; p < S; ++p) {
      const double lse = log_softmax_row(logits.row(p), probs.row(p));
      loss_sum += lse - logits(p, target(p));
    }
    if (!backward) continue;

    Mat dlogits = probs;
    for (Index p = 0; p < S; ++p) dlogits(p, target(p)) -= 1.0;
    pb.record("head", xf, dlogits);
    Mat scratch_gain = Mat::Zero(d, 1), scratch_bias = Mat::Zero(d, 1);
    auto grad_or_scratch = [&](const std::string& name, Mat& scratch) -> Mat& {
      return opt.gradients ? pb.aux_grad(name) : scratch;
    };
    if (opt.gradients) pb.aux_grad("head.bias").col(0) += dlogits.colwise().sum().transpose();
    const Mat dxf = dlogits * Wh;
    const Mat dx3 = layer_norm_backward(dxf, m.param("lnf.gain"), lnf, grad_or_scratch("lnf.gain", scratch_gain),
                                        grad_or_scratch("lnf.bias", scratch_bias));
    pb.record("mlp.down", h, dx3);
    if (opt.gradients) pb.aux_grad("mlp.down.bias").col(0) += dx3.colwise().sum().transpose();
    const Mat dhpre = (dx3 * Wdown).cwiseProduct((1.0 - h.array().square()).matrix());
    pb.record("mlp.up", w2, dhpre);
    if (opt.gradients) pb.aux_grad("mlp.up.bias").col(0) += dhpre.colwise().sum().transpose();
    Mat scratch_gain2 = Mat::Zero(d, 1), scratch_bias2 = Mat::Zero(d, 1);
    const Mat dx2 = dx3 + layer_norm_backward(dhpre * Wup, m.param("ln2.gain"), ln2,
                                              grad_or_scratch("ln2.gain", scratch_gain2),
                                              grad_or_scratch("ln2.bias", scratch_bias2));
    pb.record("attn.o", z, dx2);
    const Mat dz = dx2 * Wo;
    const Mat datt = dz * v.transpose();
    const Mat dv = att.transpose() * dz;
    Mat ds = Mat::Zero(S, S);
    for (Index i = 0; i < S; ++i) {
      const double dot = att.row(i).head(i + 1).dot(datt.row(i).head(i + 1));
      for (Index j = 0; j <= i; ++j) ds(i, j) = att(i, j) * (datt(i, j) - dot);
    }
    const Mat dq = ds * k * scale;
    const Mat dk = ds.transpose() * q * scale;
    pb.record("attn.q", u, dq);
    pb.record("attn.k", u, dk);
    pb.record("attn.v", u, dv);
    const Mat du = dq * Wq + dk * Wk + dv * Wv;
    Mat scratch_gain3 = Mat::Zero(d, 1), scratch_bias3 = Mat::Zero(d, 1);
    const Mat dx = dx2 + layer_norm_backward(du, m.param("ln1.gain"), ln1, grad_or_scratch("ln1.gain", scratch_gain3),
                                             grad_or_scratch("ln1.bias", scratch_bias3));
    pb.record("embed", onehot, dx);
    if (opt.gradients) pb.aux_grad("pos").topRows(S) += dx;
  }
  return pb.finish(loss_sum);
}

inline PassResult regression_pass(const Model& m, const Batch& batch, const PassOptions& opt) {
  const auto& c = m.config;
  const Index N = batch.features.rows();
  if (N < 1) throw HarnessError("regression batch is empty");
  if (batch.features.cols() != c.input_dim || batch.targets.cols() != c.output_dim || batch.targets.rows() != N)
    throw HarnessError("regression batch shape does not match the model");
  const std::size_t H = c.hidden_dims.size();
  std::vector<Mat> acts{batch.features};
  for (std::size_t i = 0; i < H; ++i) {
    Mat z = acts.back() * m.layer("fc" + std::to_string(i)).weight.transpose();
    acts.push_back(c.tanh_hidden ? Mat(z.array().tanh().matrix()) : z);
  }
  const Mat y = acts.back() * m.layer("out").weight.transpose();
  const Mat resid = y - batch.targets;
  const double loss_sum = 0.5 * resid.squaredNorm();
  PassBuilder pb(m, opt, N);
  if (!opt.gradients && !opt.tapes) return pb.finish(loss_sum);
  pb.record("out", acts.back(), resid);
  Mat dh = resid * m.layer("out").weight;
  for (std::size_t k = H; k-- > 0;) {
    const auto name = "fc" + std::to_string(k);
    Mat dz = c.tanh_hidden ? Mat(dh.cwiseProduct((1.0 - acts[k + 1].array().square()).matrix())) : dh;
    pb.record(name, acts[k], dz);
    dh = dz * m.layer(name).weight;
  }
  return pb.finish(loss_sum);
}

}  // namespace detail

inline void check_batch_compatible(const Model& m, const Batch& batch) {
  const bool regression = m.config.arch == Arch::regression;
  if (regression != (batch.loss == LossKind::squared_error))
    throw HarnessError("batch loss kind does not match the model architecture");
}

/// Runs one exact forward and backward pass over a batch.
inline PassResult forward_backward(const Model& m, const Batch& batch, const PassOptions& opt = {}) {
  check_batch_compatible(m, batch);
  PassResult r;
  switch (m.config.arch) {
    case Arch::mlp_lm: r = detail::mlp_pass(m, batch, opt); break;
    case Arch::transformer_lm: r = detail::transformer_pass(m, batch, opt); break;
    case Arch::regression: r = detail::regression_pass(m, batch, opt); break;
  }
  if (!std::isfinite(r.loss)) throw NumericError("non-finite loss in forward pass");
  return r;
}

inline double evaluate_loss(const Model& m, const Batch& batch) {
  return forward_backward(m, batch, PassOptions{false, false}).loss;
}

/// Sample-weighted mean loss across batches.
inline double evaluate_loss(const Model& m, const std::vector<Batch>& batches) {
  double sum = 0.0;
  Index n = 0;
  for (const auto& b : batches) {
    const auto r = forward_backward(m, b, PassOptions{false, false});
    sum += r.loss * static_cast<double>(r.samples);
    n += r.samples;
  }
  if (n == 0) throw HarnessError("no samples to evaluate");
  return sum / static_cast<double>(n);
}

}  // namespace surgeon
