#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonbench/rng.hpp"

namespace poisonbench {

enum class Activation { relu, identity };

inline std::string to_string(Activation act) {
  return act == Activation::relu ? "relu" : "identity";
}

inline Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw std::invalid_argument("unknown activation: " + name);
}

/// Architecture of a feedforward net. `activation` applies to hidden layers;
/// the output layer always emits raw values (logits / reconstructions).
struct LayerSpec {
  int input_dim = 0;
  std::vector<int> hidden_dims;
  int output_dim = 0;
  Activation activation = Activation::relu;
  double dropout_rate = 0.0;

  void validate() const {
    if (input_dim < 1) throw std::invalid_argument("LayerSpec: input_dim must be >= 1");
    if (output_dim < 1) throw std::invalid_argument("LayerSpec: output_dim must be >= 1");
    for (int d : hidden_dims) {
      if (d < 1) throw std::invalid_argument("LayerSpec: hidden dims must be >= 1");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw std::invalid_argument("LayerSpec: dropout_rate must be in [0,1)");
    }
  }

  // (rows, cols) of each weight matrix; rows index output units.
  std::vector<std::pair<int, int>> layer_shapes() const {
    std::vector<std::pair<int, int>> shapes;
    int prev = input_dim;
    for (int d : hidden_dims) {
      shapes.emplace_back(d, prev);
      prev = d;
    }
    shapes.emplace_back(output_dim, prev);
    return shapes;
  }

  // Dimension of the representation used as the feature space: the last
  // hidden layer, or the input itself when there are no hidden layers.
  int penultimate_dim() const {
    return hidden_dims.empty() ? input_dim : hidden_dims.back();
  }

  bool operator==(const LayerSpec&) const = default;
};

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;  // row-major

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }

  bool operator==(const Matrix&) const = default;
};

struct MlpModel {
  LayerSpec spec;
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;
  std::uint64_t rng_seed = 0;

  int input_dim() const { return spec.input_dim; }
  int output_dim() const { return spec.output_dim; }
  int penultimate_dim() const { return spec.penultimate_dim(); }
  std::size_t layer_count() const { return weights.size(); }

  void validate() const {
    spec.validate();
    auto shapes = spec.layer_shapes();
    if (weights.size() != shapes.size() || biases.size() != shapes.size()) {
      throw std::invalid_argument("MlpModel: layer count mismatch");
    }
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      if (weights[l].rows != shapes[l].first || weights[l].cols != shapes[l].second) {
        throw std::invalid_argument("MlpModel: weight shape mismatch at layer " + std::to_string(l));
      }
      if (static_cast<int>(biases[l].size()) != shapes[l].first) {
        throw std::invalid_argument("MlpModel: bias shape mismatch at layer " + std::to_string(l));
      }
      for (double w : weights[l].data) {
        if (!std::isfinite(w)) throw std::invalid_argument("MlpModel: non-finite weight");
      }
      for (double b : biases[l]) {
        if (!std::isfinite(b)) throw std::invalid_argument("MlpModel: non-finite bias");
      }
    }
  }

  bool operator==(const MlpModel&) const = default;
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
  }
};

/// Seeded scaled-uniform init: each weight ~ U(-s, s) with
/// s = sqrt(6 / (fan_in + fan_out)); biases start at zero.
inline MlpModel init_model(const LayerSpec& spec, std::uint64_t seed) {
  spec.validate();
  MlpModel model;
  model.spec = spec;
  model.rng_seed = seed;
  Rng rng(seed);
  for (auto [rows, cols] : spec.layer_shapes()) {
    Matrix w(rows, cols);
    double scale = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (double& v : w.data) v = rng.uniform(-scale, scale);
    model.weights.push_back(std::move(w));
    model.biases.emplace_back(rows, 0.0);
  }
  return model;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double v : logits) {
    if (std::isnan(v)) throw std::invalid_argument("softmax: NaN input");
    max_logit = std::max(max_logit, v);
  }
  std::vector<double> probs(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - max_logit);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
  return probs;
}

struct ForwardResult {
  std::vector<double> logits;
  std::vector<double> penultimate;
};

namespace detail {

// Activations per layer for one input, pre-activation values included so the
// backward passes can reuse them. `dropout_scale[l]` holds the applied
// per-unit inverted-dropout factors (1/keep or 0) for hidden layer l.
struct ForwardTrace {
  std::vector<std::vector<double>> pre;   // z per layer
  std::vector<std::vector<double>> post;  // activations per layer (output last)
  std::vector<std::vector<double>> dropout_scale;
};

inline void affine(const Matrix& w, const std::vector<double>& bias,
                   std::span<const double> in, std::vector<double>& out) {
  out.resize(static_cast<std::size_t>(w.rows));
  for (int r = 0; r < w.rows; ++r) {
    const double* wr = w.row(r);
    double acc = bias[static_cast<std::size_t>(r)];
    for (int c = 0; c < w.cols; ++c) acc += wr[c] * in[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(r)] = acc;
  }
}

inline void apply_activation(Activation act, const std::vector<double>& z, std::vector<double>& a) {
  a = z;
  if (act == Activation::relu) {
    for (double& v : a) v = v > 0.0 ? v : 0.0;
  }
}

// Full forward pass; dropout masks are drawn from `dropout_rng` when non-null.
inline void run_forward(const MlpModel& model, std::span<const double> x, Rng* dropout_rng,
                        ForwardTrace& trace) {
  const std::size_t layers = model.layer_count();
  trace.pre.resize(layers);
  trace.post.resize(layers);
  trace.dropout_scale.assign(layers, {});
  const double rate = model.spec.dropout_rate;
  std::span<const double> current = x;
  for (std::size_t l = 0; l < layers; ++l) {
    affine(model.weights[l], model.biases[l], current, trace.pre[l]);
    const bool hidden = l + 1 < layers;
    if (hidden) {
      apply_activation(model.spec.activation, trace.pre[l], trace.post[l]);
      if (dropout_rng != nullptr && rate > 0.0) {
        auto& scale = trace.dropout_scale[l];
        scale.resize(trace.post[l].size());
        const double keep = 1.0 - rate;
        for (std::size_t i = 0; i < scale.size(); ++i) {
          scale[i] = dropout_rng->next_double() < rate ? 0.0 : 1.0 / keep;
          trace.post[l][i] *= scale[i];
        }
      }
    } else {
      trace.post[l] = trace.pre[l];  // output layer: identity
    }
    current = trace.post[l];
  }
}

inline double activation_derivative(Activation act, double pre) {
  return act == Activation::relu ? (pre > 0.0 ? 1.0 : 0.0) : 1.0;
}

}  // namespace detail

/// Forward pass for one input. Dropout only fires in train mode; with
/// train_mode unset the result is a pure function of (model, x).
inline ForwardResult forward(const MlpModel& model, std::span<const double> x,
                             bool train_mode = false, std::uint64_t seed = 0) {
  if (static_cast<int>(x.size()) != model.input_dim()) {
    throw std::invalid_argument("forward: input dimension mismatch");
  }
  detail::ForwardTrace trace;
  if (train_mode && model.spec.dropout_rate > 0.0) {
    Rng rng(seed);
    detail::run_forward(model, x, &rng, trace);
  } else {
    detail::run_forward(model, x, nullptr, trace);
  }
  ForwardResult result;
  result.logits = trace.post.back();
  result.penultimate = trace.post.size() > 1 ? trace.post[trace.post.size() - 2]
                                             : std::vector<double>(x.begin(), x.end());
  return result;
}

inline double malware_probability(const MlpModel& model, std::span<const double> x) {
  auto probs = softmax(forward(model, x).logits);
  if (probs.size() != 2) throw std::invalid_argument("malware_probability: binary model required");
  return probs[1];
}

// Decision threshold 0.5 on the malware softmax probability.
inline int predict_label(const MlpModel& model, std::span<const double> x) {
  return malware_probability(model, x) >= 0.5 ? 1 : 0;
}

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;

  static Gradients zeros_like(const MlpModel& model) {
    Gradients g;
    for (const auto& w : model.weights) g.weights.emplace_back(w.rows, w.cols);
    for (const auto& b : model.biases) g.biases.emplace_back(b.size(), 0.0);
    return g;
  }
};

namespace detail {

// Backprop from dL/d(output) for one traced forward pass; accumulates into
// `grads`. Returns dL/dx when `input_grad` is non-null.
inline void run_backward(const MlpModel& model, std::span<const double> x,
                         const ForwardTrace& trace, std::vector<double> delta,
                         Gradients* grads, std::vector<double>* input_grad) {
  const std::size_t layers = model.layer_count();
  for (std::size_t l = layers; l-- > 0;) {
    if (grads != nullptr) {
      const double* below = l == 0 ? x.data() : trace.post[l - 1].data();
      Matrix& gw = grads->weights[l];
      std::vector<double>& gb = grads->biases[l];
      for (int r = 0; r < gw.rows; ++r) {
        double d = delta[static_cast<std::size_t>(r)];
        gb[static_cast<std::size_t>(r)] += d;
        double* grow = gw.row(r);
        for (int c = 0; c < gw.cols; ++c) grow[c] += d * below[c];
      }
    }
    const bool need_lower = l > 0 || input_grad != nullptr;
    if (!need_lower) break;
    // dL/d(activation below) = W^T delta
    const Matrix& w = model.weights[l];
    std::vector<double> lower(static_cast<std::size_t>(w.cols), 0.0);
    for (int r = 0; r < w.rows; ++r) {
      double d = delta[static_cast<std::size_t>(r)];
      if (d == 0.0) continue;
      const double* wr = w.row(r);
      for (int c = 0; c < w.cols; ++c) lower[static_cast<std::size_t>(c)] += d * wr[c];
    }
    if (l == 0) {
      if (input_grad != nullptr) *input_grad = std::move(lower);
      break;
    }
    // Through dropout scaling and the activation of hidden layer l-1.
    const auto& scale = trace.dropout_scale[l - 1];
    for (std::size_t i = 0; i < lower.size(); ++i) {
      if (!scale.empty()) lower[i] *= scale[i];
      lower[i] *= activation_derivative(model.spec.activation, trace.pre[l - 1][i]);
    }
    delta = std::move(lower);
  }
}

}  // namespace detail

/// Mean cross-entropy over a labeled batch; fills `grads` (pre-zeroed,
/// averaged over the batch) when non-null. Dropout masks come from
/// `dropout_rng` when non-null.
inline double ce_loss(const MlpModel& model, const std::vector<std::span<const double>>& xs,
                      const std::vector<int>& labels, Gradients* grads = nullptr,
                      Rng* dropout_rng = nullptr) {
  if (xs.empty()) throw std::invalid_argument("ce_loss: empty batch");
  if (xs.size() != labels.size()) throw std::invalid_argument("ce_loss: batch size mismatch");
  const double inv_batch = 1.0 / static_cast<double>(xs.size());
  double total = 0.0;
  detail::ForwardTrace trace;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (static_cast<int>(xs[i].size()) != model.input_dim()) {
      throw std::invalid_argument("ce_loss: input dimension mismatch");
    }
    const int label = labels[i];
    if (label < 0 || label >= model.output_dim()) {
      throw std::invalid_argument("ce_loss: label out of range");
    }
    detail::run_forward(model, xs[i], dropout_rng, trace);
    std::vector<double> probs = softmax(trace.post.back());
    total += -std::log(std::max(probs[static_cast<std::size_t>(label)], 1e-300));
    if (grads != nullptr) {
      std::vector<double> delta = probs;
      delta[static_cast<std::size_t>(label)] -= 1.0;
      for (double& d : delta) d *= inv_batch;
      detail::run_backward(model, xs[i], trace, std::move(delta), grads, nullptr);
    }
  }
  return total * inv_batch;
}

/// Mean squared reconstruction error (per-dimension mean, batch mean) against
/// per-sample targets. Used with targets == inputs for autoencoder training.
inline double mse_loss(const MlpModel& model, const std::vector<std::span<const double>>& xs,
                       const std::vector<std::span<const double>>& targets,
                       Gradients* grads = nullptr, Rng* dropout_rng = nullptr) {
  if (xs.empty()) throw std::invalid_argument("mse_loss: empty batch");
  if (xs.size() != targets.size()) throw std::invalid_argument("mse_loss: batch size mismatch");
  const double inv_batch = 1.0 / static_cast<double>(xs.size());
  const double inv_dim = 1.0 / static_cast<double>(model.output_dim());
  double total = 0.0;
  detail::ForwardTrace trace;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (static_cast<int>(targets[i].size()) != model.output_dim()) {
      throw std::invalid_argument("mse_loss: target dimension mismatch");
    }
    detail::run_forward(model, xs[i], dropout_rng, trace);
    const auto& out = trace.post.back();
    std::vector<double> delta(out.size());
    double sample_loss = 0.0;
    for (std::size_t j = 0; j < out.size(); ++j) {
      double diff = out[j] - targets[i][j];
      sample_loss += diff * diff;
      delta[j] = 2.0 * diff * inv_dim * inv_batch;
    }
    total += sample_loss * inv_dim;
    if (grads != nullptr) {
      detail::run_backward(model, xs[i], trace, std::move(delta), grads, nullptr);
    }
  }
  return total * inv_batch;
}

namespace detail {

template <typename BatchGradFn>
MlpModel sgd_loop(MlpModel model, std::size_t n_examples, const TrainConfig& cfg,
                  BatchGradFn&& batch_grad) {
  cfg.validate();
  if (n_examples == 0) throw std::invalid_argument("train: empty dataset");
  if (static_cast<std::size_t>(cfg.batch_size) > n_examples) {
    throw std::invalid_argument("train: batch_size exceeds dataset size");
  }
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) order[i] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n_examples; start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(n_examples, start + static_cast<std::size_t>(cfg.batch_size));
      Gradients grads = Gradients::zeros_like(model);
      batch_grad(model, order, start, end, grads, rng);
      for (std::size_t l = 0; l < model.weights.size(); ++l) {
        double* w = model.weights[l].data.data();
        const double* g = grads.weights[l].data.data();
        for (std::size_t k = 0; k < model.weights[l].data.size(); ++k) {
          w[k] -= cfg.learning_rate * g[k];
        }
        for (std::size_t k = 0; k < model.biases[l].size(); ++k) {
          model.biases[l][k] -= cfg.learning_rate * grads.biases[l][k];
        }
      }
    }
  }
  return model;
}

}  // namespace detail

/// Mini-batch SGD on cross-entropy. Deterministic for fixed
/// (model, example order, cfg.seed); the input model is left untouched.
inline MlpModel train(const MlpModel& model, const std::vector<std::span<const double>>& xs,
                      const std::vector<int>& labels, const TrainConfig& cfg) {
  if (xs.size() != labels.size()) throw std::invalid_argument("train: batch size mismatch");
  return detail::sgd_loop(
      model, xs.size(), cfg,
      [&](const MlpModel& m, const std::vector<std::size_t>& order, std::size_t start,
          std::size_t end, Gradients& grads, Rng& rng) {
        std::vector<std::span<const double>> batch_x;
        std::vector<int> batch_y;
        batch_x.reserve(end - start);
        batch_y.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) {
          batch_x.push_back(xs[order[i]]);
          batch_y.push_back(labels[order[i]]);
        }
        Rng* dropout = m.spec.dropout_rate > 0.0 ? &rng : nullptr;
        ce_loss(m, batch_x, batch_y, &grads, dropout);
      });
}

/// Autoencoder training: fresh model from `spec` (seeded by cfg.seed),
/// minimizing mean squared reconstruction error on the given inputs.
inline MlpModel train_autoencoder(const std::vector<std::span<const double>>& xs,
                                  const LayerSpec& spec, const TrainConfig& cfg) {
  spec.validate();
  if (spec.output_dim != spec.input_dim) {
    throw std::invalid_argument("train_autoencoder: output_dim must equal input_dim");
  }
  if (spec.hidden_dims.empty()) {
    throw std::invalid_argument("train_autoencoder: at least one hidden layer required");
  }
  int bottleneck = *std::min_element(spec.hidden_dims.begin(), spec.hidden_dims.end());
  if (bottleneck >= spec.input_dim) {
    throw std::invalid_argument("train_autoencoder: smallest hidden dim must be < input_dim");
  }
  if (xs.empty()) throw std::invalid_argument("train_autoencoder: empty dataset");
  MlpModel model = init_model(spec, cfg.seed);
  return detail::sgd_loop(
      model, xs.size(), cfg,
      [&](const MlpModel& m, const std::vector<std::size_t>& order, std::size_t start,
          std::size_t end, Gradients& grads, Rng& rng) {
        std::vector<std::span<const double>> batch;
        batch.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) batch.push_back(xs[order[i]]);
        Rng* dropout = m.spec.dropout_rate > 0.0 ? &rng : nullptr;
        mse_loss(m, batch, batch, &grads, dropout);
      });
}

// Default autoencoder architecture for a given input width:
// input -> input/2 -> input/4 -> input/2 -> input, ReLU hidden, identity out.
inline LayerSpec default_autoencoder_spec(int input_dim) {
  LayerSpec spec;
  spec.input_dim = input_dim;
  spec.output_dim = input_dim;
  int half = std::max(1, input_dim / 2);
  int quarter = std::max(1, input_dim / 4);
  spec.hidden_dims = {half, quarter, half};
  spec.activation = Activation::relu;
  spec.dropout_rate = 0.0;
  return spec;
}

/// Gradient of ||f(x) - target_repr||^2 with respect to x, where f is the
/// penultimate representation (inference mode, no dropout). With no hidden
/// layers f is the identity and the gradient is 2(x - target_repr).
inline std::vector<double> input_gradient(const MlpModel& model, std::span<const double> x,
                                          std::span<const double> target_repr) {
  if (static_cast<int>(x.size()) != model.input_dim()) {
    throw std::invalid_argument("input_gradient: input dimension mismatch");
  }
  if (static_cast<int>(target_repr.size()) != model.penultimate_dim()) {
    throw std::invalid_argument("input_gradient: target representation dimension mismatch");
  }
  if (model.spec.hidden_dims.empty()) {
    std::vector<double> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) grad[i] = 2.0 * (x[i] - target_repr[i]);
    return grad;
  }
  detail::ForwardTrace trace;
  detail::run_forward(model, x, nullptr, trace);
  const std::size_t pen_layer = model.layer_count() - 2;
  const auto& pen = trace.post[pen_layer];
  std::vector<double> delta(pen.size());
  for (std::size_t i = 0; i < pen.size(); ++i) {
    delta[i] = 2.0 * (pen[i] - target_repr[i]) *
               detail::activation_derivative(model.spec.activation, trace.pre[pen_layer][i]);
  }
  // Backprop only through layers [0, pen_layer].
  MlpModel truncated;
  truncated.spec = model.spec;
  truncated.weights.assign(model.weights.begin(), model.weights.begin() + pen_layer + 1);
  truncated.biases.assign(model.biases.begin(), model.biases.begin() + pen_layer + 1);
  detail::ForwardTrace sub_trace;
  sub_trace.pre.assign(trace.pre.begin(), trace.pre.begin() + pen_layer + 1);
  sub_trace.post.assign(trace.post.begin(), trace.post.begin() + pen_layer + 1);
  sub_trace.dropout_scale.assign(pen_layer + 1, {});
  std::vector<double> grad;
  detail::run_backward(truncated, x, sub_trace, std::move(delta), nullptr, &grad);
  return grad;
}

/// Squared distance between f(x) and a target representation.
inline double feature_match_loss(const MlpModel& model, std::span<const double> x,
                                 std::span<const double> target_repr) {
  ForwardResult fr = forward(model, x);
  double total = 0.0;
  for (std::size_t i = 0; i < fr.penultimate.size(); ++i) {
    double diff = fr.penultimate[i] - target_repr[i];
    total += diff * diff;
  }
  return total;
}

}  // namespace poisonbench
