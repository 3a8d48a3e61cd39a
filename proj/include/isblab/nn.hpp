#pragma once

// Dense MLP stack: tanh hidden layers, linear head, manual reverse mode and Adam.
// Batched routines take one sample per column.

#include <Eigen/Core>

#include <cmath>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "isblab/errors.hpp"
#include "isblab/rng.hpp"

namespace isblab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Activation { Tanh, Identity };

inline const char* activation_name(Activation a) { return a == Activation::Tanh ? "tanh" : "identity"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "identity") return Activation::Identity;
  throw SchemaError("unknown activation '" + s + "'");
}

struct MlpParams {
  std::vector<Mat> weights;  // layer i maps in_i -> out_i, stored out_i x in_i
  std::vector<Vec> biases;
  Activation hidden_activation = Activation::Tanh;
  Activation output_activation = Activation::Identity;

  std::size_t num_layers() const { return weights.size(); }
  Eigen::Index input_dim() const { return weights.empty() ? 0 : weights.front().cols(); }
  Eigen::Index output_dim() const { return weights.empty() ? 0 : weights.back().rows(); }

  Activation activation_of(std::size_t layer) const {
    return layer + 1 == weights.size() ? output_activation : hidden_activation;
  }
};

/// Gradient (or Adam moment) with the same layout as MlpParams.
struct MlpGrad {
  std::vector<Mat> weights;
  std::vector<Vec> biases;

  static MlpGrad zeros_like(const MlpParams& p) {
    MlpGrad g;
    for (std::size_t i = 0; i < p.num_layers(); ++i) {
      g.weights.push_back(Mat::Zero(p.weights[i].rows(), p.weights[i].cols()));
      g.biases.push_back(Vec::Zero(p.biases[i].size()));
    }
    return g;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& w : weights) s += w.squaredNorm();
    for (const auto& b : biases) s += b.squaredNorm();
    return s;
  }

  void scale(double f) {
    for (auto& w : weights) w *= f;
    for (auto& b : biases) b *= f;
  }

  MlpGrad& operator+=(const MlpGrad& o) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      weights[i] += o.weights[i];
      biases[i] += o.biases[i];
    }
    return *this;
  }
};

inline void validate_shapes(const MlpParams& p) {
  if (p.weights.empty()) throw ShapeError("mlp has no layers");
  if (p.weights.size() != p.biases.size()) throw ShapeError("mlp weight/bias layer count mismatch");
  for (std::size_t i = 0; i < p.num_layers(); ++i) {
    if (p.biases[i].size() != p.weights[i].rows())
      throw ShapeError("layer " + std::to_string(i) + ": bias length differs from weight rows");
    if (i > 0 && p.weights[i].cols() != p.weights[i - 1].rows())
      throw ShapeError("layer " + std::to_string(i) + ": input width differs from previous output");
  }
}

/// Glorot-uniform weights, zero biases.
inline MlpParams make_mlp(Eigen::Index input_dim, const std::vector<Eigen::Index>& hidden,
                          Eigen::Index output_dim, Rng& rng) {
  MlpParams p;
  Eigen::Index fan_in = input_dim;
  std::vector<Eigen::Index> widths = hidden;
  widths.push_back(output_dim);
  for (Eigen::Index fan_out : widths) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Mat w(fan_out, fan_in);
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = uniform(rng, -bound, bound);
    p.weights.push_back(std::move(w));
    p.biases.push_back(Vec::Zero(fan_out));
    fan_in = fan_out;
  }
  return p;
}

namespace detail {

inline void apply_activation(Activation a, Mat& z) {
  if (a == Activation::Tanh) z = z.array().tanh().matrix();
}

}  // namespace detail

/// Layer outputs for a batch; activations[0] is the input, activations[i + 1] the
/// post-activation output of layer i.
struct ForwardCache {
  std::vector<Mat> activations;
  const Mat& output() const { return activations.back(); }
};

inline ForwardCache mlp_forward_cached(const MlpParams& p, const Mat& inputs) {
  if (p.weights.empty()) throw ShapeError("mlp has no layers");
  if (inputs.rows() != p.input_dim())
    throw ShapeError("input has " + std::to_string(inputs.rows()) + " rows, mlp expects " +
                     std::to_string(p.input_dim()));
  ForwardCache cache;
  cache.activations.reserve(p.num_layers() + 1);
  cache.activations.push_back(inputs);
  for (std::size_t i = 0; i < p.num_layers(); ++i) {
    Mat z = p.weights[i] * cache.activations.back();
    z.colwise() += p.biases[i];
    detail::apply_activation(p.activation_of(i), z);
    cache.activations.push_back(std::move(z));
  }
  return cache;
}

inline Mat mlp_forward_batch(const MlpParams& p, const Mat& inputs) {
  if (p.weights.empty()) throw ShapeError("mlp has no layers");
  if (inputs.rows() != p.input_dim())
    throw ShapeError("input has " + std::to_string(inputs.rows()) + " rows, mlp expects " +
                     std::to_string(p.input_dim()));
  Mat h = inputs;
  for (std::size_t i = 0; i < p.num_layers(); ++i) {
    Mat z = p.weights[i] * h;
    z.colwise() += p.biases[i];
    detail::apply_activation(p.activation_of(i), z);
    h = std::move(z);
  }
  return h;
}

inline Vec mlp_forward(const MlpParams& p, const Vec& input) {
  if (input.size() != p.input_dim())
    throw ShapeError("input has length " + std::to_string(input.size()) + ", mlp expects " +
                     std::to_string(p.input_dim()));
  return mlp_forward_batch(p, input);
}

struct BatchBackward {
  MlpGrad grad;    // summed over the batch
  Mat input_grad;  // one column per sample
};

/// Reverse pass for sum_b output_grad(:, b) . f(x_b).
inline BatchBackward mlp_backward_batch(const MlpParams& p, const ForwardCache& cache,
                                        const Mat& output_grad) {
  if (output_grad.rows() != p.output_dim() || output_grad.cols() != cache.output().cols())
    throw ShapeError("output gradient shape does not match the forward batch");
  BatchBackward out;
  out.grad = MlpGrad::zeros_like(p);
  Mat delta = output_grad;
  for (std::size_t li = p.num_layers(); li-- > 0;) {
    if (p.activation_of(li) == Activation::Tanh)
      delta.array() *= 1.0 - cache.activations[li + 1].array().square();
    out.grad.weights[li].noalias() = delta * cache.activations[li].transpose();
    out.grad.biases[li] = delta.rowwise().sum();
    Mat next = p.weights[li].transpose() * delta;
    delta = std::move(next);
  }
  out.input_grad = std::move(delta);
  return out;
}

struct MlpBackward {
  MlpGrad grad;
  Vec input_grad;
};

inline MlpBackward mlp_backward(const MlpParams& p, const Vec& input, const Vec& output_grad) {
  if (output_grad.size() != p.output_dim())
    throw ShapeError("output gradient has length " + std::to_string(output_grad.size()) +
                     ", mlp output is " + std::to_string(p.output_dim()));
  ForwardCache cache = mlp_forward_cached(p, input);
  BatchBackward b = mlp_backward_batch(p, cache, output_grad);
  return {std::move(b.grad), b.input_grad.col(0)};
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  MlpGrad first_moment;
  MlpGrad second_moment;
  long step_count = 0;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline AdamState make_adam(const MlpParams& p, double learning_rate) {
  AdamState s;
  s.first_moment = MlpGrad::zeros_like(p);
  s.second_moment = MlpGrad::zeros_like(p);
  s.learning_rate = learning_rate;
  return s;
}

/// In-place bias-corrected Adam. Throws NumericError if any gradient entry is
/// non-finite; parameters are untouched in that case.
inline void adam_step_inplace(MlpParams& params, const MlpGrad& grads, AdamState& state) {
  if (grads.weights.size() != params.num_layers() || grads.biases.size() != params.num_layers())
    throw ShapeError("gradient layer count differs from parameters");
  for (std::size_t i = 0; i < params.num_layers(); ++i) {
    if (grads.weights[i].rows() != params.weights[i].rows() ||
        grads.weights[i].cols() != params.weights[i].cols() ||
        grads.biases[i].size() != params.biases[i].size())
      throw ShapeError("gradient shape differs from parameters at layer " + std::to_string(i));
    if (!grads.weights[i].allFinite() || !grads.biases[i].allFinite())
      throw NumericError("non-finite gradient in layer " + std::to_string(i));
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.num_layers(); ++i) {
    auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
      m = state.beta1 * m + (1.0 - state.beta1) * g;
      v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
      param.array() -=
          state.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
    };
    update(params.weights[i], grads.weights[i], state.first_moment.weights[i],
           state.second_moment.weights[i]);
    update(params.biases[i], grads.biases[i], state.first_moment.biases[i],
           state.second_moment.biases[i]);
  }
}

inline std::pair<MlpParams, AdamState> adam_step(MlpParams params, const MlpGrad& grads, AdamState state) {
  adam_step_inplace(params, grads, state);
  return {std::move(params), std::move(state)};
}

/// Adam for a bare parameter vector (the policy's log-std).
struct VecAdam {
  Vec m, v;
  long step_count = 0;
  double learning_rate = 3e-4, beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;

  static VecAdam for_size(Eigen::Index n, double lr) {
    VecAdam a;
    a.m = Vec::Zero(n);
    a.v = Vec::Zero(n);
    a.learning_rate = lr;
    return a;
  }

  void step(Vec& param, const Vec& g) {
    if (!g.allFinite()) throw NumericError("non-finite gradient in log-std");
    step_count += 1;
    const double t = static_cast<double>(step_count);
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    param.array() -= learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + epsilon);
  }
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// JSON document:
//   {"format": "isb-lab-ckpt-v1", "hidden_activation": "tanh",
//    "output_activation": "identity",
//    "layers": [{"rows": R, "cols": C, "weights": [R*C values, row-major],
//                "bias": [R values]}, ...]}
// Doubles are written with 17 significant digits so a load reproduces the
// parameters bit-exactly.

inline constexpr const char* kCheckpointFormat = "isb-lab-ckpt-v1";

inline nlohmann::json mlp_to_json(const MlpParams& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < p.num_layers(); ++i) {
    const Mat& w = p.weights[i];
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(w.size()));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) flat.push_back(w(r, c));
    std::vector<double> bias(p.biases[i].data(), p.biases[i].data() + p.biases[i].size());
    layers.push_back({{"rows", w.rows()}, {"cols", w.cols()}, {"weights", flat}, {"bias", bias}});
  }
  return {{"format", kCheckpointFormat},
          {"hidden_activation", activation_name(p.hidden_activation)},
          {"output_activation", activation_name(p.output_activation)},
          {"layers", layers}};
}

inline MlpParams mlp_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", std::string{}) != kCheckpointFormat)
    throw SchemaError(std::string("checkpoint is not in ") + kCheckpointFormat + " format");
  MlpParams p;
  p.hidden_activation = parse_activation(j.at("hidden_activation").get<std::string>());
  p.output_activation = parse_activation(j.at("output_activation").get<std::string>());
  for (const auto& layer : j.at("layers")) {
    const auto rows = layer.at("rows").get<Eigen::Index>();
    const auto cols = layer.at("cols").get<Eigen::Index>();
    const auto flat = layer.at("weights").get<std::vector<double>>();
    const auto bias = layer.at("bias").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(flat.size()) != rows * cols || static_cast<Eigen::Index>(bias.size()) != rows)
      throw SchemaError("checkpoint layer size does not match its declared shape");
    Mat w(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) w(r, c) = flat[static_cast<std::size_t>(r * cols + c)];
    p.weights.push_back(std::move(w));
    p.biases.push_back(Eigen::Map<const Vec>(bias.data(), rows));
  }
  try {
    validate_shapes(p);
  } catch (const ShapeError& e) {
    throw SchemaError(std::string("checkpoint: ") + e.what());
  }
  return p;
}

inline void save_checkpoint(const std::string& path, const MlpParams& p) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << mlp_to_json(p).dump() << '\n';
}

inline MlpParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  return mlp_from_json(nlohmann::json::parse(in));
}

}  // namespace isblab
