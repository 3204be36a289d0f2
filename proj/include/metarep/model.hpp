#pragma once

// Four conv blocks (3x3 conv -> batch norm -> ReLU, stride 2) followed by a
// dense head, the standard few-shot classifier backbone.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "metarep/autodiff.hpp"
#include "metarep/params.hpp"
#include "metarep/random.hpp"

namespace metarep {

struct NetConfig {
  std::size_t image_size = 28;
  std::size_t in_channels = 1;
  std::size_t filters = 8;
  std::size_t n_way = 5;
  bool use_batch_norm = true;
  // Stride-1 convs followed by 2x2 max pooling instead of stride-2 convs.
  bool max_pool = false;
  double bn_eps = 1e-3;

  void validate() const {
    if (image_size < 8) throw ConfigError("model.image_size must be >= 8");
    if (in_channels == 0 || filters == 0) throw ConfigError("model channels/filters must be positive");
    if (n_way < 2) throw ConfigError("model.n_way must be >= 2");
    if (!(bn_eps > 0.0)) throw ConfigError("model.bn_eps must be positive");
  }
};

inline constexpr std::size_t kConvBlocks = 4;
inline constexpr std::array<std::string_view, 5> kLayerNames = {"conv1", "conv2", "conv3", "conv4",
                                                                "head"};

inline bool is_layer_name(std::string_view name) {
  for (auto l : kLayerNames)
    if (l == name) return true;
  return false;
}

// Spatial extent after each block: ceil(previous / 2).
inline std::array<std::size_t, kConvBlocks> spatial_chain(std::size_t image_size) {
  std::array<std::size_t, kConvBlocks> out{};
  std::size_t s = image_size;
  for (std::size_t i = 0; i < kConvBlocks; ++i) {
    s = (s + 1) / 2;
    out[i] = s;
  }
  return out;
}

inline std::size_t head_input_dim(const NetConfig& cfg) {
  const std::size_t s = spatial_chain(cfg.image_size).back();
  return cfg.filters * s * s;
}

// Width of the flattened activation of `layer` per input.
inline std::size_t layer_dim(const NetConfig& cfg, std::string_view layer) {
  const auto chain = spatial_chain(cfg.image_size);
  for (std::size_t i = 0; i < kConvBlocks; ++i)
    if (kLayerNames[i] == layer) return cfg.filters * chain[i] * chain[i];
  if (layer == "head") return cfg.n_way;
  throw Error("unknown layer name '" + std::string(layer) + "'");
}

inline std::string block_param(std::size_t block, const char* what) {
  return "conv" + std::to_string(block + 1) + "." + what;
}
inline std::string norm_param(std::size_t block, const char* what) {
  return "bn" + std::to_string(block + 1) + "." + what;
}

inline bool is_norm_param(std::string_view name) { return name.substr(0, 2) == "bn"; }

// Expected name -> shape table for a config.
inline std::map<std::string, Shape> param_shapes(const NetConfig& cfg) {
  std::map<std::string, Shape> shapes;
  std::size_t in = cfg.in_channels;
  for (std::size_t b = 0; b < kConvBlocks; ++b) {
    shapes[block_param(b, "weight")] = {cfg.filters, in, 3, 3};
    shapes[block_param(b, "bias")] = {cfg.filters};
    if (cfg.use_batch_norm) {
      shapes[norm_param(b, "gamma")] = {cfg.filters};
      shapes[norm_param(b, "beta")] = {cfg.filters};
    }
    in = cfg.filters;
  }
  shapes["head.weight"] = {head_input_dim(cfg), cfg.n_way};
  shapes["head.bias"] = {cfg.n_way};
  return shapes;
}

inline void require_compatible(const ParamSet& params, const NetConfig& cfg) {
  const auto shapes = param_shapes(cfg);
  if (shapes.size() != params.size())
    throw ShapeError("parameter set has " + std::to_string(params.size()) + " entries, model expects " +
                     std::to_string(shapes.size()));
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("missing parameter '" + name + "'");
    if (it->second.shape() != shape)
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                       ", expected " + shape_str(shape));
  }
}

// Weights ~ N(0, 0.02) truncated at 2 sigma; biases and beta 0; gamma 1.
// Draws happen in lexicographic name order from a single stream.
inline ParamSet init_params(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed({seed, 0x1a17ULL}));
  ParamSet params;
  for (const auto& [name, shape] : param_shapes(cfg)) {
    Tensor t(shape);
    if (name.ends_with(".weight")) {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.truncated_normal(0.02, 2.0);
    } else if (name.ends_with(".gamma")) {
      t = Tensor(shape, 1.0);
    }
    params.emplace(name, std::move(t));
  }
  return params;
}

struct ForwardResult {
  Var logits;
  // conv1..conv4 block outputs, then head logits.
  std::vector<std::pair<std::string, Var>> acts;
};

inline ForwardResult forward(const VarMap& params, const Var& x, const NetConfig& cfg) {
  if (x.shape().size() != 4 || x.shape()[1] != cfg.in_channels || x.shape()[2] != cfg.image_size ||
      x.shape()[3] != cfg.image_size)
    throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match model (" +
                     std::to_string(cfg.in_channels) + " channels, " + std::to_string(cfg.image_size) +
                     "px)");
  const auto p = [&](const std::string& name) -> const Var& {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("forward: missing parameter '" + name + "'");
    return it->second;
  };
  ForwardResult r;
  Var h = x;
  for (std::size_t b = 0; b < kConvBlocks; ++b) {
    h = conv2d(h, p(block_param(b, "weight")), cfg.max_pool ? 1 : 2);
    const Shape& s = h.shape();
    h = add(h, expand_keep(p(block_param(b, "bias")), {s[0], s[1], s[2] * s[3]}, s));
    if (cfg.use_batch_norm)
      h = batch_norm_train(h, p(norm_param(b, "gamma")), p(norm_param(b, "beta")), cfg.bn_eps);
    h = relu(h);
    if (cfg.max_pool) h = max_pool2x2(h);
    r.acts.emplace_back(std::string(kLayerNames[b]), h);
  }
  const std::size_t n = x.shape()[0];
  Var flat = reshape(h, Shape{n, h.size() / n});
  r.logits = dense(flat, p("head.weight"), p("head.bias"));
  r.acts.emplace_back("head", r.logits);
  return r;
}

inline ForwardResult forward(const ParamSet& params, const Tensor& x, const NetConfig& cfg) {
  return forward(as_constants(params), Var::constant(x), cfg);
}

// Flattened activation of one layer for every probe row: P x d.
inline Tensor representation(const ParamSet& params, const Tensor& probe, const NetConfig& cfg,
                             std::string_view layer) {
  if (!is_layer_name(layer)) throw Error("unknown layer name '" + std::string(layer) + "'");
  NoRecordGuard no_record;
  ForwardResult r = forward(params, probe, cfg);
  for (const auto& [name, act] : r.acts)
    if (name == layer) {
      const std::size_t n = probe.shape()[0];
      return act.value().reshaped(Shape{n, act.size() / n});
    }
  throw Error("layer '" + std::string(layer) + "' not produced by forward");
}

// All five layers from one forward pass.
inline std::vector<Tensor> representations(const ParamSet& params, const Tensor& probe,
                                           const NetConfig& cfg) {
  NoRecordGuard no_record;
  ForwardResult r = forward(params, probe, cfg);
  std::vector<Tensor> out;
  const std::size_t n = probe.shape()[0];
  for (const auto& [name, act] : r.acts) out.push_back(act.value().reshaped(Shape{n, act.size() / n}));
  return out;
}

inline Var classification_loss(const VarMap& params, const Tensor& x, std::span<const int> labels,
                               const NetConfig& cfg) {
  return softmax_cross_entropy(forward(params, Var::constant(x), cfg).logits, labels);
}

inline double accuracy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    if (static_cast<int>(best) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace metarep
