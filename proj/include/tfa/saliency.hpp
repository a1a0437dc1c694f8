#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tfa/autodiff.hpp"
#include "tfa/errors.hpp"
#include "tfa/models.hpp"
#include "tfa/random.hpp"
#include "tfa/tda.hpp"

namespace tfa {

struct SaliencyMeta {
  std::size_t train_index = 0;
  std::size_t test_index = 0;
  std::string method = "tfa";
  double sigma = 0.0;
  std::size_t samples = 1;
  std::uint64_t seed = 0;
};

// Signed attribution over the pixels of one training image; same shape as the image.
struct SaliencyMap {
  Tensor values;
  SaliencyMeta meta;
};

// Non-negative per-pixel importance, shape [H, W].
struct ImportanceGrid {
  Tensor values;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
};

struct SaliencyOptions {
  std::size_t train_index = 0;
  std::size_t test_index = 0;
  bool use_predicted_label = false;  // explain the model's prediction for the test image
};

// d/dx_train of cos(grad_theta L(z_train), grad_theta L(z_test)), by a second
// reverse pass through the recorded train gradient.
inline SaliencyMap tfa_saliency(const Model& model, const ParamVector& params, const LabeledExample& z_train,
                                const LabeledExample& z_test, const SaliencyOptions& opt = {}) {
  const LabeledExample target = test_target(model, params, z_test, opt.use_predicted_label);
  const Tensor g_test = param_grad(model, params, target);

  ad::Graph g;
  ad::Var theta = g.leaf(params.flat);
  ad::Var x = g.leaf(z_train.x);
  ad::Var loss_train = loss_node(model, params, theta, x, z_train.y);
  ad::Var g_train = ad::backward_recorded(loss_train, {theta})[0];
  grad_cos_of(g_train.value(), g_test);  // throws on degenerate gradients
  ad::Var score = ad::cosine(g_train, g.constant(g_test));

  SaliencyMap out{ad::grad(score, x), {opt.train_index, opt.test_index, "tfa", 0.0, 1, 0}};
  require_finite(out.values, "tfa_saliency");
  return out;
}

struct SmoothGradOptions {
  double sigma = 0.1;       // noise std as a fraction of the [0, 1] pixel range
  std::size_t samples = 50;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

// Mean of tfa_saliency over `samples` gaussian perturbations of the training
// image. Each sample draws from its own stream, and the sum runs in sample
// order, so the result does not depend on the thread count.
inline SaliencyMap smoothgrad_saliency(const Model& model, const ParamVector& params, const LabeledExample& z_train,
                                       const LabeledExample& z_test, const SmoothGradOptions& sg,
                                       const SaliencyOptions& opt = {}) {
  if (!(sg.sigma >= 0.0) || !std::isfinite(sg.sigma)) throw InvalidArgument("smoothgrad: sigma must be >= 0");
  if (sg.samples < 1) throw InvalidArgument("smoothgrad: need at least one sample");
  const SaliencyMeta meta{opt.train_index, opt.test_index, "smoothgrad", sg.sigma, sg.samples, sg.seed};
  if (sg.sigma == 0.0) return {tfa_saliency(model, params, z_train, z_test, opt).values, meta};

  std::vector<Tensor> maps(sg.samples);
  parallel_for(sg.samples, sg.threads, [&](std::size_t s) {
    Rng rng = make_rng(sg.seed, "smoothgrad", s);
    LabeledExample noisy = z_train;
    for (double& v : noisy.x.data()) v += sg.sigma * standard_normal(rng);
    maps[s] = tfa_saliency(model, params, noisy, z_test, opt).values;
  });
  Tensor mean(z_train.x.shape());
  for (const Tensor& m : maps) {
    for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] += m[i];
  }
  const double inv = 1.0 / static_cast<double>(sg.samples);
  for (double& v : mean.data()) v *= inv;
  return {std::move(mean), meta};
}

enum class ChannelMode { kAbsSum, kL2 };

inline std::string to_string(ChannelMode m) { return m == ChannelMode::kAbsSum ? "abs-sum" : "l2"; }

inline ChannelMode parse_channel_mode(const std::string& s) {
  if (s == "abs-sum") return ChannelMode::kAbsSum;
  if (s == "l2") return ChannelMode::kL2;
  throw InvalidArgument("unknown channel aggregation '" + s + "' (abs-sum, l2)");
}

// Collapses a [C, H, W] (or [H, W]) map to per-pixel importance.
inline ImportanceGrid channel_aggregate(const Tensor& map, ChannelMode mode) {
  if (map.rank() != 2 && map.rank() != 3) {
    throw ShapeError("channel_aggregate expects [C,H,W] or [H,W], got " + shape_str(map.shape()));
  }
  const std::size_t c = map.rank() == 3 ? map.dim(0) : 1;
  const std::size_t h = map.dim(map.rank() - 2), w = map.dim(map.rank() - 1);
  Tensor out(Shape{h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < h * w; ++p) {
      const double v = map[ch * h * w + p];
      out[p] += mode == ChannelMode::kAbsSum ? std::abs(v) : v * v;
    }
  }
  if (mode == ChannelMode::kL2) {
    for (double& v : out.data()) v = std::sqrt(v);
  }
  return {std::move(out)};
}

inline ImportanceGrid channel_aggregate(const SaliencyMap& map, ChannelMode mode) {
  return channel_aggregate(map.values, mode);
}

// Bilinear resize of an [h, w] grid to [height, width] with corner pixels aligned.
inline Tensor bilinear_upsample(const Tensor& grid, std::size_t height, std::size_t width) {
  if (grid.rank() != 2) throw ShapeError("bilinear_upsample expects [h,w], got " + shape_str(grid.shape()));
  if (height == 0 || width == 0) throw InvalidArgument("bilinear_upsample: empty target");
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  auto coord = [](std::size_t i, std::size_t out, std::size_t in) {
    return out <= 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
  };
  Tensor out(Shape{height, width});
  for (std::size_t i = 0; i < height; ++i) {
    const double fy = coord(i, height, h);
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), h - 1), y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t j = 0; j < width; ++j) {
      const double fx = coord(j, width, w);
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), w - 1), x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = (1 - tx) * grid[y0 * w + x0] + tx * grid[y0 * w + x1];
      const double bottom = (1 - tx) * grid[y1 * w + x0] + tx * grid[y1 * w + x1];
      out[i * width + j] = (1 - ty) * top + ty * bottom;
    }
  }
  return out;
}

namespace detail {

inline Tensor activation_at(const Model& model, const ParamVector& params, const Tensor& x, std::size_t layer) {
  ad::Graph g;
  return apply_layers(model.arch, params.layout, g.constant(params.flat), g.constant(x), 0, layer + 1).value();
}

inline ad::Var loss_from_layer(const Model& model, const ParamVector& params, ad::Var h, std::size_t layer,
                               std::size_t label) {
  ad::Graph& g = h.graph();
  ad::Var logits =
      apply_layers(model.arch, params.layout, g.constant(params.flat), h, layer + 1, model.arch.layers().size());
  return loss_of_logits(logits, label, model.loss);
}

inline void require_spatial_layer(const Model& model, std::size_t layer) {
  if (layer >= model.arch.layers().size()) {
    throw InvalidArgument("layer index " + std::to_string(layer) + " out of range");
  }
  if (model.arch.input_shape().size() != 3 || model.arch.output_shape(layer).size() != 3) {
    throw InvalidArgument("layer " + std::to_string(layer) + " output " + shape_str(model.arch.output_shape(layer)) +
                          " is not a [C,H,W] activation");
  }
}

}  // namespace detail

// Signed d/dh_train of cos(dL_test/dh at test activations, dL_train/dh at
// train activations), where h is the output of `layer`. Shape [C, H', W'].
inline Tensor layer_saliency_raw(const Model& model, const ParamVector& params, const LabeledExample& z_train,
                                 const LabeledExample& z_test, std::size_t layer, const SaliencyOptions& opt = {}) {
  detail::require_spatial_layer(model, layer);
  const LabeledExample target = test_target(model, params, z_test, opt.use_predicted_label);
  Tensor g_test_h;
  {
    ad::Graph g;
    ad::Var h = g.leaf(detail::activation_at(model, params, target.x, layer));
    g_test_h = ad::grad(detail::loss_from_layer(model, params, h, layer, target.y), h);
  }
  ad::Graph g;
  ad::Var h = g.leaf(detail::activation_at(model, params, z_train.x, layer));
  ad::Var g_train_h = ad::backward_recorded(detail::loss_from_layer(model, params, h, layer, z_train.y), {h})[0];
  grad_cos_of(g_train_h.value(), g_test_h);
  const Shape shape = h.shape();
  ad::Var score = ad::cosine(ad::reshape(g_train_h, {shape_numel(shape)}),
                             g.constant(g_test_h.reshaped({shape_numel(shape)})));
  return ad::grad(score, h);
}

// Channel-mean of |layer_saliency_raw|, bilinearly resized to the input H x W.
inline ImportanceGrid layer_saliency(const Model& model, const ParamVector& params, const LabeledExample& z_train,
                                     const LabeledExample& z_test, std::size_t layer,
                                     const SaliencyOptions& opt = {}) {
  const Tensor raw = layer_saliency_raw(model, params, z_train, z_test, layer, opt);
  const std::size_t c = raw.dim(0), h = raw.dim(1), w = raw.dim(2);
  Tensor grid(Shape{h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < h * w; ++p) grid[p] += std::abs(raw[ch * h * w + p]);
  }
  for (double& v : grid.data()) v /= static_cast<double>(c);
  const Shape& in = model.arch.input_shape();
  return {bilinear_upsample(grid, in[1], in[2])};
}

}  // namespace tfa
