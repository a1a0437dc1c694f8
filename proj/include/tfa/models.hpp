#pragma once

// Small differentiable classifiers: architecture description, flat parameter
// vector, per-example losses and plain-SGD training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tfa/autodiff.hpp"
#include "tfa/errors.hpp"
#include "tfa/random.hpp"
#include "tfa/tensor.hpp"

namespace tfa {

struct LabeledExample {
  Tensor x;
  std::size_t y = 0;
};

using Dataset = std::vector<LabeledExample>;

enum class LossKind { kCrossEntropy, kMse };

inline std::string to_string(LossKind k) { return k == LossKind::kCrossEntropy ? "cross-entropy" : "mse"; }

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "cross-entropy" || s == "ce") return LossKind::kCrossEntropy;
  if (s == "mse") return LossKind::kMse;
  throw InvalidArgument("unknown loss kind '" + s + "'");
}

struct LayerSpec {
  enum class Kind { kDense, kConv2d, kRelu, kMaxPool, kFlatten, kCrop };

  Kind kind = Kind::kRelu;
  std::size_t in = 0;   // dense: input features, conv: input channels
  std::size_t out = 0;  // dense: output features, conv: output channels
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pool = 0;
  // crop window
  std::size_t top = 0, left = 0, height = 0, width = 0;

  static LayerSpec dense(std::size_t in, std::size_t out) { return {Kind::kDense, in, out}; }
  static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride = 1) {
    return {Kind::kConv2d, in_ch, out_ch, kernel, stride};
  }
  static LayerSpec relu() { return {Kind::kRelu}; }
  static LayerSpec maxpool(std::size_t k) {
    LayerSpec l{Kind::kMaxPool};
    l.pool = k;
    return l;
  }
  static LayerSpec flatten() { return {Kind::kFlatten}; }
  // Keeps only the spatial window; pixels outside it never reach the model.
  static LayerSpec crop(std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
    LayerSpec l{Kind::kCrop};
    l.top = top;
    l.left = left;
    l.height = height;
    l.width = width;
    return l;
  }

  bool has_params() const { return kind == Kind::kDense || kind == Kind::kConv2d; }

  // Convolutions use "same" padding: kernel / 2 on every side.
  std::size_t padding() const { return kind == Kind::kConv2d ? kernel / 2 : 0; }

  std::string to_string() const {
    std::ostringstream os;
    switch (kind) {
      case Kind::kDense: os << "dense:" << in << ':' << out; break;
      case Kind::kConv2d: os << "conv:" << in << ':' << out << ':' << kernel << ':' << stride; break;
      case Kind::kRelu: os << "relu"; break;
      case Kind::kMaxPool: os << "maxpool:" << pool; break;
      case Kind::kFlatten: os << "flatten"; break;
      case Kind::kCrop: os << "crop:" << top << ':' << left << ':' << height << ':' << width; break;
    }
    return os.str();
  }
};

class ArchitectureSpec {
 public:
  ArchitectureSpec() = default;

  ArchitectureSpec(std::vector<LayerSpec> layers, Shape input_shape, std::size_t num_classes)
      : layers_(std::move(layers)), input_shape_(std::move(input_shape)), num_classes_(num_classes) {
    validate();
  }

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return num_classes_; }
  // Output shape of layer i.
  const Shape& output_shape(std::size_t i) const { return shapes_.at(i); }
  const Shape& layer_input_shape(std::size_t i) const { return i == 0 ? input_shape_ : shapes_.at(i - 1); }

  // conv(C->8,3x3) relu maxpool2 conv(8->16,3x3) relu maxpool2 flatten dense(->K)
  static ArchitectureSpec tiny_cnn(std::size_t channels, std::size_t height, std::size_t width,
                                   std::size_t classes) {
    const std::size_t flat = 16 * (height / 4) * (width / 4);
    return ArchitectureSpec({LayerSpec::conv2d(channels, 8, 3), LayerSpec::relu(), LayerSpec::maxpool(2),
                             LayerSpec::conv2d(8, 16, 3), LayerSpec::relu(), LayerSpec::maxpool(2),
                             LayerSpec::flatten(), LayerSpec::dense(flat, classes)},
                            {channels, height, width}, classes);
  }

  static ArchitectureSpec logistic(std::size_t features, std::size_t classes) {
    return ArchitectureSpec({LayerSpec::dense(features, classes)}, {features}, classes);
  }

  static ArchitectureSpec mlp(std::size_t features, const std::vector<std::size_t>& hidden, std::size_t classes) {
    std::vector<LayerSpec> layers;
    std::size_t prev = features;
    for (std::size_t h : hidden) {
      layers.push_back(LayerSpec::dense(prev, h));
      layers.push_back(LayerSpec::relu());
      prev = h;
    }
    layers.push_back(LayerSpec::dense(prev, classes));
    return ArchitectureSpec(std::move(layers), {features}, classes);
  }

  // Accepts a preset ("tiny-cnn", "logistic", "mlp:16:8") or a comma-separated
  // layer list such as "conv:3:8:3:1,relu,maxpool:2,flatten,dense:2048:3".
  static ArchitectureSpec parse(const std::string& text, const Shape& input_shape, std::size_t classes) {
    auto numel = shape_numel(input_shape);
    if (text == "tiny-cnn") {
      if (input_shape.size() != 3) throw InvalidArgument("tiny-cnn needs a [C,H,W] input");
      return tiny_cnn(input_shape[0], input_shape[1], input_shape[2], classes);
    }
    auto split = [](const std::string& s, char sep) {
      std::vector<std::string> parts;
      std::stringstream ss(s);
      std::string item;
      while (std::getline(ss, item, sep)) parts.push_back(item);
      return parts;
    };
    auto num = [&](const std::string& s) -> std::size_t {
      try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(s, &pos);
        if (pos != s.size()) throw InvalidArgument("");
        return static_cast<std::size_t>(v);
      } catch (...) {
        throw InvalidArgument("bad number '" + s + "' in architecture '" + text + "'");
      }
    };
    auto flatten_prefix = [&](std::vector<LayerSpec>& layers) {
      if (input_shape.size() != 1) layers.push_back(LayerSpec::flatten());
    };
    if (text == "logistic") {
      std::vector<LayerSpec> layers;
      flatten_prefix(layers);
      layers.push_back(LayerSpec::dense(numel, classes));
      return ArchitectureSpec(std::move(layers), input_shape, classes);
    }
    if (text.rfind("mlp", 0) == 0) {
      std::vector<LayerSpec> layers;
      flatten_prefix(layers);
      std::size_t prev = numel;
      auto parts = split(text, ':');
      for (std::size_t i = 1; i < parts.size(); ++i) {
        const std::size_t h = num(parts[i]);
        layers.push_back(LayerSpec::dense(prev, h));
        layers.push_back(LayerSpec::relu());
        prev = h;
      }
      layers.push_back(LayerSpec::dense(prev, classes));
      return ArchitectureSpec(std::move(layers), input_shape, classes);
    }
    std::vector<LayerSpec> layers;
    for (const std::string& item : split(text, ',')) {
      auto f = split(item, ':');
      if (f.empty()) throw InvalidArgument("empty layer in architecture '" + text + "'");
      const std::string& k = f[0];
      if (k == "dense" && f.size() == 3) {
        layers.push_back(LayerSpec::dense(num(f[1]), num(f[2])));
      } else if (k == "conv" && (f.size() == 4 || f.size() == 5)) {
        layers.push_back(LayerSpec::conv2d(num(f[1]), num(f[2]), num(f[3]), f.size() == 5 ? num(f[4]) : 1));
      } else if (k == "relu" && f.size() == 1) {
        layers.push_back(LayerSpec::relu());
      } else if (k == "maxpool" && f.size() == 2) {
        layers.push_back(LayerSpec::maxpool(num(f[1])));
      } else if (k == "flatten" && f.size() == 1) {
        layers.push_back(LayerSpec::flatten());
      } else if (k == "crop" && f.size() == 5) {
        layers.push_back(LayerSpec::crop(num(f[1]), num(f[2]), num(f[3]), num(f[4])));
      } else {
        throw InvalidArgument("unrecognized layer '" + item + "'");
      }
    }
    return ArchitectureSpec(std::move(layers), input_shape, classes);
  }

  std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (i) s += ',';
      s += layers_[i].to_string();
    }
    return s;
  }

 private:
  void validate() {
    if (layers_.empty()) throw ShapeError("architecture has no layers");
    if (num_classes_ < 1) throw ShapeError("architecture needs at least one class");
    shapes_.clear();
    Shape cur = input_shape_;
    for (const std::size_t d : cur) {
      if (d == 0) throw ShapeError("zero-sized input dimension");
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const LayerSpec& l = layers_[i];
      auto fail = [&](const std::string& why) {
        throw ShapeError("layer " + std::to_string(i) + " (" + l.to_string() + ") cannot consume " +
                         shape_str(cur) + ": " + why);
      };
      switch (l.kind) {
        case LayerSpec::Kind::kDense:
          if (cur.size() != 1 || cur[0] != l.in) fail("expected [" + std::to_string(l.in) + "]");
          if (l.out == 0) fail("zero outputs");
          cur = {l.out};
          break;
        case LayerSpec::Kind::kConv2d: {
          if (cur.size() != 3 || cur[0] != l.in) fail("expected [" + std::to_string(l.in) + ",H,W]");
          if (l.kernel == 0 || l.stride == 0 || l.out == 0) fail("bad conv parameters");
          const std::size_t pad = l.padding();
          if (cur[1] + 2 * pad < l.kernel || cur[2] + 2 * pad < l.kernel) fail("kernel larger than input");
          cur = {l.out, (cur[1] + 2 * pad - l.kernel) / l.stride + 1, (cur[2] + 2 * pad - l.kernel) / l.stride + 1};
          break;
        }
        case LayerSpec::Kind::kRelu:
          break;
        case LayerSpec::Kind::kMaxPool:
          if (cur.size() != 3 || l.pool == 0 || cur[1] < l.pool || cur[2] < l.pool) fail("bad pooling window");
          cur = {cur[0], cur[1] / l.pool, cur[2] / l.pool};
          break;
        case LayerSpec::Kind::kFlatten:
          cur = {shape_numel(cur)};
          break;
        case LayerSpec::Kind::kCrop:
          if (cur.size() != 3 || l.height == 0 || l.width == 0 || l.top + l.height > cur[1] ||
              l.left + l.width > cur[2]) {
            fail("crop window outside input");
          }
          cur = {cur[0], l.height, l.width};
          break;
      }
      shapes_.push_back(cur);
    }
    if (cur != Shape{num_classes_}) {
      throw ShapeError("final layer produces " + shape_str(cur) + ", expected [" + std::to_string(num_classes_) + "]");
    }
  }

  std::vector<LayerSpec> layers_;
  Shape input_shape_;
  std::size_t num_classes_ = 0;
  std::vector<Shape> shapes_;
};

struct Model {
  ArchitectureSpec arch;
  LossKind loss = LossKind::kCrossEntropy;
};

struct ParamSlice {
  std::size_t layer = 0;
  bool is_bias = false;
  std::size_t offset = 0;
  Shape shape;
  std::size_t size() const { return shape_numel(shape); }
};

inline std::vector<ParamSlice> param_layout(const ArchitectureSpec& arch) {
  std::vector<ParamSlice> layout;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < arch.layers().size(); ++i) {
    const LayerSpec& l = arch.layers()[i];
    if (!l.has_params()) continue;
    Shape w = l.kind == LayerSpec::Kind::kDense ? Shape{l.out, l.in} : Shape{l.out, l.in, l.kernel, l.kernel};
    layout.push_back({i, false, offset, w});
    offset += shape_numel(w);
    layout.push_back({i, true, offset, {l.out}});
    offset += l.out;
  }
  return layout;
}

// Flat parameter vector plus the slice of it owned by each layer.
struct ParamVector {
  Tensor flat;
  std::vector<ParamSlice> layout;

  std::size_t size() const { return flat.numel(); }
};

inline ParamVector make_params(const ArchitectureSpec& arch, Tensor flat) {
  auto layout = param_layout(arch);
  const std::size_t total = layout.empty() ? 0 : layout.back().offset + layout.back().size();
  if (flat.rank() != 1 || flat.numel() != total) {
    throw ShapeError("parameter vector of shape " + shape_str(flat.shape()) + " does not match architecture (" +
                     std::to_string(total) + " parameters)");
  }
  return {std::move(flat), std::move(layout)};
}

inline std::size_t param_count(const ArchitectureSpec& arch) {
  auto layout = param_layout(arch);
  return layout.empty() ? 0 : layout.back().offset + layout.back().size();
}

// Glorot-uniform weights, zero biases, drawn from the "init" stream of `seed`.
inline ParamVector init_params(const ArchitectureSpec& arch, std::uint64_t seed) {
  auto layout = param_layout(arch);
  const std::size_t total = layout.empty() ? 0 : layout.back().offset + layout.back().size();
  if (total == 0) throw ShapeError("architecture has no parameters");
  Tensor flat(Shape{total});
  Rng rng = make_rng(seed, "init");
  for (const ParamSlice& s : layout) {
    if (s.is_bias) continue;
    const LayerSpec& l = arch.layers()[s.layer];
    const double receptive = l.kind == LayerSpec::Kind::kConv2d ? static_cast<double>(l.kernel * l.kernel) : 1.0;
    const double fan_in = static_cast<double>(l.in) * receptive;
    const double fan_out = static_cast<double>(l.out) * receptive;
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::size_t i = 0; i < s.size(); ++i) flat[s.offset + i] = (2.0 * uniform01(rng) - 1.0) * a;
  }
  return {std::move(flat), std::move(layout)};
}

namespace detail {

inline ad::IndexList contiguous_index(std::size_t offset, std::size_t n) {
  auto idx = std::make_shared<std::vector<std::size_t>>(n);
  std::iota(idx->begin(), idx->end(), offset);
  return idx;
}

inline ad::IndexList crop_index(const Shape& in, const LayerSpec& l) {
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(in[0] * l.height * l.width);
  for (std::size_t c = 0; c < in[0]; ++c)
    for (std::size_t y = 0; y < l.height; ++y)
      for (std::size_t x = 0; x < l.width; ++x) idx->push_back((c * in[1] + l.top + y) * in[2] + l.left + x);
  return idx;
}

}  // namespace detail

// Applies layers [begin, end) to `input`, reading weights out of the flat
// parameter node `theta`.
inline ad::Var apply_layers(const ArchitectureSpec& arch, const std::vector<ParamSlice>& layout, ad::Var theta,
                            ad::Var input, std::size_t begin, std::size_t end) {
  ad::Var h = input;
  for (std::size_t i = begin; i < end; ++i) {
    const LayerSpec& l = arch.layers()[i];
    auto slice = [&](bool bias) {
      for (const ParamSlice& s : layout) {
        if (s.layer == i && s.is_bias == bias) {
          return ad::gather(theta, detail::contiguous_index(s.offset, s.size()), s.shape);
        }
      }
      throw ShapeError("no parameters for layer " + std::to_string(i));
    };
    switch (l.kind) {
      case LayerSpec::Kind::kDense: {
        ad::Var w = slice(false);
        ad::Var b = slice(true);
        ad::Var col = ad::reshape(h, {l.in, 1});
        h = ad::add(ad::reshape(ad::matmul(w, col), {l.out}), b);
        break;
      }
      case LayerSpec::Kind::kConv2d: {
        ad::Var w = slice(false);
        ad::Var b = slice(true);
        h = ad::channel_bias(ad::conv2d(h, w, l.stride, l.padding()), b);
        break;
      }
      case LayerSpec::Kind::kRelu:
        h = ad::relu(h);
        break;
      case LayerSpec::Kind::kMaxPool:
        h = ad::maxpool2d(h, l.pool);
        break;
      case LayerSpec::Kind::kFlatten:
        h = ad::reshape(h, {h.value().numel()});
        break;
      case LayerSpec::Kind::kCrop: {
        const Shape in = h.shape();
        h = ad::gather(h, detail::crop_index(in, l), {in[0], l.height, l.width});
        break;
      }
    }
  }
  return h;
}

inline ad::Var logits_node(const Model& model, const ParamVector& params, ad::Var theta, ad::Var x) {
  return apply_layers(model.arch, params.layout, theta, x, 0, model.arch.layers().size());
}

// Per-example loss of the logits node.
inline ad::Var loss_of_logits(ad::Var logits, std::size_t label, LossKind kind) {
  const std::size_t k = logits.value().numel();
  if (label >= k) {
    throw InvalidArgument("label " + std::to_string(label) + " out of range for " + std::to_string(k) + " classes");
  }
  if (kind == LossKind::kCrossEntropy) return ad::softmax_cross_entropy(logits, label);
  Tensor target(Shape{k});
  target[label] = 1.0;
  return ad::mse_loss(logits, target);
}

inline ad::Var loss_node(const Model& model, const ParamVector& params, ad::Var theta, ad::Var x,
                         std::size_t label) {
  if (x.shape() != model.arch.input_shape()) {
    throw ShapeError("example shape " + shape_str(x.shape()) + " does not match model input " +
                     shape_str(model.arch.input_shape()));
  }
  return loss_of_logits(logits_node(model, params, theta, x), label, model.loss);
}

inline double loss(const Model& model, const ParamVector& params, const LabeledExample& z) {
  ad::Graph g;
  ad::Var theta = g.constant(params.flat);
  ad::Var x = g.constant(z.x);
  return loss_node(model, params, theta, x, z.y).value().item();
}

inline Tensor logits(const Model& model, const ParamVector& params, const Tensor& x) {
  ad::Graph g;
  return logits_node(model, params, g.constant(params.flat), g.constant(x)).value();
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::size_t predict(const Model& model, const ParamVector& params, const Tensor& x) {
  return argmax(logits(model, params, x).data());
}

inline double accuracy(const Model& model, const ParamVector& params, const Dataset& data) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& z : data) hits += predict(model, params, z.x) == z.y ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// Gradient of the per-example loss with respect to the flat parameters.
inline Tensor param_grad(const Model& model, const ParamVector& params, const LabeledExample& z) {
  ad::Graph g;
  ad::Var theta = g.leaf(params.flat);
  ad::Var x = g.constant(z.x);
  return ad::grad(loss_node(model, params, theta, x, z.y), theta);
}

// theta - lr * g
inline ParamVector sgd_step(const ParamVector& params, const Tensor& gradient, double lr) {
  if (gradient.numel() != params.size()) {
    throw ShapeError("sgd_step: gradient length " + std::to_string(gradient.numel()) + " != parameter count " +
                     std::to_string(params.size()));
  }
  ParamVector out = params;
  for (std::size_t i = 0; i < out.size(); ++i) out.flat[i] = params.flat[i] - lr * gradient[i];
  return out;
}

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::kCrossEntropy;
};

struct EpochStats {
  double mean_loss = 0.0;  // mean per-example loss seen during the epoch, before each update
  double accuracy = 0.0;
};

struct TrainResult {
  ParamVector params;
  std::vector<EpochStats> history;
};

// Mini-batch SGD on the mean per-example loss. Shuffles come from the
// "shuffle" stream of config.seed, one draw per epoch, so runs are replayable.
inline TrainResult train(const Dataset& data, const ArchitectureSpec& arch, const TrainConfig& config) {
  if (data.empty()) throw InvalidArgument("train: empty dataset");
  if (!(config.learning_rate > 0.0)) throw InvalidArgument("train: learning rate must be positive");
  if (config.batch_size == 0) throw InvalidArgument("train: batch size must be positive");
  const Model model{arch, config.loss};
  TrainResult result{init_params(arch, config.seed), {}};
  ParamVector& params = result.params;
  Rng rng = make_rng(config.seed, "shuffle");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      Tensor batch_grad(Shape{params.size()});
      for (std::size_t j = start; j < stop; ++j) {
        const LabeledExample& z = data[order[j]];
        ad::Graph g;
        ad::Var theta = g.leaf(params.flat);
        ad::Var logit = logits_node(model, params, theta, g.constant(z.x));
        hits += argmax(logit.value().data()) == z.y ? 1 : 0;
        ad::Var l = loss_of_logits(logit, z.y, model.loss);
        loss_sum += l.value().item();
        const Tensor gr = ad::grad(l, theta);
        for (std::size_t i = 0; i < gr.numel(); ++i) batch_grad[i] += gr[i];
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (double& v : batch_grad.data()) v *= inv;
      params = sgd_step(params, batch_grad, config.learning_rate);
    }
    const double n = static_cast<double>(data.size());
    result.history.push_back({loss_sum / n, static_cast<double>(hits) / n});
  }
  return result;
}

}  // namespace tfa
