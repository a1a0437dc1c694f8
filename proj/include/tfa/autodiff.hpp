#pragma once

// Tape-based reverse-mode automatic differentiation over tensors.
//
// Every op appends a node to a Graph. backward() walks the graph in reverse
// id order and expresses each adjoint as new graph ops, so the gradients it
// returns are themselves differentiable nodes (double backprop). The
// value-only entry points discard those nodes afterwards.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tfa/errors.hpp"
#include "tfa/tensor.hpp"

namespace tfa::ad {

using NodeId = std::size_t;
using IndexList = std::shared_ptr<const std::vector<std::size_t>>;

enum class OpKind {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,     // tensor * compile-time constant
  kScaleBy,   // tensor * scalar node
  kSqrt,
  kLog,
  kExp,
  kSum,
  kBroadcast,  // scalar -> shape
  kDot,
  kMatMul,
  kTranspose,
  kReshape,
  kGather,   // out[i] = in[index[i]]; also max-pool with fixed argmax
  kScatter,  // out[index[i]] += in[i]
  kConv2d,
  kConv2dInputGrad,
  kConv2dWeightGrad,
  kChannelBias,
  kChannelSum,
  kChannelBroadcast,
  kRelu,
  kSoftmax,
  kSoftmaxCrossEntropy,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kNeg: return "neg";
    case OpKind::kScale: return "scale";
    case OpKind::kScaleBy: return "scale_by";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kSum: return "sum";
    case OpKind::kBroadcast: return "broadcast";
    case OpKind::kDot: return "dot";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kGather: return "gather";
    case OpKind::kScatter: return "scatter";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kConv2dInputGrad: return "conv2d_input_grad";
    case OpKind::kConv2dWeightGrad: return "conv2d_weight_grad";
    case OpKind::kChannelBias: return "channel_bias";
    case OpKind::kChannelSum: return "channel_sum";
    case OpKind::kChannelBroadcast: return "channel_broadcast";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "?";
}

struct OpAttrs {
  double factor = 0.0;      // kScale
  std::size_t label = 0;    // kSoftmaxCrossEntropy
  std::size_t stride = 1;   // conv family
  std::size_t pad = 0;      // conv family
  Shape shape;              // target shape for reshape/broadcast/gather/scatter/conv grads
  IndexList index;          // gather/scatter
};

struct Node {
  OpKind op = OpKind::kConstant;
  std::vector<NodeId> parents;
  OpAttrs attrs;
  Tensor value;
};

class Graph;

// Handle to a node of a graph. Cheap to copy; valid while the node exists.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  NodeId id() const { return id_; }
  Graph& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

namespace detail {

[[noreturn]] inline void shape_fail(OpKind op, const std::vector<const Tensor*>& in,
                                    const std::string& what = {}) {
  std::string msg = std::string(op_name(op)) + ": incompatible shapes";
  for (const Tensor* t : in) msg += " " + shape_str(t->shape());
  if (!what.empty()) msg += " (" + what + ")";
  throw ShapeError(msg);
}

inline void require_same(OpKind op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, {&a, &b});
}

inline void require_scalar(OpKind op, const Tensor& a, const std::vector<const Tensor*>& all) {
  if (a.numel() != 1 || a.rank() > 1) shape_fail(op, all, "expected a scalar");
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

struct ConvGeom {
  std::size_t in_ch, in_h, in_w, out_ch, k_h, k_w, out_h, out_w, stride, pad;
};

// Output positions o in [lo, hi) whose tap o*stride + k - pad lands inside [0, extent).
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t k, std::size_t pad, std::size_t stride,
                                                     std::size_t extent, std::size_t out_len) {
  const long s = static_cast<long>(stride);
  const long off = static_cast<long>(k) - static_cast<long>(pad);
  long lo = 0;
  if (off < 0) lo = (-off + s - 1) / s;
  const long last = static_cast<long>(extent) - 1 - off;
  if (last < 0) return {0, 0};
  long hi = last / s + 1;
  hi = std::min(hi, static_cast<long>(out_len));
  if (hi < lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Calls f(o, c, ky, kx, oy_lo, oy_hi, ox_lo, ox_hi) for every kernel tap.
template <class F>
void for_each_tap(const ConvGeom& g, F&& f) {
  for (std::size_t o = 0; o < g.out_ch; ++o) {
    for (std::size_t c = 0; c < g.in_ch; ++c) {
      for (std::size_t ky = 0; ky < g.k_h; ++ky) {
        auto [oy_lo, oy_hi] = tap_range(ky, g.pad, g.stride, g.in_h, g.out_h);
        if (oy_lo >= oy_hi) continue;
        for (std::size_t kx = 0; kx < g.k_w; ++kx) {
          auto [ox_lo, ox_hi] = tap_range(kx, g.pad, g.stride, g.in_w, g.out_w);
          if (ox_lo >= ox_hi) continue;
          f(o, c, ky, kx, oy_lo, oy_hi, ox_lo, ox_hi);
        }
      }
    }
  }
}

inline ConvGeom conv_geom(OpKind op, const Shape& x, const Shape& w, std::size_t stride, std::size_t pad,
                          const std::vector<const Tensor*>& all) {
  if (x.size() != 3 || w.size() != 4 || x[0] != w[1] || stride == 0) {
    shape_fail(op, all, "expected x[C,H,W] and w[O,C,KH,KW]");
  }
  if (x[1] + 2 * pad < w[2] || x[2] + 2 * pad < w[3]) shape_fail(op, all, "kernel larger than padded input");
  ConvGeom g{x[0], x[1], x[2], w[0], w[2], w[3], 0, 0, stride, pad};
  g.out_h = (x[1] + 2 * pad - w[2]) / stride + 1;
  g.out_w = (x[2] + 2 * pad - w[3]) / stride + 1;
  return g;
}

inline Tensor conv2d_forward(const Tensor& x, const Tensor& w, const ConvGeom& g) {
  Tensor out(Shape{g.out_ch, g.out_h, g.out_w});
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  double* od = out.data().data();
  for_each_tap(g, [&](std::size_t o, std::size_t c, std::size_t ky, std::size_t kx, std::size_t oy_lo,
                      std::size_t oy_hi, std::size_t ox_lo, std::size_t ox_hi) {
    const double wv = wd[((o * g.in_ch + c) * g.k_h + ky) * g.k_w + kx];
    for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
      const std::size_t iy = oy * g.stride + ky - g.pad;
      double* orow = od + (o * g.out_h + oy) * g.out_w;
      const double* xrow = xd + (c * g.in_h + iy) * g.in_w;
      if (g.stride == 1) {
        const double* xs = xrow + (ox_lo + kx - g.pad);
        double* os = orow + ox_lo;
        for (std::size_t j = 0; j < ox_hi - ox_lo; ++j) os[j] += wv * xs[j];
      } else {
        for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
      }
    }
  });
  return out;
}

// d(<G, conv(x, w)>)/dx
inline Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const ConvGeom& g) {
  Tensor dx(Shape{g.in_ch, g.in_h, g.in_w});
  const double* gd = grad_out.data().data();
  const double* wd = w.data().data();
  double* xd = dx.data().data();
  for_each_tap(g, [&](std::size_t o, std::size_t c, std::size_t ky, std::size_t kx, std::size_t oy_lo,
                      std::size_t oy_hi, std::size_t ox_lo, std::size_t ox_hi) {
    const double wv = wd[((o * g.in_ch + c) * g.k_h + ky) * g.k_w + kx];
    for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
      const std::size_t iy = oy * g.stride + ky - g.pad;
      const double* grow = gd + (o * g.out_h + oy) * g.out_w;
      double* xrow = xd + (c * g.in_h + iy) * g.in_w;
      for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) xrow[ox * g.stride + kx - g.pad] += wv * grow[ox];
    }
  });
  return dx;
}

// d(<G, conv(x, w)>)/dw
inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const ConvGeom& g) {
  Tensor dw(Shape{g.out_ch, g.in_ch, g.k_h, g.k_w});
  const double* gd = grad_out.data().data();
  const double* xd = x.data().data();
  double* wd = dw.data().data();
  for_each_tap(g, [&](std::size_t o, std::size_t c, std::size_t ky, std::size_t kx, std::size_t oy_lo,
                      std::size_t oy_hi, std::size_t ox_lo, std::size_t ox_hi) {
    double acc = 0.0;
    for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
      const std::size_t iy = oy * g.stride + ky - g.pad;
      const double* grow = gd + (o * g.out_h + oy) * g.out_w;
      const double* xrow = xd + (c * g.in_h + iy) * g.in_w;
      for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) acc += grow[ox] * xrow[ox * g.stride + kx - g.pad];
    }
    wd[((o * g.in_ch + c) * g.k_h + ky) * g.k_w + kx] += acc;
  });
  return dw;
}

inline std::vector<double> softmax_values(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

inline Tensor evaluate(OpKind op, const std::vector<const Tensor*>& in, const OpAttrs& at) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) + " parents, got " +
                       std::to_string(in.size()));
    }
  };
  switch (op) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      throw ShapeError("leaf/constant nodes are not recorded through evaluate()");
    case OpKind::kAdd:
      arity(2);
      require_same(op, *in[0], *in[1]);
      return map_binary(*in[0], *in[1], [](double a, double b) { return a + b; });
    case OpKind::kSub:
      arity(2);
      require_same(op, *in[0], *in[1]);
      return map_binary(*in[0], *in[1], [](double a, double b) { return a - b; });
    case OpKind::kMul:
      arity(2);
      require_same(op, *in[0], *in[1]);
      return map_binary(*in[0], *in[1], [](double a, double b) { return a * b; });
    case OpKind::kDiv:
      arity(2);
      require_same(op, *in[0], *in[1]);
      return map_binary(*in[0], *in[1], [](double a, double b) { return a / b; });
    case OpKind::kNeg:
      arity(1);
      return map_unary(*in[0], [](double a) { return -a; });
    case OpKind::kScale: {
      arity(1);
      const double f = at.factor;
      return map_unary(*in[0], [f](double a) { return a * f; });
    }
    case OpKind::kScaleBy: {
      arity(2);
      require_scalar(op, *in[1], in);
      const double s = (*in[1])[0];
      return map_unary(*in[0], [s](double a) { return a * s; });
    }
    case OpKind::kSqrt:
      arity(1);
      return map_unary(*in[0], [](double a) { return std::sqrt(a); });
    case OpKind::kLog:
      arity(1);
      return map_unary(*in[0], [](double a) { return std::log(a); });
    case OpKind::kExp:
      arity(1);
      return map_unary(*in[0], [](double a) { return std::exp(a); });
    case OpKind::kSum: {
      arity(1);
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      return Tensor::scalar(s);
    }
    case OpKind::kBroadcast:
      arity(1);
      require_scalar(op, *in[0], in);
      return Tensor(at.shape, (*in[0])[0]);
    case OpKind::kDot:
      arity(2);
      if (in[0]->numel() != in[1]->numel()) shape_fail(op, in);
      return Tensor::scalar(dot(in[0]->data(), in[1]->data()));
    case OpKind::kMatMul: {
      arity(2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail(op, in);
      const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
      Tensor out(Shape{m, n});
      for (std::size_t i = 0; i < m; ++i) {
        double* orow = &out[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a[i * k + p];
          const double* brow = b.data().data() + p * n;
          for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
      }
      return out;
    }
    case OpKind::kTranspose: {
      arity(1);
      const Tensor& a = *in[0];
      if (a.rank() != 2) shape_fail(op, in, "expected a matrix");
      const std::size_t m = a.dim(0), n = a.dim(1);
      Tensor out(Shape{n, m});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
      return out;
    }
    case OpKind::kReshape:
      arity(1);
      if (shape_numel(at.shape) != in[0]->numel()) shape_fail(op, in, "target " + shape_str(at.shape));
      return in[0]->reshaped(at.shape);
    case OpKind::kGather: {
      arity(1);
      const auto& idx = *at.index;
      if (shape_numel(at.shape) != idx.size()) shape_fail(op, in, "index/shape length mismatch");
      Tensor out(at.shape);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= in[0]->numel()) shape_fail(op, in, "index out of range");
        out[i] = (*in[0])[idx[i]];
      }
      return out;
    }
    case OpKind::kScatter: {
      arity(1);
      const auto& idx = *at.index;
      if (in[0]->numel() != idx.size()) shape_fail(op, in, "index/input length mismatch");
      Tensor out(at.shape);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= out.numel()) shape_fail(op, in, "index out of range");
        out[idx[i]] += (*in[0])[i];
      }
      return out;
    }
    case OpKind::kConv2d: {
      arity(2);
      const ConvGeom g = conv_geom(op, in[0]->shape(), in[1]->shape(), at.stride, at.pad, in);
      return conv2d_forward(*in[0], *in[1], g);
    }
    case OpKind::kConv2dInputGrad: {
      arity(2);  // (grad_out, w), attrs.shape = input shape
      const ConvGeom g = conv_geom(op, at.shape, in[1]->shape(), at.stride, at.pad, in);
      if (in[0]->shape() != Shape{g.out_ch, g.out_h, g.out_w}) shape_fail(op, in, "grad_out shape");
      return conv2d_input_grad(*in[0], *in[1], g);
    }
    case OpKind::kConv2dWeightGrad: {
      arity(2);  // (x, grad_out), attrs.shape = weight shape
      const ConvGeom g = conv_geom(op, in[0]->shape(), at.shape, at.stride, at.pad, in);
      if (in[1]->shape() != Shape{g.out_ch, g.out_h, g.out_w}) shape_fail(op, in, "grad_out shape");
      return conv2d_weight_grad(*in[0], *in[1], g);
    }
    case OpKind::kChannelBias: {
      arity(2);
      const Tensor& y = *in[0];
      const Tensor& b = *in[1];
      if (y.rank() != 3 || b.rank() != 1 || b.dim(0) != y.dim(0)) shape_fail(op, in);
      Tensor out = y;
      const std::size_t plane = y.dim(1) * y.dim(2);
      for (std::size_t c = 0; c < y.dim(0); ++c)
        for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += b[c];
      return out;
    }
    case OpKind::kChannelSum: {
      arity(1);
      const Tensor& y = *in[0];
      if (y.rank() != 3) shape_fail(op, in, "expected [C,H,W]");
      const std::size_t plane = y.dim(1) * y.dim(2);
      Tensor out(Shape{y.dim(0)});
      for (std::size_t c = 0; c < y.dim(0); ++c)
        for (std::size_t i = 0; i < plane; ++i) out[c] += y[c * plane + i];
      return out;
    }
    case OpKind::kChannelBroadcast: {
      arity(1);
      const Tensor& b = *in[0];
      if (at.shape.size() != 3 || b.rank() != 1 || b.dim(0) != at.shape[0]) shape_fail(op, in);
      Tensor out(at.shape);
      const std::size_t plane = at.shape[1] * at.shape[2];
      for (std::size_t c = 0; c < at.shape[0]; ++c)
        for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = b[c];
      return out;
    }
    case OpKind::kRelu:
      arity(1);
      return map_unary(*in[0], [](double a) { return a > 0.0 ? a : 0.0; });
    case OpKind::kSoftmax:
      arity(1);
      if (in[0]->rank() != 1) shape_fail(op, in, "expected a vector");
      return Tensor(in[0]->shape(), softmax_values(in[0]->data()));
    case OpKind::kSoftmaxCrossEntropy: {
      arity(1);
      const Tensor& z = *in[0];
      if (z.rank() != 1) shape_fail(op, in, "expected a logit vector");
      if (at.label >= z.numel()) {
        throw InvalidArgument("softmax_cross_entropy: label " + std::to_string(at.label) +
                              " out of range for " + std::to_string(z.numel()) + " classes");
      }
      const double m = *std::max_element(z.data().begin(), z.data().end());
      double s = 0.0;
      for (double v : z.data()) s += std::exp(v - m);
      return Tensor::scalar(m + std::log(s) - z[at.label]);
    }
  }
  throw ShapeError("unknown op");
}

}  // namespace detail

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Differentiable input (parameters, images, activations).
  Var leaf(Tensor value) {
    require_finite(value, "Graph::leaf");
    nodes_.push_back(Node{OpKind::kLeaf, {}, {}, std::move(value)});
    return {this, nodes_.size() - 1};
  }

  // Non-differentiable input; backward never propagates into it.
  Var constant(Tensor value) {
    nodes_.push_back(Node{OpKind::kConstant, {}, {}, std::move(value)});
    return {this, nodes_.size() - 1};
  }

  Var record(OpKind op, std::vector<NodeId> parents, OpAttrs attrs = {}) {
    std::vector<const Tensor*> in;
    in.reserve(parents.size());
    for (NodeId p : parents) {
      if (p >= nodes_.size()) throw ShapeError(std::string(op_name(op)) + ": unknown parent node");
      in.push_back(&nodes_[p].value);
    }
    Tensor value = detail::evaluate(op, in, attrs);
    nodes_.push_back(Node{op, std::move(parents), std::move(attrs), std::move(value)});
    return {this, nodes_.size() - 1};
  }

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  bool is_leaf(NodeId id) const { return nodes_.at(id).op == OpKind::kLeaf; }

  // Drops every node with id >= new_size.
  void truncate(std::size_t new_size) {
    if (new_size < nodes_.size()) nodes_.resize(new_size);
  }

 private:
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->node(id_).value; }

// ---------------------------------------------------------------------------
// Op constructors

namespace detail {
inline Graph& same_graph(const Var& a, const Var& b) {
  if (&a.graph() != &b.graph()) throw ShapeError("operands belong to different graphs");
  return a.graph();
}
}  // namespace detail

inline Var add(Var a, Var b) { return detail::same_graph(a, b).record(OpKind::kAdd, {a.id(), b.id()}); }
inline Var sub(Var a, Var b) { return detail::same_graph(a, b).record(OpKind::kSub, {a.id(), b.id()}); }
inline Var mul(Var a, Var b) { return detail::same_graph(a, b).record(OpKind::kMul, {a.id(), b.id()}); }
inline Var div(Var a, Var b) { return detail::same_graph(a, b).record(OpKind::kDiv, {a.id(), b.id()}); }
inline Var neg(Var a) { return a.graph().record(OpKind::kNeg, {a.id()}); }

inline Var scale(Var a, double factor) {
  OpAttrs at;
  at.factor = factor;
  return a.graph().record(OpKind::kScale, {a.id()}, std::move(at));
}

// Tensor times a scalar node.
inline Var scale_by(Var t, Var s) { return detail::same_graph(t, s).record(OpKind::kScaleBy, {t.id(), s.id()}); }

inline Var sqrt(Var a) { return a.graph().record(OpKind::kSqrt, {a.id()}); }
inline Var log(Var a) { return a.graph().record(OpKind::kLog, {a.id()}); }
inline Var exp(Var a) { return a.graph().record(OpKind::kExp, {a.id()}); }
inline Var sum(Var a) { return a.graph().record(OpKind::kSum, {a.id()}); }

inline Var broadcast(Var s, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return s.graph().record(OpKind::kBroadcast, {s.id()}, std::move(at));
}

inline Var dot(Var a, Var b) { return detail::same_graph(a, b).record(OpKind::kDot, {a.id(), b.id()}); }
inline Var matmul(Var a, Var b) { return detail::same_graph(a, b).record(OpKind::kMatMul, {a.id(), b.id()}); }
inline Var transpose(Var a) { return a.graph().record(OpKind::kTranspose, {a.id()}); }

inline Var reshape(Var a, Shape shape) {
  if (a.shape() == shape) return a;
  OpAttrs at;
  at.shape = std::move(shape);
  return a.graph().record(OpKind::kReshape, {a.id()}, std::move(at));
}

inline Var gather(Var a, IndexList index, Shape shape) {
  OpAttrs at;
  at.index = std::move(index);
  at.shape = std::move(shape);
  return a.graph().record(OpKind::kGather, {a.id()}, std::move(at));
}

inline Var scatter(Var a, IndexList index, Shape shape) {
  OpAttrs at;
  at.index = std::move(index);
  at.shape = std::move(shape);
  return a.graph().record(OpKind::kScatter, {a.id()}, std::move(at));
}

inline Var conv2d(Var x, Var w, std::size_t stride = 1, std::size_t pad = 0) {
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  return detail::same_graph(x, w).record(OpKind::kConv2d, {x.id(), w.id()}, std::move(at));
}

inline Var conv2d_input_grad(Var grad_out, Var w, Shape input_shape, std::size_t stride, std::size_t pad) {
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  at.shape = std::move(input_shape);
  return detail::same_graph(grad_out, w).record(OpKind::kConv2dInputGrad, {grad_out.id(), w.id()}, std::move(at));
}

inline Var conv2d_weight_grad(Var x, Var grad_out, Shape weight_shape, std::size_t stride, std::size_t pad) {
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  at.shape = std::move(weight_shape);
  return detail::same_graph(x, grad_out).record(OpKind::kConv2dWeightGrad, {x.id(), grad_out.id()}, std::move(at));
}

inline Var channel_bias(Var y, Var b) { return detail::same_graph(y, b).record(OpKind::kChannelBias, {y.id(), b.id()}); }
inline Var channel_sum(Var y) { return y.graph().record(OpKind::kChannelSum, {y.id()}); }

inline Var channel_broadcast(Var b, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return b.graph().record(OpKind::kChannelBroadcast, {b.id()}, std::move(at));
}

inline Var relu(Var a) { return a.graph().record(OpKind::kRelu, {a.id()}); }

// Non-overlapping k x k max pooling over [C,H,W]; output [C, H/k, W/k] (floor).
// Ties resolve to the lowest flat index, and the gradient is routed there only.
inline Var maxpool2d(Var x, std::size_t k) {
  const Tensor& v = x.value();
  if (v.rank() != 3 || k == 0 || v.dim(1) < k || v.dim(2) < k) {
    throw ShapeError("maxpool2d: incompatible shapes " + shape_str(v.shape()) + " (window " +
                     std::to_string(k) + ")");
  }
  const std::size_t c_n = v.dim(0), h = v.dim(1), w = v.dim(2), oh = h / k, ow = w / k;
  auto idx = std::make_shared<std::vector<std::size_t>>(c_n * oh * ow);
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (c * h + oy * k) * w + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t i = (c * h + oy * k + dy) * w + ox * k + dx;
            if (v[i] > v[best]) best = i;
          }
        }
        (*idx)[(c * oh + oy) * ow + ox] = best;
      }
    }
  }
  return gather(x, std::move(idx), Shape{c_n, oh, ow});
}

inline Var softmax(Var z) { return z.graph().record(OpKind::kSoftmax, {z.id()}); }

// -log softmax(z)[label]
inline Var softmax_cross_entropy(Var z, std::size_t label) {
  OpAttrs at;
  at.label = label;
  return z.graph().record(OpKind::kSoftmaxCrossEntropy, {z.id()}, std::move(at));
}

// mean((z - target)^2)
inline Var mse_loss(Var z, const Tensor& target) {
  Var t = z.graph().constant(target);
  Var d = sub(z, t);
  return scale(dot(d, d), 1.0 / static_cast<double>(z.value().numel()));
}

inline Var norm(Var a) { return sqrt(dot(a, a)); }

inline Var cosine(Var a, Var b) { return div(dot(a, b), mul(norm(a), norm(b))); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }

// ---------------------------------------------------------------------------
// Reverse pass

namespace detail {

// Appends the adjoint contributions of node `id` to its parents. Only parents
// with need[i] set receive a contribution.
inline void propagate(Graph& g, NodeId id, Var grad, const std::vector<bool>& need,
                      std::vector<std::optional<Var>>& out) {
  const Node& n = g.node(id);
  const OpKind op = n.op;
  const std::vector<NodeId> p = n.parents;
  const OpAttrs at = n.attrs;
  Var self(&g, id);
  auto parent = [&](std::size_t i) { return Var(&g, p[i]); };
  auto emit = [&](std::size_t i, auto make) {
    if (need[i]) out[i] = make();
  };

  switch (op) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      return;
    case OpKind::kAdd:
      emit(0, [&] { return grad; });
      emit(1, [&] { return grad; });
      return;
    case OpKind::kSub:
      emit(0, [&] { return grad; });
      emit(1, [&] { return neg(grad); });
      return;
    case OpKind::kMul:
      emit(0, [&] { return mul(grad, parent(1)); });
      emit(1, [&] { return mul(grad, parent(0)); });
      return;
    case OpKind::kDiv:
      emit(0, [&] { return div(grad, parent(1)); });
      emit(1, [&] { return neg(mul(div(grad, parent(1)), self)); });
      return;
    case OpKind::kNeg:
      emit(0, [&] { return neg(grad); });
      return;
    case OpKind::kScale:
      emit(0, [&] { return scale(grad, at.factor); });
      return;
    case OpKind::kScaleBy:
      emit(0, [&] { return scale_by(grad, parent(1)); });
      emit(1, [&] { return reshape(dot(grad, parent(0)), g.node(p[1]).value.shape()); });
      return;
    case OpKind::kSqrt:
      emit(0, [&] { return div(scale(grad, 0.5), self); });
      return;
    case OpKind::kLog:
      emit(0, [&] { return div(grad, parent(0)); });
      return;
    case OpKind::kExp:
      emit(0, [&] { return mul(grad, self); });
      return;
    case OpKind::kSum:
      emit(0, [&] { return broadcast(grad, g.node(p[0]).value.shape()); });
      return;
    case OpKind::kBroadcast:
      emit(0, [&] { return reshape(sum(grad), g.node(p[0]).value.shape()); });
      return;
    case OpKind::kDot:
      emit(0, [&] { return reshape(scale_by(parent(1), grad), g.node(p[0]).value.shape()); });
      emit(1, [&] { return reshape(scale_by(parent(0), grad), g.node(p[1]).value.shape()); });
      return;
    case OpKind::kMatMul:
      emit(0, [&] { return matmul(grad, transpose(parent(1))); });
      emit(1, [&] { return matmul(transpose(parent(0)), grad); });
      return;
    case OpKind::kTranspose:
      emit(0, [&] { return transpose(grad); });
      return;
    case OpKind::kReshape:
      emit(0, [&] { return reshape(grad, g.node(p[0]).value.shape()); });
      return;
    case OpKind::kGather:
      emit(0, [&] { return scatter(grad, at.index, g.node(p[0]).value.shape()); });
      return;
    case OpKind::kScatter:
      emit(0, [&] { return gather(grad, at.index, g.node(p[0]).value.shape()); });
      return;
    case OpKind::kConv2d:
      emit(0, [&] {
        return conv2d_input_grad(grad, parent(1), g.node(p[0]).value.shape(), at.stride, at.pad);
      });
      emit(1, [&] {
        return conv2d_weight_grad(parent(0), grad, g.node(p[1]).value.shape(), at.stride, at.pad);
      });
      return;
    case OpKind::kConv2dInputGrad:  // parents (G, w) -> dx
      emit(0, [&] { return conv2d(grad, parent(1), at.stride, at.pad); });
      emit(1, [&] { return conv2d_weight_grad(grad, parent(0), g.node(p[1]).value.shape(), at.stride, at.pad); });
      return;
    case OpKind::kConv2dWeightGrad:  // parents (x, G) -> dw
      emit(0, [&] { return conv2d_input_grad(parent(1), grad, g.node(p[0]).value.shape(), at.stride, at.pad); });
      emit(1, [&] { return conv2d(parent(0), grad, at.stride, at.pad); });
      return;
    case OpKind::kChannelBias:
      emit(0, [&] { return grad; });
      emit(1, [&] { return channel_sum(grad); });
      return;
    case OpKind::kChannelSum:
      emit(0, [&] { return channel_broadcast(grad, g.node(p[0]).value.shape()); });
      return;
    case OpKind::kChannelBroadcast:
      emit(0, [&] { return channel_sum(grad); });
      return;
    case OpKind::kRelu:
      // Derivative at exactly 0 is 0; the mask is piecewise constant, so it is a constant node.
      emit(0, [&] {
        Var mask = g.constant(map_unary(g.node(p[0]).value, [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
        return mul(grad, mask);
      });
      return;
    case OpKind::kSoftmax:
      emit(0, [&] {
        Var inner = dot(grad, self);
        return mul(self, sub(grad, broadcast(inner, self.shape())));
      });
      return;
    case OpKind::kSoftmaxCrossEntropy:
      emit(0, [&] {
        Tensor onehot(g.node(p[0]).value.shape());
        onehot[at.label] = 1.0;
        Var probs = softmax(parent(0));
        return scale_by(sub(probs, g.constant(std::move(onehot))), grad);
      });
      return;
  }
}

inline void check_scalar_root(const Var& root) {
  const Shape& s = root.shape();
  if (!(s.empty() || (s.size() == 1 && s[0] == 1))) {
    throw ShapeError("backward: root must be a scalar, got shape " + shape_str(s));
  }
}

}  // namespace detail

// Differentiates `root` with respect to each of `leaves`, appending the adjoint
// computation to the graph. The returned Vars are ordinary nodes, so they can
// feed further ops and a second backward pass. Leaves that do not influence
// the root get a zero constant of their shape.
inline std::vector<Var> backward_recorded(Var root, std::span<const Var> leaves) {
  detail::check_scalar_root(root);
  Graph& g = root.graph();
  const NodeId root_id = root.id();

  std::vector<bool> depends(root_id + 1, false);
  NodeId first = root_id + 1;
  for (const Var& l : leaves) {
    if (&l.graph() != &g) throw ShapeError("backward: leaf from a different graph");
    if (!g.is_leaf(l.id())) {
      throw InvalidArgument("backward: node " + std::to_string(l.id()) + " is not a differentiable leaf");
    }
    if (l.id() <= root_id) {
      depends[l.id()] = true;
      first = std::min(first, l.id());
    }
  }
  for (NodeId id = first; id <= root_id && first <= root_id; ++id) {
    if (depends[id]) continue;
    for (NodeId p : g.node(id).parents) {
      if (depends[p]) {
        depends[id] = true;
        break;
      }
    }
  }

  std::vector<std::optional<Var>> adjoint(root_id + 1);
  if (depends[root_id]) adjoint[root_id] = g.constant(Tensor(root.shape(), 1.0));

  for (NodeId id = root_id + 1; id-- > first;) {
    if (!depends[id] || !adjoint[id] || g.is_leaf(id)) continue;
    const std::vector<NodeId> parents = g.node(id).parents;
    std::vector<bool> need(parents.size());
    for (std::size_t i = 0; i < parents.size(); ++i) need[i] = depends[parents[i]];
    std::vector<std::optional<Var>> contrib(parents.size());
    detail::propagate(g, id, *adjoint[id], need, contrib);
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (!contrib[i]) continue;
      auto& slot = adjoint[parents[i]];
      slot = slot ? add(*slot, *contrib[i]) : *contrib[i];
    }
  }

  std::vector<Var> out;
  out.reserve(leaves.size());
  for (const Var& l : leaves) {
    if (l.id() <= root_id && adjoint[l.id()]) {
      out.push_back(*adjoint[l.id()]);
    } else {
      out.push_back(g.constant(Tensor(l.shape())));
    }
  }
  return out;
}

inline std::vector<Var> backward_recorded(Var root, std::initializer_list<Var> leaves) {
  return backward_recorded(root, std::span<const Var>(leaves.begin(), leaves.size()));
}

// Value-only gradients keyed by leaf id. The adjoint nodes are discarded.
inline std::map<NodeId, Tensor> backward(Var root, std::span<const Var> leaves) {
  Graph& g = root.graph();
  const std::size_t mark = g.size();
  std::vector<Var> grads = backward_recorded(root, leaves);
  std::map<NodeId, Tensor> out;
  for (std::size_t i = 0; i < leaves.size(); ++i) out.emplace(leaves[i].id(), grads[i].value());
  g.truncate(mark);
  return out;
}

// d(root)/d(leaf) as a plain tensor.
inline Tensor grad(Var root, Var leaf) {
  Var leaves[] = {leaf};
  return backward(root, leaves).at(leaf.id());
}

// Builds a scalar that consumes recorded gradients (via backward_recorded) and
// differentiates it with respect to `target` by a second reverse pass.
template <class Builder>
Tensor grad_of_scalar_of_grads(Graph& graph, Builder&& build, Var target) {
  Var s = std::forward<Builder>(build)(graph);
  const Shape& shape = s.shape();
  if (!(shape.empty() || (shape.size() == 1 && shape[0] == 1))) {
    throw ShapeError("grad_of_scalar_of_grads: builder produced non-scalar shape " + shape_str(shape));
  }
  return grad(s, target);
}

// Central differences, one coordinate at a time.
inline Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& point,
                                   double step) {
  if (!(step > 0.0)) throw InvalidArgument("finite_diff_gradient: step must be positive");
  Tensor out(point.shape());
  Tensor probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

}  // namespace tfa::ad
