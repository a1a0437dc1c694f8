#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tfa/autodiff.hpp"
#include "tfa/errors.hpp"
#include "tfa/models.hpp"
#include "tfa/random.hpp"

namespace tfa {

// Gradients with norm at or below this are treated as zero.
inline constexpr double kDegenerateNorm = 1e-12;

enum class TdaMethod { kGradCos, kGradEffect, kInfluence, kRelatif };

inline std::string to_string(TdaMethod m) {
  switch (m) {
    case TdaMethod::kGradCos: return "grad-cos";
    case TdaMethod::kGradEffect: return "grad-effect";
    case TdaMethod::kInfluence: return "influence";
    case TdaMethod::kRelatif: return "relatif";
  }
  return "?";
}

inline TdaMethod parse_tda_method(const std::string& s) {
  for (TdaMethod m : {TdaMethod::kGradCos, TdaMethod::kGradEffect, TdaMethod::kInfluence, TdaMethod::kRelatif}) {
    if (to_string(m) == s) return m;
  }
  throw InvalidArgument("unknown attribution method '" + s + "' (grad-cos, grad-effect, influence, relatif)");
}

// Methods whose score predicts a test-loss change: negative means the training
// example helps, so rankings order them by ascending score.
inline bool lower_is_more_helpful(TdaMethod m) { return m != TdaMethod::kGradCos; }

struct AttributionRecord {
  std::size_t train_index = 0;
  std::size_t test_index = 0;
  TdaMethod method = TdaMethod::kGradCos;
  double score = 0.0;
};

namespace detail {

inline Eigen::Map<const Eigen::VectorXd> as_eigen(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.numel())};
}

inline double checked_norm(const Tensor& g, DegenerateGradientError::Side side) {
  const double n = l2_norm(g.data());
  if (!(n > kDegenerateNorm)) throw DegenerateGradientError(side, n);
  return n;
}

inline void require_same_length(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw ShapeError("gradient lengths differ: " + std::to_string(a.numel()) + " vs " + std::to_string(b.numel()));
  }
}

}  // namespace detail

// Cosine of two parameter gradients, clamped to [-1, 1].
inline double grad_cos_of(const Tensor& g_train, const Tensor& g_test) {
  detail::require_same_length(g_train, g_test);
  const double nr = detail::checked_norm(g_train, DegenerateGradientError::Side::kTrain);
  const double ne = detail::checked_norm(g_test, DegenerateGradientError::Side::kTest);
  return std::clamp(dot(g_train.data(), g_test.data()) / (nr * ne), -1.0, 1.0);
}

inline double grad_cos(const Model& model, const ParamVector& params, const LabeledExample& z_train,
                       const LabeledExample& z_test) {
  return grad_cos_of(param_grad(model, params, z_train), param_grad(model, params, z_test));
}

// Predicted test-loss change after the step theta -= epsilon * g_train / |g_train|^2.
inline double grad_effect_of(const Tensor& g_train, const Tensor& g_test, double epsilon) {
  if (!(epsilon > 0.0)) throw InvalidArgument("grad_effect: epsilon must be > 0");
  detail::require_same_length(g_train, g_test);
  const double nr = detail::checked_norm(g_train, DegenerateGradientError::Side::kTrain);
  return -epsilon * dot(g_test.data(), g_train.data()) / (nr * nr);
}

inline double grad_effect(const Model& model, const ParamVector& params, const LabeledExample& z_train,
                          const LabeledExample& z_test, double epsilon) {
  return grad_effect_of(param_grad(model, params, z_train), param_grad(model, params, z_test), epsilon);
}

// ---------------------------------------------------------------------------
// Hessians and influence

inline constexpr std::size_t kDefaultHessianCap = 20000;

struct DampedHessian {
  Eigen::MatrixXd matrix;      // symmetrized
  double lambda_damp = 0.0;
  double asymmetry = 0.0;      // max |H - H^T| before symmetrization

  std::size_t size() const { return static_cast<std::size_t>(matrix.rows()); }
};

using ScalarObjective = std::function<ad::Var(ad::Var theta)>;

// Hessian of objective(theta) at `point`, one column per reverse pass through
// the recorded gradient.
inline DampedHessian hessian_of(const ScalarObjective& objective, const Tensor& point,
                                std::size_t cap = kDefaultHessianCap) {
  const std::size_t p = point.numel();
  if (p > cap) {
    throw InvalidArgument("dense Hessian over " + std::to_string(p) + " parameters exceeds the cap of " +
                          std::to_string(cap) + "; use a smaller model");
  }
  ad::Graph g;
  ad::Var theta = g.leaf(point);
  ad::Var value = objective(theta);
  ad::Var gradient = ad::backward_recorded(value, {theta})[0];
  const std::size_t mark = g.size();
  Eigen::MatrixXd h(p, p);
  for (std::size_t j = 0; j < p; ++j) {
    ad::Var coord = ad::gather(gradient, std::make_shared<const std::vector<std::size_t>>(1, j), Shape{});
    ad::Var leaves[] = {theta};
    const Tensor col = ad::backward_recorded(coord, leaves)[0].value();
    for (std::size_t k = 0; k < p; ++k) h(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = col[k];
    g.truncate(mark);
  }
  DampedHessian out;
  out.asymmetry = p == 0 ? 0.0 : (h - h.transpose()).cwiseAbs().maxCoeff();
  out.matrix = 0.5 * (h + h.transpose());
  return out;
}

// Hessian of the mean training loss at params.
inline DampedHessian dense_hessian(const Model& model, const ParamVector& params, const Dataset& data,
                                   std::size_t cap = kDefaultHessianCap) {
  if (data.empty()) throw InvalidArgument("dense_hessian needs a non-empty dataset");
  const double inv_n = 1.0 / static_cast<double>(data.size());
  return hessian_of(
      [&](ad::Var theta) {
        ad::Graph& g = theta.graph();
        std::optional<ad::Var> total;
        for (const auto& z : data) {
          ad::Var l = loss_node(model, params, theta, g.constant(z.x), z.y);
          total = total ? ad::add(*total, l) : l;
        }
        return ad::scale(*total, inv_n);
      },
      params.flat, cap);
}

// Scale-aware default: 1e-3 * trace(H) / p.
inline double default_damping(const DampedHessian& h) {
  if (h.size() == 0) throw InvalidArgument("default_damping of an empty Hessian");
  return 1e-3 * h.matrix.trace() / static_cast<double>(h.size());
}

// Cholesky factorization of H + lambda*I, reused across many solves.
class DampedSolver {
 public:
  DampedSolver(const Eigen::MatrixXd& h, double lambda) : lambda_(lambda) {
    if (!(lambda >= 0.0)) throw InvalidArgument("damping must be >= 0");
    if (h.rows() != h.cols()) throw ShapeError("Hessian must be square");
    Eigen::MatrixXd damped = h;
    damped.diagonal().array() += lambda;
    llt_.compute(damped);
    bool ok = llt_.info() == Eigen::Success;
    // LLT accepts some semi-definite matrices; require a strictly positive pivot.
    if (ok && h.rows() > 0) ok = llt_.matrixLLT().diagonal().minCoeff() > 0.0;
    if (!ok) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(h, Eigen::EigenvaluesOnly);
      throw DampingError(lambda, eig.eigenvalues().minCoeff());
    }
  }

  DampedSolver(const DampedHessian& h, double lambda) : DampedSolver(h.matrix, lambda) {}

  Eigen::VectorXd solve(const Eigen::VectorXd& g) const {
    if (g.size() != llt_.rows()) throw ShapeError("DampedSolver: vector length does not match Hessian");
    return llt_.solve(g);
  }

  double lambda() const { return lambda_; }
  std::size_t size() const { return static_cast<std::size_t>(llt_.rows()); }

 private:
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double lambda_;
};

// -g_test^T (H + lambda I)^-1 g_train
inline double influence_function(const DampedSolver& solver, const Eigen::VectorXd& g_train,
                                 const Eigen::VectorXd& g_test) {
  if (g_train.size() != g_test.size()) throw ShapeError("influence: gradient lengths differ");
  return -g_test.dot(solver.solve(g_train));
}

inline double influence_function(const DampedHessian& h, const Tensor& g_train, const Tensor& g_test,
                                 double lambda_damp) {
  return influence_function(DampedSolver(h, lambda_damp), detail::as_eigen(g_train), detail::as_eigen(g_test));
}

// Influence divided by |(H + lambda I)^-1 g_train|.
inline double relatif(const DampedSolver& solver, const Eigen::VectorXd& g_train, const Eigen::VectorXd& g_test) {
  if (g_train.size() != g_test.size()) throw ShapeError("relatif: gradient lengths differ");
  const Eigen::VectorXd v = solver.solve(g_train);
  const double n = v.norm();
  if (!(n > kDegenerateNorm)) throw DegenerateGradientError(DegenerateGradientError::Side::kTrain, n);
  return -g_test.dot(v) / n;
}

inline double relatif(const DampedHessian& h, const Tensor& g_train, const Tensor& g_test, double lambda_damp) {
  return relatif(DampedSolver(h, lambda_damp), detail::as_eigen(g_train), detail::as_eigen(g_test));
}

// ---------------------------------------------------------------------------
// Ranking

struct RankOptions {
  TdaMethod method = TdaMethod::kGradCos;
  std::size_t test_index = 0;
  double epsilon = 1e-3;                   // grad-effect step size
  const DampedSolver* solver = nullptr;    // required for influence and relatif
  bool use_predicted_label = false;        // explain the model's prediction instead of the true label
  std::size_t threads = 1;
};

struct Ranking {
  std::vector<AttributionRecord> records;  // most helpful first
  std::vector<std::size_t> skipped;        // degenerate training gradients, ascending

  std::vector<AttributionRecord> head(std::size_t k) const {
    return {records.begin(), records.begin() + static_cast<std::ptrdiff_t>(std::min(k, records.size()))};
  }
  // Most harmful last.
  std::vector<AttributionRecord> tail(std::size_t k) const {
    return {records.end() - static_cast<std::ptrdiff_t>(std::min(k, records.size())), records.end()};
  }
};

// Helpfulness key: larger is more helpful.
inline double helpfulness(const AttributionRecord& r) {
  return lower_is_more_helpful(r.method) ? -r.score : r.score;
}

inline void sort_records(std::vector<AttributionRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const AttributionRecord& a, const AttributionRecord& b) {
    const double ka = helpfulness(a), kb = helpfulness(b);
    if (ka != kb) return ka > kb;
    return a.train_index < b.train_index;
  });
}

inline LabeledExample test_target(const Model& model, const ParamVector& params, const LabeledExample& z_test,
                                  bool use_predicted_label) {
  if (!use_predicted_label) return z_test;
  return {z_test.x, predict(model, params, z_test.x)};
}

inline Ranking rank_training_set(const Model& model, const ParamVector& params, const Dataset& data,
                                 const LabeledExample& z_test, const RankOptions& opt = {}) {
  if (data.empty()) throw InvalidArgument("rank_training_set needs a non-empty dataset");
  const bool needs_solver = opt.method == TdaMethod::kInfluence || opt.method == TdaMethod::kRelatif;
  if (needs_solver && opt.solver == nullptr) {
    throw InvalidArgument(to_string(opt.method) + " ranking needs a damped Hessian solver");
  }
  const Tensor g_test = param_grad(model, params, test_target(model, params, z_test, opt.use_predicted_label));
  if (opt.method == TdaMethod::kGradCos) detail::checked_norm(g_test, DegenerateGradientError::Side::kTest);
  if (needs_solver && opt.solver->size() != g_test.numel()) {
    throw ShapeError("Hessian size does not match the parameter count");
  }
  const Eigen::VectorXd g_test_vec = detail::as_eigen(g_test);

  std::vector<std::optional<double>> scores(data.size());
  parallel_for(data.size(), opt.threads, [&](std::size_t i) {
    const Tensor g = param_grad(model, params, data[i]);
    if (!(l2_norm(g.data()) > kDegenerateNorm)) return;
    switch (opt.method) {
      case TdaMethod::kGradCos: scores[i] = grad_cos_of(g, g_test); break;
      case TdaMethod::kGradEffect: scores[i] = grad_effect_of(g, g_test, opt.epsilon); break;
      case TdaMethod::kInfluence: scores[i] = influence_function(*opt.solver, detail::as_eigen(g), g_test_vec); break;
      case TdaMethod::kRelatif: scores[i] = relatif(*opt.solver, detail::as_eigen(g), g_test_vec); break;
    }
  });

  Ranking out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (scores[i]) {
      out.records.push_back({i, opt.test_index, opt.method, *scores[i]});
    } else {
      out.skipped.push_back(i);
    }
  }
  sort_records(out.records);
  return out;
}

}  // namespace tfa
