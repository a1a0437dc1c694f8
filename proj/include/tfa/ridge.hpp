#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <vector>

#include "tfa/errors.hpp"

namespace tfa::ridge {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Objective: 0.5 * sum_i (w.x_i - y_i)^2 + 0.5 * lambda * |w|^2.
struct RidgeProblem {
  MatrixXd X;  // n x d, one example per row
  VectorXd y;  // n
  double lambda = 1.0;

  std::size_t n() const { return static_cast<std::size_t>(X.rows()); }
  std::size_t d() const { return static_cast<std::size_t>(X.cols()); }

  void validate() const {
    if (X.rows() < 1 || X.cols() < 1) throw InvalidArgument("ridge problem needs n >= 1 and d >= 1");
    if (y.size() != X.rows())
      throw ShapeError("ridge targets have " + std::to_string(y.size()) + " entries for " +
                       std::to_string(X.rows()) + " rows");
    if (!(lambda > 0.0)) throw InvalidArgument("ridge lambda must be > 0");
    if (!X.allFinite() || !y.allFinite()) throw InvalidArgument("ridge data must be finite");
  }
};

// Rows 0..n-2 are (x1[i], 0) with target x1[i]; row n-1 is (0, c) with target c.
struct ToySetup {
  std::vector<double> axis_values{1, 1, 1, 1};
  double c = 2.0;
  double lambda = 1.0;

  RidgeProblem problem() const {
    if (c == 0.0) throw InvalidArgument("toy setup needs c != 0");
    const Eigen::Index n = static_cast<Eigen::Index>(axis_values.size()) + 1;
    RidgeProblem p{MatrixXd::Zero(n, 2), VectorXd::Zero(n), lambda};
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      p.X(i, 0) = axis_values[static_cast<std::size_t>(i)];
      p.y(i) = axis_values[static_cast<std::size_t>(i)];
    }
    p.X(n - 1, 1) = c;
    p.y(n - 1) = c;
    p.validate();
    return p;
  }
};

namespace detail {

inline Eigen::LLT<MatrixXd> factor(const RidgeProblem& p) {
  p.validate();
  MatrixXd gram = p.X.transpose() * p.X;
  gram.diagonal().array() += p.lambda;
  Eigen::LLT<MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) throw Error("ridge normal matrix is not positive definite");
  return llt;
}

inline void require_dim(const RidgeProblem& p, const VectorXd& x) {
  if (static_cast<std::size_t>(x.size()) != p.d())
    throw ShapeError("query point has dimension " + std::to_string(x.size()) + ", expected " +
                     std::to_string(p.d()));
}

}  // namespace detail

inline VectorXd ridge_fit(const RidgeProblem& p) { return detail::factor(p).solve(p.X.transpose() * p.y); }

// Gradient of the ridge objective; zero at the optimum.
inline VectorXd objective_gradient(const RidgeProblem& p, const VectorXd& w) {
  return p.X.transpose() * (p.X * w - p.y) + p.lambda * w;
}

// alpha_i = x*^T A x_i with A = (X^T X + lambda I)^-1, so f(x*) = sum_i alpha_i y_i.
inline VectorXd representer_alphas(const RidgeProblem& p, const VectorXd& query) {
  detail::require_dim(p, query);
  const VectorXd a_query = detail::factor(p).solve(query);
  return p.X * a_query;
}

// beta(i,k) = x_ik * (A x*)_k; row sums equal alpha.
inline MatrixXd tfa_betas(const RidgeProblem& p, const VectorXd& query) {
  detail::require_dim(p, query);
  const VectorXd a_query = detail::factor(p).solve(query);
  return p.X * a_query.asDiagonal();
}

inline RidgeProblem without_row(const RidgeProblem& p, std::size_t i) {
  if (p.n() < 2) throw InvalidArgument("leave-one-out needs n >= 2");
  if (i >= p.n()) throw InvalidArgument("row " + std::to_string(i) + " out of range");
  const Eigen::Index n = p.X.rows(), r = static_cast<Eigen::Index>(i);
  RidgeProblem out{MatrixXd(n - 1, p.X.cols()), VectorXd(n - 1), p.lambda};
  out.X.topRows(r) = p.X.topRows(r);
  out.X.bottomRows(n - 1 - r) = p.X.bottomRows(n - 1 - r);
  out.y.head(r) = p.y.head(r);
  out.y.tail(n - 1 - r) = p.y.tail(n - 1 - r);
  return out;
}

inline double squared_error(const VectorXd& w, const VectorXd& query, double target) {
  const double r = w.dot(query) - target;
  return r * r;
}

// Gradient in w of squared_error at w.
inline VectorXd squared_error_gradient(const VectorXd& w, const VectorXd& query, double target) {
  return 2.0 * (w.dot(query) - target) * query;
}

// Exact change in squared test error after removing row i and refitting.
inline double ridge_loo_delta(const RidgeProblem& p, std::size_t i, const VectorXd& query, double target) {
  detail::require_dim(p, query);
  const VectorXd w_full = ridge_fit(p);
  const VectorXd w_loo = ridge_fit(without_row(p, i));
  return squared_error(w_loo, query, target) - squared_error(w_full, query, target);
}

// Gradient of the per-example objective term 0.5 * (w.x_i - y_i)^2.
inline VectorXd example_gradient(const RidgeProblem& p, const VectorXd& w, std::size_t i) {
  const VectorXd xi = p.X.row(static_cast<Eigen::Index>(i)).transpose();
  return (w.dot(xi) - p.y(static_cast<Eigen::Index>(i))) * xi;
}

// Hessian of the full objective, X^T X + lambda I.
inline MatrixXd objective_hessian(const RidgeProblem& p) {
  MatrixXd h = p.X.transpose() * p.X;
  h.diagonal().array() += p.lambda;
  return h;
}

}  // namespace tfa::ridge
