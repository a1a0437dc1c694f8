#pragma once

#include <stdexcept>
#include <string>

namespace tfa {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes for an op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Violated precondition on a scalar/config argument (k out of range, sigma < 0, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Malformed input data (CIFAR records, parameter files, config values).
class FormatError : public Error {
 public:
  using Error::Error;
};

// A loss gradient with (near) zero norm, for which the cosine is undefined.
class DegenerateGradientError : public Error {
 public:
  enum class Side { kTrain, kTest };

  DegenerateGradientError(Side side, double norm)
      : Error(std::string("degenerate gradient on ") + (side == Side::kTrain ? "train" : "test") +
              " side (norm " + std::to_string(norm) + ")"),
        side_(side),
        norm_(norm) {}

  Side side() const { return side_; }
  double norm() const { return norm_; }

 private:
  Side side_;
  double norm_;
};

// H + lambda*I failed to factorize as positive definite.
class DampingError : public Error {
 public:
  DampingError(double lambda, double min_eigenvalue)
      : Error("insufficient damping: lambda=" + std::to_string(lambda) +
              ", smallest eigenvalue of H is " + std::to_string(min_eigenvalue)),
        min_eigenvalue_(min_eigenvalue) {}

  double min_eigenvalue() const { return min_eigenvalue_; }

 private:
  double min_eigenvalue_;
};

}  // namespace tfa
