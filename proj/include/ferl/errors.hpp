#pragma once

#include <stdexcept>
#include <string>

namespace ferl {

// Each category maps onto one CLI exit code (see tools/ferl_main.cpp).

/// Bad command line or missing inputs.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value violates a documented constraint (config ranges, shapes, file formats).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A quality gate (perception accuracy, base ASR, eval thresholds) did not pass.
class GateFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ferl
