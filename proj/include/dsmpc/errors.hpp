/*
 Copyright 2026 The dsmpc Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#ifndef DSMPC_ERRORS_HPP
#define DSMPC_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace dsmpc {

/// Caller broke a documented precondition (dimension mismatch, N = 0, ...).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid model or experiment configuration (non-SPD covariance, bad JSON field, ...).
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every particle has numerically zero likelihood; the filter has diverged.
class DegenerateBelief : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// No radius on the calibration grid makes the fallback policy satisfy the drift.
class StabilizationInfeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. The message carries line and field positions.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool condition, const std::string& what) {
  if (!condition) throw ContractViolation(what);
}

}  // namespace detail
}  // namespace dsmpc

#endif  // DSMPC_ERRORS_HPP
