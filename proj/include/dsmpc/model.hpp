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

#ifndef DSMPC_MODEL_HPP
#define DSMPC_MODEL_HPP

#include <Eigen/Dense>

#include <string>
#include <utility>
#include <vector>

#include "dsmpc/errors.hpp"
#include "dsmpc/linalg.hpp"
#include "dsmpc/random.hpp"

namespace dsmpc {

using StateVector = Eigen::VectorXd;
using ControlVector = Eigen::VectorXd;
using Observation = Eigen::VectorXd;
using NoiseDraw = Eigen::VectorXd;

/**
 * Optional differentiable structure of a model: Jacobians of the mean maps
 * and the additive noise covariances. Needed by the Fisher-information
 * recursion; querying a model without it while FIM probing is enabled is a
 * configuration error.
 */
class DifferentiableModel {
 public:
  virtual ~DifferentiableModel() = default;

  /// F(x, u) = df/dx at zero noise.
  virtual Eigen::MatrixXd dynamics_jacobian(const StateVector& x, const ControlVector& u) const = 0;
  /// H(x) = dh/dx at zero noise.
  virtual Eigen::MatrixXd observation_jacobian(const StateVector& x) const = 0;
  virtual const Eigen::MatrixXd& process_covariance() const = 0;
  virtual const Eigen::MatrixXd& observation_covariance() const = 0;
  /// H(x)' R^-1 H(x).
  virtual Eigen::MatrixXd observation_information(const StateVector& x) const = 0;
  /// True when F does not depend on (x, u); lets callers hoist it out of loops.
  virtual bool constant_dynamics_jacobian() const { return false; }
  /// Fills (A, B) and returns true when f(x, u, xi) = A x + B u + xi exactly.
  virtual bool affine_dynamics(Eigen::MatrixXd& /*A*/, Eigen::MatrixXd& /*B*/) const { return false; }
  /// out += H(x)' R^-1 H(x). Overrides avoid the temporaries of observation_information.
  virtual void add_observation_information(Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::MatrixXd> out) const {
    out += observation_information(x);
  }
};

/**
 * Controlled stochastic system x' = f(x, u, xi), y = h(x, eta) with a
 * likelihood rho(y, x). Implementations are immutable after construction and
 * safe to share between threads; all randomness comes from caller-owned
 * streams.
 */
class SystemModel {
 public:
  virtual ~SystemModel() = default;

  virtual int state_dim() const = 0;
  virtual int control_dim() const = 0;
  virtual int observation_dim() const = 0;
  virtual int process_noise_dim() const = 0;
  virtual int observation_noise_dim() const = 0;

  virtual NoiseDraw draw_process_noise(RandomStream& stream) const = 0;
  virtual NoiseDraw draw_observation_noise(RandomStream& stream) const = 0;

  /// f(x, u, xi).
  virtual StateVector transition(const StateVector& x, const ControlVector& u, const NoiseDraw& xi) const = 0;
  /// h(x, eta).
  virtual Observation observe(const StateVector& x, const NoiseDraw& eta) const = 0;
  /// log rho(y, x).
  virtual double log_likelihood(const Observation& y, const StateVector& x) const = 0;

  virtual const DifferentiableModel* differentiable() const { return nullptr; }
};

namespace detail {

inline void check_dim(const Eigen::VectorXd& v, int expected, const char* what) {
  if (v.size() != expected) {
    throw ContractViolation(std::string(what) + ": expected dimension " + std::to_string(expected) + ", got " +
                            std::to_string(v.size()));
  }
}

}  // namespace detail

/// Draws xi from the model's process-noise law and returns f(x, u, xi).
inline StateVector sample_dynamics(const SystemModel& model, const StateVector& x, const ControlVector& u,
                                   RandomStream& stream) {
  detail::check_dim(x, model.state_dim(), "sample_dynamics: state");
  detail::check_dim(u, model.control_dim(), "sample_dynamics: control");
  detail::require(u.allFinite(), "sample_dynamics: control has non-finite entries");
  return model.transition(x, u, model.draw_process_noise(stream));
}

inline Observation sample_observation(const SystemModel& model, const StateVector& x, RandomStream& stream) {
  detail::check_dim(x, model.state_dim(), "sample_observation: state");
  return model.observe(x, model.draw_observation_noise(stream));
}

inline double log_likelihood(const SystemModel& model, const Observation& y, const StateVector& x) {
  detail::check_dim(y, model.observation_dim(), "log_likelihood: observation");
  detail::check_dim(x, model.state_dim(), "log_likelihood: state");
  return model.log_likelihood(y, x);
}

/**
 * Base for models with additive Gaussian (or point-mass) noise:
 *   x' = f0(x, u) + xi,  xi ~ N(0, Q)
 *   y  = h0(x) + eta,    eta ~ N(0, R)
 */
class AdditiveGaussianModel : public SystemModel, public DifferentiableModel {
 public:
  AdditiveGaussianModel(int n_x, int n_u, int n_y, Eigen::MatrixXd Q, Eigen::MatrixXd R)
      : n_x_(n_x), n_u_(n_u), n_y_(n_y), process_(std::move(Q)), measurement_(std::move(R)) {
    if (process_.dim() != n_x) throw ConfigurationError("process covariance must be n_x x n_x");
    if (measurement_.dim() != n_y) throw ConfigurationError("observation covariance must be n_y x n_y");
  }

  virtual StateVector mean_dynamics(const StateVector& x, const ControlVector& u) const = 0;
  virtual Observation mean_observation(const StateVector& x) const = 0;

  int state_dim() const override { return n_x_; }
  int control_dim() const override { return n_u_; }
  int observation_dim() const override { return n_y_; }
  int process_noise_dim() const override { return n_x_; }
  int observation_noise_dim() const override { return n_y_; }

  NoiseDraw draw_process_noise(RandomStream& stream) const override { return process_.sample(stream); }
  NoiseDraw draw_observation_noise(RandomStream& stream) const override { return measurement_.sample(stream); }

  StateVector transition(const StateVector& x, const ControlVector& u, const NoiseDraw& xi) const override {
    return mean_dynamics(x, u) + xi;
  }
  Observation observe(const StateVector& x, const NoiseDraw& eta) const override {
    return mean_observation(x) + eta;
  }
  double log_likelihood(const Observation& y, const StateVector& x) const override {
    return measurement_.log_density(y - mean_observation(x));
  }

  const Eigen::MatrixXd& process_covariance() const override { return process_.covariance(); }
  const Eigen::MatrixXd& observation_covariance() const override { return measurement_.covariance(); }
  Eigen::MatrixXd observation_information(const StateVector& x) const override {
    const Eigen::MatrixXd H = observation_jacobian(x);
    return symmetrize(H.transpose() * measurement_.precision() * H);
  }

  const DifferentiableModel* differentiable() const override { return this; }

  const GaussianNoise& process_noise() const { return process_; }
  const GaussianNoise& observation_noise() const { return measurement_; }

 private:
  int n_x_;
  int n_u_;
  int n_y_;
  GaussianNoise process_;
  GaussianNoise measurement_;
};

/// x' = A x + B u + xi, y = C x + eta.
class LinearGaussianModel final : public AdditiveGaussianModel {
 public:
  LinearGaussianModel(Eigen::MatrixXd A, Eigen::MatrixXd B, Eigen::MatrixXd C, Eigen::MatrixXd Q, Eigen::MatrixXd R)
      : AdditiveGaussianModel(static_cast<int>(A.rows()), static_cast<int>(B.cols()), static_cast<int>(C.rows()),
                              std::move(Q), std::move(R)),
        A_(std::move(A)),
        B_(std::move(B)),
        C_(std::move(C)) {
    if (A_.rows() != A_.cols() || B_.rows() != A_.rows() || C_.cols() != A_.rows()) {
      throw ConfigurationError("LinearGaussianModel: inconsistent A, B, C shapes");
    }
  }

  StateVector mean_dynamics(const StateVector& x, const ControlVector& u) const override { return A_ * x + B_ * u; }
  Observation mean_observation(const StateVector& x) const override { return C_ * x; }
  Eigen::MatrixXd dynamics_jacobian(const StateVector&, const ControlVector&) const override { return A_; }
  Eigen::MatrixXd observation_jacobian(const StateVector&) const override { return C_; }
  bool constant_dynamics_jacobian() const override { return true; }
  bool affine_dynamics(Eigen::MatrixXd& A, Eigen::MatrixXd& B) const override {
    A = A_;
    B = B_;
    return true;
  }

  const Eigen::MatrixXd& A() const { return A_; }
  const Eigen::MatrixXd& B() const { return B_; }
  const Eigen::MatrixXd& C() const { return C_; }

 private:
  Eigen::MatrixXd A_;
  Eigen::MatrixXd B_;
  Eigen::MatrixXd C_;
};

/// The information vector I_k = (y_0, u_0, y_1, ..., u_{k-1}, y_k).
struct InformationRecord {
  Observation initial;
  std::vector<std::pair<ControlVector, Observation>> steps;

  /// k: number of controls applied so far.
  std::size_t time_index() const { return steps.size(); }
  std::size_t control_count() const { return steps.size(); }
  std::size_t observation_count() const { return steps.size() + 1; }
};

inline InformationRecord append_information(InformationRecord rec, ControlVector u, Observation y) {
  rec.steps.emplace_back(std::move(u), std::move(y));
  return rec;
}

}  // namespace dsmpc

#endif  // DSMPC_MODEL_HPP
