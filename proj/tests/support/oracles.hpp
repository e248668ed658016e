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

// Independent reference implementations and toy systems shared by the unit
// tests and the acceptance runner. Nothing here reuses library internals
// beyond the public model interfaces.

#ifndef DSMPC_TESTS_ORACLES_HPP
#define DSMPC_TESTS_ORACLES_HPP

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <vector>

#include "dsmpc/dsmpc.hpp"

namespace oracle {

/// Textbook Kalman filter, covariance form.
struct Kalman {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  void predict(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::VectorXd& u,
               const Eigen::MatrixXd& Q) {
    mean = A * mean + B * u;
    cov = A * cov * A.transpose() + Q;
  }

  void update(const Eigen::MatrixXd& C, const Eigen::MatrixXd& R, const Eigen::VectorXd& y) {
    const Eigen::MatrixXd S = C * cov * C.transpose() + R;
    const Eigen::MatrixXd K = cov * C.transpose() * S.inverse();
    mean += K * (y - C * mean);
    // Joseph form keeps the covariance symmetric PSD.
    const Eigen::MatrixXd I_KC = Eigen::MatrixXd::Identity(cov.rows(), cov.cols()) - K * C;
    cov = I_KC * cov * I_KC.transpose() + K * R * K.transpose();
    cov = 0.5 * (cov + cov.transpose());
  }
};

inline Eigen::MatrixXd random_matrix(int r, int c, dsmpc::RandomStream& rs) {
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rs.normal();
  return m;
}

/// G G' + floor I, symmetric positive definite.
inline Eigen::MatrixXd random_spd(int n, dsmpc::RandomStream& rs, double floor = 0.1) {
  const Eigen::MatrixXd G = random_matrix(n, n, rs);
  Eigen::MatrixXd S = G * G.transpose() + floor * Eigen::MatrixXd::Identity(n, n);
  return 0.5 * (S + S.transpose());
}

/// Random PSD matrix of the given rank (rank < n gives a singular one).
inline Eigen::MatrixXd random_psd(int n, int rank, dsmpc::RandomStream& rs) {
  const Eigen::MatrixXd G = random_matrix(n, rank, rs);
  Eigen::MatrixXd S = G * G.transpose();
  return 0.5 * (S + S.transpose());
}

/// Random matrix rescaled to spectral radius `rho`.
inline Eigen::MatrixXd random_stable(int n, dsmpc::RandomStream& rs, double rho = 0.9) {
  const Eigen::MatrixXd M = random_matrix(n, n, rs);
  const double radius = M.eigenvalues().cwiseAbs().maxCoeff();
  return (rho / radius) * M;
}

inline Eigen::MatrixXd diag(std::initializer_list<double> v) {
  Eigen::VectorXd d(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) d[i++] = x;
  return d.asDiagonal();
}

/// Grid whose nodes sample `fn(x, y)`.
template <class Fn>
dsmpc::tan::TerrainGrid sampled_grid(Fn fn, double origin_x = 0.0, double origin_y = 0.0, double cell = 50.0,
                                     int nx = 12, int ny = 10) {
  dsmpc::tan::TerrainGrid t;
  t.origin_x = origin_x;
  t.origin_y = origin_y;
  t.cell_size = cell;
  t.nx = nx;
  t.ny = ny;
  t.heights.resize(static_cast<std::size_t>(nx) * ny);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) t.at(i, j) = fn(t.node_x(i), t.node_y(j));
  return t;
}

/// TAN model on `grid` with the given noise diagonals (zeros give point masses).
inline std::shared_ptr<dsmpc::tan::TanModel> tan_model(dsmpc::tan::TerrainGrid grid, const Eigen::MatrixXd& Q,
                                                       const Eigen::MatrixXd& R) {
  dsmpc::tan::TanParams p;
  p.process_covariance = Q;
  p.observation_covariance = R;
  return std::make_shared<dsmpc::tan::TanModel>(p, std::make_shared<const dsmpc::tan::TerrainGrid>(std::move(grid)));
}

/// x' = A x + B u + xi, y = C x + eta; convenience constructor.
inline std::shared_ptr<dsmpc::LinearGaussianModel> linear(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                                          const Eigen::MatrixXd& C, const Eigen::MatrixXd& Q,
                                                          const Eigen::MatrixXd& R) {
  return std::make_shared<dsmpc::LinearGaussianModel>(A, B, C, Q, R);
}

/**
 * Two-corridor planar toy: single-integrator x' = x + u + xi on R^2 and a
 * scalar "terrain" reading y = h(x) + eta. The band around y = +offset is
 * rippled (informative), the band around y = -offset is flat.
 */
class TwoCorridorToy final : public dsmpc::AdditiveGaussianModel {
 public:
  TwoCorridorToy(double q, double r, double offset = 2.0, double amplitude = 3.0, double band = 1.0,
                 double wavelength = 1.5, double u_max = 1.0)
      : AdditiveGaussianModel(2, 2, 1, q * Eigen::MatrixXd::Identity(2, 2), r * Eigen::MatrixXd::Identity(1, 1)),
        offset_(offset),
        amplitude_(amplitude),
        band_(band),
        wavelength_(wavelength),
        u_max_(u_max) {}

  double height(double x, double y) const {
    const double g = std::exp(-0.5 * (y - offset_) * (y - offset_) / (band_ * band_));
    return amplitude_ * g * std::sin(x / wavelength_);
  }

  Eigen::Vector2d gradient(double x, double y) const {
    const double g = std::exp(-0.5 * (y - offset_) * (y - offset_) / (band_ * band_));
    const double dg = -g * (y - offset_) / (band_ * band_);
    return {amplitude_ * g * std::cos(x / wavelength_) / wavelength_, amplitude_ * dg * std::sin(x / wavelength_)};
  }

  dsmpc::StateVector mean_dynamics(const dsmpc::StateVector& x, const dsmpc::ControlVector& u) const override {
    if (u.norm() > u_max_) throw dsmpc::ContractViolation("toy: control outside the ball");
    return x + u;
  }
  dsmpc::Observation mean_observation(const dsmpc::StateVector& x) const override {
    return dsmpc::Observation::Constant(1, height(x[0], x[1]));
  }
  Eigen::MatrixXd dynamics_jacobian(const dsmpc::StateVector&, const dsmpc::ControlVector&) const override {
    return Eigen::MatrixXd::Identity(2, 2);
  }
  bool constant_dynamics_jacobian() const override { return true; }
  Eigen::MatrixXd observation_jacobian(const dsmpc::StateVector& x) const override {
    return gradient(x[0], x[1]).transpose();
  }

 private:
  double offset_, amplitude_, band_, wavelength_, u_max_;
};

/// The 9 controls per stage of the grid oracle: zero and 8 compass directions on the boundary.
inline std::vector<Eigen::Vector2d> compass_controls(double u_max) {
  std::vector<Eigen::Vector2d> out{Eigen::Vector2d::Zero()};
  for (int k = 0; k < 8; ++k) {
    const double a = k * std::numbers::pi / 4.0;
    out.push_back(dsmpc::project_ball(Eigen::Vector2d(u_max * std::cos(a), u_max * std::sin(a)), u_max));
  }
  return out;
}

struct GridResult {
  double objective = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd controls;
  long feasible = 0;
};

/**
 * Exhaustive search over `levels`^T control sequences. Sequences whose first
 * control breaks the drift inequality are skipped when the drift is active.
 */
inline GridResult grid_search(const dsmpc::ScenarioSet& scen, const dsmpc::SystemModel& model,
                              const dsmpc::ProblemSpec& spec, const dsmpc::StateVector& x_hat,
                              const std::vector<Eigen::Vector2d>& levels) {
  const int T = spec.horizon;
  const bool drift = spec.drift_enabled && !dsmpc::in_target(spec.lyapunov, spec.target, x_hat);
  const double rhs = std::log(spec.drift.lambda) + dsmpc::target_distance(spec.lyapunov, spec.target, x_hat);
  GridResult best;
  std::vector<int> idx(static_cast<std::size_t>(T), 0);
  const int L = static_cast<int>(levels.size());
  Eigen::MatrixXd u(2, T);
  while (true) {
    for (int i = 0; i < T; ++i) u.col(i) = levels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
    bool ok = true;
    if (drift) {
      // Straight log-mean-exp over the drift draws, written out independently of the library.
      double top = -std::numeric_limits<double>::infinity();
      std::vector<double> lv;
      for (Eigen::Index l = 0; l < scen.drift_draws.cols(); ++l) {
        const Eigen::VectorXd next = model.transition(x_hat, u.col(0), scen.drift_draws.col(l));
        lv.push_back(spec.lyapunov.apply(next - spec.target.center).norm());
        top = std::max(top, lv.back());
      }
      double s = 0.0;
      for (double v : lv) s += std::exp(v - top);
      const double lhs = top + std::log(s / static_cast<double>(lv.size()));
      ok = lhs - rhs <= spec.drift.tol;
    }
    if (ok) {
      ++best.feasible;
      const double f = dsmpc::rollout_objective(u, scen, model, spec);
      if (f < best.objective) {
        best.objective = f;
        best.controls = u;
      }
    }
    int i = 0;
    while (i < T && ++idx[static_cast<std::size_t>(i)] == L) idx[static_cast<std::size_t>(i++)] = 0;
    if (i == T) break;
  }
  return best;
}

}  // namespace oracle

#endif  // DSMPC_TESTS_ORACLES_HPP
