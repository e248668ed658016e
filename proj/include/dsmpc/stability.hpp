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

#ifndef DSMPC_STABILITY_HPP
#define DSMPC_STABILITY_HPP

#include <Eigen/Dense>

#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <vector>

#include "dsmpc/errors.hpp"
#include "dsmpc/linalg.hpp"
#include "dsmpc/model.hpp"
#include "dsmpc/random.hpp"

namespace dsmpc {

/**
 * Exponential-norm Lyapunov function V(x) = exp(||W x||), handled in the log
 * domain: log V(x) = ||W x||. An empty `transform` means W = I. A selection
 * matrix restricts V to a sub-vector; a general W changes coordinates.
 */
struct LyapunovSpec {
  Eigen::MatrixXd transform;

  bool identity() const { return transform.size() == 0; }
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    if (identity()) return x;
    detail::require(transform.cols() == x.size(), "LyapunovSpec: transform/state dimension mismatch");
    return transform * x;
  }
};

/// Compact target set C = { x : ||W (x - center)|| <= radius }, W from the Lyapunov spec.
struct TargetSet {
  StateVector center;
  double radius = 1.0;
};

struct DriftConfig {
  double lambda = 0.95;  ///< contraction rate in [0, 1)
  int samples = 100;     ///< N_dr
  double tol = 1e-6;     ///< log-domain feasibility margin
};

/// Saturated linear feedback u = -sat_{u_max}(K x).
struct FallbackPolicy {
  Eigen::MatrixXd K;
  double u_max = 1.0;
};

inline void validate_drift_config(const DriftConfig& cfg) {
  if (!(cfg.lambda >= 0.0 && cfg.lambda < 1.0)) throw ConfigurationError("drift lambda must lie in [0, 1)");
  if (cfg.samples < 1) throw ConfigurationError("drift sample count must be >= 1");
  if (!(cfg.tol >= 0.0)) throw ConfigurationError("drift tolerance must be >= 0");
}

/// log V(x) = ||W x||. Never overflows.
inline double log_v(const LyapunovSpec& spec, const StateVector& x) {
  const Eigen::VectorXd wx = spec.apply(x);
  const double n = wx.norm();
  return std::isfinite(n) ? n : wx.stableNorm();
}

inline double target_distance(const LyapunovSpec& spec, const TargetSet& target, const StateVector& x) {
  if (target.center.size() == 0) return log_v(spec, x);
  return log_v(spec, x - target.center);
}

inline bool in_target(const LyapunovSpec& spec, const TargetSet& target, const StateVector& x) {
  return target_distance(spec, target, x) <= target.radius;
}

/// x - center, the coordinates in which V, the drift and alpha are stated.
inline StateVector centred(const TargetSet& target, const StateVector& x) {
  if (target.center.size() == 0) return x;
  return x - target.center;
}

/// log[(1/N_dr) sum_l V(f(x_hat, u0, xi_l))]; draws are the columns of `draws`.
inline double drift_lhs_log(const SystemModel& model, const LyapunovSpec& spec, const StateVector& x_hat,
                            const ControlVector& u0, const Eigen::MatrixXd& draws) {
  detail::require(draws.cols() >= 1, "drift_lhs_log: need at least one draw");
  std::vector<double> lv(static_cast<std::size_t>(draws.cols()));
  for (Eigen::Index l = 0; l < draws.cols(); ++l) {
    lv[static_cast<std::size_t>(l)] = log_v(spec, model.transition(x_hat, u0, draws.col(l)));
  }
  return log_mean_exp(lv);
}

/// Same, measured from the target centre: V(f(x_hat, u0, xi) - center).
inline double drift_lhs_log(const SystemModel& model, const LyapunovSpec& spec, const TargetSet& target,
                            const StateVector& x_hat, const ControlVector& u0, const Eigen::MatrixXd& draws) {
  detail::require(draws.cols() >= 1, "drift_lhs_log: need at least one draw");
  std::vector<double> lv(static_cast<std::size_t>(draws.cols()));
  for (Eigen::Index l = 0; l < draws.cols(); ++l) {
    lv[static_cast<std::size_t>(l)] = log_v(spec, centred(target, model.transition(x_hat, u0, draws.col(l))));
  }
  return log_mean_exp(lv);
}

/// lhs_log - (log lambda + log V(x_hat)); feasible when <= tol.
inline double drift_slack(double lhs_log, const LyapunovSpec& spec, const StateVector& x_hat,
                          const DriftConfig& cfg) {
  return lhs_log - (std::log(cfg.lambda) + log_v(spec, x_hat));
}

inline bool drift_satisfied(double lhs_log, const LyapunovSpec& spec, const StateVector& x_hat,
                            const DriftConfig& cfg) {
  return drift_slack(lhs_log, spec, x_hat, cfg) <= cfg.tol;
}

inline ControlVector alpha(const FallbackPolicy& policy, const StateVector& x) {
  detail::require(policy.K.cols() == x.size(), "alpha: gain/state dimension mismatch");
  const Eigen::VectorXd kx = policy.K * x;
  const double n = kx.norm();
  if (n <= policy.u_max) return -kx;
  Eigen::VectorXd u = -(policy.u_max / n) * kx;
  while (u.norm() > policy.u_max) u *= (1.0 - std::numeric_limits<double>::epsilon());
  return u;
}

/// Saturated discrete LQR fallback for x' = A x + B u.
inline FallbackPolicy make_lqr_fallback(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                        const Eigen::MatrixXd& state_weight, const Eigen::MatrixXd& control_weight,
                                        double u_max) {
  if (!(u_max > 0.0)) throw ConfigurationError("fallback u_max must be > 0");
  return {dlqr(A, B, state_weight, control_weight), u_max};
}

struct CalibrationConfig {
  int samples = 1000;     ///< Monte-Carlo draws per tested state
  int directions = 128;   ///< random shell directions (plus +-axes)
  double r_min = 1.0;     ///< smallest radius on the search grid
  double growth = 1.189207115002721;  ///< grid ratio 2^(1/4)
  int max_steps = 80;
  std::vector<double> shell_factors{1.0, 1.5, 2.0, 4.0, 8.0, 16.0, 64.0};
  std::vector<double> interior_fractions{0.0, 0.25, 0.5, 0.75, 1.0};
  double se_margin = 3.0;
};

struct Calibration {
  double radius = 0.0;  ///< r_C
  double log_b = 0.0;   ///< log of b = sup over C of E[V(X_1)] (Monte-Carlo, inflated by the SE margin)
  double b() const { return std::exp(log_b); }
};

namespace detail {

/// Upper confidence bound on log E[V(f(x, alpha(x), xi))]: log(mean + margin * se).
inline double drift_upper_log(const SystemModel& model, const FallbackPolicy& policy, const LyapunovSpec& spec,
                              const StateVector& x, const Eigen::MatrixXd& draws, double margin) {
  const ControlVector u = alpha(policy, x);
  const Eigen::Index M = draws.cols();
  Eigen::VectorXd lv(M);
  for (Eigen::Index j = 0; j < M; ++j) lv[j] = log_v(spec, model.transition(x, u, draws.col(j)));
  const double top = lv.maxCoeff();
  const Eigen::ArrayXd e = (lv.array() - top).exp();
  const double mean = e.mean();
  const double var = M > 1 ? (e - mean).square().sum() / static_cast<double>(M - 1) : 0.0;
  return top + std::log(mean + margin * std::sqrt(var / static_cast<double>(M)));
}

inline std::vector<Eigen::VectorXd> shell_directions(Eigen::Index dim, int count) {
  std::vector<Eigen::VectorXd> dirs;
  RandomStream rs(0x5eedd1f7ULL, 0xca11b);
  for (int i = 0; i < count; ++i) {
    Eigen::VectorXd d(dim);
    for (Eigen::Index k = 0; k < dim; ++k) d[k] = rs.normal();
    dirs.push_back(d.normalized());
  }
  for (Eigen::Index k = 0; k < dim; ++k) {
    dirs.push_back(Eigen::VectorXd::Unit(dim, k));
    dirs.push_back(-Eigen::VectorXd::Unit(dim, k));
  }
  return dirs;
}

}  // namespace detail

/**
 * Smallest radius r_C on a geometric grid such that the fallback policy
 * passes the Monte-Carlo drift test E[V(X_1)] <= lambda V(x) (upper
 * confidence bound, se_margin standard errors) at every point of a
 * deterministic shell sample outside r_C. Shell points are generated in
 * Lyapunov coordinates and mapped back through the pseudo-inverse of W.
 * Also returns b, the largest upper-bounded E[V(X_1)] over a sample of C.
 *
 * Throws StabilizationInfeasible when the grid is exhausted.
 */
inline Calibration calibrate_target_set(const SystemModel& model, const FallbackPolicy& policy,
                                        const LyapunovSpec& spec, double lambda, RandomStream& stream,
                                        const CalibrationConfig& cfg = {}) {
  if (!(lambda > 0.0 && lambda < 1.0)) throw ConfigurationError("calibrate_target_set: lambda must lie in (0, 1)");
  const Eigen::Index n = model.state_dim();
  const Eigen::MatrixXd W = spec.identity() ? Eigen::MatrixXd::Identity(n, n) : spec.transform;
  const Eigen::MatrixXd W_pinv = W.completeOrthogonalDecomposition().pseudoInverse();
  const auto dirs = detail::shell_directions(W.rows(), cfg.directions);

  Eigen::MatrixXd draws(model.process_noise_dim(), cfg.samples);
  for (int j = 0; j < cfg.samples; ++j) draws.col(j) = model.draw_process_noise(stream);

  const double log_lambda = std::log(lambda);
  auto passes = [&](double r) {
    for (double f : cfg.shell_factors) {
      const double rr = r * f;
      for (const auto& d : dirs) {
        const StateVector x = W_pinv * (rr * d);
        const double upper = detail::drift_upper_log(model, policy, spec, x, draws, cfg.se_margin);
        if (!(upper <= log_lambda + log_v(spec, x))) return false;
      }
    }
    return true;
  };

  double r = cfg.r_min;
  for (int step = 0; step < cfg.max_steps; ++step, r *= cfg.growth) {
    if (!passes(r)) continue;
    Calibration out;
    out.radius = r;
    out.log_b = -std::numeric_limits<double>::infinity();
    for (double frac : cfg.interior_fractions) {
      for (const auto& d : dirs) {
        const StateVector x = W_pinv * (frac * r * d);
        out.log_b = std::max(out.log_b, detail::drift_upper_log(model, policy, spec, x, draws, cfg.se_margin));
        if (frac == 0.0) break;
      }
    }
    return out;
  }
  std::ostringstream msg;
  msg << "calibrate_target_set: fallback policy (u_max = " << policy.u_max
      << ") fails the drift test on every grid radius up to " << r / cfg.growth;
  throw StabilizationInfeasible(msg.str());
}

struct DriftReportRow {
  int step = 0;
  double estimate_log_v = 0.0;  ///< log of the Monte-Carlo mean of V(X_k)
  double stderr_log = 0.0;      ///< standard error of estimate_log_v (delta method: se(V) / mean(V))
  double bound_log_v = 0.0;     ///< log(lambda^k V(x0) + b / (1 - lambda))
  bool pass = false;            ///< mean(V) - 3 se(V) <= bound
};

struct DriftReport {
  std::vector<DriftReportRow> rows;
  bool all_pass() const {
    for (const auto& r : rows)
      if (!r.pass) return false;
    return true;
  }
};

/**
 * Monte-Carlo check of E_x[V(X_k)] <= lambda^k V(x0) + b / (1 - lambda) for
 * k = 0..horizon along the closed loop x' = f(x, alpha(x), xi). Runs are
 * driven by split streams, so the report does not depend on evaluation order.
 */
inline DriftReport verify_drift_bound(const SystemModel& model, const FallbackPolicy& policy,
                                      const LyapunovSpec& spec, const StateVector& x0, double lambda, double log_b,
                                      int horizon, int runs, RandomStream& stream) {
  detail::require(runs >= 100, "verify_drift_bound: need at least 100 runs");
  detail::require(horizon >= 0, "verify_drift_bound: horizon must be >= 0");
  if (!(lambda >= 0.0 && lambda < 1.0)) throw ConfigurationError("verify_drift_bound: lambda must lie in [0, 1)");

  Eigen::MatrixXd lv(horizon + 1, runs);
  const RandomStream base = stream.fork();
  for (int m = 0; m < runs; ++m) {
    RandomStream s = base.split(static_cast<std::uint64_t>(m));
    StateVector x = x0;
    lv(0, m) = log_v(spec, x);
    for (int k = 1; k <= horizon; ++k) {
      x = sample_dynamics(model, x, alpha(policy, x), s);
      lv(k, m) = log_v(spec, x);
    }
  }

  const double log_v0 = log_v(spec, x0);
  const double log_tail = log_b - std::log1p(-lambda);
  DriftReport report;
  for (int k = 0; k <= horizon; ++k) {
    const Eigen::ArrayXd row = lv.row(k).transpose().array();
    const double top = row.maxCoeff();
    const Eigen::ArrayXd e = (row - top).exp();
    const double mean = e.mean();
    const double sd = std::sqrt((e - mean).square().sum() / static_cast<double>(runs - 1));
    DriftReportRow r;
    r.step = k;
    r.estimate_log_v = top + std::log(mean);
    r.stderr_log = sd / (std::sqrt(static_cast<double>(runs)) * mean);
    const double decay = lambda > 0.0 ? k * std::log(lambda) : (k == 0 ? 0.0 : -std::numeric_limits<double>::infinity());
    r.bound_log_v = log_add_exp(decay + log_v0, log_tail);
    r.pass = 3.0 * r.stderr_log >= 1.0 || r.estimate_log_v + std::log1p(-3.0 * r.stderr_log) <= r.bound_log_v;
    report.rows.push_back(r);
  }
  return report;
}

/// CSV: step,estimate_logV,stderr,bound_logV,pass
inline void write_drift_report_csv(const DriftReport& report, std::ostream& os) {
  os << "step,estimate_logV,stderr,bound_logV,pass\n";
  os << std::setprecision(17);
  for (const auto& r : report.rows) {
    os << r.step << ',' << r.estimate_log_v << ',' << r.stderr_log << ',' << r.bound_log_v << ','
       << (r.pass ? 1 : 0) << '\n';
  }
}

}  // namespace dsmpc

#endif  // DSMPC_STABILITY_HPP
