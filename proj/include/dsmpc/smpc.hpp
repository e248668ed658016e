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

#ifndef DSMPC_SMPC_HPP
#define DSMPC_SMPC_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dsmpc/errors.hpp"
#include "dsmpc/fim.hpp"
#include "dsmpc/linalg.hpp"
#include "dsmpc/model.hpp"
#include "dsmpc/pfilter.hpp"
#include "dsmpc/random.hpp"
#include "dsmpc/stability.hpp"

namespace dsmpc {

/// Closed-loop policies compared in the experiments.
enum class PolicyKind {
  CeLq,            ///< certainty-equivalent constrained LQ: quadratic state + control cost, no FIM, no drift
  FisherLyapunov,  ///< FIM cost + control cost, drift constraint on u_0 outside C
  FisherDistance,  ///< FIM cost + distance-to-target cost, no drift
};

inline const char* to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::CeLq: return "ce-lq";
    case PolicyKind::FisherLyapunov: return "fisher-lyapunov";
    case PolicyKind::FisherDistance: return "fisher-distance";
  }
  return "?";
}

inline PolicyKind policy_kind_from_string(const std::string& s) {
  if (s == "ce-lq") return PolicyKind::CeLq;
  if (s == "fisher-lyapunov") return PolicyKind::FisherLyapunov;
  if (s == "fisher-distance") return PolicyKind::FisherDistance;
  throw ConfigurationError("unknown policy '" + s + "' (expected ce-lq, fisher-lyapunov or fisher-distance)");
}

/**
 * Sampled finite-horizon problem data, drawn once per solve so every
 * objective evaluation sees the same noise (common random numbers).
 */
struct ScenarioSet {
  Eigen::MatrixXd initial_states;      ///< n_x x N_s, extracted particles
  Eigen::VectorXd weights;             ///< N_s, uniform after extraction
  std::vector<Eigen::MatrixXd> noise;  ///< per scenario: n_xi x T
  Eigen::MatrixXd drift_draws;         ///< n_xi x N_dr
  Eigen::MatrixXd initial_information; ///< J_0 = (belief covariance + ridge I)^-1

  Eigen::Index size() const { return initial_states.cols(); }
  int horizon() const { return noise.empty() ? 0 : static_cast<int>(noise.front().cols()); }
};

struct ProblemSpec {
  int horizon = 5;                ///< T
  int scenarios = 20;             ///< N_s
  double u_max = 2.0;             ///< ball radius of every stage's control set
  Eigen::MatrixXd control_weight; ///< M_u
  Eigen::MatrixXd state_weight;   ///< M_x (empty: no quadratic state cost)
  double distance_weight = 0.0;   ///< weight on ||W x_i|| (W from the Lyapunov spec)
  bool info_enabled = false;
  InfoCostConfig info;
  bool drift_enabled = false;
  DriftConfig drift;
  LyapunovSpec lyapunov;
  TargetSet target;
};

/// Cost knobs that only some policies use.
struct PolicyTuning {
  Eigen::MatrixXd ce_state_weight;   ///< M_x for CE-LQ
  double distance_weight = 1.0;      ///< for Fisher-Distance
};

/// Switches the cost terms and the drift constraint on or off for `kind`.
inline ProblemSpec specialize(ProblemSpec spec, PolicyKind kind, const PolicyTuning& tuning) {
  spec.state_weight.resize(0, 0);
  spec.distance_weight = 0.0;
  switch (kind) {
    case PolicyKind::CeLq:
      spec.info_enabled = false;
      spec.drift_enabled = false;
      spec.state_weight = tuning.ce_state_weight;
      break;
    case PolicyKind::FisherLyapunov:
      spec.info_enabled = true;
      spec.drift_enabled = true;
      break;
    case PolicyKind::FisherDistance:
      spec.info_enabled = true;
      spec.drift_enabled = false;
      spec.distance_weight = tuning.distance_weight;
      break;
  }
  return spec;
}

struct SolverConfig {
  int multistart = 3;          ///< zero start, fallback rollout, then random feasible starts
  int max_outer = 4;           ///< augmented-Lagrangian iterations
  int max_inner = 15;          ///< projected-gradient iterations per outer iteration
  double penalty_init = 10.0;
  double penalty_growth = 10.0;
  double armijo = 1e-4;
  double backtrack = 0.5;
  int max_backtracks = 30;
  double fd_step = 1e-5;       ///< central-difference step on controls
  double step_tol = 1e-7;      ///< relative to u_max; inner loop stops below it
  double grad_tol = 1e-8;      ///< projected-gradient norm
  std::uint64_t seed = 0;      ///< random starts
};

enum class SolverStatus { OptimalLocal, FeasibleMaxIter, InfeasibleDrift };

inline const char* to_string(SolverStatus s) {
  switch (s) {
    case SolverStatus::OptimalLocal: return "optimal-local";
    case SolverStatus::FeasibleMaxIter: return "feasible-maxiter";
    case SolverStatus::InfeasibleDrift: return "infeasible-drift";
  }
  return "?";
}

struct SolverResult {
  Eigen::MatrixXd controls;  ///< n_u x T
  double objective = std::numeric_limits<double>::quiet_NaN();
  double drift_slack = std::numeric_limits<double>::quiet_NaN();  ///< NaN when the drift is inactive
  SolverStatus status = SolverStatus::FeasibleMaxIter;
  long evaluations = 0;
};

inline void validate_problem(const ProblemSpec& spec, const SystemModel& model) {
  if (spec.horizon < 1) throw ConfigurationError("horizon must be >= 1");
  if (spec.scenarios < 1) throw ConfigurationError("scenario count must be >= 1");
  if (!(spec.u_max > 0.0)) throw ConfigurationError("u_max must be > 0");
  const int nu = model.control_dim();
  if (spec.control_weight.rows() != nu || spec.control_weight.cols() != nu) {
    throw ConfigurationError("control weight must be n_u x n_u");
  }
  if (!is_positive_semidefinite(spec.control_weight)) throw ConfigurationError("control weight must be PSD");
  if (spec.state_weight.size() != 0) {
    if (spec.state_weight.rows() != model.state_dim() || spec.state_weight.cols() != model.state_dim()) {
      throw ConfigurationError("state weight must be n_x x n_x");
    }
    if (!is_positive_semidefinite(spec.state_weight)) throw ConfigurationError("state weight must be PSD");
  }
  if (spec.info_enabled) {
    validate_info_cost_config(spec.info);
    const DifferentiableModel* d = model.differentiable();
    if (!d) throw ConfigurationError("FIM probing enabled on a model without Jacobian/covariance providers");
    if (!is_positive_definite(d->process_covariance())) {
      throw ConfigurationError("FIM probing needs a positive-definite process covariance");
    }
  }
  if (spec.drift_enabled) {
    validate_drift_config(spec.drift);
    if (!(spec.target.radius > 0.0)) throw ConfigurationError("target radius must be > 0");
  }
}

namespace detail {

/// Indices picked by systematic sampling of `count` positions on the weight CDF.
inline std::vector<Eigen::Index> systematic_indices(const Eigen::VectorXd& weights, Eigen::Index count,
                                                    double offset) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(count));
  const double step = 1.0 / static_cast<double>(count);
  Eigen::Index j = 0;
  double cdf = weights[0];
  for (Eigen::Index i = 0; i < count; ++i) {
    const double pos = (offset + static_cast<double>(i)) * step;
    while (pos > cdf && j < weights.size() - 1) cdf += weights[++j];
    idx[static_cast<std::size_t>(i)] = j;
  }
  return idx;
}

}  // namespace detail

/**
 * N_s particles by systematic sampling proportional to weight (uniform
 * scenario weights afterwards), T process-noise draws per scenario, N_dr
 * drift draws, and J_0 from the belief covariance.
 */
inline ScenarioSet extract_scenarios(const ParticleBelief& belief, Eigen::Index n_scenarios, int n_drift,
                                     int horizon, const SystemModel& model, RandomStream& stream,
                                     double ridge = 1e-6) {
  detail::require(n_scenarios >= 1 && n_scenarios <= belief.size(),
                  "extract_scenarios: need 1 <= N_s <= N (N_s = " + std::to_string(n_scenarios) +
                      ", N = " + std::to_string(belief.size()) + ")");
  detail::require(n_drift >= 1 && horizon >= 1, "extract_scenarios: N_dr and T must be >= 1");
  ScenarioSet scen;
  const auto idx = detail::systematic_indices(belief.weights, n_scenarios, stream.uniform());
  scen.initial_states.resize(belief.state_dim(), n_scenarios);
  for (Eigen::Index l = 0; l < n_scenarios; ++l) scen.initial_states.col(l) = belief.particles.col(idx[l]);
  scen.weights = Eigen::VectorXd::Constant(n_scenarios, 1.0 / static_cast<double>(n_scenarios));
  const int n_xi = model.process_noise_dim();
  scen.noise.reserve(static_cast<std::size_t>(n_scenarios));
  for (Eigen::Index l = 0; l < n_scenarios; ++l) {
    Eigen::MatrixXd xi(n_xi, horizon);
    for (int i = 0; i < horizon; ++i) xi.col(i) = model.draw_process_noise(stream);
    scen.noise.push_back(std::move(xi));
  }
  scen.drift_draws.resize(n_xi, n_drift);
  for (int l = 0; l < n_drift; ++l) scen.drift_draws.col(l) = model.draw_process_noise(stream);
  Eigen::MatrixXd cov = weighted_covariance(belief);
  cov.diagonal().array() += ridge;
  scen.initial_information = spd_inverse(cov, "extract_scenarios: belief covariance");
  return scen;
}

namespace detail {

/// Scenario rollouts with per-stage caching so a finite-difference probe on
/// stage s only recomputes stages s..T.
class RolloutBase {
 public:
  virtual ~RolloutBase() = default;
  /// Full evaluation; refreshes the cache.
  virtual double evaluate_and_cache(const Eigen::MatrixXd& u) = 0;
  /// Evaluation of `u`, which must agree with the cached sequence on stages < stage.
  virtual double evaluate_from(const Eigen::MatrixXd& u, int stage) = 0;
};

template <int N>
class Rollout final : public RolloutBase {
  using Mat = Eigen::Matrix<double, N, N>;
  using Vec = Eigen::Matrix<double, N, 1>;

 public:
  Rollout(const SystemModel& model, const ScenarioSet& scen, const ProblemSpec& spec)
      : model_(model), scen_(scen), spec_(spec), n_(model.state_dim()), T_(spec.horizon), S_(scen.size()) {
    detail::require(scen.horizon() >= spec.horizon, "rollout: scenario noise shorter than the horizon");
    detail::require(scen.initial_states.rows() == n_, "rollout: scenario/model dimension mismatch");
    diff_ = model.differentiable();
    if (diff_ && model.process_noise_dim() == n_) {
      Eigen::MatrixXd A, B;
      if (diff_->affine_dynamics(A, B)) {
        affine_ = true;
        A_ = A;
        B_ = B;
        // The closed form skips the model's own admissibility check, so run it once at the bound.
        Eigen::VectorXd probe = Eigen::VectorXd::Zero(model.control_dim());
        probe[0] = spec.u_max;
        model.transition(scen.initial_states.col(0), project_ball(probe, spec.u_max),
                         Eigen::VectorXd::Zero(model.process_noise_dim()));
      }
    }
    state_cost_on_ = spec_.state_weight.size() != 0 || spec_.distance_weight != 0.0;
    if (state_cost_on_) {
      W_ = spec_.lyapunov.identity() ? Mat(Mat::Identity(n_, n_)) : Mat(spec_.lyapunov.transform);
      Mx_ = spec_.state_weight.size() != 0 ? Mat(spec_.state_weight) : Mat(Mat::Zero(n_, n_));
      center_ = spec_.target.center.size() == n_ ? Vec(spec_.target.center) : Vec(Vec::Zero(n_));
    }
    if (spec_.info_enabled) {
      if (!diff_) throw ConfigurationError("FIM probing enabled on a model without Jacobian/covariance providers");
      Q_inv_ = spd_inverse(diff_->process_covariance(), "process covariance");
      constant_F_ = diff_->constant_dynamics_jacobian();
      if (constant_F_) {
        const Eigen::MatrixXd F = diff_->dynamics_jacobian(scen.initial_states.col(0),
                                                          Eigen::VectorXd::Zero(model.control_dim()));
        D11_ = symmetrize(F.transpose() * Q_inv_ * F);
        D12_ = -F.transpose() * Q_inv_;
      }
      J0_ = scen.initial_information;
    }
    states_.assign(static_cast<std::size_t>((T_ + 1) * S_), Vec::Zero(n_));
    infos_.assign(static_cast<std::size_t>(spec_.info_enabled ? (T_ + 1) * S_ : 0), Mat::Zero(n_, n_));
    prefix_.assign(static_cast<std::size_t>((T_ + 1) * S_), 0.0);
    control_prefix_.assign(static_cast<std::size_t>(T_ + 1), 0.0);
    for (Eigen::Index l = 0; l < S_; ++l) states_[index(0, l)] = scen.initial_states.col(l);
  }

  double evaluate_and_cache(const Eigen::MatrixXd& u) override { return run(u, 0, true); }
  double evaluate_from(const Eigen::MatrixXd& u, int stage) override { return run(u, stage, false); }

 private:
  double state_cost(const Vec& x) const {
    if (!state_cost_on_) return 0.0;
    const Vec e = x - center_;
    double c = 0.0;
    if (spec_.state_weight.size() != 0) c += e.dot(Mx_ * e);
    if (spec_.distance_weight != 0.0) c += spec_.distance_weight * (W_ * e).norm();
    return c;
  }

  Vec step(const Vec& x, const Eigen::MatrixXd& u, int i, Eigen::Index l) const {
    if (affine_) {
      Vec next = A_ * x;
      next.noalias() += B_ * u.col(i);
      next += scen_.noise[static_cast<std::size_t>(l)].col(i);
      return next;
    }
    return Vec(model_.transition(x, u.col(i), scen_.noise[static_cast<std::size_t>(l)].col(i)));
  }

  double run(const Eigen::MatrixXd& u, int stage, bool cache) {
    // Control cost is scenario independent.
    double control = control_prefix_[static_cast<std::size_t>(stage)];
    for (int i = stage; i < T_; ++i) {
      if (cache) control_prefix_[static_cast<std::size_t>(i)] = control;
      control += u.col(i).dot(spec_.control_weight * u.col(i));
    }
    if (cache) control_prefix_[static_cast<std::size_t>(T_)] = control;

    double total = 0.0;
    Mat J = Mat::Zero(n_, n_);
    Mat D22 = Mat::Zero(n_, n_);
    for (Eigen::Index l = 0; l < S_; ++l) {
      Vec x = states_[index(stage, l)];
      double cost = prefix_[index(stage, l)];
      if (spec_.info_enabled) J = infos_[index(stage, l)];
      if (spec_.info_enabled && stage == 0) J = J0_;
      for (int i = stage; i < T_; ++i) {
        if (cache) {
          states_[index(i, l)] = x;
          prefix_[index(i, l)] = cost;
          if (spec_.info_enabled) infos_[index(i, l)] = J;
        }
        cost += state_cost(x);
        if (spec_.info_enabled && i > 0 && spec_.info.w_stage != 0.0) {
          cost += spec_.info.w_stage * detail::info_cost_impl(J, spec_.info.form, spec_.info.ridge);
        }
        const Vec next = step(x, u, i, l);
        if (spec_.info_enabled) {
          D22 = Q_inv_;
          diff_->add_observation_information(next, D22);
          if (constant_F_) {
            detail::fim_step_blocks<Mat>(J, D11_, D12_, D22, spec_.info.ridge);
          } else {
            const Eigen::MatrixXd F = diff_->dynamics_jacobian(x, u.col(i));
            const Mat D11 = symmetrize(F.transpose() * Q_inv_ * F);
            const Mat D12 = -F.transpose() * Q_inv_;
            detail::fim_step_blocks<Mat>(J, D11, D12, D22, spec_.info.ridge);
          }
        }
        x = next;
      }
      if (cache) {
        states_[index(T_, l)] = x;
        prefix_[index(T_, l)] = cost;
        if (spec_.info_enabled) infos_[index(T_, l)] = J;
      }
      cost += state_cost(x);
      if (spec_.info_enabled) {
        cost += spec_.info.w_term * detail::info_cost_impl(J, spec_.info.form, spec_.info.ridge);
      }
      total += scen_.weights[l] * cost;
    }
    return total + control;
  }

  std::size_t index(int stage, Eigen::Index l) const {
    return static_cast<std::size_t>(stage) * static_cast<std::size_t>(S_) + static_cast<std::size_t>(l);
  }

  const SystemModel& model_;
  const ScenarioSet& scen_;
  const ProblemSpec& spec_;
  Eigen::Index n_;
  int T_;
  Eigen::Index S_;
  const DifferentiableModel* diff_ = nullptr;
  bool affine_ = false;
  Mat A_;
  Eigen::Matrix<double, N, Eigen::Dynamic> B_;
  bool state_cost_on_ = false;
  Mat W_;
  Mat Mx_;
  Vec center_;
  Mat Q_inv_;
  Mat D11_;
  Mat D12_;
  Mat J0_;
  bool constant_F_ = false;
  std::vector<Vec, Eigen::aligned_allocator<Vec>> states_;
  std::vector<Mat, Eigen::aligned_allocator<Mat>> infos_;
  std::vector<double> prefix_;
  std::vector<double> control_prefix_;
};

inline std::unique_ptr<RolloutBase> make_rollout(const SystemModel& model, const ScenarioSet& scen,
                                                 const ProblemSpec& spec) {
  switch (model.state_dim()) {
    case 1: return std::make_unique<Rollout<1>>(model, scen, spec);
    case 2: return std::make_unique<Rollout<2>>(model, scen, spec);
    case 4: return std::make_unique<Rollout<4>>(model, scen, spec);
    case 6: return std::make_unique<Rollout<6>>(model, scen, spec);
    default: return std::make_unique<Rollout<Eigen::Dynamic>>(model, scen, spec);
  }
}

inline void check_controls(const Eigen::MatrixXd& u, const SystemModel& model, const ProblemSpec& spec) {
  detail::require(u.rows() == model.control_dim() && u.cols() == spec.horizon,
                  "control sequence must be n_u x T");
}

}  // namespace detail

/**
 * Scenario objective sum_l w_l (sum_i g_i(X_i^l, u_i) + g_T(X_T^l)): every
 * scenario propagated with its pre-drawn noise, the Fisher information run
 * along it when enabled. Deterministic given the scenario set.
 */
inline double rollout_objective(const Eigen::MatrixXd& u, const ScenarioSet& scen, const SystemModel& model,
                                const ProblemSpec& spec) {
  detail::check_controls(u, model, spec);
  auto r = detail::make_rollout(model, scen, spec);
  return r->evaluate_and_cache(u);
}

namespace detail {

class ScenarioSolver {
 public:
  ScenarioSolver(const ScenarioSet& scen, const SystemModel& model, const ProblemSpec& spec,
                 const StateVector& x_hat, const SolverConfig& cfg)
      : scen_(scen),
        model_(model),
        spec_(spec),
        x_hat_(x_hat),
        cfg_(cfg),
        rollout_(make_rollout(model, scen, spec)),
        drift_active_(spec.drift_enabled && !in_target(spec.lyapunov, spec.target, x_hat)),
        drift_rhs_(drift_active_ ? std::log(spec.drift.lambda) + target_distance(spec.lyapunov, spec.target, x_hat)
                                 : 0.0),
        h_(cfg.fd_step * std::max(1.0, spec.u_max)) {}

  bool drift_active() const { return drift_active_; }

  double constraint(const Eigen::VectorXd& u0) const {
    if (!drift_active_) return -std::numeric_limits<double>::infinity();
    ++evaluations_;
    return drift_lhs_log(model_, spec_.lyapunov, spec_.target, x_hat_, u0, scen_.drift_draws) - drift_rhs_;
  }

  struct Point {
    Eigen::MatrixXd u;
    double f;
    double c;
  };

  /// Augmented-Lagrangian / projected-gradient descent from one start.
  Point descend(Eigen::MatrixXd u, bool* converged) {
    project(u);
    double nu = 0.0;
    double mu = cfg_.penalty_init;
    double prev_c = std::numeric_limits<double>::infinity();
    *converged = false;
    Point p{u, 0.0, 0.0};
    const int outer_iters = drift_active_ ? cfg_.max_outer : 1;
    for (int outer = 0; outer < outer_iters; ++outer) {
      const bool inner_ok = inner(p.u, nu, mu);
      p.f = rollout_->evaluate_and_cache(p.u);
      ++evaluations_;
      p.c = constraint(p.u.col(0));
      if (!drift_active_ || p.c <= spec_.drift.tol) {
        *converged = inner_ok;
        break;
      }
      nu = std::max(0.0, nu + mu * p.c);
      if (p.c > spec_.drift.tol && p.c > 0.25 * prev_c) mu *= cfg_.penalty_growth;
      prev_c = std::max(p.c, 0.0);
    }
    return p;
  }

  Point evaluate_point(const Eigen::MatrixXd& u) {
    ++evaluations_;
    return {u, rollout_->evaluate_and_cache(u), constraint(u.col(0))};
  }

  void project(Eigen::MatrixXd& u) const {
    for (Eigen::Index i = 0; i < u.cols(); ++i) u.col(i) = project_ball(u.col(i), spec_.u_max);
  }

  long evaluations() const { return evaluations_; }

 private:
  double penalty(double c, double nu, double mu) const {
    if (!drift_active_) return 0.0;
    const double t = std::max(0.0, nu + mu * c);
    return (t * t - nu * nu) / (2.0 * mu);
  }

  double merit(const Eigen::MatrixXd& u, double nu, double mu, bool cache) {
    ++evaluations_;
    const double f = cache ? rollout_->evaluate_and_cache(u) : rollout_->evaluate_from(u, 0);
    return f + penalty(constraint(u.col(0)), nu, mu);
  }

  // Central differences under common random numbers; one-sided where a probe would leave the ball.
  Eigen::MatrixXd gradient(const Eigen::MatrixXd& u, double nu, double mu) {
    Eigen::MatrixXd g(u.rows(), u.cols());
    Eigen::MatrixXd probe = u;
    const double c0 = drift_active_ ? constraint(u.col(0)) : 0.0;
    const double f0 = rollout_->evaluate_from(u, 0);
    ++evaluations_;
    for (Eigen::Index i = 0; i < u.cols(); ++i) {
      for (Eigen::Index j = 0; j < u.rows(); ++j) {
        const double base = u(j, i);
        probe(j, i) = base + h_;
        const bool plus_ok = probe.col(i).norm() <= spec_.u_max;
        probe(j, i) = base - h_;
        const bool minus_ok = probe.col(i).norm() <= spec_.u_max;
        auto value = [&](double v) {
          probe(j, i) = v;
          ++evaluations_;
          double f = rollout_->evaluate_from(probe, static_cast<int>(i));
          if (i == 0 && drift_active_) f += penalty(constraint(probe.col(0)), nu, mu);
          return f;
        };
        const double here = f0 + (i == 0 ? penalty(c0, nu, mu) : 0.0);
        if (plus_ok && minus_ok) {
          g(j, i) = (value(base + h_) - value(base - h_)) / (2.0 * h_);
        } else if (minus_ok) {
          g(j, i) = (here - value(base - h_)) / h_;
        } else if (plus_ok) {
          g(j, i) = (value(base + h_) - here) / h_;
        } else {
          g(j, i) = 0.0;
        }
        probe(j, i) = base;
      }
    }
    return g;
  }

  bool inner(Eigen::MatrixXd& u, double nu, double mu) {
    double L = merit(u, nu, mu, true);
    double step = -1.0;
    const double step_tol = cfg_.step_tol * spec_.u_max;
    for (int it = 0; it < cfg_.max_inner; ++it) {
      const Eigen::MatrixXd g = gradient(u, nu, mu);
      const double gmax = g.cwiseAbs().maxCoeff();
      if (!(gmax > cfg_.grad_tol)) return true;
      if (step <= 0.0) step = 0.5 * spec_.u_max / gmax;
      else step *= 2.0;
      bool accepted = false;
      Eigen::MatrixXd trial;
      double L_trial = L;
      for (int b = 0; b < cfg_.max_backtracks; ++b) {
        trial = u - step * g;
        project(trial);
        const double decrease = (g.array() * (trial - u).array()).sum();
        if ((trial - u).cwiseAbs().maxCoeff() <= step_tol) return true;
        L_trial = merit(trial, nu, mu, false);
        if (L_trial <= L + cfg_.armijo * decrease) {
          accepted = true;
          break;
        }
        step *= cfg_.backtrack;
      }
      if (!accepted) return true;
      const double move = (trial - u).cwiseAbs().maxCoeff();
      u = trial;
      L = merit(u, nu, mu, true);
      if (move <= step_tol) return true;
    }
    return false;
  }

  const ScenarioSet& scen_;
  const SystemModel& model_;
  const ProblemSpec& spec_;
  const StateVector& x_hat_;
  const SolverConfig& cfg_;
  std::unique_ptr<RolloutBase> rollout_;
  bool drift_active_;
  double drift_rhs_;
  double h_;
  mutable long evaluations_ = 0;
};

/// Controls from the fallback policy along the noise-free prediction from x_hat.
inline Eigen::MatrixXd fallback_rollout(const SystemModel& model, const FallbackPolicy& policy,
                                        const TargetSet& target, const StateVector& x_hat, int horizon,
                                        double u_max) {
  Eigen::MatrixXd u(model.control_dim(), horizon);
  StateVector x = x_hat;
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(model.process_noise_dim());
  for (int i = 0; i < horizon; ++i) {
    u.col(i) = project_ball(alpha(policy, centred(target, x)), u_max);
    x = model.transition(x, u.col(i), zero);
  }
  return u;
}

}  // namespace detail

/**
 * Multi-start local solve of the scenario problem. Each start runs an
 * augmented Lagrangian on the scalar drift inequality (only when the drift is
 * enabled and x_hat lies outside C) around projected-gradient inner loops on
 * the per-stage balls. Starts: zero sequence, fallback rollout (when a
 * fallback is given), random feasible sequences. Returns the best
 * drift-feasible point, or the least-violating one with status
 * infeasible-drift.
 */
inline SolverResult solve(const ScenarioSet& scen, const SystemModel& model, const ProblemSpec& spec,
                          const StateVector& x_hat, const SolverConfig& cfg,
                          const FallbackPolicy* fallback = nullptr) {
  validate_problem(spec, model);
  detail::require(cfg.multistart >= 1 && cfg.max_outer >= 1 && cfg.max_inner >= 1,
                  "solver iteration counts must be >= 1");
  const int nu = model.control_dim();
  const int T = spec.horizon;
  detail::ScenarioSolver solver(scen, model, spec, x_hat, cfg);

  std::vector<Eigen::MatrixXd> starts;
  starts.push_back(Eigen::MatrixXd::Zero(nu, T));
  if (fallback && static_cast<int>(starts.size()) < cfg.multistart) {
    starts.push_back(detail::fallback_rollout(model, *fallback, spec.target, x_hat, T, spec.u_max));
  }
  RandomStream rs(cfg.seed, 0x57a27);
  while (static_cast<int>(starts.size()) < cfg.multistart) {
    Eigen::MatrixXd u(nu, T);
    for (int i = 0; i < T; ++i) {
      Eigen::VectorXd d(nu);
      for (int j = 0; j < nu; ++j) d[j] = rs.normal();
      const double radius = spec.u_max * std::pow(rs.uniform(), 1.0 / nu);
      u.col(i) = project_ball(radius * d.normalized(), spec.u_max);
    }
    starts.push_back(std::move(u));
  }

  const double tol = spec.drift.tol;
  auto feasible = [&](double c) { return !solver.drift_active() || c <= tol; };
  std::optional<detail::ScenarioSolver::Point> best;
  bool best_converged = false;
  std::optional<detail::ScenarioSolver::Point> least_violating;
  auto consider = [&](const detail::ScenarioSolver::Point& p, bool converged) {
    if (feasible(p.c)) {
      if (!best || p.f < best->f) {
        best = p;
        best_converged = converged;
      }
    } else if (!least_violating || p.c < least_violating->c) {
      least_violating = p;
    }
  };
  for (auto& s : starts) {
    solver.project(s);
    consider(solver.evaluate_point(s), false);
    bool converged = false;
    consider(solver.descend(s, &converged), converged);
  }

  SolverResult out;
  out.evaluations = solver.evaluations();
  if (best) {
    out.controls = best->u;
    out.objective = best->f;
    out.drift_slack = solver.drift_active() ? best->c : std::numeric_limits<double>::quiet_NaN();
    out.status = best_converged ? SolverStatus::OptimalLocal : SolverStatus::FeasibleMaxIter;
  } else {
    out.controls = least_violating->u;
    out.objective = least_violating->f;
    out.drift_slack = least_violating->c;
    out.status = SolverStatus::InfeasibleDrift;
  }
  return out;
}

enum class StepStatus { InTarget, OptimalLocal, FeasibleMaxIter, InfeasibleDriftFallback };

inline const char* to_string(StepStatus s) {
  switch (s) {
    case StepStatus::InTarget: return "in-target";
    case StepStatus::OptimalLocal: return "optimal-local";
    case StepStatus::FeasibleMaxIter: return "feasible-maxiter";
    case StepStatus::InfeasibleDriftFallback: return "infeasible-drift-fallback";
  }
  return "?";
}

struct ControlDiagnostics {
  StepStatus status = StepStatus::InTarget;
  double objective = std::numeric_limits<double>::quiet_NaN();
  double drift_slack = std::numeric_limits<double>::quiet_NaN();
  long evaluations = 0;
  Eigen::MatrixXd plan;
};

struct ControlDecision {
  ControlVector u;
  ControlDiagnostics diagnostics;
};

/**
 * One receding-horizon decision: alpha(x_hat) inside C, otherwise solve the
 * scenario problem and apply u_0*. An infeasible drift falls back to alpha.
 */
inline ControlDecision control_step(const ParticleBelief& belief, const SystemModel& model, const ProblemSpec& spec,
                                    const SolverConfig& solver_cfg, const FallbackPolicy& fallback,
                                    RandomStream& stream) {
  const StateVector x_hat = weighted_mean(belief);
  ControlDecision d;
  if (in_target(spec.lyapunov, spec.target, x_hat)) {
    d.u = alpha(fallback, centred(spec.target, x_hat));
    d.diagnostics.status = StepStatus::InTarget;
    return d;
  }
  const int n_dr = spec.drift_enabled ? spec.drift.samples : 1;
  const Eigen::Index n_s = std::min<Eigen::Index>(spec.scenarios, belief.size());
  const ScenarioSet scen = extract_scenarios(belief, n_s, n_dr, spec.horizon, model, stream, spec.info.ridge);
  SolverConfig cfg = solver_cfg;
  cfg.seed = stream.next_u64();
  const SolverResult res = solve(scen, model, spec, x_hat, cfg, &fallback);
  d.diagnostics.objective = res.objective;
  d.diagnostics.evaluations = res.evaluations;
  d.diagnostics.plan = res.controls;
  if (res.status == SolverStatus::InfeasibleDrift) {
    d.u = alpha(fallback, centred(spec.target, x_hat));
    d.diagnostics.status = StepStatus::InfeasibleDriftFallback;
    d.diagnostics.drift_slack = drift_lhs_log(model, spec.lyapunov, spec.target, x_hat, d.u, scen.drift_draws) -
                                (std::log(spec.drift.lambda) + target_distance(spec.lyapunov, spec.target, x_hat));
    return d;
  }
  d.u = res.controls.col(0);
  d.diagnostics.status =
      res.status == SolverStatus::OptimalLocal ? StepStatus::OptimalLocal : StepStatus::FeasibleMaxIter;
  d.diagnostics.drift_slack = res.drift_slack;
  return d;
}

/// Everything one closed-loop run needs. The problem spec is already specialized for the policy.
struct RunConfig {
  std::shared_ptr<const SystemModel> model;
  Eigen::VectorXd prior_mean;
  Eigen::MatrixXd prior_covariance;
  bool sample_true_initial = true;  ///< draw X_0 from the prior; otherwise X_0 = prior mean
  Eigen::Index particles = 1000;
  ResampleConfig resample;
  ProblemSpec problem;
  SolverConfig solver;
  FallbackPolicy fallback;
  int max_steps = 150;
  std::uint64_t seed = 0;
  PolicyKind policy = PolicyKind::FisherLyapunov;
};

enum class StopReason { EstimateInTarget, MaxSteps, DegenerateBelief };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::EstimateInTarget: return "estimate-in-target";
    case StopReason::MaxSteps: return "max-steps";
    case StopReason::DegenerateBelief: return "degenerate-belief";
  }
  return "?";
}

struct RunStep {
  int k = 0;
  StateVector true_state;
  StateVector estimate;
  ControlVector control;
  double ess = 0.0;
  double drift_slack = std::numeric_limits<double>::quiet_NaN();
  double info_cost = std::numeric_limits<double>::quiet_NaN();
  StepStatus status = StepStatus::InTarget;
};

struct RunRecord {
  std::uint64_t seed = 0;
  PolicyKind policy = PolicyKind::FisherLyapunov;
  std::vector<RunStep> steps;
  StopReason stop_reason = StopReason::MaxSteps;
  StateVector final_true;      ///< state at the stopping time
  StateVector final_estimate;
  bool failed() const { return stop_reason == StopReason::DegenerateBelief; }
};

/// Called with (k, belief) after the belief for step k is formed.
using BeliefObserver = std::function<void(int, const ParticleBelief&)>;

/**
 * Output-feedback loop: observe, filter, decide, apply. Stops when the
 * estimate enters C (that step logs alpha(x_hat) with status in-target and
 * nothing more is applied) or after max_steps applied controls. Truth, filter
 * and control randomness use separate child streams of the seed, so runs of
 * different policies with one seed share the initial state and first
 * observation.
 */
inline RunRecord run_closed_loop(const RunConfig& cfg, const BeliefObserver& observer = {}) {
  if (!cfg.model) throw ConfigurationError("run_closed_loop: no model");
  const SystemModel& model = *cfg.model;
  validate_problem(cfg.problem, model);
  validate_resample_config(cfg.resample);
  if (cfg.particles < 1) throw ConfigurationError("particle count must be >= 1");
  if (cfg.max_steps < 1) throw ConfigurationError("max_steps must be >= 1");
  detail::require(cfg.prior_mean.size() == model.state_dim(), "run_closed_loop: prior mean dimension");
  const GaussianNoise prior(cfg.prior_covariance);
  detail::require(prior.dim() == model.state_dim(), "run_closed_loop: prior covariance dimension");

  const RandomStream master(cfg.seed, 0);
  RandomStream truth = master.split(1);
  RandomStream filter = master.split(2);
  RandomStream control = master.split(3);

  RunRecord rec;
  rec.seed = cfg.seed;
  rec.policy = cfg.policy;
  StateVector x = cfg.prior_mean;
  if (cfg.sample_true_initial) x += prior.sample(truth);
  auto sampler = [&](RandomStream& s) -> StateVector { return cfg.prior_mean + prior.sample(s); };
  ParticleBelief belief;
  double last_ess = 0.0;
  try {
    belief = init_belief(sampler, cfg.particles, filter);
    belief = weight_update(belief, sample_observation(model, x, truth), model);
    last_ess = ess(belief.weights);
    if (last_ess < cfg.resample.threshold * static_cast<double>(belief.size())) {
      RandomStream rs = filter.fork();
      belief = systematic_resample(belief, rs);
    }
  } catch (const DegenerateBelief&) {
    rec.stop_reason = StopReason::DegenerateBelief;
    rec.final_true = x;
    rec.final_estimate = cfg.prior_mean;
    return rec;
  }

  const ProblemSpec& spec = cfg.problem;
  for (int k = 0;; ++k) {
    if (observer) observer(k, belief);
    const StateVector x_hat = weighted_mean(belief);
    rec.final_true = x;
    rec.final_estimate = x_hat;
    if (k == cfg.max_steps) {
      rec.stop_reason = StopReason::MaxSteps;
      break;
    }
    RunStep row;
    row.k = k;
    row.true_state = x;
    row.estimate = x_hat;
    row.ess = last_ess;
    {
      Eigen::MatrixXd cov = weighted_covariance(belief);
      cov.diagonal().array() += spec.info.ridge;
      const Eigen::LLT<Eigen::MatrixXd> llt(cov);
      if (llt.info() == Eigen::Success) {
        const Eigen::MatrixXd J = llt.solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
        row.info_cost = detail::info_cost_impl(J, spec.info.form, spec.info.ridge);
      }
    }
    if (in_target(spec.lyapunov, spec.target, x_hat)) {
      row.control = alpha(cfg.fallback, centred(spec.target, x_hat));
      row.status = StepStatus::InTarget;
      rec.steps.push_back(std::move(row));
      rec.stop_reason = StopReason::EstimateInTarget;
      break;
    }
    RandomStream step_stream = control.split(static_cast<std::uint64_t>(k));
    const ControlDecision d = control_step(belief, model, spec, cfg.solver, cfg.fallback, step_stream);
    row.control = d.u;
    row.status = d.diagnostics.status;
    row.drift_slack = d.diagnostics.drift_slack;
    rec.steps.push_back(row);

    x = sample_dynamics(model, x, d.u, truth);
    const Observation y = sample_observation(model, x, truth);
    try {
      FilterStepInfo info;
      belief = filter_step(belief, d.u, y, model, cfg.resample, filter, &info);
      last_ess = info.ess_after_update;
    } catch (const DegenerateBelief&) {
      rec.stop_reason = StopReason::DegenerateBelief;
      rec.final_true = x;
      break;
    }
  }
  return rec;
}

/// One row per step: k, true_1..n, est_1..n, u_1..m, ess, drift_slack, info_cost, status.
inline void write_run_csv(const RunRecord& rec, std::ostream& os) {
  const Eigen::Index n = rec.steps.empty() ? rec.final_true.size() : rec.steps.front().true_state.size();
  const Eigen::Index m = rec.steps.empty() ? 0 : rec.steps.front().control.size();
  os << "k";
  for (Eigen::Index i = 1; i <= n; ++i) os << ",true_" << i;
  for (Eigen::Index i = 1; i <= n; ++i) os << ",est_" << i;
  for (Eigen::Index i = 1; i <= m; ++i) os << ",u_" << i;
  os << ",ess,drift_slack,info_cost,status\n";
  os << std::setprecision(17);
  for (const RunStep& r : rec.steps) {
    os << r.k;
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << r.true_state[i];
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << r.estimate[i];
    for (Eigen::Index i = 0; i < m; ++i) os << ',' << r.control[i];
    os << ',' << r.ess << ',' << r.drift_slack << ',' << r.info_cost << ',' << to_string(r.status) << '\n';
  }
}

}  // namespace dsmpc

#endif  // DSMPC_SMPC_HPP
