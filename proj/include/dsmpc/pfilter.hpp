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

#ifndef DSMPC_PFILTER_HPP
#define DSMPC_PFILTER_HPP

#include <Eigen/Dense>

#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>

#include "dsmpc/errors.hpp"
#include "dsmpc/model.hpp"
#include "dsmpc/random.hpp"

namespace dsmpc {

/// Weighted particle approximation of the conditional state law. Column l of
/// `particles` is x^l; weights are nonnegative and sum to one.
struct ParticleBelief {
  Eigen::MatrixXd particles;
  Eigen::VectorXd weights;

  Eigen::Index size() const { return particles.cols(); }
  Eigen::Index state_dim() const { return particles.rows(); }
};

enum class ResampleMethod { Systematic };

struct ResampleConfig {
  double threshold = 0.5;  ///< resample when ess < threshold * N
  ResampleMethod method = ResampleMethod::Systematic;
};

/// Log-weights below this (before normalization) count as numerically zero likelihood.
inline constexpr double kDegenerateLogWeight = -700.0;

inline void validate_belief(const ParticleBelief& b) {
  detail::require(b.size() >= 1, "belief must hold at least one particle");
  detail::require(b.weights.size() == b.size(), "belief weights/particles size mismatch");
  detail::require(b.particles.allFinite(), "belief particles must be finite");
  detail::require((b.weights.array() >= 0.0).all(), "belief weights must be nonnegative");
  detail::require(std::abs(b.weights.sum() - 1.0) <= 1e-9, "belief weights must sum to one");
}

inline void validate_resample_config(const ResampleConfig& cfg) {
  if (!(cfg.threshold >= 0.0 && cfg.threshold <= 1.0)) {
    throw ConfigurationError("resample threshold must lie in [0, 1]");
  }
}

/// N i.i.d. draws from the prior, uniform weights. `prior_sampler(RandomStream&)` returns a state.
template <class PriorSampler>
ParticleBelief init_belief(PriorSampler&& prior_sampler, Eigen::Index N, RandomStream& stream) {
  detail::require(N >= 1, "init_belief: N must be at least 1");
  const RandomStream base = stream.fork();
  ParticleBelief b;
  for (Eigen::Index l = 0; l < N; ++l) {
    RandomStream s = base.split(static_cast<std::uint64_t>(l));
    const Eigen::VectorXd x = prior_sampler(s);
    if (l == 0) b.particles.resize(x.size(), N);
    detail::require(x.size() == b.particles.rows(), "init_belief: prior sampler changed dimension");
    b.particles.col(l) = x;
  }
  b.weights = Eigen::VectorXd::Constant(N, 1.0 / static_cast<double>(N));
  return b;
}

/// Propagates every particle through the dynamics kernel with control u. Weights are untouched.
inline ParticleBelief predict(const ParticleBelief& belief, const ControlVector& u, const SystemModel& model,
                              RandomStream& stream) {
  detail::require(belief.state_dim() == model.state_dim(), "predict: belief/model dimension mismatch");
  const RandomStream base = stream.fork();
  ParticleBelief out;
  out.particles.resize(belief.particles.rows(), belief.particles.cols());
  out.weights = belief.weights;
  for (Eigen::Index l = 0; l < belief.size(); ++l) {
    RandomStream s = base.split(static_cast<std::uint64_t>(l));
    out.particles.col(l) = sample_dynamics(model, belief.particles.col(l), u, s);
  }
  return out;
}

/// Bayes correction in the log domain: w^l <- w^l rho(y, x^l), renormalized.
inline ParticleBelief weight_update(const ParticleBelief& belief, const Observation& y, const SystemModel& model) {
  const Eigen::Index N = belief.size();
  Eigen::VectorXd logw(N);
  for (Eigen::Index l = 0; l < N; ++l) {
    const double w = belief.weights[l];
    logw[l] = (w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity()) +
              log_likelihood(model, y, belief.particles.col(l));
  }
  const double top = logw.maxCoeff();
  if (!(top >= kDegenerateLogWeight)) {
    throw DegenerateBelief("weight_update: every particle has numerically zero likelihood (max log-weight " +
                           std::to_string(top) + ")");
  }
  ParticleBelief out;
  out.particles = belief.particles;
  // Scalar exp: Eigen's packet exp clamps very negative arguments to a denormal instead of 0.
  out.weights = (logw.array() - top).unaryExpr([](double v) { return std::exp(v); });
  out.weights /= out.weights.sum();
  return out;
}

/// Effective sample size 1 / sum(w^2).
inline double ess(const Eigen::VectorXd& weights) { return 1.0 / weights.squaredNorm(); }

/**
 * Systematic resampling: one uniform offset, N evenly spaced positions on
 * the weight CDF. Output weights are 1/N.
 */
inline ParticleBelief systematic_resample(const ParticleBelief& belief, RandomStream& stream) {
  const Eigen::Index N = belief.size();
  const double offset = stream.uniform();
  const double inv_n = 1.0 / static_cast<double>(N);
  ParticleBelief out;
  out.particles.resize(belief.particles.rows(), N);
  Eigen::Index j = 0;
  double cdf = belief.weights[0];
  for (Eigen::Index i = 0; i < N; ++i) {
    const double pos = (offset + static_cast<double>(i)) * inv_n;
    while (pos > cdf && j < N - 1) cdf += belief.weights[++j];
    out.particles.col(i) = belief.particles.col(j);
  }
  out.weights = Eigen::VectorXd::Constant(N, inv_n);
  return out;
}

/// Whether the last filter_step resampled; exposed for diagnostics.
struct FilterStepInfo {
  double ess_after_update = 0.0;
  bool resampled = false;
};

/// predict -> weight_update -> resample iff ess < threshold * N.
inline ParticleBelief filter_step(const ParticleBelief& belief, const ControlVector& u, const Observation& y,
                                  const SystemModel& model, const ResampleConfig& cfg, RandomStream& stream,
                                  FilterStepInfo* info = nullptr) {
  RandomStream prediction_stream = stream.fork();
  RandomStream resample_stream = stream.fork();
  ParticleBelief next = weight_update(predict(belief, u, model, prediction_stream), y, model);
  const double e = ess(next.weights);
  const bool resample = e < cfg.threshold * static_cast<double>(next.size());
  if (info) *info = {e, resample};
  if (resample) next = systematic_resample(next, resample_stream);
  return next;
}

/// sum_l w^l x^l.
inline StateVector weighted_mean(const ParticleBelief& belief) { return belief.particles * belief.weights; }

/// Weighted covariance sum_l w^l (x^l - m)(x^l - m)'.
inline Eigen::MatrixXd weighted_covariance(const ParticleBelief& belief) {
  const Eigen::VectorXd m = weighted_mean(belief);
  const Eigen::MatrixXd centered = belief.particles.colwise() - m;
  Eigen::MatrixXd cov = centered * belief.weights.asDiagonal() * centered.transpose();
  return 0.5 * (cov + cov.transpose());
}

/// Debug dump: header x_1..x_n,weight then one row per particle.
inline void write_belief_csv(const ParticleBelief& belief, std::ostream& os) {
  for (Eigen::Index i = 0; i < belief.state_dim(); ++i) os << "x_" << (i + 1) << ',';
  os << "weight\n";
  os << std::setprecision(17);
  for (Eigen::Index l = 0; l < belief.size(); ++l) {
    for (Eigen::Index i = 0; i < belief.state_dim(); ++i) os << belief.particles(i, l) << ',';
    os << belief.weights[l] << '\n';
  }
}

}  // namespace dsmpc

#endif  // DSMPC_PFILTER_HPP
