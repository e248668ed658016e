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

#ifndef DSMPC_LINALG_HPP
#define DSMPC_LINALG_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>

#include "dsmpc/errors.hpp"

namespace dsmpc {

template <class Derived>
typename Derived::PlainObject symmetrize(const Eigen::MatrixBase<Derived>& m) {
  return (0.5 * (m + m.transpose())).eval();
}

inline bool is_symmetric(const Eigen::MatrixXd& m, double tol = 1e-12) {
  if (m.rows() != m.cols()) return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

inline bool is_positive_definite(const Eigen::MatrixXd& m) {
  if (!is_symmetric(m)) return false;
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  return llt.info() == Eigen::Success;
}

inline bool is_positive_semidefinite(const Eigen::MatrixXd& m, double tol = 1e-12) {
  if (!is_symmetric(m)) return false;
  if (m.size() == 0) return true;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return es.eigenvalues().minCoeff() >= -tol * scale;
}

/// Inverse of a symmetric positive-definite matrix; throws ConfigurationError otherwise.
inline Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& m, const std::string& what) {
  if (!is_symmetric(m)) throw ConfigurationError(what + ": matrix is not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) throw ConfigurationError(what + ": matrix is not positive definite");
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
  return symmetrize(inv);
}

/// Euclidean projection onto the ball of radius r. The result satisfies norm() <= r in floating point.
template <class Derived>
Eigen::VectorXd project_ball(const Eigen::MatrixBase<Derived>& u, double r) {
  Eigen::VectorXd out = u;
  const double n = out.norm();
  if (n <= r) return out;
  out *= r / n;
  while (out.norm() > r) out *= (1.0 - std::numeric_limits<double>::epsilon());
  return out;
}

/// log(sum(exp(v))), stable for large entries. Empty input gives -inf.
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_mean_exp(std::span<const double> v) {
  return log_sum_exp(v) - std::log(static_cast<double>(v.size()));
}

/// log(exp(a) + exp(b)).
inline double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

/**
 * Infinite-horizon discrete LQR gain K (u = -K x) for x' = A x + B u with
 * stage cost x'Qx + u'Ru. Solved by Riccati fixed-point iteration.
 */
inline Eigen::MatrixXd dlqr(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Q,
                            const Eigen::MatrixXd& R, int max_iter = 100000, double tol = 1e-12) {
  detail::require(A.rows() == A.cols() && B.rows() == A.rows() && Q.rows() == A.rows() &&
                      R.rows() == B.cols() && R.cols() == B.cols(),
                  "dlqr: inconsistent dimensions");
  Eigen::MatrixXd P = Q;
  Eigen::MatrixXd K;
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::MatrixXd S = R + B.transpose() * P * B;
    K = S.ldlt().solve(B.transpose() * P * A);
    Eigen::MatrixXd next = Q + A.transpose() * P * (A - B * K);
    next = symmetrize(next);
    const double change = (next - P).cwiseAbs().maxCoeff();
    P = next;
    if (change <= tol * std::max(1.0, P.cwiseAbs().maxCoeff())) break;
  }
  const Eigen::MatrixXd S = R + B.transpose() * P * B;
  return S.ldlt().solve(B.transpose() * P * A);
}

/**
 * Multivariate normal N(0, S), or the point mass at 0 when S is exactly zero.
 *
 * Sampling accepts any PSD covariance. The log-density needs S positive
 * definite (or the point mass) and throws ConfigurationError otherwise.
 */
class GaussianNoise {
 public:
  GaussianNoise() = default;
  explicit GaussianNoise(Eigen::MatrixXd covariance) : cov_(std::move(covariance)) {
    if (cov_.rows() != cov_.cols()) throw ConfigurationError("noise covariance must be square");
    if (!cov_.allFinite()) throw ConfigurationError("noise covariance has non-finite entries");
    const Eigen::Index n = cov_.rows();
    point_mass_ = (cov_.array() == 0.0).all();
    if (point_mass_) {
      factor_ = Eigen::MatrixXd::Zero(n, n);
      return;
    }
    if (!is_positive_semidefinite(cov_)) throw ConfigurationError("noise covariance is not symmetric PSD");
    Eigen::LLT<Eigen::MatrixXd> llt(cov_);
    if (llt.info() == Eigen::Success) {
      definite_ = true;
      factor_ = llt.matrixL();
      precision_ = spd_inverse(cov_, "noise covariance");
      log_det_ = 2.0 * factor_.diagonal().array().log().sum();
    } else {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov_);
      factor_ = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    }
  }

  Eigen::Index dim() const { return cov_.rows(); }
  bool point_mass() const { return point_mass_; }
  bool definite() const { return definite_; }
  const Eigen::MatrixXd& covariance() const { return cov_; }

  /// Inverse covariance; throws when the covariance is singular.
  const Eigen::MatrixXd& precision() const {
    if (!definite_) throw ConfigurationError("noise covariance is singular; precision unavailable");
    return precision_;
  }

  template <class Rng>
  Eigen::VectorXd sample(Rng& rng) const {
    Eigen::VectorXd z(dim());
    if (point_mass_) {
      z.setZero();
      return z;
    }
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    return factor_ * z;
  }

  /// log N(r; 0, S). Point mass: 0 at r == 0 exactly, -inf elsewhere.
  double log_density(const Eigen::VectorXd& r) const {
    if (point_mass_) {
      return (r.array() == 0.0).all() ? 0.0 : -std::numeric_limits<double>::infinity();
    }
    if (!definite_) throw ConfigurationError("log-density needs a positive-definite covariance");
    const Eigen::VectorXd w = factor_.triangularView<Eigen::Lower>().solve(r);
    const double n = static_cast<double>(dim());
    return -0.5 * (n * std::log(2.0 * std::numbers::pi) + log_det_ + w.squaredNorm());
  }

 private:
  Eigen::MatrixXd cov_;
  Eigen::MatrixXd factor_;
  Eigen::MatrixXd precision_;
  double log_det_ = 0.0;
  bool point_mass_ = true;
  bool definite_ = false;
};

}  // namespace dsmpc

#endif  // DSMPC_LINALG_HPP
