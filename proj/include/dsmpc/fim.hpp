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

#ifndef DSMPC_FIM_HPP
#define DSMPC_FIM_HPP

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "dsmpc/errors.hpp"
#include "dsmpc/linalg.hpp"

namespace dsmpc {

/// Posterior Fisher information J (n_x x n_x, symmetric PSD).
struct FisherMatrix {
  Eigen::MatrixXd J;
};

enum class InfoCostForm { TraceOfInverse, NegativeLogDeterminant };

struct InfoCostConfig {
  InfoCostForm form = InfoCostForm::TraceOfInverse;
  double w_stage = 0.0;
  double w_term = 1.0;
  double ridge = 1e-6;
};

inline void validate_info_cost_config(const InfoCostConfig& cfg) {
  if (!(cfg.ridge > 0.0) || !std::isfinite(cfg.ridge)) throw ConfigurationError("info cost ridge must be > 0");
  if (!std::isfinite(cfg.w_stage) || !std::isfinite(cfg.w_term) || cfg.w_stage < 0.0 || cfg.w_term < 0.0) {
    throw ConfigurationError("info cost weights must be finite and nonnegative");
  }
}

/// J_0 = P_0^{-1}.
inline FisherMatrix fim_init(const Eigen::MatrixXd& prior_covariance) {
  return {spd_inverse(prior_covariance, "fim_init: prior covariance")};
}

namespace detail {

// Plain-loop Cholesky kernels. For the 2..6 dimensional states used here they
// beat Eigen's blocked triangular solvers by a wide margin.

/// In-place lower Cholesky factor of the SPD matrix m; false if a pivot is not positive.
template <class Mat>
bool cholesky_inplace(Mat& m) {
  const Eigen::Index n = m.rows();
  for (Eigen::Index j = 0; j < n; ++j) {
    double d = m(j, j);
    for (Eigen::Index k = 0; k < j; ++k) d -= m(j, k) * m(j, k);
    if (!(d > 0.0)) return false;
    d = std::sqrt(d);
    m(j, j) = d;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double v = m(i, j);
      for (Eigen::Index k = 0; k < j; ++k) v -= m(i, k) * m(j, k);
      m(i, j) = v / d;
    }
  }
  return true;
}

/// b <- L^-1 b, column by column.
template <class Mat, class Rhs>
void forward_substitute(const Mat& L, Rhs& b) {
  const Eigen::Index n = L.rows();
  for (Eigen::Index c = 0; c < b.cols(); ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double v = b(i, c);
      for (Eigen::Index k = 0; k < i; ++k) v -= L(i, k) * b(k, c);
      b(i, c) = v / L(i, i);
    }
  }
}

/**
 * One step of the information recursion on precomputed blocks,
 *   J' = D22 - D12' (J + D11)^{-1} D12,
 * in place. Works on fixed-size and dynamic Eigen matrices alike. Returns
 * true when (J + D11) was not positive definite and `ridge` was added.
 */
template <class Mat>
bool fim_step_blocks(Mat& J, const Mat& D11, const Mat& D12, const Mat& D22, double ridge) {
  Mat S = J + D11;
  Mat L = S;
  bool ridged = false;
  if (!cholesky_inplace(L)) {
    S.diagonal().array() += ridge;
    L = S;
    ridged = true;
    double extra = ridge;
    while (!cholesky_inplace(L)) {
      extra *= 10.0;
      S.diagonal().array() += extra;
      L = S;
    }
  }
  Mat Y = D12;
  forward_substitute(L, Y);  // Y = L^-1 D12, so D12' S^-1 D12 = Y' Y
  Mat next = D22;
  next.noalias() -= Y.transpose() * Y;
  J = 0.5 * (next + next.transpose());
  return ridged;
}

template <class Mat>
double info_cost_impl(const Mat& J, InfoCostForm form, double ridge) {
  Mat M = J;
  M.diagonal().array() += ridge;
  Mat L = M;
  double extra = ridge;
  while (!cholesky_inplace(L)) {
    // Only reachable when J has drifted slightly indefinite through rounding.
    extra *= 10.0;
    M.diagonal().array() += extra;
    L = M;
  }
  const Eigen::Index n = J.rows();
  if (form == InfoCostForm::NegativeLogDeterminant) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) s += std::log(L(i, i));
    return -2.0 * s;
  }
  // trace(M^-1) = ||L^-1||_F^2; L^-1 is lower triangular.
  Mat Linv = Mat::Zero(n, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    Linv(c, c) = 1.0 / L(c, c);
    for (Eigen::Index i = c + 1; i < n; ++i) {
      double v = 0.0;
      for (Eigen::Index k = c; k < i; ++k) v -= L(i, k) * Linv(k, c);
      Linv(i, c) = v / L(i, i);
    }
  }
  return Linv.squaredNorm();
}

}  // namespace detail

struct FimStepResult {
  FisherMatrix J;
  bool ridge_applied = false;
};

/**
 * Posterior-information recursion for x' = f(x) + xi, y = h(x') + eta with
 * plug-in Jacobians: F at the predecessor state, H at the successor.
 *   D11 = F' Q^-1 F, D12 = -F' Q^-1, D22 = Q^-1 + H' R^-1 H.
 */
inline FimStepResult fim_step(const FisherMatrix& J, const Eigen::MatrixXd& F, const Eigen::MatrixXd& H,
                              const Eigen::MatrixXd& Q_inv, const Eigen::MatrixXd& R_inv, double ridge = 1e-6) {
  const Eigen::Index n = J.J.rows();
  detail::require(J.J.cols() == n && F.rows() == n && F.cols() == n && Q_inv.rows() == n && Q_inv.cols() == n &&
                      H.cols() == n && R_inv.rows() == H.rows() && R_inv.cols() == H.rows(),
                  "fim_step: inconsistent dimensions");
  const Eigen::MatrixXd D11 = symmetrize(F.transpose() * Q_inv * F);
  const Eigen::MatrixXd D12 = -F.transpose() * Q_inv;
  const Eigen::MatrixXd D22 = symmetrize(Q_inv + H.transpose() * R_inv * H);
  FimStepResult out{J, false};
  out.ridge_applied = detail::fim_step_blocks(out.J.J, D11, D12, D22, ridge);
  return out;
}

/// trace((J + eps I)^-1) or -log det(J + eps I); decreasing in J (Loewner order).
inline double info_cost(const FisherMatrix& J, const InfoCostConfig& cfg) {
  return detail::info_cost_impl(J.J, cfg.form, cfg.ridge);
}

inline const char* to_string(InfoCostForm f) {
  return f == InfoCostForm::TraceOfInverse ? "trace-of-inverse" : "negative-log-determinant";
}

inline InfoCostForm info_cost_form_from_string(const std::string& s) {
  if (s == "trace-of-inverse") return InfoCostForm::TraceOfInverse;
  if (s == "negative-log-determinant") return InfoCostForm::NegativeLogDeterminant;
  throw ConfigurationError("unknown info cost form '" + s + "'");
}

}  // namespace dsmpc

#endif  // DSMPC_FIM_HPP
