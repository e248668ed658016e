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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "support/oracles.hpp"

using namespace dsmpc;

namespace {

std::shared_ptr<LinearGaussianModel> scalar_chain(double a, double q) {
  return oracle::linear(oracle::diag({a}), Eigen::MatrixXd::Identity(1, 1), Eigen::MatrixXd::Identity(1, 1),
                        oracle::diag({q}), Eigen::MatrixXd::Identity(1, 1));
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

CalibrationConfig quick_calibration() {
  CalibrationConfig c;
  c.samples = 200;
  c.directions = 8;
  c.max_steps = 30;
  return c;
}

}  // namespace

TEST(LogV, HandValues) {
  const LyapunovSpec id;
  EXPECT_EQ(log_v(id, Eigen::VectorXd::Zero(6)), 0.0);
  EXPECT_DOUBLE_EQ(log_v(id, vec({0, 2, 0})), 2.0);
  EXPECT_DOUBLE_EQ(log_v(id, vec({3, 4, 0, 0, 0, 0})), 5.0);
}

TEST(LogV, NoOverflowFarOut) {
  const double lv = log_v(LyapunovSpec{}, vec({1e300, 1e300}));
  EXPECT_TRUE(std::isfinite(lv));
  EXPECT_NEAR(lv / 1e300, std::sqrt(2.0), 1e-12);
}

TEST(LogV, AgreesWithDirectEvaluation) {
  RandomStream rs(30, 0);
  LyapunovSpec spec;
  spec.transform = oracle::random_matrix(2, 4, rs);
  for (int t = 0; t < 100; ++t) {
    const Eigen::VectorXd x = 3.0 * oracle::random_matrix(4, 1, rs);
    EXPECT_NEAR(std::exp(log_v(spec, x)), std::exp((spec.transform * x).norm()), 1e-12 * std::exp(log_v(spec, x)));
    EXPECT_GE(std::exp(log_v(spec, x)), 1.0);
  }
}

TEST(TargetSet, MembershipIsWeightedDistanceFromCentre) {
  LyapunovSpec spec;
  spec.transform = oracle::diag({1.0, 2.0});
  const TargetSet c{vec({10, 0}), 3.0};
  EXPECT_TRUE(in_target(spec, c, vec({13, 0})));
  EXPECT_FALSE(in_target(spec, c, vec({10, 1.6})));
  EXPECT_DOUBLE_EQ(target_distance(spec, c, vec({10, 1.5})), 3.0);
  EXPECT_EQ(centred(c, vec({12, 1})), vec({2, 1}));
  EXPECT_EQ(centred(TargetSet{}, vec({12, 1})), vec({12, 1}));
}

TEST(DriftLhs, EverythingToZeroGivesZero) {
  auto m = oracle::linear(oracle::diag({0.0, 0.0}), Eigen::MatrixXd::Zero(2, 1), Eigen::MatrixXd::Identity(2, 2),
                          Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Identity(2, 2));
  EXPECT_EQ(drift_lhs_log(*m, LyapunovSpec{}, vec({4, 5}), vec({1}), Eigen::MatrixXd::Zero(2, 7)), 0.0);
}

TEST(DriftLhs, IdentityZeroNoise) {
  auto m = oracle::linear(Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Zero(2, 1),
                          Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Zero(2, 2),
                          Eigen::MatrixXd::Identity(2, 2));
  EXPECT_NEAR(drift_lhs_log(*m, LyapunovSpec{}, vec({0, 2}), vec({9}), Eigen::MatrixXd::Zero(2, 3)), 2.0, 1e-15);
}

TEST(DriftLhs, TwoDrawsHandLogSumExp) {
  auto m = scalar_chain(1.0, 1.0);
  Eigen::MatrixXd draws(1, 2);
  draws << 1.0, -3.0;
  const double lhs = drift_lhs_log(*m, LyapunovSpec{}, vec({0}), vec({0}), draws);
  EXPECT_NEAR(lhs, std::log((std::exp(1.0) + std::exp(3.0)) / 2.0), 1e-14);
  EXPECT_NEAR(lhs, 2.43378, 1e-5);
}

TEST(DriftLhs, CentredVariantMeasuresFromCentre) {
  auto m = scalar_chain(1.0, 1.0);
  Eigen::MatrixXd draws(1, 2);
  draws << 1.0, -3.0;
  const TargetSet c{vec({5}), 1.0};
  // Post-states 6 and 2, distances 1 and 3.
  EXPECT_NEAR(drift_lhs_log(*m, LyapunovSpec{}, c, vec({5}), vec({0}), draws),
              std::log((std::exp(1.0) + std::exp(3.0)) / 2.0), 1e-14);
}

TEST(DriftLhs, InvariantToPermutationAndDuplication) {
  RandomStream rs(31, 0);
  auto tan = oracle::tan_model(oracle::sampled_grid([](double x, double y) { return 10 * std::sin(x / 90) + y / 20; }),
                               tan::TanParams{}.process_covariance, tan::TanParams{}.observation_covariance);
  Eigen::MatrixXd draws(6, 40);
  for (int j = 0; j < 40; ++j) draws.col(j) = tan->draw_process_noise(rs);
  const Eigen::VectorXd x = vec({200, 150, 30, 1, -2, 0.5});
  const Eigen::VectorXd u = vec({0.3, 0.4, -0.1});
  const double base = drift_lhs_log(*tan, LyapunovSpec{}, x, u, draws);
  Eigen::MatrixXd reversed = draws.rowwise().reverse();
  EXPECT_NEAR(drift_lhs_log(*tan, LyapunovSpec{}, x, u, reversed), base, 1e-12);
  Eigen::MatrixXd twice(6, 80);
  twice << draws, draws;
  EXPECT_NEAR(drift_lhs_log(*tan, LyapunovSpec{}, x, u, twice), base, 1e-12);
}

TEST(DriftLhs, ContinuousInControl) {
  RandomStream rs(32, 0);
  auto tan = oracle::tan_model(oracle::sampled_grid([](double x, double y) { return 10 * std::sin(x / 90) + y / 20; }),
                               tan::TanParams{}.process_covariance, tan::TanParams{}.observation_covariance);
  Eigen::MatrixXd draws(6, 50);
  for (int j = 0; j < 50; ++j) draws.col(j) = tan->draw_process_noise(rs);
  const Eigen::VectorXd x = vec({200, 150, 30, 1, -2, 0.5});
  for (int t = 0; t < 20; ++t) {
    const Eigen::VectorXd u = oracle::random_matrix(3, 1, rs) * 0.5;
    const Eigen::VectorXd dir = oracle::random_matrix(3, 1, rs).normalized();
    const double f0 = drift_lhs_log(*tan, LyapunovSpec{}, x, u, draws);
    double prev = std::numeric_limits<double>::infinity();
    for (double h : {1e-2, 1e-4, 1e-6}) {
      const double gap = std::abs(drift_lhs_log(*tan, LyapunovSpec{}, x, u + h * dir, draws) - f0);
      EXPECT_LE(gap, 2.0 * h);  // log-V is 1-Lipschitz in position, u enters with gain dt
      EXPECT_LE(gap, prev);
      prev = gap;
    }
  }
}

TEST(DriftSatisfied, HandComparisons) {
  const LyapunovSpec id;
  DriftConfig cfg;
  cfg.lambda = 0.8;
  EXPECT_TRUE(drift_satisfied(0.0, id, vec({0, 2}), cfg));
  cfg.tol = 0.0;
  for (double lam : {0.0 + 1e-300, 0.3, 0.95, 0.999999})
    EXPECT_FALSE(drift_satisfied(2.0, id, vec({0, 2}), DriftConfig{lam, 10, 0.0}));
  EXPECT_TRUE(drift_satisfied(2.0 - 1e-3, id, vec({0, 2}), DriftConfig{1.0 - 1e-9, 10, 0.0}));
}

TEST(DriftConfig, Validation) {
  EXPECT_THROW(validate_drift_config(DriftConfig{1.0, 10, 0.0}), ConfigurationError);
  EXPECT_THROW(validate_drift_config(DriftConfig{0.5, 0, 0.0}), ConfigurationError);
  EXPECT_THROW(validate_drift_config(DriftConfig{0.5, 10, -1.0}), ConfigurationError);
  EXPECT_NO_THROW(validate_drift_config(DriftConfig{}));
}

TEST(Alpha, HandBranches) {
  const FallbackPolicy p{oracle::diag({2.0, 1.0}), 3.0};
  EXPECT_EQ(alpha(p, vec({0, 0})), vec({0, 0}));
  EXPECT_EQ(alpha(p, vec({1, 1})), vec({-2, -1}));
  // K x = (6, 0): norm 2 U_max.
  const Eigen::VectorXd u = alpha(p, vec({3, 0}));
  EXPECT_NEAR(u.norm(), 3.0, 1e-15);
  EXPECT_NEAR(u[0], -3.0, 1e-15);
  EXPECT_EQ(u[1], 0.0);
}

TEST(Alpha, AdmissibleEverywhere) {
  RandomStream rs(33, 0);
  for (int t = 0; t < 2000; ++t) {
    const FallbackPolicy p{oracle::random_matrix(3, 6, rs), 0.1 + 5 * rs.uniform()};
    const Eigen::VectorXd x = std::pow(10.0, 6 * rs.uniform() - 3) * oracle::random_matrix(6, 1, rs);
    EXPECT_LE(alpha(p, x).norm(), p.u_max);
    // Exactly on the boundary.
    const Eigen::VectorXd kx = p.K * x;
    if (kx.norm() > 0) {
      EXPECT_LE(alpha(p, x * (p.u_max / kx.norm())).norm(), p.u_max);
    }
  }
}

TEST(Alpha, LqrGainStabilizesDoubleIntegrator) {
  Eigen::MatrixXd A(2, 2), B(2, 1);
  A << 1, 1, 0, 1;
  B << 0.5, 1;
  const FallbackPolicy p = make_lqr_fallback(A, B, Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(1, 1), 5);
  const Eigen::MatrixXd closed = A - B * p.K;
  EXPECT_LT(closed.eigenvalues().cwiseAbs().maxCoeff(), 1.0);
  EXPECT_THROW(make_lqr_fallback(A, B, Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(1, 1), 0.0),
               ConfigurationError);
}

TEST(Calibrate, ContractingNoiselessHitsGridMinimum) {
  auto m = scalar_chain(0.0, 0.0);
  RandomStream rs(34, 0);
  const CalibrationConfig cfg = quick_calibration();
  const Calibration cal = calibrate_target_set(*m, FallbackPolicy{Eigen::MatrixXd::Zero(1, 1), 1.0}, LyapunovSpec{},
                                               0.5, rs, cfg);
  EXPECT_EQ(cal.radius, cfg.r_min);
  EXPECT_NEAR(cal.log_b, 0.0, 1e-12);  // every point of C lands on 0
}

TEST(Calibrate, IdentityLoopIsInfeasible) {
  auto m = scalar_chain(1.0, 0.0);
  RandomStream rs(35, 0);
  EXPECT_THROW(calibrate_target_set(*m, FallbackPolicy{Eigen::MatrixXd::Zero(1, 1), 1.0}, LyapunovSpec{}, 0.9, rs,
                                    quick_calibration()),
               StabilizationInfeasible);
}

TEST(Calibrate, SaturatedFeedbackFindsFiniteRadius) {
  // x' = x + u + xi with |u| <= 1 and sd 0.3: far out the control wins.
  auto m = scalar_chain(1.0, 0.09);
  RandomStream rs(36, 0);
  const Calibration cal = calibrate_target_set(*m, FallbackPolicy{oracle::diag({1.0}), 1.0}, LyapunovSpec{}, 0.6, rs,
                                               quick_calibration());
  EXPECT_GT(cal.radius, 0.0);
  EXPECT_TRUE(std::isfinite(cal.log_b));
  RandomStream vs(36, 1);
  const DriftReport rep = verify_drift_bound(*m, FallbackPolicy{oracle::diag({1.0}), 1.0}, LyapunovSpec{},
                                             vec({3 * cal.radius}), 0.6, cal.log_b, 30, 400, vs);
  EXPECT_TRUE(rep.all_pass());
}

TEST(Calibrate, BadLambdaIsConfigurationError) {
  auto m = scalar_chain(0.0, 0.0);
  RandomStream rs(37, 0);
  EXPECT_THROW(calibrate_target_set(*m, FallbackPolicy{Eigen::MatrixXd::Zero(1, 1), 1.0}, LyapunovSpec{}, 1.0, rs),
               ConfigurationError);
}

TEST(VerifyDrift, HalvingChain) {
  // X' = X / 2, V = e^|x|, x0 = 2: E V(X_k) = e^{2 / 2^k}. One-step drift at x0 needs lambda >= e^{-1}.
  auto m = scalar_chain(0.5, 0.0);
  const double lambda = std::exp(-1.0);
  RandomStream rs(38, 0);
  const DriftReport rep =
      verify_drift_bound(*m, FallbackPolicy{Eigen::MatrixXd::Zero(1, 1), 1.0}, LyapunovSpec{}, vec({2}), lambda, 0.0,
                         12, 100, rs);
  ASSERT_EQ(rep.rows.size(), 13u);
  for (const auto& r : rep.rows) {
    EXPECT_NEAR(r.estimate_log_v, 2.0 / std::pow(2.0, r.step), 1e-12);
    EXPECT_NEAR(r.stderr_log, 0.0, 1e-12);
    EXPECT_NEAR(r.bound_log_v, std::log(std::pow(lambda, r.step) * std::exp(2.0) + 1.0 / (1.0 - lambda)), 1e-12);
    EXPECT_TRUE(r.pass);
  }
}

TEST(VerifyDrift, ViolatedBoundFails) {
  auto m = scalar_chain(1.0, 0.0);
  RandomStream rs(39, 0);
  const DriftReport rep = verify_drift_bound(*m, FallbackPolicy{Eigen::MatrixXd::Zero(1, 1), 1.0}, LyapunovSpec{},
                                             vec({20}), 0.5, 0.0, 5, 100, rs);
  EXPECT_TRUE(rep.rows[0].pass);
  EXPECT_FALSE(rep.rows[5].pass);
  EXPECT_FALSE(rep.all_pass());
}

TEST(VerifyDrift, Preconditions) {
  auto m = scalar_chain(0.5, 0.0);
  RandomStream rs(40, 0);
  const FallbackPolicy p{Eigen::MatrixXd::Zero(1, 1), 1.0};
  EXPECT_THROW(verify_drift_bound(*m, p, LyapunovSpec{}, vec({1}), 0.5, 0.0, 3, 99, rs), ContractViolation);
  EXPECT_THROW(verify_drift_bound(*m, p, LyapunovSpec{}, vec({1}), 1.0, 0.0, 3, 100, rs), ConfigurationError);
}

TEST(VerifyDrift, CsvHeader) {
  auto m = scalar_chain(0.5, 0.0);
  RandomStream rs(41, 0);
  const DriftReport rep = verify_drift_bound(*m, FallbackPolicy{Eigen::MatrixXd::Zero(1, 1), 1.0}, LyapunovSpec{},
                                             vec({2}), 0.5, 0.0, 2, 100, rs);
  std::ostringstream os;
  write_drift_report_csv(rep, os);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,estimate_logV,stderr,bound_logV,pass");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3);
}
