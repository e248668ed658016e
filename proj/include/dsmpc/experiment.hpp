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

#ifndef DSMPC_EXPERIMENT_HPP
#define DSMPC_EXPERIMENT_HPP

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dsmpc/errors.hpp"
#include "dsmpc/fim.hpp"
#include "dsmpc/pfilter.hpp"
#include "dsmpc/random.hpp"
#include "dsmpc/smpc.hpp"
#include "dsmpc/stability.hpp"
#include "dsmpc/tan.hpp"

namespace dsmpc {

inline constexpr int kSchemaVersion = 1;

/// Model constants of the flat-corridor experiment. Heavier damping and position
/// noise than the bare TanParams defaults, so a 30-run comparison stays short.
inline tan::TanParams experiment_model() {
  tan::TanParams p;
  p.damping = 0.2;
  p.process_covariance = tan::diagonal_matrix({0.25, 0.25, 0.01, 0.0025, 0.0025, 0.0025});
  return p;
}

/// Bump field of the flat-corridor experiment.
inline tan::TerrainGenConfig experiment_terrain() {
  tan::TerrainGenConfig t;
  t.bump_count = 32;
  t.amplitude_min = 30.0;
  t.amplitude_max = 90.0;
  t.width_min = 110.0;
  t.width_max = 140.0;
  return t;
}

/// Terrain-aided-navigation experiment, fully defaulted. Lengths in m, times in s.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  PolicyKind policy = PolicyKind::FisherLyapunov;
  int runs = 30;        ///< M
  int max_steps = 250;
  std::string output_dir = "out";
  unsigned threads = 0; ///< 0: hardware concurrency

  std::string terrain_path;  ///< empty: generate
  tan::TerrainGenConfig terrain = experiment_terrain();
  tan::TanParams model = experiment_model();

  Eigen::VectorXd initial_mean = (Eigen::VectorXd(6) << 300, 0, 0, 0, 0, 0).finished();
  // speeds and altitude start near sensor-level uncertainty; horizontal position is the unknown
  Eigen::VectorXd initial_std = (Eigen::VectorXd(6) << 20, 20, 1, 0.05, 0.05, 0.05).finished();
  bool sample_true_initial = true;

  Eigen::Index particles = 1000;  ///< N
  double resample_threshold = 0.5;
  int scenarios = 20;  ///< N_s
  int horizon = 5;     ///< T
  DriftConfig drift{0.2, 100, 1e-6};
  double lyapunov_lead = 5.0;
  double lyapunov_weight = 3.0;
  double fallback_control_weight = 10.0;  ///< rho in R = rho I of the fallback LQR
  double target_radius = 0.0;             ///< 0: calibrate
  CalibrationConfig calibration;

  double control_weight = 1.0;        ///< M_u = c I
  double ce_state_weight = 0.02;      ///< CE-LQ: M_x = c W'W
  double distance_weight = 20.0;      ///< Fisher-Distance: c ||W (x - center)||
  InfoCostConfig info;
  SolverConfig solver;

  double reach_margin = 20.0;         ///< reached when the true horizontal distance <= r_C + margin
  double bump_threshold = 1.0;        ///< nodes with |h - base| above this are bump region
  int snapshot_every = 10;            ///< particle snapshots in simulate

  // verify-drift
  Eigen::VectorXd verify_initial = (Eigen::VectorXd(6) << 50, 0, 0, 0, 0, 0).finished();
  double verify_lambda = 0.95;
  int verify_runs = 500;
  int verify_horizon = 100;
};

namespace detail {

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array()) throw ConfigurationError(std::string(what) + ": expected an array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigurationError(std::string(what) + ": element " + std::to_string(i) + " is not a number");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::json j = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v[i]);
  return j;
}

inline Eigen::MatrixXd diag_from_json(const nlohmann::json& j, const char* what) {
  return vector_from_json(j, what).asDiagonal();
}

/// Reads key into out if present, with a config error naming the key on type mismatch.
template <class T>
void read(const nlohmann::json& obj, const char* key, T& out, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError("config key '" + path + key + "': " + e.what());
  }
}

inline void check_keys(const nlohmann::json& obj, std::initializer_list<const char*> keys, const std::string& path) {
  if (!obj.is_object()) throw ConfigurationError("config section '" + path + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; })) {
      throw ConfigurationError("unknown config key '" + path + it.key() + "'");
    }
  }
}

inline const nlohmann::json& section(const nlohmann::json& j, const char* key) {
  static const nlohmann::json empty = nlohmann::json::object();
  auto it = j.find(key);
  return it == j.end() ? empty : *it;
}

}  // namespace detail

/// Parses a config document; absent keys keep their defaults, unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  ExperimentConfig c;
  detail::check_keys(j, {"schema_version", "seed", "policy", "runs", "max_steps", "output_dir", "threads", "terrain",
                         "model", "initial", "filter", "controller", "cost", "solver", "evaluation", "verify"},
                     "");
  if (j.contains("schema_version") && j["schema_version"] != kSchemaVersion) {
    throw ConfigurationError("unsupported schema_version (expected " + std::to_string(kSchemaVersion) + ")");
  }
  read(j, "seed", c.seed, "");
  if (j.contains("policy")) c.policy = policy_kind_from_string(j["policy"].get<std::string>());
  read(j, "runs", c.runs, "");
  read(j, "max_steps", c.max_steps, "");
  read(j, "output_dir", c.output_dir, "");
  read(j, "threads", c.threads, "");

  const auto& t = detail::section(j, "terrain");
  detail::check_keys(t, {"path", "origin_x_m", "origin_y_m", "cell_size_m", "nx", "ny", "base_height_m", "bump_count",
                         "amplitude_min_m", "amplitude_max_m", "width_min_m", "width_max_m", "flat_corridor",
                         "corridor_start_m", "corridor_end_m", "corridor_half_width_m", "corridor_extension_m", "bump_clearance",
                         "seed"},
                     "terrain.");
  read(t, "path", c.terrain_path, "terrain.");
  read(t, "origin_x_m", c.terrain.origin_x, "terrain.");
  read(t, "origin_y_m", c.terrain.origin_y, "terrain.");
  read(t, "cell_size_m", c.terrain.cell_size, "terrain.");
  read(t, "nx", c.terrain.nx, "terrain.");
  read(t, "ny", c.terrain.ny, "terrain.");
  read(t, "base_height_m", c.terrain.base_height, "terrain.");
  read(t, "bump_count", c.terrain.bump_count, "terrain.");
  read(t, "amplitude_min_m", c.terrain.amplitude_min, "terrain.");
  read(t, "amplitude_max_m", c.terrain.amplitude_max, "terrain.");
  read(t, "width_min_m", c.terrain.width_min, "terrain.");
  read(t, "width_max_m", c.terrain.width_max, "terrain.");
  read(t, "flat_corridor", c.terrain.flat_corridor, "terrain.");
  if (t.contains("corridor_start_m")) {
    const Eigen::VectorXd v = detail::vector_from_json(t["corridor_start_m"], "terrain.corridor_start_m");
    if (v.size() != 2) throw ConfigurationError("terrain.corridor_start_m needs 2 entries");
    c.terrain.corridor.start_x = v[0];
    c.terrain.corridor.start_y = v[1];
  }
  if (t.contains("corridor_end_m")) {
    const Eigen::VectorXd v = detail::vector_from_json(t["corridor_end_m"], "terrain.corridor_end_m");
    if (v.size() != 2) throw ConfigurationError("terrain.corridor_end_m needs 2 entries");
    c.terrain.corridor.end_x = v[0];
    c.terrain.corridor.end_y = v[1];
  }
  read(t, "corridor_half_width_m", c.terrain.corridor.half_width, "terrain.");
  read(t, "corridor_extension_m", c.terrain.corridor.extension, "terrain.");
  read(t, "bump_clearance", c.terrain.bump_clearance, "terrain.");
  read(t, "seed", c.terrain.seed, "terrain.");

  const auto& m = detail::section(j, "model");
  detail::check_keys(m, {"dt_s", "damping", "u_max", "process_covariance_diag", "observation_covariance_diag"}, "model.");
  read(m, "dt_s", c.model.dt, "model.");
  read(m, "damping", c.model.damping, "model.");
  read(m, "u_max", c.model.u_max, "model.");
  if (m.contains("process_covariance_diag")) {
    c.model.process_covariance = detail::diag_from_json(m["process_covariance_diag"], "model.process_covariance_diag");
  }
  if (m.contains("observation_covariance_diag")) {
    c.model.observation_covariance =
        detail::diag_from_json(m["observation_covariance_diag"], "model.observation_covariance_diag");
  }

  const auto& in = detail::section(j, "initial");
  detail::check_keys(in, {"mean", "std", "sample_true_state"}, "initial.");
  if (in.contains("mean")) c.initial_mean = detail::vector_from_json(in["mean"], "initial.mean");
  if (in.contains("std")) c.initial_std = detail::vector_from_json(in["std"], "initial.std");
  read(in, "sample_true_state", c.sample_true_initial, "initial.");

  const auto& f = detail::section(j, "filter");
  detail::check_keys(f, {"particles", "resample_threshold"}, "filter.");
  read(f, "particles", c.particles, "filter.");
  read(f, "resample_threshold", c.resample_threshold, "filter.");

  const auto& ct = detail::section(j, "controller");
  detail::check_keys(ct, {"scenarios", "horizon", "lambda", "drift_samples", "drift_tol", "lyapunov_lead",
                          "lyapunov_weight", "fallback_control_weight", "target_radius", "calibration"},
                     "controller.");
  read(ct, "scenarios", c.scenarios, "controller.");
  read(ct, "horizon", c.horizon, "controller.");
  read(ct, "lambda", c.drift.lambda, "controller.");
  read(ct, "drift_samples", c.drift.samples, "controller.");
  read(ct, "drift_tol", c.drift.tol, "controller.");
  read(ct, "lyapunov_lead", c.lyapunov_lead, "controller.");
  read(ct, "lyapunov_weight", c.lyapunov_weight, "controller.");
  read(ct, "fallback_control_weight", c.fallback_control_weight, "controller.");
  read(ct, "target_radius", c.target_radius, "controller.");
  const auto& cal = detail::section(ct, "calibration");
  detail::check_keys(cal, {"samples", "directions", "r_min", "growth", "max_steps"}, "controller.calibration.");
  read(cal, "samples", c.calibration.samples, "controller.calibration.");
  read(cal, "directions", c.calibration.directions, "controller.calibration.");
  read(cal, "r_min", c.calibration.r_min, "controller.calibration.");
  read(cal, "growth", c.calibration.growth, "controller.calibration.");
  read(cal, "max_steps", c.calibration.max_steps, "controller.calibration.");

  const auto& co = detail::section(j, "cost");
  detail::check_keys(co, {"control_weight", "ce_state_weight", "distance_weight", "info_form", "info_stage_weight",
                          "info_terminal_weight", "info_ridge"},
                     "cost.");
  read(co, "control_weight", c.control_weight, "cost.");
  read(co, "ce_state_weight", c.ce_state_weight, "cost.");
  read(co, "distance_weight", c.distance_weight, "cost.");
  if (co.contains("info_form")) c.info.form = info_cost_form_from_string(co["info_form"].get<std::string>());
  read(co, "info_stage_weight", c.info.w_stage, "cost.");
  read(co, "info_terminal_weight", c.info.w_term, "cost.");
  read(co, "info_ridge", c.info.ridge, "cost.");

  const auto& s = detail::section(j, "solver");
  detail::check_keys(s, {"multistart", "max_outer", "max_inner", "penalty_init", "penalty_growth", "armijo",
                         "backtrack", "max_backtracks", "fd_step", "step_tol", "grad_tol"},
                     "solver.");
  read(s, "multistart", c.solver.multistart, "solver.");
  read(s, "max_outer", c.solver.max_outer, "solver.");
  read(s, "max_inner", c.solver.max_inner, "solver.");
  read(s, "penalty_init", c.solver.penalty_init, "solver.");
  read(s, "penalty_growth", c.solver.penalty_growth, "solver.");
  read(s, "armijo", c.solver.armijo, "solver.");
  read(s, "backtrack", c.solver.backtrack, "solver.");
  read(s, "max_backtracks", c.solver.max_backtracks, "solver.");
  read(s, "fd_step", c.solver.fd_step, "solver.");
  read(s, "step_tol", c.solver.step_tol, "solver.");
  read(s, "grad_tol", c.solver.grad_tol, "solver.");

  const auto& e = detail::section(j, "evaluation");
  detail::check_keys(e, {"reach_margin_m", "bump_threshold_m", "snapshot_every"}, "evaluation.");
  read(e, "reach_margin_m", c.reach_margin, "evaluation.");
  read(e, "bump_threshold_m", c.bump_threshold, "evaluation.");
  read(e, "snapshot_every", c.snapshot_every, "evaluation.");

  const auto& v = detail::section(j, "verify");
  detail::check_keys(v, {"initial_state", "lambda", "runs", "horizon"}, "verify.");
  if (v.contains("initial_state")) c.verify_initial = detail::vector_from_json(v["initial_state"], "verify.initial_state");
  read(v, "lambda", c.verify_lambda, "verify.");
  read(v, "runs", c.verify_runs, "verify.");
  read(v, "horizon", c.verify_horizon, "verify.");
  return c;
}

/// The effective configuration, every key present.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = c.seed;
  j["policy"] = to_string(c.policy);
  j["runs"] = c.runs;
  j["max_steps"] = c.max_steps;
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  j["terrain"] = {{"path", c.terrain_path},
                  {"origin_x_m", c.terrain.origin_x},
                  {"origin_y_m", c.terrain.origin_y},
                  {"cell_size_m", c.terrain.cell_size},
                  {"nx", c.terrain.nx},
                  {"ny", c.terrain.ny},
                  {"base_height_m", c.terrain.base_height},
                  {"bump_count", c.terrain.bump_count},
                  {"amplitude_min_m", c.terrain.amplitude_min},
                  {"amplitude_max_m", c.terrain.amplitude_max},
                  {"width_min_m", c.terrain.width_min},
                  {"width_max_m", c.terrain.width_max},
                  {"flat_corridor", c.terrain.flat_corridor},
                  {"corridor_start_m", {c.terrain.corridor.start_x, c.terrain.corridor.start_y}},
                  {"corridor_end_m", {c.terrain.corridor.end_x, c.terrain.corridor.end_y}},
                  {"corridor_half_width_m", c.terrain.corridor.half_width},
                  {"corridor_extension_m", c.terrain.corridor.extension},
                  {"bump_clearance", c.terrain.bump_clearance},
                  {"seed", c.terrain.seed}};
  j["model"] = {{"dt_s", c.model.dt},
                {"damping", c.model.damping},
                {"u_max", c.model.u_max},
                {"process_covariance_diag", detail::vector_to_json(c.model.process_covariance.diagonal())},
                {"observation_covariance_diag", detail::vector_to_json(c.model.observation_covariance.diagonal())}};
  j["initial"] = {{"mean", detail::vector_to_json(c.initial_mean)},
                  {"std", detail::vector_to_json(c.initial_std)},
                  {"sample_true_state", c.sample_true_initial}};
  j["filter"] = {{"particles", c.particles}, {"resample_threshold", c.resample_threshold}};
  j["controller"] = {{"scenarios", c.scenarios},
                     {"horizon", c.horizon},
                     {"lambda", c.drift.lambda},
                     {"drift_samples", c.drift.samples},
                     {"drift_tol", c.drift.tol},
                     {"lyapunov_lead", c.lyapunov_lead},
                     {"lyapunov_weight", c.lyapunov_weight},
                     {"fallback_control_weight", c.fallback_control_weight},
                     {"target_radius", c.target_radius},
                     {"calibration",
                      {{"samples", c.calibration.samples},
                       {"directions", c.calibration.directions},
                       {"r_min", c.calibration.r_min},
                       {"growth", c.calibration.growth},
                       {"max_steps", c.calibration.max_steps}}}};
  j["cost"] = {{"control_weight", c.control_weight},
               {"ce_state_weight", c.ce_state_weight},
               {"distance_weight", c.distance_weight},
               {"info_form", to_string(c.info.form)},
               {"info_stage_weight", c.info.w_stage},
               {"info_terminal_weight", c.info.w_term},
               {"info_ridge", c.info.ridge}};
  j["solver"] = {{"multistart", c.solver.multistart},   {"max_outer", c.solver.max_outer},
                 {"max_inner", c.solver.max_inner},     {"penalty_init", c.solver.penalty_init},
                 {"penalty_growth", c.solver.penalty_growth}, {"armijo", c.solver.armijo},
                 {"backtrack", c.solver.backtrack},     {"max_backtracks", c.solver.max_backtracks},
                 {"fd_step", c.solver.fd_step},         {"step_tol", c.solver.step_tol},
                 {"grad_tol", c.solver.grad_tol}};
  j["evaluation"] = {{"reach_margin_m", c.reach_margin},
                     {"bump_threshold_m", c.bump_threshold},
                     {"snapshot_every", c.snapshot_every}};
  j["verify"] = {{"initial_state", detail::vector_to_json(c.verify_initial)},
                 {"lambda", c.verify_lambda},
                 {"runs", c.verify_runs},
                 {"horizon", c.verify_horizon}};
  return j;
}

inline void validate_experiment(const ExperimentConfig& c) {
  if (c.runs < 1) throw ConfigurationError("runs must be >= 1");
  if (c.max_steps < 1) throw ConfigurationError("max_steps must be >= 1");
  if (c.initial_mean.size() != 6 || c.initial_std.size() != 6) {
    throw ConfigurationError("initial.mean and initial.std need 6 entries (x, y, z, vx, vy, vz)");
  }
  if ((c.initial_std.array() < 0.0).any()) throw ConfigurationError("initial.std must be nonnegative");
  if (c.particles < 1) throw ConfigurationError("filter.particles must be >= 1");
  if (c.scenarios < 1 || c.scenarios > c.particles) {
    throw ConfigurationError("controller.scenarios must lie in [1, filter.particles]");
  }
  if (c.horizon < 1) throw ConfigurationError("controller.horizon must be >= 1");
  validate_drift_config(c.drift);
  validate_info_cost_config(c.info);
  validate_resample_config({c.resample_threshold});
  if (c.target_radius < 0.0) throw ConfigurationError("controller.target_radius must be >= 0 (0 calibrates)");
  if (!(c.fallback_control_weight > 0.0)) throw ConfigurationError("controller.fallback_control_weight must be > 0");
  if (c.control_weight < 0.0 || c.ce_state_weight < 0.0 || c.distance_weight < 0.0) {
    throw ConfigurationError("cost weights must be nonnegative");
  }
  if (c.verify_initial.size() != 6) throw ConfigurationError("verify.initial_state needs 6 entries");
  if (c.snapshot_every < 0) throw ConfigurationError("evaluation.snapshot_every must be >= 0");
  if (c.terrain_path.empty()) tan::validate_terrain_gen(c.terrain);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigurationError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigurationError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// 64-bit FNV-1a of the canonical effective-config dump, as 16 hex digits.
/// output_dir and threads are left out: they do not change any result.
inline std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = config_to_json(c);
  j.erase("output_dir");
  j.erase("threads");
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Model, terrain, Lyapunov map, fallback and target set shared by every run of a config.
struct TanSetup {
  std::shared_ptr<const tan::TerrainGrid> terrain;
  std::shared_ptr<const tan::TanModel> model;
  LyapunovSpec lyapunov;
  FallbackPolicy fallback;
  TargetSet target;
  double log_b = std::numeric_limits<double>::quiet_NaN();  ///< set when calibrated
};

/// Calibration for contraction rate `lambda`, from a stream fixed by the master seed.
inline Calibration calibrate_for(const TanSetup& s, const ExperimentConfig& c, double lambda) {
  RandomStream stream(c.seed, 0xca11b);
  return calibrate_target_set(*s.model, s.fallback, s.lyapunov, lambda, stream, c.calibration);
}

inline TanSetup make_setup(const ExperimentConfig& c, bool calibrate = true) {
  validate_experiment(c);
  TanSetup s;
  s.terrain = std::make_shared<const tan::TerrainGrid>(c.terrain_path.empty() ? tan::generate_terrain(c.terrain)
                                                                              : tan::load_terrain(c.terrain_path));
  s.model = std::make_shared<const tan::TanModel>(c.model, s.terrain);
  s.lyapunov.transform = tan::stopping_point_transform(c.lyapunov_lead, c.lyapunov_weight);
  const Eigen::MatrixXd W = s.lyapunov.transform;
  s.fallback = make_lqr_fallback(s.model->A(), s.model->B(), W.transpose() * W,
                                 c.fallback_control_weight * Eigen::MatrixXd::Identity(3, 3), c.model.u_max);
  s.target.center = Eigen::VectorXd::Zero(6);
  s.target.center.head(2) << c.terrain.corridor.end_x, c.terrain.corridor.end_y;
  if (c.target_radius > 0.0) {
    s.target.radius = c.target_radius;
  } else if (calibrate) {
    const Calibration cal = calibrate_for(s, c, c.drift.lambda);
    s.target.radius = cal.radius;
    s.log_b = cal.log_b;
  }
  return s;
}

inline ProblemSpec make_problem(const TanSetup& s, const ExperimentConfig& c, PolicyKind kind) {
  ProblemSpec spec;
  spec.horizon = c.horizon;
  spec.scenarios = c.scenarios;
  spec.u_max = c.model.u_max;
  spec.control_weight = c.control_weight * Eigen::MatrixXd::Identity(3, 3);
  spec.info = c.info;
  spec.drift = c.drift;
  spec.lyapunov = s.lyapunov;
  spec.target = s.target;
  PolicyTuning tuning;
  tuning.ce_state_weight = c.ce_state_weight * (s.lyapunov.transform.transpose() * s.lyapunov.transform);
  tuning.distance_weight = c.distance_weight;
  return specialize(std::move(spec), kind, tuning);
}

inline RunConfig make_run_config(const TanSetup& s, const ExperimentConfig& c, PolicyKind kind, std::uint64_t seed) {
  RunConfig r;
  r.model = s.model;
  r.prior_mean = c.initial_mean;
  r.prior_covariance = c.initial_std.array().square().matrix().asDiagonal();
  r.sample_true_initial = c.sample_true_initial;
  r.particles = c.particles;
  r.resample.threshold = c.resample_threshold;
  r.problem = make_problem(s, c, kind);
  r.solver = c.solver;
  r.fallback = s.fallback;
  r.max_steps = c.max_steps;
  r.seed = seed;
  r.policy = kind;
  return r;
}

/// Seed of Monte-Carlo run r; identical across policies so runs are paired.
inline std::uint64_t run_seed(std::uint64_t master, int r) {
  RandomStream s = RandomStream(master, 0x3c).split(static_cast<std::uint64_t>(r));
  return s.next_u64();
}

// ---- geometry of the detour check ----

/// Horizontal positions of grid nodes whose height differs from the base by more than `threshold`.
inline std::vector<Eigen::Vector2d> bump_region(const tan::TerrainGrid& t, double base, double threshold) {
  std::vector<Eigen::Vector2d> pts;
  for (int j = 0; j < t.ny; ++j) {
    for (int i = 0; i < t.nx; ++i) {
      if (std::abs(t.at(i, j) - base) > threshold) pts.emplace_back(t.node_x(i), t.node_y(j));
    }
  }
  return pts;
}

inline double distance_to_region(const Eigen::Vector2d& p, const std::vector<Eigen::Vector2d>& region) {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& q : region) d = std::min(d, (p - q).norm());
  return d;
}

/// Minimum over a polyline's vertices of the distance to the region.
inline double min_distance_along(const std::vector<Eigen::Vector2d>& path, const std::vector<Eigen::Vector2d>& region) {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& p : path) d = std::min(d, distance_to_region(p, region));
  return d;
}

/// Exact minimum distance from segment [a, b] to the point set.
inline double segment_distance_to_region(const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                                         const std::vector<Eigen::Vector2d>& region) {
  const Eigen::Vector2d ab = b - a;
  const double len2 = ab.squaredNorm();
  double d = std::numeric_limits<double>::infinity();
  for (const auto& q : region) {
    const double t = len2 > 0.0 ? std::clamp((q - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    d = std::min(d, (a + t * ab - q).norm());
  }
  return d;
}

inline std::vector<Eigen::Vector2d> true_path(const RunRecord& rec) {
  std::vector<Eigen::Vector2d> p;
  for (const auto& r : rec.steps) p.emplace_back(r.true_state[0], r.true_state[1]);
  if (rec.final_true.size() >= 2) p.emplace_back(rec.final_true[0], rec.final_true[1]);
  return p;
}

/// Per-run metrics consumed by the Monte-Carlo summary.
struct RunMetrics {
  std::uint64_t seed = 0;
  std::string stop_reason;
  int steps = 0;
  double terminal_error = 0.0;       ///< horizontal estimation error at stop, m
  double target_distance = 0.0;      ///< true horizontal distance to the target at stop, m
  bool reached = false;
  bool failed = false;
  double min_bump_distance = 0.0;    ///< trajectory to bump region, m
  double straight_bump_distance = 0.0;
  int drift_violations = 0;          ///< solved steps outside C with slack > tol
  int solved_steps = 0;
  int fallback_steps = 0;
  std::vector<double> errors;        ///< horizontal error per step, then the stop value
};

inline double horizontal_error(const StateVector& a, const StateVector& b) { return (a.head(2) - b.head(2)).norm(); }

inline RunMetrics run_metrics(const RunRecord& rec, const TanSetup& s, const ExperimentConfig& c,
                              const std::vector<Eigen::Vector2d>& bumps) {
  RunMetrics m;
  m.seed = rec.seed;
  m.stop_reason = to_string(rec.stop_reason);
  m.steps = static_cast<int>(rec.steps.size());
  m.failed = rec.failed();
  for (const auto& r : rec.steps) {
    m.errors.push_back(horizontal_error(r.true_state, r.estimate));
    if (r.status == StepStatus::OptimalLocal || r.status == StepStatus::FeasibleMaxIter) {
      ++m.solved_steps;
      if (std::isfinite(r.drift_slack) && r.drift_slack > c.drift.tol) ++m.drift_violations;
    }
    if (r.status == StepStatus::InfeasibleDriftFallback) ++m.fallback_steps;
  }
  m.terminal_error = horizontal_error(rec.final_true, rec.final_estimate);
  if (rec.stop_reason != StopReason::EstimateInTarget) m.errors.push_back(m.terminal_error);
  m.target_distance = (rec.final_true.head(2) - s.target.center.head(2)).norm();
  m.reached = !m.failed && m.target_distance <= s.target.radius + c.reach_margin;
  if (!bumps.empty()) {
    m.min_bump_distance = min_distance_along(true_path(rec), bumps);
    const Eigen::Vector2d a(c.initial_mean[0], c.initial_mean[1]);
    m.straight_bump_distance = segment_distance_to_region(a, s.target.center.head<2>(), bumps);
  }
  return m;
}

struct PolicySummary {
  PolicyKind policy = PolicyKind::FisherLyapunov;
  std::vector<double> rmse;  ///< per step, early-stopped runs hold their final value
  double terminal_rmse = 0.0;
  double reach_fraction = 0.0;
  int failures = 0;
  int detours = 0;           ///< runs whose trajectory gets closer to the bumps than the straight segment
  int drift_violations = 0;
  std::vector<RunMetrics> runs;
};

/// RMSE_k = sqrt(mean_r e_{r,k}^2), each run's sequence padded with its last value.
inline std::vector<double> rmse_profile(const std::vector<std::vector<double>>& errors) {
  std::size_t len = 0;
  for (const auto& e : errors) len = std::max(len, e.size());
  std::vector<double> out(len, 0.0);
  if (errors.empty()) return out;
  for (std::size_t k = 0; k < len; ++k) {
    double acc = 0.0;
    for (const auto& e : errors) {
      const double v = e.empty() ? 0.0 : e[std::min(k, e.size() - 1)];
      acc += v * v;
    }
    out[k] = std::sqrt(acc / static_cast<double>(errors.size()));
  }
  return out;
}

inline PolicySummary summarize(PolicyKind kind, std::vector<RunMetrics> runs) {
  PolicySummary s;
  s.policy = kind;
  std::vector<std::vector<double>> errs;
  double term = 0.0;
  int reached = 0;
  for (const auto& m : runs) {
    errs.push_back(m.errors);
    term += m.terminal_error * m.terminal_error;
    reached += m.reached ? 1 : 0;
    s.failures += m.failed ? 1 : 0;
    s.detours += m.min_bump_distance < m.straight_bump_distance ? 1 : 0;
    s.drift_violations += m.drift_violations;
  }
  const double M = static_cast<double>(std::max<std::size_t>(runs.size(), 1));
  s.rmse = rmse_profile(errs);
  s.terminal_rmse = std::sqrt(term / M);
  s.reach_fraction = reached / M;
  s.runs = std::move(runs);
  return s;
}

/// Runs M paired closed loops of one policy on a thread pool; results land by run index.
inline std::vector<RunRecord> run_batch(const TanSetup& s, const ExperimentConfig& c, PolicyKind kind) {
  std::vector<RunRecord> out(static_cast<std::size_t>(c.runs));
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(out.size());
  auto worker = [&] {
    for (int r = next++; r < c.runs; r = next++) {
      try {
        out[static_cast<std::size_t>(r)] = run_closed_loop(make_run_config(s, c, kind, run_seed(c.seed, r)));
      } catch (...) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
      }
    }
  };
  unsigned n = c.threads ? c.threads : std::max(1u, std::thread::hardware_concurrency());
  n = std::min<unsigned>(n, static_cast<unsigned>(c.runs));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

inline PolicySummary run_policy(const TanSetup& s, const ExperimentConfig& c, PolicyKind kind) {
  const auto bumps = bump_region(*s.terrain, c.terrain.base_height, c.bump_threshold);
  std::vector<RunMetrics> metrics;
  for (const auto& rec : run_batch(s, c, kind)) metrics.push_back(run_metrics(rec, s, c, bumps));
  return summarize(kind, std::move(metrics));
}

inline nlohmann::json summary_to_json(const PolicySummary& p) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& m : p.runs) {
    runs.push_back({{"seed", m.seed},
                    {"stop_reason", m.stop_reason},
                    {"steps", m.steps},
                    {"terminal_horizontal_error_m", m.terminal_error},
                    {"target_distance_m", m.target_distance},
                    {"reached", m.reached},
                    {"failed", m.failed},
                    {"min_bump_distance_m", m.min_bump_distance},
                    {"straight_bump_distance_m", m.straight_bump_distance},
                    {"solved_steps", m.solved_steps},
                    {"fallback_steps", m.fallback_steps},
                    {"drift_violations", m.drift_violations}});
  }
  return {{"policy", to_string(p.policy)},
          {"terminal_rmse_m", p.terminal_rmse},
          {"reach_fraction", p.reach_fraction},
          {"failures", p.failures},
          {"detour_runs", p.detours},
          {"drift_violations", p.drift_violations},
          {"runs", runs}};
}

// ---- commands ----

inline std::filesystem::path prepare_output(const std::string& dir) {
  std::filesystem::path p(dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + dir + "': " + ec.message());
  return p;
}

inline std::ofstream open_output(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  return os;
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  auto os = open_output(p);
  os << j.dump(2) << '\n';
}

inline nlohmann::json envelope(const ExperimentConfig& c, const char* command) {
  return {{"schema_version", kSchemaVersion}, {"command", command}, {"seed", c.seed}, {"config_hash", config_hash(c)}};
}

/// One closed loop: trajectory.csv, particles/step_KKKK.csv every snapshot_every steps, summary.json.
inline RunRecord cmd_simulate(const ExperimentConfig& c) {
  const TanSetup s = make_setup(c);
  const auto out = prepare_output(c.output_dir);
  write_json(out / "config.effective.json", config_to_json(c));
  std::filesystem::create_directories(out / "particles");
  BeliefObserver observer;
  if (c.snapshot_every > 0) {
    observer = [&](int k, const ParticleBelief& b) {
      if (k % c.snapshot_every != 0) return;
      std::ostringstream name;
      name << "step_" << std::setw(4) << std::setfill('0') << k << ".csv";
      auto os = open_output(out / "particles" / name.str());
      write_belief_csv(b, os);
    };
  }
  const RunRecord rec = run_closed_loop(make_run_config(s, c, c.policy, c.seed), observer);
  {
    auto os = open_output(out / "trajectory.csv");
    write_run_csv(rec, os);
  }
  const auto bumps = bump_region(*s.terrain, c.terrain.base_height, c.bump_threshold);
  const RunMetrics m = run_metrics(rec, s, c, bumps);
  nlohmann::json j = envelope(c, "simulate");
  j["policy"] = to_string(c.policy);
  j["stop_reason"] = to_string(rec.stop_reason);
  j["steps"] = m.steps;
  j["target_radius"] = s.target.radius;
  j["terminal_horizontal_error_m"] = m.terminal_error;
  j["terminal_estimation_error"] = (rec.final_true - rec.final_estimate).norm();
  j["target_distance_m"] = m.target_distance;
  j["reached"] = m.reached;
  j["min_bump_distance_m"] = m.min_bump_distance;
  j["straight_bump_distance_m"] = m.straight_bump_distance;
  j["drift_violations"] = m.drift_violations;
  write_json(out / "summary.json", j);
  return rec;
}

inline void write_rmse_csv(const std::vector<PolicySummary>& ps, std::ostream& os) {
  os << "k";
  for (const auto& p : ps) os << ",rmse_" << to_string(p.policy);
  os << '\n' << std::setprecision(17);
  std::size_t len = 0;
  for (const auto& p : ps) len = std::max(len, p.rmse.size());
  for (std::size_t k = 0; k < len; ++k) {
    os << k;
    for (const auto& p : ps) os << ',' << (p.rmse.empty() ? 0.0 : p.rmse[std::min(k, p.rmse.size() - 1)]);
    os << '\n';
  }
}

inline nlohmann::json mc_json(const ExperimentConfig& c, const TanSetup& s, const std::vector<PolicySummary>& ps,
                              const char* command) {
  nlohmann::json j = envelope(c, command);
  j["runs"] = c.runs;
  j["target_radius"] = s.target.radius;
  j["rmse_convention"] = "runs that stopped early hold their final horizontal error at later steps";
  j["reach_rule"] = "true horizontal distance to target <= target_radius + reach_margin_m at stop";
  nlohmann::json seeds = nlohmann::json::array();
  for (int r = 0; r < c.runs; ++r) seeds.push_back(run_seed(c.seed, r));
  j["run_seeds"] = seeds;
  j["policies"] = nlohmann::json::array();
  for (const auto& p : ps) j["policies"].push_back(summary_to_json(p));
  return j;
}

/// M runs of the configured policy: rmse.csv and summary.json.
inline PolicySummary cmd_montecarlo(const ExperimentConfig& c) {
  const TanSetup s = make_setup(c);
  const auto out = prepare_output(c.output_dir);
  write_json(out / "config.effective.json", config_to_json(c));
  PolicySummary p = run_policy(s, c, c.policy);
  {
    auto os = open_output(out / "rmse.csv");
    write_rmse_csv({p}, os);
  }
  write_json(out / "summary.json", mc_json(c, s, {p}, "montecarlo"));
  return p;
}

/// All three policies on one terrain with paired seeds.
inline std::vector<PolicySummary> cmd_compare(const ExperimentConfig& c) {
  const TanSetup s = make_setup(c);
  const auto out = prepare_output(c.output_dir);
  write_json(out / "config.effective.json", config_to_json(c));
  std::vector<PolicySummary> ps;
  for (PolicyKind k : {PolicyKind::CeLq, PolicyKind::FisherLyapunov, PolicyKind::FisherDistance}) {
    ps.push_back(run_policy(s, c, k));
  }
  {
    auto os = open_output(out / "rmse.csv");
    write_rmse_csv(ps, os);
  }
  write_json(out / "summary.json", mc_json(c, s, ps, "compare"));
  return ps;
}

/// Generated terrain written to output_dir/terrain.csv.
inline tan::TerrainGrid cmd_terrain_gen(const ExperimentConfig& c) {
  tan::validate_terrain_gen(c.terrain);
  const tan::TerrainGrid t = tan::generate_terrain(c.terrain);
  const auto out = prepare_output(c.output_dir);
  tan::save_terrain(t, (out / "terrain.csv").string());
  return t;
}

/// Calibrates (r_C, b) at verify.lambda and checks the bound along fallback closed loops.
inline DriftReport cmd_verify_drift(const ExperimentConfig& c) {
  ExperimentConfig cc = c;
  cc.target_radius = 1.0;  // calibrated below at verify.lambda
  const TanSetup s = make_setup(cc);
  const Calibration cal = calibrate_for(s, c, c.verify_lambda);
  RandomStream stream(c.seed, 0xd21f7);
  const DriftReport rep = verify_drift_bound(*s.model, s.fallback, s.lyapunov, c.verify_initial, c.verify_lambda,
                                             cal.log_b, c.verify_horizon, c.verify_runs, stream);
  const auto out = prepare_output(c.output_dir);
  {
    auto os = open_output(out / "drift_report.csv");
    write_drift_report_csv(rep, os);
  }
  nlohmann::json j = envelope(c, "verify-drift");
  j["lambda"] = c.verify_lambda;
  j["target_radius"] = cal.radius;
  j["log_b"] = cal.log_b;
  j["runs"] = c.verify_runs;
  j["horizon"] = c.verify_horizon;
  j["all_pass"] = rep.all_pass();
  write_json(out / "summary.json", j);
  return rep;
}

}  // namespace dsmpc

#endif  // DSMPC_EXPERIMENT_HPP
