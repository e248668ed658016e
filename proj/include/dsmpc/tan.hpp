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

#ifndef DSMPC_TAN_HPP
#define DSMPC_TAN_HPP

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <iomanip>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dsmpc/errors.hpp"
#include "dsmpc/model.hpp"
#include "dsmpc/random.hpp"

namespace dsmpc::tan {

/// Regular height grid; node (i, j) sits at (origin_x + i*cell, origin_y + j*cell).
struct TerrainGrid {
  double origin_x = 0.0;
  double origin_y = 0.0;
  double cell_size = 50.0;
  int nx = 0;
  int ny = 0;
  std::vector<double> heights;  ///< row-major, index j * nx + i

  double at(int i, int j) const { return heights[static_cast<std::size_t>(j) * nx + i]; }
  double& at(int i, int j) { return heights[static_cast<std::size_t>(j) * nx + i]; }
  double node_x(int i) const { return origin_x + i * cell_size; }
  double node_y(int j) const { return origin_y + j * cell_size; }

  bool operator==(const TerrainGrid&) const = default;
};

inline void validate_terrain(const TerrainGrid& t) {
  if (!(t.cell_size > 0.0) || !std::isfinite(t.cell_size)) throw ConfigurationError("terrain cell size must be > 0");
  if (t.nx < 4 || t.ny < 4) throw ConfigurationError("terrain grid needs at least 4 x 4 nodes");
  if (t.heights.size() != static_cast<std::size_t>(t.nx) * static_cast<std::size_t>(t.ny)) {
    throw ConfigurationError("terrain height count does not match nx * ny");
  }
  for (double h : t.heights)
    if (!std::isfinite(h)) throw ConfigurationError("terrain heights must be finite");
}

namespace detail {

// Catmull-Rom basis on [0, 1] for stencil nodes -1, 0, 1, 2.
inline void catmull_rom_weights(double t, double w[4], double dw[4]) {
  const double t2 = t * t;
  const double t3 = t2 * t;
  w[0] = 0.5 * (-t + 2.0 * t2 - t3);
  w[1] = 0.5 * (2.0 - 5.0 * t2 + 3.0 * t3);
  w[2] = 0.5 * (t + 4.0 * t2 - 3.0 * t3);
  w[3] = 0.5 * (-t2 + t3);
  dw[0] = 0.5 * (-1.0 + 4.0 * t - 3.0 * t2);
  dw[1] = 0.5 * (-10.0 * t + 9.0 * t2);
  dw[2] = 0.5 * (1.0 + 8.0 * t - 9.0 * t2);
  dw[3] = 0.5 * (-2.0 * t + 3.0 * t2);
}

struct AxisLocation {
  int cell;
  double t;
  bool clamped;
};

inline AxisLocation locate(double coord, double origin, double cell, int n) {
  double g = (coord - origin) / cell;
  bool clamped = false;
  if (g <= 0.0) {
    clamped = g < 0.0;
    g = 0.0;
  } else if (g >= n - 1) {
    clamped = g > n - 1;
    g = n - 1;
  }
  int c = static_cast<int>(std::floor(g));
  c = std::clamp(c, 0, n - 2);
  return {c, g - c, clamped};
}

// Node value with linear extrapolation for the ghost ring, so planes stay exact up to the edge.
inline double stencil_value(const TerrainGrid& t, int i, int j) {
  auto col = [&](int ii, int jj) {
    if (jj < 0) return 2.0 * t.at(ii, 0) - t.at(ii, 1);
    if (jj >= t.ny) return 2.0 * t.at(ii, t.ny - 1) - t.at(ii, t.ny - 2);
    return t.at(ii, jj);
  };
  if (i < 0) return 2.0 * col(0, j) - col(1, j);
  if (i >= t.nx) return 2.0 * col(t.nx - 1, j) - col(t.nx - 2, j);
  return col(i, j);
}

struct HeightAndGradient {
  double h;
  double dx;
  double dy;
};

inline HeightAndGradient evaluate(const TerrainGrid& t, double x, double y) {
  const AxisLocation lx = locate(x, t.origin_x, t.cell_size, t.nx);
  const AxisLocation ly = locate(y, t.origin_y, t.cell_size, t.ny);
  double wx[4], dwx[4], wy[4], dwy[4];
  catmull_rom_weights(lx.t, wx, dwx);
  catmull_rom_weights(ly.t, wy, dwy);
  double h = 0.0, gx = 0.0, gy = 0.0;
  for (int b = 0; b < 4; ++b) {
    double row = 0.0, drow = 0.0;
    for (int a = 0; a < 4; ++a) {
      const double v = stencil_value(t, lx.cell - 1 + a, ly.cell - 1 + b);
      row += wx[a] * v;
      drow += dwx[a] * v;
    }
    h += wy[b] * row;
    gx += wy[b] * drow;
    gy += dwy[b] * row;
  }
  return {h, lx.clamped ? 0.0 : gx / t.cell_size, ly.clamped ? 0.0 : gy / t.cell_size};
}

}  // namespace detail

/// Bicubic Catmull-Rom height; reproduces node values and planes, C1 in the interior.
/// Queries outside the grid are clamped to the boundary.
inline double height_at(const TerrainGrid& terrain, double x, double y) {
  return detail::evaluate(terrain, x, y).h;
}

/// Analytic (dh/dx, dh/dy) of the interpolant. Zero along a clamped axis.
inline Eigen::Vector2d terrain_gradient(const TerrainGrid& terrain, double x, double y) {
  const auto e = detail::evaluate(terrain, x, y);
  return {e.dx, e.dy};
}

inline Eigen::MatrixXd diagonal_matrix(std::initializer_list<double> d) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(d.size()));
  Eigen::Index i = 0;
  for (double x : d) v[i++] = x;
  return v.asDiagonal();
}

struct TanParams {
  double dt = 1.0;       ///< s
  double damping = 0.1;  ///< kappa, 1/s
  double u_max = 2.0;    ///< m/s^2
  Eigen::MatrixXd process_covariance = diagonal_matrix({0.01, 0.01, 0.01, 0.04, 0.04, 0.04});
  Eigen::MatrixXd observation_covariance = diagonal_matrix({4.0, 0.01, 0.01, 0.01});
};

/// Damped double integrator: positions integrate speeds over dt, speeds decay by 1 - kappa dt.
inline Eigen::MatrixXd tan_state_matrix(double dt, double damping) {
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(6, 6);
  A.topLeftCorner(3, 3).setIdentity();
  A.topRightCorner(3, 3) = dt * Eigen::MatrixXd::Identity(3, 3);
  A.bottomRightCorner(3, 3) = (1.0 - damping * dt) * Eigen::MatrixXd::Identity(3, 3);
  return A;
}

inline Eigen::MatrixXd tan_input_matrix(double dt) {
  Eigen::MatrixXd B(6, 3);
  B.topRows(3) = 0.5 * dt * dt * Eigen::MatrixXd::Identity(3, 3);
  B.bottomRows(3) = dt * Eigen::MatrixXd::Identity(3, 3);
  return B;
}

/**
 * Terrain-aided navigation drone. State (x, y, z, vx, vy, vz), control
 * accelerations with ||u|| <= u_max, observation (z - h_m(x, y), vx, vy, vz).
 */
class TanModel final : public AdditiveGaussianModel {
 public:
  TanModel(TanParams params, std::shared_ptr<const TerrainGrid> terrain)
      : AdditiveGaussianModel(6, 3, 4, params.process_covariance, params.observation_covariance),
        params_(std::move(params)),
        terrain_(std::move(terrain)),
        A_(tan_state_matrix(params_.dt, params_.damping)),
        B_(tan_input_matrix(params_.dt)) {
    if (!terrain_) throw ConfigurationError("TanModel needs a terrain");
    validate_terrain(*terrain_);
    if (!(params_.dt > 0.0)) throw ConfigurationError("dt must be > 0");
    if (!(params_.damping >= 0.0 && params_.damping * params_.dt <= 1.0)) {
      throw ConfigurationError("damping must satisfy 0 <= kappa dt <= 1");
    }
    if (!(params_.u_max > 0.0)) throw ConfigurationError("u_max must be > 0");
    if (observation_noise().definite()) {
      r_inv_ = observation_noise().precision();
      r_inv4_ = r_inv_;
    }
  }

  StateVector mean_dynamics(const StateVector& x, const ControlVector& u) const override {
    if (!(u.norm() <= params_.u_max)) {
      throw ContractViolation("tan_dynamics: control norm " + std::to_string(u.norm()) + " exceeds u_max " +
                              std::to_string(params_.u_max));
    }
    return A_ * x + B_ * u;
  }

  Observation mean_observation(const StateVector& x) const override {
    Observation y(4);
    y[0] = x[2] - height_at(*terrain_, x[0], x[1]);
    y.tail(3) = x.tail(3);
    return y;
  }

  Eigen::MatrixXd dynamics_jacobian(const StateVector&, const ControlVector&) const override { return A_; }
  bool constant_dynamics_jacobian() const override { return true; }
  bool affine_dynamics(Eigen::MatrixXd& A, Eigen::MatrixXd& B) const override {
    A = A_;
    B = B_;
    return true;
  }

  Eigen::MatrixXd observation_jacobian(const StateVector& x) const override {
    const Eigen::Vector2d g = terrain_gradient(*terrain_, x[0], x[1]);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(4, 6);
    H(0, 0) = -g[0];
    H(0, 1) = -g[1];
    H(0, 2) = 1.0;
    H.block(1, 3, 3, 3).setIdentity();
    return H;
  }

  Eigen::MatrixXd observation_information(const StateVector& x) const override {
    if (r_inv_.size() == 0) throw ConfigurationError("observation covariance is singular; information unavailable");
    const Eigen::Vector2d g = terrain_gradient(*terrain_, x[0], x[1]);
    Eigen::Matrix<double, 4, 6> H = Eigen::Matrix<double, 4, 6>::Zero();
    H(0, 0) = -g[0];
    H(0, 1) = -g[1];
    H(0, 2) = 1.0;
    H.block<3, 3>(1, 3).setIdentity();
    Eigen::MatrixXd info = H.transpose() * r_inv4_ * H;
    return 0.5 * (info + info.transpose());
  }

  void add_observation_information(Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::MatrixXd> out) const override {
    if (r_inv_.size() == 0) throw ConfigurationError("observation covariance is singular; information unavailable");
    const Eigen::Vector2d g = terrain_gradient(*terrain_, x[0], x[1]);
    Eigen::Matrix<double, 4, 6> H = Eigen::Matrix<double, 4, 6>::Zero();
    H(0, 0) = -g[0];
    H(0, 1) = -g[1];
    H(0, 2) = 1.0;
    H.block<3, 3>(1, 3).setIdentity();
    const Eigen::Matrix<double, 6, 6> info = H.transpose() * r_inv4_ * H;
    out += 0.5 * (info + info.transpose());
  }

  const TanParams& params() const { return params_; }
  const TerrainGrid& terrain() const { return *terrain_; }
  const Eigen::MatrixXd& A() const { return A_; }
  const Eigen::MatrixXd& B() const { return B_; }

 private:
  TanParams params_;
  std::shared_ptr<const TerrainGrid> terrain_;
  Eigen::MatrixXd A_;
  Eigen::MatrixXd B_;
  Eigen::MatrixXd r_inv_;
  Eigen::Matrix4d r_inv4_ = Eigen::Matrix4d::Zero();
};

/**
 * Lyapunov coordinates (p + lead * v, weight * v). With lead = 1/kappa the
 * first block is the coasting stop point, which the control moves directly.
 */
inline Eigen::MatrixXd stopping_point_transform(double lead, double weight) {
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(6, 6);
  W.topLeftCorner(3, 3).setIdentity();
  W.topRightCorner(3, 3) = lead * Eigen::MatrixXd::Identity(3, 3);
  W.bottomRightCorner(3, 3) = weight * Eigen::MatrixXd::Identity(3, 3);
  return W;
}

struct CorridorConfig {
  double start_x = 300.0;
  double start_y = 0.0;
  double end_x = 0.0;
  double end_y = 0.0;
  double half_width = 50.0;  ///< m
  double extension = 50.0;   ///< m beyond both segment ends
};

struct TerrainGenConfig {
  double origin_x = -700.0;
  double origin_y = -600.0;
  double cell_size = 50.0;
  int nx = 33;
  int ny = 25;
  double base_height = -150.0;
  int bump_count = 14;
  double amplitude_min = 20.0;
  double amplitude_max = 60.0;
  double width_min = 110.0;  ///< Gaussian sigma, m
  double width_max = 160.0;
  bool flat_corridor = true;
  /// With a flat corridor, bump centres keep at least this many widths away from it
  /// so the overwrite does not cut a cliff into a bump flank.
  double bump_clearance = 1.0;
  CorridorConfig corridor;
  std::uint64_t seed = 1;
};

/// Euclidean distance from (x, y) to the corridor rectangle; 0 inside.
inline double corridor_distance(const CorridorConfig& c, double x, double y) {
  const double dx = c.end_x - c.start_x;
  const double dy = c.end_y - c.start_y;
  const double len = std::hypot(dx, dy);
  const double ux = len > 0.0 ? dx / len : 1.0;
  const double uy = len > 0.0 ? dy / len : 0.0;
  const double px = x - c.start_x;
  const double py = y - c.start_y;
  const double along = px * ux + py * uy;
  const double lateral = -px * uy + py * ux;
  const double ea = std::max({-c.extension - along, along - len - c.extension, 0.0});
  const double el = std::max(std::abs(lateral) - c.half_width, 0.0);
  return std::hypot(ea, el);
}

inline bool in_corridor(const CorridorConfig& c, double x, double y) { return corridor_distance(c, x, y) == 0.0; }

inline void validate_terrain_gen(const TerrainGenConfig& cfg) {
  if (!(cfg.cell_size > 0.0)) throw ConfigurationError("terrain cell size must be > 0");
  if (cfg.nx < 4 || cfg.ny < 4) throw ConfigurationError("terrain grid needs at least 4 x 4 nodes");
  if (cfg.bump_count < 0) throw ConfigurationError("bump count must be >= 0");
  if (cfg.bump_count > 0 && !(cfg.width_min > 2.0 * cfg.cell_size && cfg.width_max >= cfg.width_min)) {
    throw ConfigurationError("bump widths must exceed twice the cell size");
  }
  if (!(cfg.amplitude_max >= cfg.amplitude_min)) throw ConfigurationError("amplitude range is empty");
  if (cfg.bump_clearance < 0.0) throw ConfigurationError("bump clearance must be >= 0");
}

/// Base height plus Gaussian bumps, then the corridor rectangle reset to the base height.
inline TerrainGrid generate_terrain(const TerrainGenConfig& cfg) {
  validate_terrain_gen(cfg);
  TerrainGrid t;
  t.origin_x = cfg.origin_x;
  t.origin_y = cfg.origin_y;
  t.cell_size = cfg.cell_size;
  t.nx = cfg.nx;
  t.ny = cfg.ny;
  t.heights.assign(static_cast<std::size_t>(cfg.nx) * cfg.ny, cfg.base_height);

  struct Bump {
    double cx, cy, amp, width;
  };
  RandomStream rs(cfg.seed, 0x7e77a1);
  const double x_max = cfg.origin_x + (cfg.nx - 1) * cfg.cell_size;
  const double y_max = cfg.origin_y + (cfg.ny - 1) * cfg.cell_size;
  std::vector<Bump> bumps;
  for (int b = 0; b < cfg.bump_count; ++b) {
    Bump bump;
    bump.amp = rs.uniform(cfg.amplitude_min, cfg.amplitude_max);
    bump.width = rs.uniform(cfg.width_min, cfg.width_max);
    for (int attempt = 0;; ++attempt) {
      bump.cx = rs.uniform(cfg.origin_x, x_max);
      bump.cy = rs.uniform(cfg.origin_y, y_max);
      if (!cfg.flat_corridor || cfg.bump_clearance <= 0.0) break;
      if (corridor_distance(cfg.corridor, bump.cx, bump.cy) >= cfg.bump_clearance * bump.width) break;
      if (attempt == 10000) throw ConfigurationError("no room for bumps outside the corridor clearance");
    }
    bumps.push_back(bump);
  }
  for (int j = 0; j < t.ny; ++j) {
    for (int i = 0; i < t.nx; ++i) {
      const double x = t.node_x(i), y = t.node_y(j);
      if (cfg.flat_corridor && in_corridor(cfg.corridor, x, y)) continue;
      double h = cfg.base_height;
      for (const auto& b : bumps) {
        const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
        h += b.amp * std::exp(-0.5 * d2 / (b.width * b.width));
      }
      t.at(i, j) = h;
    }
  }
  return t;
}

/**
 * Terrain file: one line of JSON {nx, ny, cell_size_m, origin_x_m, origin_y_m}
 * followed by ny CSV rows of nx heights (row j is y index j), 17 significant digits.
 */
inline void save_terrain(const TerrainGrid& t, std::ostream& os) {
  validate_terrain(t);
  nlohmann::ordered_json header;
  header["nx"] = t.nx;
  header["ny"] = t.ny;
  header["cell_size_m"] = t.cell_size;
  header["origin_x_m"] = t.origin_x;
  header["origin_y_m"] = t.origin_y;
  os << header.dump() << '\n';
  os << std::setprecision(17);
  for (int j = 0; j < t.ny; ++j) {
    for (int i = 0; i < t.nx; ++i) {
      if (i) os << ',';
      os << t.at(i, j);
    }
    os << '\n';
  }
}

inline TerrainGrid load_terrain(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("terrain line 1: missing JSON header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("terrain line 1: invalid JSON header: ") + e.what());
  }
  TerrainGrid t;
  auto field = [&](const char* name) -> const nlohmann::json& {
    if (!header.contains(name)) throw ParseError(std::string("terrain line 1: header field '") + name + "' missing");
    return header.at(name);
  };
  try {
    t.nx = field("nx").get<int>();
    t.ny = field("ny").get<int>();
    t.cell_size = field("cell_size_m").get<double>();
    t.origin_x = field("origin_x_m").get<double>();
    t.origin_y = field("origin_y_m").get<double>();
  } catch (const nlohmann::json::type_error& e) {
    throw ParseError(std::string("terrain line 1: header field has wrong type: ") + e.what());
  }
  if (t.nx < 4 || t.ny < 4) throw ParseError("terrain line 1: nx and ny must be at least 4");
  if (!(t.cell_size > 0.0)) throw ParseError("terrain line 1: cell_size_m must be > 0");
  t.heights.reserve(static_cast<std::size_t>(t.nx) * t.ny);

  int rows = 0;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (rows == t.ny) {
      throw ParseError("terrain line " + std::to_string(line_no) + ": data has more than ny = " +
                       std::to_string(t.ny) + " rows");
    }
    int fields = 0;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      const std::string_view cell(line.data() + pos, (comma == std::string::npos ? line.size() : comma) - pos);
      ++fields;
      double v = 0.0;
      const char* first = cell.data();
      const char* last = cell.data() + cell.size();
      while (first < last && *first == ' ') ++first;
      auto [ptr, ec] = std::from_chars(first, last, v);
      if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
        throw ParseError("terrain line " + std::to_string(line_no) + ", field " + std::to_string(fields) +
                         ": not a finite number: '" + std::string(cell) + "'");
      }
      t.heights.push_back(v);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (fields != t.nx) {
      throw ParseError("terrain line " + std::to_string(line_no) + ": row has " + std::to_string(fields) +
                       " values, expected nx = " + std::to_string(t.nx));
    }
    ++rows;
  }
  if (rows != t.ny) {
    throw ParseError("terrain: found " + std::to_string(rows) + " data rows, expected ny = " + std::to_string(t.ny) +
                     " (nx*ny = " + std::to_string(t.nx * t.ny) + " values, got " +
                     std::to_string(t.heights.size()) + ")");
  }
  return t;
}

inline void save_terrain(const TerrainGrid& t, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open terrain file for writing: " + path);
  save_terrain(t, os);
}

inline TerrainGrid load_terrain(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open terrain file: " + path);
  return load_terrain(is);
}

}  // namespace dsmpc::tan

#endif  // DSMPC_TAN_HPP
