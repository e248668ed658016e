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
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dsmpc/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(DSMPC_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, p)) r.out += buf;
  const int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dsmpc_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string first_line(const fs::path& p) {
  const std::string s = slurp(p);
  return s.substr(0, s.find('\n'));
}

fs::path write_config(const fs::path& dir, const std::string& body) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << body;
  return p;
}

// a few short steps, no calibration
const char* kQuick = R"({"max_steps": 5, "threads": 1,
  "filter": {"particles": 60},
  "controller": {"scenarios": 5, "horizon": 2, "target_radius": 20, "drift_samples": 10},
  "solver": {"multistart": 1, "max_outer": 2, "max_inner": 5},
  "evaluation": {"snapshot_every": 2}})";

std::vector<std::vector<double>> read_csv(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("fly").code, 2);
  EXPECT_EQ(run("simulate --bogus 1").code, 2);
  EXPECT_EQ(run("simulate --seed notanumber").code, 2);
}

TEST(Cli, ConfigErrorsExitTwoWithTheKey) {
  const fs::path d = scratch("bad");
  EXPECT_EQ(run("simulate --config " + (d / "missing.json").string()).code, 2);
  const Result unknown = run("print-config --config " + write_config(d, R"({"filter": {"particlez": 10}})").string());
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.out.find("filter.particlez"), std::string::npos);
  EXPECT_EQ(run("print-config --config " + write_config(d, "{ nope").string()).code, 2);
  EXPECT_EQ(run("print-config --policy greedy").code, 2);
  EXPECT_EQ(run("montecarlo --runs 0").code, 2);
  fs::remove_all(d);
}

TEST(Cli, RuntimeFailureExitsThree) {
  const fs::path d = scratch("rt");
  std::ofstream(d / "file") << "x";
  const fs::path cfg = write_config(d, kQuick);
  EXPECT_EQ(run("simulate --config " + cfg.string() + " --out " + (d / "file" / "sub").string()).code, 3);
  fs::remove_all(d);
}

TEST(Cli, FlagsOverrideTheConfig) {
  const fs::path d = scratch("flags");
  const Result r = run("print-config --config " + write_config(d, kQuick).string() +
                       " --seed 9 --runs 4 --policy ce-lq --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["seed"], 9);
  EXPECT_EQ(j["runs"], 4);
  EXPECT_EQ(j["policy"], "ce-lq");
  EXPECT_EQ(j["output_dir"], d.string());
  EXPECT_EQ(j["max_steps"], 5);
  EXPECT_EQ(j["filter"]["particles"], 60);
  fs::remove_all(d);
}

TEST(Cli, SimulateSameSeedSameFiles) {
  const fs::path d = scratch("sim");
  const std::string base = "simulate --config " + write_config(d, kQuick).string() + " --policy fisher-distance";
  ASSERT_EQ(run(base + " --seed 4 --out " + (d / "a").string()).code, 0);
  ASSERT_EQ(run(base + " --seed 4 --out " + (d / "b").string()).code, 0);
  ASSERT_EQ(run(base + " --seed 5 --out " + (d / "c").string()).code, 0);
  for (const char* f : {"trajectory.csv", "summary.json", "particles/step_0002.csv"}) {
    EXPECT_EQ(slurp(d / "a" / f), slurp(d / "b" / f)) << f;
  }
  EXPECT_NE(slurp(d / "a" / "trajectory.csv"), slurp(d / "c" / "trajectory.csv"));
  fs::remove_all(d);
}

TEST(Cli, GoldenHeaders) {
  const fs::path d = scratch("golden");
  const fs::path cfg = write_config(d, kQuick);
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --out " + (d / "s").string()).code, 0);
  EXPECT_EQ(first_line(d / "s" / "trajectory.csv"),
            "k,true_1,true_2,true_3,true_4,true_5,true_6,est_1,est_2,est_3,est_4,est_5,est_6,u_1,u_2,u_3,ess,"
            "drift_slack,info_cost,status");
  EXPECT_EQ(first_line(d / "s" / "particles" / "step_0000.csv"), "x_1,x_2,x_3,x_4,x_5,x_6,weight");
  ASSERT_EQ(run("compare --runs 2 --config " + cfg.string() + " --out " + (d / "c").string()).code, 0);
  EXPECT_EQ(first_line(d / "c" / "rmse.csv"), "k,rmse_ce-lq,rmse_fisher-lyapunov,rmse_fisher-distance");
  const auto j = nlohmann::json::parse(slurp(d / "c" / "summary.json"));
  EXPECT_EQ(j["schema_version"], 1);
  EXPECT_EQ(j["command"], "compare");
  EXPECT_EQ(j["run_seeds"].size(), 2u);
  EXPECT_TRUE(j.contains("rmse_convention"));
  ASSERT_EQ(run("verify-drift --out " + (d / "v").string()).code, 0);
  EXPECT_EQ(first_line(d / "v" / "drift_report.csv"), "step,estimate_logV,stderr,bound_logV,pass");
  fs::remove_all(d);
}

TEST(Cli, ZeroNoiseEstimateColumnsEqualTruth) {
  const fs::path d = scratch("zero");
  const fs::path cfg = write_config(d, R"({"max_steps": 8, "policy": "ce-lq",
    "model": {"process_covariance_diag": [0, 0, 0, 0, 0, 0], "observation_covariance_diag": [0, 0, 0, 0]},
    "initial": {"std": [0, 0, 0, 0, 0, 0]},
    "filter": {"particles": 20},
    "controller": {"scenarios": 4, "horizon": 2, "target_radius": 20},
    "evaluation": {"snapshot_every": 0}})");
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --out " + d.string()).code, 0);
  const auto rows = read_csv(d / "trajectory.csv");
  ASSERT_EQ(rows.size(), 8u);
  for (const auto& r : rows) {
    for (int i = 1; i <= 6; ++i) EXPECT_NEAR(r[i + 6], r[i], 1e-9 * (1 + std::abs(r[i])));
  }
  fs::remove_all(d);
}

TEST(Cli, TerrainGenRoundTrip) {
  const fs::path d = scratch("terrain");
  const fs::path cfg = write_config(d, R"({"terrain": {"seed": 17, "bump_count": 9, "corridor_half_width_m": 150}})");
  ASSERT_EQ(run("terrain-gen --config " + cfg.string() + " --out " + (d / "a").string()).code, 0);
  ASSERT_EQ(run("terrain-gen --config " + cfg.string() + " --out " + (d / "b").string()).code, 0);
  EXPECT_EQ(slurp(d / "a" / "terrain.csv"), slurp(d / "b" / "terrain.csv"));
  const auto loaded = dsmpc::tan::load_terrain((d / "a" / "terrain.csv").string());
  const auto expected = dsmpc::tan::generate_terrain(dsmpc::load_config(cfg.string()).terrain);
  EXPECT_EQ(loaded.heights, expected.heights);
  EXPECT_EQ(loaded.nx, expected.nx);
  EXPECT_EQ(loaded.origin_y, expected.origin_y);
  // the corridor stays flat; a wide corridor keeps the whole interpolation stencil on the base plane
  const auto& cor = dsmpc::load_config(cfg.string()).terrain.corridor;
  for (double t = 0; t <= 1.0; t += 0.05) {
    const double x = cor.start_x + t * (cor.end_x - cor.start_x);
    EXPECT_NEAR(dsmpc::tan::height_at(loaded, x, cor.start_y), dsmpc::tan::height_at(expected, x, cor.start_y), 0.0);
    EXPECT_NEAR(dsmpc::tan::height_at(loaded, x, cor.start_y), -150.0, 1e-9);
  }
  fs::remove_all(d);
}

TEST(Cli, VerifyDriftOnDefaults) {
  const fs::path d = scratch("verify");
  const Result r = run("verify-drift --out " + d.string());
  EXPECT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(slurp(d / "summary.json"));
  EXPECT_TRUE(j["all_pass"].get<bool>());
  EXPECT_GT(j["target_radius"].get<double>(), 0.0);
  EXPECT_EQ(read_csv(d / "drift_report.csv").size(), 101u);
  fs::remove_all(d);
}

TEST(Cli, VerifyDriftReportsInfeasibleStabilization) {
  // undamped, with an actuator too weak to hold the calibration shells
  const fs::path d = scratch("infeasible");
  const fs::path cfg = write_config(d, R"({"model": {"damping": 0.0, "u_max": 1e-6},
    "controller": {"calibration": {"max_steps": 4}}})");
  const Result r = run("verify-drift --config " + cfg.string() + " --out " + d.string());
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("stabilization infeasible"), std::string::npos) << r.out;
  fs::remove_all(d);
}

TEST(Cli, ShippedConfigsLoad) {
  const fs::path dir = fs::path(DSMPC_SOURCE_DIR) / "configs";
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    ++n;
    const Result r = run("print-config --config " + e.path().string());
    EXPECT_EQ(r.code, 0) << e.path() << ": " << r.out;
  }
  EXPECT_GE(n, 3);
  // the flat-corridor file spells out the built-in defaults
  auto flat = nlohmann::json::parse(run("print-config --config " + (dir / "flat_corridor.json").string()).out);
  auto defaults = nlohmann::json::parse(run("print-config").out);
  flat.erase("output_dir");
  defaults.erase("output_dir");
  EXPECT_EQ(flat, defaults);
}
