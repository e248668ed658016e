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

// Command-line front end: simulate, montecarlo, compare, terrain-gen, verify-drift.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "dsmpc/dsmpc.hpp"

namespace {

struct Overrides {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string policy;
  std::optional<int> runs;
};

dsmpc::ExperimentConfig resolve(const Overrides& o) {
  dsmpc::ExperimentConfig c = o.config.empty() ? dsmpc::ExperimentConfig{} : dsmpc::load_config(o.config);
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.seed) c.seed = *o.seed;
  if (!o.policy.empty()) c.policy = dsmpc::policy_kind_from_string(o.policy);
  if (o.runs) c.runs = *o.runs;
  dsmpc::validate_experiment(c);
  return c;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "experiment config (JSON); omitted keys take defaults");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "master seed override");
  cmd->add_option("--policy", o.policy, "ce-lq | fisher-lyapunov | fisher-distance");
  cmd->add_option("--runs", o.runs, "Monte-Carlo run count");
}

void print_policy(const dsmpc::PolicySummary& p) {
  std::cout << dsmpc::to_string(p.policy) << ": terminal RMSE " << p.terminal_rmse << " m, reach "
            << p.reach_fraction << ", failures " << p.failures << ", detours " << p.detours << "/" << p.runs.size()
            << ", drift violations " << p.drift_violations << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual stochastic MPC with Fisher-information probing and a Lyapunov drift constraint"};
  app.require_subcommand(1);
  Overrides o;
  auto* sim = app.add_subcommand("simulate", "one closed-loop run: trajectory, particle snapshots, summary");
  auto* mc = app.add_subcommand("montecarlo", "M runs of one policy: per-step RMSE and summary");
  auto* cmp = app.add_subcommand("compare", "M paired runs of all three policies");
  auto* gen = app.add_subcommand("terrain-gen", "write a generated terrain file");
  auto* ver = app.add_subcommand("verify-drift", "calibrate the target set and check the drift bound");
  auto* dump = app.add_subcommand("print-config", "print the effective configuration");
  for (auto* c : {sim, mc, cmp, gen, ver, dump}) add_common(c, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const dsmpc::ExperimentConfig c = resolve(o);
    if (*sim) {
      const auto rec = dsmpc::cmd_simulate(c);
      std::cout << "stop: " << dsmpc::to_string(rec.stop_reason) << " after " << rec.steps.size() << " steps; wrote "
                << c.output_dir << '\n';
    } else if (*mc) {
      print_policy(dsmpc::cmd_montecarlo(c));
    } else if (*cmp) {
      for (const auto& p : dsmpc::cmd_compare(c)) print_policy(p);
    } else if (*gen) {
      const auto t = dsmpc::cmd_terrain_gen(c);
      std::cout << "terrain " << t.nx << "x" << t.ny << " written to " << c.output_dir << "/terrain.csv\n";
    } else if (*ver) {
      const auto rep = dsmpc::cmd_verify_drift(c);
      std::cout << (rep.all_pass() ? "drift bound holds" : "drift bound violated") << " over " << rep.rows.size()
                << " steps\n";
      return rep.all_pass() ? 0 : 3;
    } else if (*dump) {
      std::cout << dsmpc::config_to_json(c).dump(2) << '\n';
    }
  } catch (const dsmpc::ConfigurationError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const dsmpc::ParseError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const dsmpc::StabilizationInfeasible& e) {
    std::cerr << "stabilization infeasible: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
