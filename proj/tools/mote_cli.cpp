// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Talks to the library exclusively through the
// C API in mote.h; its own job is flag parsing, config assembly and exit
// code mapping (0 ok, 1 validation, 2 numerical failure, 3 verification
// breach).
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mote.h"

namespace {

int exit_code_for(mote_status status) {
  switch (status) {
    case MOTE_OK:
      return 0;
    case MOTE_ERR_NOT_SYMMETRIC:
    case MOTE_ERR_NOT_SPD:
      return 2;
    case MOTE_ERR_VERIFY:
      return 3;
    default:
      return 1;
  }
}

int report_failure(const char* what, mote_status status) {
  std::cerr << what << " failed (" << mote_status_name(status) << "): " << mote_last_error()
            << "\n";
  return exit_code_for(status);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  if (!is.good()) throw CLI::ValidationError("--config", "cannot read file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

// Base config file content plus "key = value" lines from --set and typed
// flags; later lines win because the parser keeps the last occurrence.
std::string compose_config(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
  std::string text;
  if (!config_path.empty()) text = read_text_file(config_path) + "\n";
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("--set", "expected key=value, got: " + kv);
    text += kv.substr(0, eq) + " = " + kv.substr(eq + 1) + "\n";
  }
  return text;
}

bool write_file(const std::string& path, const char* text) {
  std::ofstream os(path);
  if (!os.good()) return false;
  os << text;
  return os.good();
}

int print_report(mote_report* report, const std::string& out_path, bool quiet) {
  char* table = nullptr;
  char* jsonl = nullptr;
  int rc = 0;
  if (mote_report_table(report, &table) == MOTE_OK && !quiet) std::cout << table;
  if (mote_report_jsonl(report, &jsonl) == MOTE_OK && !out_path.empty()) {
    if (!write_file(out_path, jsonl)) {
      std::cerr << "cannot write report to " << out_path << "\n";
      rc = 1;
    }
  }
  mote_string_free(table);
  mote_string_free(jsonl);
  return rc;
}

struct PlanOverrides {
  std::string solver, spread_mode, ranks, whitening, null_space, recompute_design;
  std::string lambda;
  std::vector<std::pair<std::string, std::string>> pairs() const {
    std::vector<std::pair<std::string, std::string>> out;
    if (!solver.empty()) out.emplace_back("solver", solver);
    if (!spread_mode.empty()) out.emplace_back("spread_mode", spread_mode);
    if (!ranks.empty()) out.emplace_back("ranks", ranks);
    if (!whitening.empty()) out.emplace_back("whitening", whitening);
    if (!null_space.empty()) out.emplace_back("null_space", null_space);
    if (!recompute_design.empty()) out.emplace_back("recompute_design", recompute_design);
    if (!lambda.empty()) out.emplace_back("lambda", lambda);
    return out;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mote: closed-form mixture-of-experts editing toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, plan_path, in_dir, seed;
  std::vector<std::string> overrides;
  PlanOverrides plan_overrides;
  bool quiet = false;

  auto* gen = app.add_subcommand("generate", "generate a synthetic layer stack and batch");
  gen->add_option("--config", config_path, "config file (key = value lines)");
  gen->add_option("--seed", seed, "seed override");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--set", overrides, "extra key=value overrides");

  auto* edit = app.add_subcommand("edit", "apply an edit plan to a generated workspace");
  edit->add_option("--plan", plan_path, "plan file")->required();
  edit->add_option("--in", in_dir, "workspace directory from generate")->required();
  edit->add_option("--out", out_dir, "directory for edited layers and report");
  edit->add_option("--solver", plan_overrides.solver,
                   "global_oracle | woodbury | bcd | tucker");
  edit->add_option("--spread-mode", plan_overrides.spread_mode,
                   "residual_spread | update_spread");
  edit->add_option("--ranks", plan_overrides.ranks, "rE,rOut,rIn or 'full' or 'default'");
  edit->add_option("--lambda", plan_overrides.lambda, "ridge strength");
  edit->add_option("--whitening", plan_overrides.whitening, "none | in | out | both");
  edit->add_option("--null-space", plan_overrides.null_space, "on | off");
  edit->add_option("--recompute-design", plan_overrides.recompute_design, "on | off");
  edit->add_option("--set", overrides, "extra plan key=value overrides");
  edit->add_flag("--quiet", quiet, "suppress the table on stdout");

  auto* verify = app.add_subcommand("verify", "run the identity-verification suite");
  verify->add_option("--config", config_path, "verify config file");
  verify->add_option("--seed", seed, "seed override");
  verify->add_option("--out", out_dir, "write the JSONL report to this file");
  verify->add_option("--set", overrides, "extra key=value overrides");

  auto* bench = app.add_subcommand("bench", "benchmark solvers over a size grid");
  bench->add_option("--config", config_path, "bench grid config file");
  bench->add_option("--seed", seed, "seed override");
  bench->add_option("--out", out_dir, "write the JSONL rows to this file");
  bench->add_option("--set", overrides, "extra key=value overrides");

  CLI11_PARSE(app, argc, argv);

  if (!seed.empty()) overrides.push_back("seed=" + seed);

  if (gen->parsed()) {
    std::string config;
    try {
      config = compose_config(config_path, overrides);
    } catch (const CLI::Error& e) {
      std::cerr << e.what() << "\n";
      return 1;
    }
    const mote_status st = mote_generate(config.c_str(), out_dir.c_str());
    if (st != MOTE_OK) return report_failure("generate", st);
    std::cout << "workspace written to " << out_dir << "\n";
    return 0;
  }

  if (edit->parsed()) {
    mote_plan* plan = nullptr;
    mote_status st = mote_plan_load(plan_path.c_str(), &plan);
    if (st != MOTE_OK) return report_failure("plan load", st);
    auto all_overrides = plan_overrides.pairs();
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        std::cerr << "--set expects key=value, got: " << kv << "\n";
        mote_plan_free(plan);
        return 1;
      }
      all_overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    for (const auto& [key, value] : all_overrides) {
      st = mote_plan_set(plan, key.c_str(), value.c_str());
      if (st != MOTE_OK) {
        mote_plan_free(plan);
        return report_failure("plan override", st);
      }
    }
    mote_workspace* ws = nullptr;
    st = mote_workspace_open(in_dir.c_str(), &ws);
    if (st != MOTE_OK) {
      mote_plan_free(plan);
      return report_failure("workspace open", st);
    }
    mote_report* report = nullptr;
    st = mote_edit(ws, plan, out_dir.empty() ? nullptr : out_dir.c_str(), &report);
    mote_workspace_close(ws);
    mote_plan_free(plan);
    if (st != MOTE_OK) return report_failure("edit", st);
    const int rc = print_report(report, "", quiet);
    mote_report_free(report);
    return rc;
  }

  if (verify->parsed()) {
    std::string config;
    try {
      config = compose_config(config_path, overrides);
    } catch (const CLI::Error& e) {
      std::cerr << e.what() << "\n";
      return 1;
    }
    int breached = 0;
    mote_report* report = nullptr;
    const mote_status st = mote_verify(config.c_str(), &breached, &report);
    if (st != MOTE_OK) return report_failure("verify", st);
    const int rc = print_report(report, out_dir, quiet);
    mote_report_free(report);
    if (rc != 0) return rc;
    return breached ? 3 : 0;
  }

  if (bench->parsed()) {
    std::string config;
    try {
      config = compose_config(config_path, overrides);
    } catch (const CLI::Error& e) {
      std::cerr << e.what() << "\n";
      return 1;
    }
    mote_report* report = nullptr;
    const mote_status st = mote_bench(config.c_str(), &report);
    if (st != MOTE_OK) return report_failure("bench", st);
    const int rc = print_report(report, out_dir, quiet);
    mote_report_free(report);
    return rc;
  }

  return 1;
}
