// SPDX-License-Identifier: Apache-2.0
//
// End-to-end pipeline behind the CLI: synthetic workspace generation, plan
// execution with metrics, the identity-verification suite, and solver
// benchmarking. Reports serialize as one JSON object per line plus a
// human-readable table.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mote/editors.hpp"
#include "mote/io.hpp"
#include "mote/moe.hpp"
#include "mote/spread.hpp"
#include "mote/tucker.hpp"

namespace mote {

struct GenerateConfig {
  std::size_t layers = 1;
  std::size_t experts = 4;
  std::size_t top_k = 2;
  std::size_t d_model = 16;
  std::size_t d_hidden = 8;
  std::size_t facts = 10;
  std::size_t preservation_samples = 64;
  std::uint64_t seed = 42;
  double residual_scale = 1.0;
  double lambda = 0.1;
  Activation activation = Activation::silu;
  Layout layout = Layout::standard;

  void validate() const;
  Manifest to_manifest() const;
  static GenerateConfig from_manifest(const Manifest& kv);
};

// Writes layer_XXX/ directories, batch/ (inputs + targets), preservation
// inputs and a top-level manifest. Deterministic for a fixed seed.
void cmd_generate(const GenerateConfig& config, const std::string& out_dir);

// A generated artifact directory loaded back into memory. Fact caches and
// preservation keys are recomputed from the stored inputs on demand.
struct Workspace {
  GenerateConfig config;
  std::vector<MoELayer> layers;
  Matrix batch_inputs;   // d_model x T
  Matrix batch_targets;  // d_model x T
  Matrix pres_inputs;    // d_model x M

  EditBatch batch_at(std::size_t layer_index) const;
};

Workspace load_workspace(const std::string& dir);

EditPlan plan_from_manifest(const Manifest& kv);
EditPlan load_plan(const std::string& path);
Manifest plan_to_manifest(const EditPlan& plan);

struct Metrics {
  double efficacy = 0.0;        // fraction of facts with post < 0.1 * pre residual
  double generalization = 0.0;  // efficacy on keys perturbed by 5% relative noise
  double specificity = 0.0;     // mean relative output drift on preservation inputs
  double routing_similarity = 1.0;
  double pre_residual_mean = 0.0;
  double post_residual_mean = 0.0;
  double delta_norm = 0.0;
};

struct IdentityCheck {
  std::string name;
  double deviation = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct RunReport {
  Manifest config_echo;
  std::vector<SolveProvenance> per_layer;
  Metrics metrics;
  std::vector<IdentityCheck> identity_checks;
  std::size_t solver_calls = 0;

  std::string to_jsonl() const;
  std::string to_table() const;
};

// Applies the plan to the workspace in place; writes edited layers and
// report.jsonl under out_dir when it is non-empty.
RunReport cmd_edit(const EditPlan& plan, Workspace& ws, const std::string& out_dir);

struct VerifyConfig {
  std::uint64_t seed = 1234;
  std::size_t push_through_instances = 50;
  std::size_t push_through_max_n = 256;
  std::size_t push_through_max_t = 32;
  std::size_t woodbury_instances = 10;
  std::size_t woodbury_max_t = 64;
  std::size_t tucker_full_rank_instances = 10;
  std::size_t core_side_instances = 20;
  std::size_t hosvd_instances = 10;

  Manifest to_manifest() const;
  static VerifyConfig from_manifest(const Manifest& kv);
};

struct VerifyReport {
  std::vector<IdentityCheck> checks;
  bool all_pass = false;

  std::string to_jsonl() const;
  std::string to_table() const;
};

// Push-through, Woodbury vs global oracle, full-rank Tucker vs Woodbury,
// both-side core agreement, and HOSVD vs the per-unfolding SVD reference.
VerifyReport cmd_verify(const VerifyConfig& config);

struct BenchmarkGrid {
  std::vector<std::size_t> experts = {8};
  std::vector<std::size_t> d_hidden = {16};
  std::vector<std::size_t> facts = {16};
  std::vector<std::size_t> layer_counts = {1};
  std::vector<SolverKind> solvers = {SolverKind::woodbury};
  std::vector<SpreadMode> modes = {SpreadMode::residual_spread};
  std::size_t d_model = 32;
  std::size_t top_k = 2;
  std::size_t repetitions = 3;
  std::uint64_t seed = 7;
  double lambda = 0.1;
  bool null_space = false;

  void validate() const;
  Manifest to_manifest() const;
  static BenchmarkGrid from_manifest(const Manifest& kv);
};

struct BenchRow {
  std::string solver;
  std::string mode;
  std::size_t experts = 0;
  std::size_t d_hidden = 0;
  std::size_t facts = 0;
  std::size_t layer_count = 0;
  std::size_t solver_calls = 0;
  // Medians over repetitions, summed across the plan's layers.
  std::uint64_t design_ns = 0;
  std::uint64_t kernel_ns = 0;
  std::uint64_t factor_ns = 0;
  std::uint64_t assemble_ns = 0;
  std::uint64_t solve_ns() const { return design_ns + kernel_ns + factor_ns; }
};

struct BenchReport {
  std::vector<BenchRow> rows;

  std::string to_jsonl() const;
  std::string to_table() const;
};

BenchReport cmd_bench(const BenchmarkGrid& grid);

// Mean top-K overlap |S_before ^ S_after| / K over the supplied inputs.
double routing_similarity(const MoELayer& before, const MoELayer& after, const Matrix& inputs);

// Reference Tucker reconstruction error from truncated SVDs of each
// unfolding; the independent cross-check for the Gram-trick HOSVD.
double svd_reference_fit_error(const Tensor3& w, const Ranks& ranks);

}  // namespace mote
