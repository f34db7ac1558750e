// SPDX-License-Identifier: Apache-2.0
#include "mote/spread.hpp"

#include <chrono>

namespace mote {

namespace {

using Clock = std::chrono::steady_clock;

std::uint64_t elapsed_ns(Clock::time_point start) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count());
}

void check_contexts(const EditPlan& plan, std::span<LayerContext> contexts) {
  plan.validate();
  require(contexts.size() == plan.layers.size(), errc::invalid_argument,
          "one layer context per configured layer index is required");
  for (const LayerContext& ctx : contexts) {
    require(ctx.layer != nullptr, errc::invalid_argument, "layer context missing layer");
    require(ctx.projectors.projectors.size() == ctx.layer->experts, errc::dimension_mismatch,
            "projector set does not cover the layer's experts");
    if (plan.solver == SolverKind::tucker)
      require(ctx.factors.has_value(), errc::invalid_argument,
              "tucker solver requires per-layer factors");
  }
}

// Re-caches gating and keys for the batch's inputs against another layer.
EditBatch rebuild_batch_at(const MoELayer& layer, const EditBatch& batch) {
  EditBatch out;
  out.lambda = batch.lambda;
  out.facts.reserve(batch.facts.size());
  for (const Fact& f : batch.facts) out.facts.push_back(make_fact(layer, f.x, f.target_v));
  return out;
}

CoreTensor scale_core(const CoreTensor& core, double c) {
  CoreTensor out = core;
  for (double& x : out.g.data()) x *= c;
  for (double& x : out.flat.data()) x *= c;
  return out;
}

LayerDelta solve_one(const EditPlan& plan, const LayerContext& ctx, const Matrix& psi,
                     const Matrix& residuals, std::uint64_t design_ns) {
  const std::size_t experts = ctx.layer->experts;
  switch (plan.solver) {
    case SolverKind::global_oracle: {
      LayerDelta d = solve_global_oracle_with(psi, residuals, experts, plan.lambda);
      d.provenance.timings.design_ns += design_ns;
      return d;
    }
    case SolverKind::woodbury: {
      LayerDelta d = solve_woodbury_with(psi, residuals, experts, plan.lambda);
      d.provenance.timings.design_ns += design_ns;
      return d;
    }
    case SolverKind::bcd: {
      LayerDelta d =
          solve_bcd_with(psi, residuals, experts, plan.lambda, plan.bcd_iterations);
      d.provenance.timings.design_ns += design_ns;
      return d;
    }
    default: {
      std::uint64_t compress_ns = 0;
      const CompressedBatch compressed =
          compress_with(psi, residuals, *ctx.factors, experts, &compress_ns);
      PhaseTimings core_phases;
      const CoreTensor core =
          solve_tucker_core(compressed, plan.lambda, CoreSide::automatic, &core_phases);
      LayerDelta d = reconstruct_delta(core, *ctx.factors, ctx.projectors);
      d.provenance.lambda = plan.lambda;
      d.provenance.facts = psi.cols();
      d.provenance.timings.design_ns = design_ns + compress_ns;
      d.provenance.timings.kernel_ns = core_phases.kernel_ns;
      d.provenance.timings.factor_ns = core_phases.factor_ns;
      return d;
    }
  }
}

void writeback_all(std::span<LayerContext> contexts, const std::vector<LayerDelta>& deltas) {
  for (std::size_t i = 0; i < contexts.size(); ++i)
    writeback(*contexts[i].layer, deltas[i]);
}

}  // namespace

std::string to_string(SpreadMode m) {
  return m == SpreadMode::residual_spread ? "residual_spread" : "update_spread";
}

SpreadMode spread_mode_from_string(const std::string& s) {
  if (s == "residual_spread") return SpreadMode::residual_spread;
  if (s == "update_spread") return SpreadMode::update_spread;
  fail(errc::invalid_argument, "unknown spread mode: " + s);
}

void EditPlan::validate() const {
  require(!layers.empty(), errc::invalid_argument, "plan must name at least one layer");
  for (std::size_t i = 1; i < layers.size(); ++i)
    require(layers[i] > layers[i - 1], errc::invalid_argument,
            "plan layers must be strictly increasing");
  require(lambda > 0.0, errc::invalid_argument, "plan lambda must be positive");
  require(null_space_threshold > 0.0 && null_space_threshold < 1.0, errc::invalid_argument,
          "null-space threshold must lie in (0, 1)");
  require(bcd_iterations >= 1, errc::invalid_argument, "bcd_iterations must be >= 1");
  if (spread_mode == SpreadMode::update_spread)
    require(solver == SolverKind::tucker || solver == SolverKind::woodbury,
            errc::invalid_argument,
            "update_spread requires the tucker or woodbury solver");
}

std::vector<double> spread_coefficients(const std::vector<std::size_t>& layers) {
  require(!layers.empty(), errc::invalid_argument, "empty layer list");
  const std::size_t last = layers.back();
  std::vector<double> coefs;
  coefs.reserve(layers.size());
  for (std::size_t l : layers) {
    require(l <= last, errc::invalid_argument, "layers must not exceed the last layer");
    coefs.push_back(1.0 / static_cast<double>(last - l + 1));
  }
  return coefs;
}

std::vector<Matrix> spread_residuals(const Matrix& r_last,
                                     const std::vector<std::size_t>& layers) {
  const std::vector<double> coefs = spread_coefficients(layers);
  std::vector<Matrix> out;
  out.reserve(coefs.size());
  for (double c : coefs) {
    Matrix r = r_last;
    for (double& x : r.data()) x *= c;
    out.push_back(std::move(r));
  }
  return out;
}

SpreadOutcome run_residual_spread(const EditPlan& plan, std::span<LayerContext> contexts,
                                  const EditBatch& batch) {
  check_contexts(plan, contexts);
  const MoELayer& last = *contexts.back().layer;
  const Matrix r_last = residual_matrix(last, batch);
  const std::vector<Matrix> residuals = spread_residuals(r_last, plan.layers);

  SpreadOutcome outcome;
  outcome.deltas.reserve(contexts.size());
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    const LayerContext& ctx = contexts[i];
    const auto t0 = Clock::now();
    Matrix psi;
    if (plan.recompute_design && ctx.layer != contexts.back().layer) {
      const EditBatch local = rebuild_batch_at(*ctx.layer, batch);
      psi = design_matrix(*ctx.layer, local, &ctx.projectors);
    } else {
      psi = design_matrix(*ctx.layer, batch, &ctx.projectors);
    }
    const std::uint64_t design_ns = elapsed_ns(t0);
    outcome.deltas.push_back(solve_one(plan, ctx, psi, residuals[i], design_ns));
    ++outcome.solver_calls;
  }
  writeback_all(contexts, outcome.deltas);
  return outcome;
}

SpreadOutcome run_update_spread(const EditPlan& plan, std::span<LayerContext> contexts,
                                const EditBatch& batch) {
  check_contexts(plan, contexts);
  const LayerContext& last = contexts.back();
  const std::vector<double> coefs = spread_coefficients(plan.layers);

  auto t0 = Clock::now();
  const Matrix psi = design_matrix(*last.layer, batch, &last.projectors);
  const Matrix r_last = residual_matrix(*last.layer, batch);
  const std::uint64_t design_ns = elapsed_ns(t0);

  SpreadOutcome outcome;
  outcome.solver_calls = 1;
  outcome.deltas.resize(contexts.size());

  if (plan.solver == SolverKind::tucker) {
    std::uint64_t compress_ns = 0;
    const CompressedBatch compressed =
        compress_with(psi, r_last, *last.factors, last.layer->experts, &compress_ns);
    PhaseTimings core_phases;
    const CoreTensor core =
        solve_tucker_core(compressed, plan.lambda, CoreSide::automatic, &core_phases);
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      const CoreTensor scaled = scale_core(core, coefs[i]);
      outcome.deltas[i] =
          reconstruct_delta(scaled, *contexts[i].factors, contexts[i].projectors);
      outcome.deltas[i].provenance.lambda = plan.lambda;
      outcome.deltas[i].provenance.facts = batch.facts.size();
    }
    // The single solve's cost is attributed to the last layer's record.
    auto& timings = outcome.deltas.back().provenance.timings;
    timings.design_ns = design_ns + compress_ns;
    timings.kernel_ns = core_phases.kernel_ns;
    timings.factor_ns = core_phases.factor_ns;
  } else {
    LayerDelta base = solve_woodbury_with(psi, r_last, last.layer->experts, plan.lambda);
    base.provenance.timings.design_ns += design_ns;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      const auto ta = Clock::now();
      LayerDelta d;
      d.provenance = base.provenance;
      d.provenance.timings = {};
      d.delta = base.delta;
      for (double& x : d.delta.data()) x *= coefs[i];
      d.provenance.timings.assemble_ns = elapsed_ns(ta);
      outcome.deltas[i] = std::move(d);
    }
    outcome.deltas.back().provenance.timings.design_ns = base.provenance.timings.design_ns;
    outcome.deltas.back().provenance.timings.kernel_ns = base.provenance.timings.kernel_ns;
    outcome.deltas.back().provenance.timings.factor_ns = base.provenance.timings.factor_ns;
  }

  writeback_all(contexts, outcome.deltas);
  return outcome;
}

SpreadOutcome run_plan(const EditPlan& plan, std::span<LayerContext> contexts,
                       const EditBatch& batch) {
  if (plan.spread_mode == SpreadMode::residual_spread)
    return run_residual_spread(plan, contexts, batch);
  return run_update_spread(plan, contexts, batch);
}

void writeback(MoELayer& layer, const LayerDelta& delta) {
  require(delta.delta.dims() == std::array<std::size_t, 3>{layer.experts, layer.d_model,
                                                           layer.d_hidden},
          errc::dimension_mismatch, "writeback: delta dims do not match layer layout");
  require(delta.delta.all_finite(), errc::invalid_argument, "writeback: delta must be finite");
  for (std::size_t j = 0; j < layer.experts; ++j) {
    if (layer.layout == Layout::standard)
      layer.down_w.slab(j) += delta.delta.slab(j);
    else
      layer.down_w.slab(j) += delta.delta.slab(j).transpose();
  }
}

}  // namespace mote
