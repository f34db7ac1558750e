// SPDX-License-Identifier: Apache-2.0
//
// Multi-layer edit orchestration. residual_spread scales the last layer's
// residuals by 1/(L - l + 1) and runs one solve per layer against the shared
// design matrix; update_spread solves once at the last layer and re-expresses
// the scaled solution through each layer's own factors and projectors.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mote/editors.hpp"
#include "mote/moe.hpp"
#include "mote/tucker.hpp"

namespace mote {

enum class SpreadMode { residual_spread, update_spread };

std::string to_string(SpreadMode m);
SpreadMode spread_mode_from_string(const std::string& s);

struct EditPlan {
  std::vector<std::size_t> layers;  // strictly increasing layer indices
  SolverKind solver = SolverKind::woodbury;
  SpreadMode spread_mode = SpreadMode::residual_spread;
  double lambda = 0.1;
  bool null_space = true;
  double null_space_threshold = 0.02;
  WhiteningConfig whitening;
  Ranks ranks;                      // zero means derive defaults per layer
  bool full_ranks = false;          // override ranks with the layer dimensions
  bool recompute_design = false;    // rebuild Psi from each layer's own routing
  std::size_t bcd_iterations = 4;
  std::size_t hooi_sweeps = 0;

  void validate() const;
};

// 1/(L - l + 1) for each configured layer; the last entry is always 1.
std::vector<double> spread_coefficients(const std::vector<std::size_t>& layers);

// R_l = R_L / (L - l + 1)
std::vector<Matrix> spread_residuals(const Matrix& r_last,
                                     const std::vector<std::size_t>& layers);

// Everything one edited layer contributes to a plan run. factors is required
// when plan.solver == tucker (and for woodbury only the projectors matter).
struct LayerContext {
  MoELayer* layer = nullptr;
  NullSpaceProjectorSet projectors;
  std::optional<TuckerFactors> factors;
};

struct SpreadOutcome {
  std::vector<LayerDelta> deltas;  // aligned with plan.layers
  std::size_t solver_calls = 0;
};

// One solver call per layer; deltas are written back from the earliest layer
// upward. The design matrix comes from the batch cached at the last layer
// unless plan.recompute_design re-routes the fact inputs per layer.
SpreadOutcome run_residual_spread(const EditPlan& plan, std::span<LayerContext> contexts,
                                  const EditBatch& batch);

// Exactly one solve at the last layer; earlier layers receive the scaled
// solution re-expressed through their own factors (tucker) or a scaled copy
// (woodbury).
SpreadOutcome run_update_spread(const EditPlan& plan, std::span<LayerContext> contexts,
                                const EditBatch& batch);

SpreadOutcome run_plan(const EditPlan& plan, std::span<LayerContext> contexts,
                       const EditBatch& batch);

// Adds the delta into the layer's down projections, transposing slabs for
// the transposed_packed layout.
void writeback(MoELayer& layer, const LayerDelta& delta);

}  // namespace mote
