// SPDX-License-Identifier: Apache-2.0
//
// Closed-form and iterative solvers for one layer's edit, all minimizing the
// same ridge objective over the stacked per-expert updates:
//   sum_f || sum_j g_{f,j} Delta_j k~_{f,j} - r_f ||^2 + lambda sum_j ||Delta_j||_F^2
// with null-space-projected keys k~ = P_j k. The global oracle inverts the
// large (E*d_hidden) system, the Woodbury solver the T x T kernel, BCD cycles
// per-expert subproblems, and the Tucker path solves in the compressed core.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mote/moe.hpp"
#include "mote/tucker.hpp"
#include "mote/types.hpp"

namespace mote {

struct NullSpaceProjectorSet {
  std::vector<Matrix> projectors;  // per expert: d_hidden x d_hidden, symmetric idempotent
  double threshold = 0.0;
  std::size_t sample_count = 0;

  static NullSpaceProjectorSet identity(std::size_t experts, std::size_t d_hidden);
};

enum class SolverKind { global_oracle, woodbury, bcd, tucker };

std::string to_string(SolverKind s);
SolverKind solver_from_string(const std::string& s);

struct PhaseTimings {
  std::uint64_t design_ns = 0;    // design matrix / compressed batch construction
  std::uint64_t kernel_ns = 0;    // Gram/kernel matrix formation
  std::uint64_t factor_ns = 0;    // factorization and triangular solves
  std::uint64_t assemble_ns = 0;  // products assembling the delta
  std::uint64_t total_ns() const { return design_ns + kernel_ns + factor_ns + assemble_ns; }
  std::uint64_t solve_ns() const { return design_ns + kernel_ns + factor_ns; }
};

struct SolveProvenance {
  std::string solver;
  double lambda = 0.0;
  std::size_t facts = 0;
  std::size_t experts = 0;
  std::size_t d_hidden = 0;
  Ranks ranks;  // zeros unless the Tucker path produced the delta
  PhaseTimings timings;
};

struct LayerDelta {
  Tensor3 delta;  // E x d_model x d_hidden, slab j = DeltaW_j
  SolveProvenance provenance;
};

struct CompressedBatch {
  Matrix phi;     // T x (r_e * r_in), row t is phi_t^T
  Matrix rtilde;  // T x r_out, row t is r~_t^T
  Ranks ranks;
};

// P_j spans the eigenvectors of the preservation Gram K_j K_j^T / M_j whose
// eigenvalue falls below threshold * (largest eigenvalue). Experts without
// preservation samples get the identity.
NullSpaceProjectorSet build_projectors(const PreservationSet& pres, double threshold);

// Dense single-memory edit: Delta = (V1 - W K1) K1^T (K0 K0^T + K1 K1^T + lambda I)^-1.
Matrix solve_dense_memit(const Matrix& w_down, const Matrix& k1, const Matrix& v1,
                         const Matrix& k0, double lambda);

// Reference solve through the large (E*d_hidden) system, guarded to
// E*d_hidden <= 512. Intentionally expensive; exists to check the others.
LayerDelta solve_global_oracle(const EditBatch& batch, const MoELayer& layer,
                               const NullSpaceProjectorSet& projectors, double lambda);

// Same minimizer through the T x T kernel: Delta = R (Psi^T Psi + lambda I)^-1 Psi^T.
LayerDelta solve_woodbury(const EditBatch& batch, const MoELayer& layer,
                          const NullSpaceProjectorSet& projectors, double lambda);

// Cyclic block coordinate descent over experts; each block is a
// d_hidden-sized dense ridge solve on residuals net of the other experts.
// objective_trace, when non-null, receives the objective before the first
// update and after every block update.
LayerDelta solve_bcd(const EditBatch& batch, const MoELayer& layer,
                     const NullSpaceProjectorSet& projectors, double lambda,
                     std::size_t iterations, std::vector<double>* objective_trace = nullptr);

// phi_{t,a} = sum_j g_{t,j} U_e[j,a] U_in^T k~_{t,j}; r~_t = U_out^T r_t.
CompressedBatch compress_batch(const EditBatch& batch, const MoELayer& layer,
                               const TuckerFactors& factors,
                               const NullSpaceProjectorSet& projectors);

enum class CoreSide { automatic, sample, feature };

// Ridge regression in the core: G_flat = R~^T Phi (Phi^T Phi + lambda I)^-1
// = R~^T (Phi Phi^T + lambda I)^-1 Phi. automatic picks whichever inversion
// is smaller, ties resolved to the T x T sample side. timings, when given,
// accumulates the kernel and factorization phases.
CoreTensor solve_tucker_core(const CompressedBatch& compressed, double lambda,
                             CoreSide side = CoreSide::automatic,
                             PhaseTimings* timings = nullptr);

// Slab j = U_out (sum_a U_e[j,a] G_a) U_in^T P_j.
LayerDelta reconstruct_delta(const CoreTensor& core, const TuckerFactors& factors,
                             const NullSpaceProjectorSet& projectors);

// Diagnostic objective. Memorization and ridge terms always; the explicit
// preservation sum is added when a preservation set is supplied.
double objective_value(const EditBatch& batch, const MoELayer& layer, const Tensor3& delta,
                       const NullSpaceProjectorSet& projectors, double lambda,
                       const PreservationSet* pres = nullptr);

// --- explicit-residual plumbing used by the multi-layer spread ---

// R: d_model x T of per-fact residuals against the layer's current weights.
Matrix residual_matrix(const MoELayer& layer, const EditBatch& batch);

// Psi: (E*d_hidden) x T of per-fact design vectors.
Matrix design_matrix(const MoELayer& layer, const EditBatch& batch,
                     const NullSpaceProjectorSet* projectors);

LayerDelta solve_global_oracle_with(const Matrix& psi, const Matrix& residuals,
                                    std::size_t experts, double lambda);
LayerDelta solve_woodbury_with(const Matrix& psi, const Matrix& residuals, std::size_t experts,
                               double lambda);
LayerDelta solve_bcd_with(const Matrix& psi, const Matrix& residuals, std::size_t experts,
                          double lambda, std::size_t iterations,
                          std::vector<double>* objective_trace = nullptr);
CompressedBatch compress_with(const Matrix& psi, const Matrix& residuals,
                              const TuckerFactors& factors, std::size_t experts,
                              std::uint64_t* design_ns = nullptr);

}  // namespace mote
