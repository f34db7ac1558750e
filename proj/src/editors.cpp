// SPDX-License-Identifier: Apache-2.0
#include "mote/editors.hpp"

#include <chrono>

#include <Eigen/Eigenvalues>

#include "mote/linalg.hpp"

namespace mote {

namespace {

using Clock = std::chrono::steady_clock;

std::uint64_t elapsed_ns(Clock::time_point start) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count());
}

// Splits a d_model x (E*d_hidden) stacked delta into per-expert slabs.
Tensor3 split_slabs(const EMatrix& flat, std::size_t experts, std::size_t d_hidden) {
  const std::size_t d_model = static_cast<std::size_t>(flat.rows());
  Tensor3 delta(experts, d_model, d_hidden);
  for (std::size_t j = 0; j < experts; ++j)
    delta.slab(j) = flat.middleCols(static_cast<Eigen::Index>(j * d_hidden),
                                    static_cast<Eigen::Index>(d_hidden));
  return delta;
}

void check_design(const Matrix& psi, const Matrix& residuals, std::size_t experts) {
  require(psi.cols() == residuals.cols(), errc::dimension_mismatch,
          "design and residual fact counts differ");
  require(psi.cols() >= 1, errc::invalid_argument, "at least one fact required");
  require(experts >= 1 && psi.rows() % experts == 0, errc::dimension_mismatch,
          "design rows must be E * d_hidden");
}

}  // namespace

NullSpaceProjectorSet NullSpaceProjectorSet::identity(std::size_t experts,
                                                      std::size_t d_hidden) {
  NullSpaceProjectorSet set;
  set.projectors.assign(experts, Matrix::identity(d_hidden));
  set.threshold = 0.0;
  set.sample_count = 0;
  return set;
}

std::string to_string(SolverKind s) {
  switch (s) {
    case SolverKind::global_oracle: return "global_oracle";
    case SolverKind::woodbury: return "woodbury";
    case SolverKind::bcd: return "bcd";
    default: return "tucker";
  }
}

SolverKind solver_from_string(const std::string& s) {
  if (s == "global_oracle") return SolverKind::global_oracle;
  if (s == "woodbury") return SolverKind::woodbury;
  if (s == "bcd") return SolverKind::bcd;
  if (s == "tucker") return SolverKind::tucker;
  fail(errc::invalid_argument, "unknown solver: " + s);
}

NullSpaceProjectorSet build_projectors(const PreservationSet& pres, double threshold) {
  require(threshold > 0.0 && threshold < 1.0, errc::invalid_argument,
          "projection threshold must lie in (0, 1)");
  require(pres.expert_count() >= 1, errc::invalid_argument, "preservation set has no experts");
  std::size_t d_hidden = 0;
  for (const auto& k : pres.keys) {
    require(k.rows() >= 1, errc::invalid_argument,
            "preservation key matrices must have d_hidden rows");
    require(d_hidden == 0 || k.rows() == d_hidden, errc::dimension_mismatch,
            "preservation key matrices disagree on d_hidden");
    d_hidden = k.rows();
  }

  NullSpaceProjectorSet set;
  set.threshold = threshold;
  set.sample_count = pres.total_samples();
  set.projectors.reserve(pres.expert_count());
  for (const auto& keys : pres.keys) {
    const std::size_t m = keys.cols();
    if (m == 0) {
      set.projectors.push_back(Matrix::identity(d_hidden));
      continue;
    }
    EMatrix gram = (keys.map() * keys.map().transpose()) / static_cast<double>(m);
    gram = 0.5 * (gram + gram.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<EMatrix> es(gram);
    require(es.info() == Eigen::Success, errc::not_spd, "projector eigensolve failed");
    const double top = es.eigenvalues().maxCoeff();
    if (top <= 0.0) {
      // All-zero keys carry no energy to preserve.
      set.projectors.push_back(Matrix::identity(d_hidden));
      continue;
    }
    const double cutoff = threshold * top;
    EMatrix p = EMatrix::Zero(static_cast<Eigen::Index>(d_hidden),
                              static_cast<Eigen::Index>(d_hidden));
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
      if (es.eigenvalues()[i] < cutoff) {
        const EVector u = es.eigenvectors().col(i);
        p += u * u.transpose();
      }
    }
    set.projectors.push_back(Matrix::from(p));
  }
  return set;
}

Matrix solve_dense_memit(const Matrix& w_down, const Matrix& k1, const Matrix& v1,
                         const Matrix& k0, double lambda) {
  require(lambda > 0.0, errc::invalid_argument, "lambda must be positive");
  const std::size_t d_model = w_down.rows();
  const std::size_t d_hidden = w_down.cols();
  require(k1.rows() == d_hidden && v1.rows() == d_model && k1.cols() == v1.cols(),
          errc::dimension_mismatch, "solve_dense_memit: K1/V1 dims inconsistent");
  require(k0.cols() == 0 || k0.rows() == d_hidden, errc::dimension_mismatch,
          "solve_dense_memit: K0 rows must equal d_hidden");

  EMatrix a = k1.map() * k1.map().transpose();
  if (k0.cols() > 0) a += k0.map() * k0.map().transpose();
  a.diagonal().array() += lambda;
  const EMatrix b = (v1.map() - w_down.map() * k1.map()) * k1.map().transpose();
  // Delta = B A^-1  =>  Delta^T = A^-1 B^T
  Matrix a_m = Matrix::from(0.5 * (a + a.transpose()));
  Matrix bt = Matrix::from(b.transpose());
  return Matrix::from(solve_spd(a_m, bt).map().transpose());
}

Matrix residual_matrix(const MoELayer& layer, const EditBatch& batch) {
  require(!batch.facts.empty(), errc::invalid_argument, "batch has no facts");
  Matrix r(layer.d_model, batch.facts.size());
  for (std::size_t t = 0; t < batch.facts.size(); ++t) {
    const EVector rt = compute_residual(layer, batch.facts[t]);
    for (std::size_t i = 0; i < layer.d_model; ++i) r(i, t) = rt[static_cast<Eigen::Index>(i)];
  }
  return r;
}

Matrix design_matrix(const MoELayer& layer, const EditBatch& batch,
                     const NullSpaceProjectorSet* projectors) {
  require(!batch.facts.empty(), errc::invalid_argument, "batch has no facts");
  Matrix psi(layer.experts * layer.d_hidden, batch.facts.size());
  for (std::size_t t = 0; t < batch.facts.size(); ++t) {
    const EVector col = build_design_vector(layer, batch.facts[t], projectors);
    for (std::size_t i = 0; i < layer.experts * layer.d_hidden; ++i)
      psi(i, t) = col[static_cast<Eigen::Index>(i)];
  }
  return psi;
}

LayerDelta solve_global_oracle_with(const Matrix& psi, const Matrix& residuals,
                                    std::size_t experts, double lambda) {
  check_design(psi, residuals, experts);
  require(lambda > 0.0, errc::invalid_argument, "lambda must be positive");
  const std::size_t n = psi.rows();
  require(n <= 512, errc::size_guard,
          "global oracle guard: E*d_hidden must not exceed 512 (got " + std::to_string(n) + ")");
  const std::size_t d_hidden = n / experts;

  LayerDelta out;
  out.provenance.solver = to_string(SolverKind::global_oracle);
  out.provenance.lambda = lambda;
  out.provenance.facts = psi.cols();
  out.provenance.experts = experts;
  out.provenance.d_hidden = d_hidden;

  auto t0 = Clock::now();
  EMatrix big = psi.map() * psi.map().transpose();
  big.diagonal().array() += lambda;
  out.provenance.timings.kernel_ns = elapsed_ns(t0);

  // The large-side inverse, deliberately without push-through.
  t0 = Clock::now();
  Matrix big_m = Matrix::from(0.5 * (big + big.transpose()));
  const Matrix x = solve_spd(big_m, psi);  // (Psi Psi^T + lambda I)^-1 Psi
  out.provenance.timings.factor_ns = elapsed_ns(t0);

  t0 = Clock::now();
  const EMatrix flat = residuals.map() * x.map().transpose();
  out.delta = split_slabs(flat, experts, d_hidden);
  out.provenance.timings.assemble_ns = elapsed_ns(t0);
  return out;
}

LayerDelta solve_woodbury_with(const Matrix& psi, const Matrix& residuals, std::size_t experts,
                               double lambda) {
  check_design(psi, residuals, experts);
  require(lambda > 0.0, errc::invalid_argument, "lambda must be positive");
  const std::size_t d_hidden = psi.rows() / experts;

  LayerDelta out;
  out.provenance.solver = to_string(SolverKind::woodbury);
  out.provenance.lambda = lambda;
  out.provenance.facts = psi.cols();
  out.provenance.experts = experts;
  out.provenance.d_hidden = d_hidden;

  auto t0 = Clock::now();
  EMatrix kernel = psi.map().transpose() * psi.map();
  kernel.diagonal().array() += lambda;
  out.provenance.timings.kernel_ns = elapsed_ns(t0);

  t0 = Clock::now();
  Matrix kernel_m = Matrix::from(0.5 * (kernel + kernel.transpose()));
  Matrix rt = Matrix::from(residuals.map().transpose());
  const Matrix s = solve_spd(kernel_m, rt);  // (Psi^T Psi + lambda I)^-1 R^T
  out.provenance.timings.factor_ns = elapsed_ns(t0);

  t0 = Clock::now();
  const EMatrix flat = s.map().transpose() * psi.map().transpose();
  out.delta = split_slabs(flat, experts, d_hidden);
  out.provenance.timings.assemble_ns = elapsed_ns(t0);
  return out;
}

LayerDelta solve_bcd_with(const Matrix& psi, const Matrix& residuals, std::size_t experts,
                          double lambda, std::size_t iterations,
                          std::vector<double>* objective_trace) {
  check_design(psi, residuals, experts);
  require(lambda > 0.0, errc::invalid_argument, "lambda must be positive");
  require(iterations >= 1, errc::invalid_argument, "bcd needs at least one sweep");
  const std::size_t d_hidden = psi.rows() / experts;
  const std::size_t d_model = residuals.rows();
  const std::size_t facts = psi.cols();

  LayerDelta out;
  out.provenance.solver = to_string(SolverKind::bcd);
  out.provenance.lambda = lambda;
  out.provenance.facts = facts;
  out.provenance.experts = experts;
  out.provenance.d_hidden = d_hidden;

  auto t0 = Clock::now();
  // Per-expert design blocks: a_{f,j} = g_{f,j} k~_{f,j}.
  std::vector<EMatrix> blocks(experts);
  for (std::size_t j = 0; j < experts; ++j)
    blocks[j] = psi.map().middleRows(static_cast<Eigen::Index>(j * d_hidden),
                                     static_cast<Eigen::Index>(d_hidden));
  out.provenance.timings.design_ns = elapsed_ns(t0);

  std::vector<EMatrix> deltas(experts,
                              EMatrix::Zero(static_cast<Eigen::Index>(d_model),
                                            static_cast<Eigen::Index>(d_hidden)));
  EMatrix contrib = EMatrix::Zero(static_cast<Eigen::Index>(d_model),
                                  static_cast<Eigen::Index>(facts));
  double ridge = 0.0;

  auto record = [&] {
    if (!objective_trace) return;
    const double memo = (contrib - residuals.map()).squaredNorm();
    objective_trace->push_back(memo + lambda * ridge);
  };
  if (objective_trace) objective_trace->clear();
  record();

  t0 = Clock::now();
  for (std::size_t sweep = 0; sweep < iterations; ++sweep) {
    for (std::size_t j = 0; j < experts; ++j) {
      const EMatrix& kj = blocks[j];
      if (kj.isZero(0.0)) {
        // No fact touches this expert; the exact block minimum is zero.
        ridge -= deltas[j].squaredNorm();
        contrib -= deltas[j] * kj;
        deltas[j].setZero();
        record();
        continue;
      }
      // Residual net of the other experts' current contributions.
      const EMatrix net = residuals.map() - (contrib - deltas[j] * kj);
      EMatrix a = kj * kj.transpose();
      a.diagonal().array() += lambda;
      Matrix a_m = Matrix::from(0.5 * (a + a.transpose()));
      Matrix rhs = Matrix::from(kj * net.transpose());
      const EMatrix fresh = solve_spd(a_m, rhs).map().transpose();

      contrib += (fresh - deltas[j]) * kj;
      ridge += fresh.squaredNorm() - deltas[j].squaredNorm();
      deltas[j] = fresh;
      record();
    }
  }
  out.provenance.timings.factor_ns = elapsed_ns(t0);

  t0 = Clock::now();
  out.delta = Tensor3(experts, d_model, d_hidden);
  for (std::size_t j = 0; j < experts; ++j) out.delta.slab(j) = deltas[j];
  out.provenance.timings.assemble_ns = elapsed_ns(t0);
  return out;
}

CompressedBatch compress_with(const Matrix& psi, const Matrix& residuals,
                              const TuckerFactors& factors, std::size_t experts,
                              std::uint64_t* design_ns) {
  check_design(psi, residuals, experts);
  require(factors.u_e.rows() == experts, errc::dimension_mismatch,
          "compress: U_e rows must equal E");
  const std::size_t d_hidden = psi.rows() / experts;
  require(factors.u_in.rows() == d_hidden, errc::dimension_mismatch,
          "compress: U_in rows must equal d_hidden");
  require(factors.u_out.rows() == residuals.rows(), errc::dimension_mismatch,
          "compress: U_out rows must equal d_model");
  const std::size_t facts = psi.cols();
  const Ranks& rk = factors.ranks;

  const auto t0 = Clock::now();
  CompressedBatch c;
  c.ranks = rk;
  c.phi = Matrix(facts, rk.r_e * rk.r_in);
  c.rtilde = Matrix(facts, rk.r_out);

  // Compressed per-expert keys: rows j*r_in..(j+1)*r_in of (I_E (x) U_in^T) Psi.
  EMatrix cpsi(static_cast<Eigen::Index>(experts * rk.r_in), static_cast<Eigen::Index>(facts));
  for (std::size_t j = 0; j < experts; ++j)
    cpsi.middleRows(static_cast<Eigen::Index>(j * rk.r_in),
                    static_cast<Eigen::Index>(rk.r_in)) =
        factors.u_in.map().transpose() *
        psi.map().middleRows(static_cast<Eigen::Index>(j * d_hidden),
                             static_cast<Eigen::Index>(d_hidden));

  for (std::size_t t = 0; t < facts; ++t) {
    for (std::size_t a = 0; a < rk.r_e; ++a) {
      EVector phi_ta = EVector::Zero(static_cast<Eigen::Index>(rk.r_in));
      for (std::size_t j = 0; j < experts; ++j)
        phi_ta += factors.u_e(j, a) *
                  cpsi.col(static_cast<Eigen::Index>(t))
                      .segment(static_cast<Eigen::Index>(j * rk.r_in),
                               static_cast<Eigen::Index>(rk.r_in));
      for (std::size_t i = 0; i < rk.r_in; ++i)
        c.phi(t, a * rk.r_in + i) = phi_ta[static_cast<Eigen::Index>(i)];
    }
    const EVector rt = factors.u_out.map().transpose() * residuals.col(t);
    for (std::size_t o = 0; o < rk.r_out; ++o)
      c.rtilde(t, o) = rt[static_cast<Eigen::Index>(o)];
  }
  if (design_ns) *design_ns += elapsed_ns(t0);
  return c;
}

CoreTensor solve_tucker_core(const CompressedBatch& compressed, double lambda, CoreSide side,
                             PhaseTimings* timings) {
  require(lambda > 0.0, errc::invalid_argument, "lambda must be positive");
  const std::size_t facts = compressed.phi.rows();
  const std::size_t p = compressed.phi.cols();
  require(compressed.rtilde.rows() == facts, errc::dimension_mismatch,
          "compressed batch row counts differ");
  if (side == CoreSide::automatic) side = facts <= p ? CoreSide::sample : CoreSide::feature;

  Matrix flat;
  if (side == CoreSide::sample) {
    // G = R~^T (Phi Phi^T + lambda I_T)^-1 Phi
    auto t0 = Clock::now();
    EMatrix kernel = compressed.phi.map() * compressed.phi.map().transpose();
    kernel.diagonal().array() += lambda;
    Matrix kernel_m = Matrix::from(0.5 * (kernel + kernel.transpose()));
    if (timings) timings->kernel_ns += elapsed_ns(t0);
    t0 = Clock::now();
    const Matrix s = solve_spd(kernel_m, compressed.rtilde);
    flat = Matrix::from(s.map().transpose() * compressed.phi.map());
    if (timings) timings->factor_ns += elapsed_ns(t0);
  } else {
    // G = R~^T Phi (Phi^T Phi + lambda I_p)^-1
    auto t0 = Clock::now();
    EMatrix kernel = compressed.phi.map().transpose() * compressed.phi.map();
    kernel.diagonal().array() += lambda;
    Matrix kernel_m = Matrix::from(0.5 * (kernel + kernel.transpose()));
    if (timings) timings->kernel_ns += elapsed_ns(t0);
    t0 = Clock::now();
    Matrix rhs = Matrix::from(compressed.phi.map().transpose() * compressed.rtilde.map());
    flat = Matrix::from(solve_spd(kernel_m, rhs).map().transpose());
    if (timings) timings->factor_ns += elapsed_ns(t0);
  }
  return core_from_flat(flat, compressed.ranks);
}

LayerDelta reconstruct_delta(const CoreTensor& core, const TuckerFactors& factors,
                             const NullSpaceProjectorSet& projectors) {
  const Ranks& rk = factors.ranks;
  require(core.g.dims() == std::array<std::size_t, 3>{rk.r_e, rk.r_out, rk.r_in},
          errc::dimension_mismatch, "core dims do not match factor ranks");
  const std::size_t experts = factors.u_e.rows();
  require(projectors.projectors.size() == experts, errc::dimension_mismatch,
          "projector set does not cover all experts");
  const std::size_t d_model = factors.u_out.rows();
  const std::size_t d_hidden = factors.u_in.rows();

  LayerDelta out;
  out.provenance.solver = to_string(SolverKind::tucker);
  out.provenance.facts = 0;
  out.provenance.experts = experts;
  out.provenance.d_hidden = d_hidden;
  out.provenance.ranks = rk;

  const auto t0 = Clock::now();
  out.delta = Tensor3(experts, d_model, d_hidden);
  for (std::size_t j = 0; j < experts; ++j) {
    EMatrix mix = EMatrix::Zero(static_cast<Eigen::Index>(rk.r_out),
                                static_cast<Eigen::Index>(rk.r_in));
    for (std::size_t a = 0; a < rk.r_e; ++a) mix += factors.u_e(j, a) * core.g.slab(a);
    out.delta.slab(j) = factors.u_out.map() * mix * factors.u_in.map().transpose() *
                        projectors.projectors[j].map();
  }
  out.provenance.timings.assemble_ns = elapsed_ns(t0);
  return out;
}

LayerDelta solve_global_oracle(const EditBatch& batch, const MoELayer& layer,
                               const NullSpaceProjectorSet& projectors, double lambda) {
  auto t0 = Clock::now();
  const Matrix psi = design_matrix(layer, batch, &projectors);
  const Matrix r = residual_matrix(layer, batch);
  const std::uint64_t design_ns = elapsed_ns(t0);
  LayerDelta out = solve_global_oracle_with(psi, r, layer.experts, lambda);
  out.provenance.timings.design_ns = design_ns;
  return out;
}

LayerDelta solve_woodbury(const EditBatch& batch, const MoELayer& layer,
                          const NullSpaceProjectorSet& projectors, double lambda) {
  auto t0 = Clock::now();
  const Matrix psi = design_matrix(layer, batch, &projectors);
  const Matrix r = residual_matrix(layer, batch);
  const std::uint64_t design_ns = elapsed_ns(t0);
  LayerDelta out = solve_woodbury_with(psi, r, layer.experts, lambda);
  out.provenance.timings.design_ns = design_ns;
  return out;
}

LayerDelta solve_bcd(const EditBatch& batch, const MoELayer& layer,
                     const NullSpaceProjectorSet& projectors, double lambda,
                     std::size_t iterations, std::vector<double>* objective_trace) {
  auto t0 = Clock::now();
  const Matrix psi = design_matrix(layer, batch, &projectors);
  const Matrix r = residual_matrix(layer, batch);
  const std::uint64_t design_ns = elapsed_ns(t0);
  LayerDelta out = solve_bcd_with(psi, r, layer.experts, lambda, iterations, objective_trace);
  out.provenance.timings.design_ns += design_ns;
  return out;
}

CompressedBatch compress_batch(const EditBatch& batch, const MoELayer& layer,
                               const TuckerFactors& factors,
                               const NullSpaceProjectorSet& projectors) {
  const Matrix psi = design_matrix(layer, batch, &projectors);
  const Matrix r = residual_matrix(layer, batch);
  return compress_with(psi, r, factors, layer.experts);
}

double objective_value(const EditBatch& batch, const MoELayer& layer, const Tensor3& delta,
                       const NullSpaceProjectorSet& projectors, double lambda,
                       const PreservationSet* pres) {
  require(delta.dims() == std::array<std::size_t, 3>{layer.experts, layer.d_model,
                                                     layer.d_hidden},
          errc::dimension_mismatch, "objective_value: delta dims do not match layer");
  require(projectors.projectors.size() == layer.experts, errc::dimension_mismatch,
          "objective_value: projector set does not cover all experts");

  double memo = 0.0;
  for (const Fact& fact : batch.facts) {
    const EVector r = compute_residual(layer, fact);
    EVector fit = EVector::Zero(static_cast<Eigen::Index>(layer.d_model));
    for (std::size_t j : fact.gating.selected) {
      const EVector k = projectors.projectors[j].map() * fact.keys.row(j);
      fit += fact.gating.weights[static_cast<Eigen::Index>(j)] * (delta.slab(j) * k);
    }
    memo += (fit - r).squaredNorm();
  }

  double preserve = 0.0;
  if (pres) {
    require(pres->expert_count() == layer.experts, errc::dimension_mismatch,
            "objective_value: preservation set does not cover all experts");
    for (std::size_t j = 0; j < layer.experts; ++j) {
      const Matrix& keys = pres->keys[j];
      if (keys.cols() == 0) continue;
      preserve +=
          (delta.slab(j) * (projectors.projectors[j].map() * keys.map())).squaredNorm();
    }
  }

  double ridge = 0.0;
  for (std::size_t j = 0; j < layer.experts; ++j) ridge += delta.slab(j).squaredNorm();

  return memo + preserve + lambda * ridge;
}

}  // namespace mote
