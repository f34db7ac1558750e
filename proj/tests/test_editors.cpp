// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "mote/editors.hpp"
#include "mote/linalg.hpp"
#include "test_util.hpp"

using namespace mote;
using namespace mote::test;

namespace {

// Dense single-memory objective used by the perturbation oracle.
double dense_objective(const Matrix& w, const Matrix& delta, const Matrix& k1, const Matrix& v1,
                       const Matrix& k0, double lambda) {
  const EMatrix fit = (w.map() + delta.map()) * k1.map() - v1.map();
  double obj = fit.squaredNorm() + lambda * delta.map().squaredNorm();
  if (k0.cols() > 0) obj += (delta.map() * k0.map()).squaredNorm();
  return obj;
}

PreservationSet empty_preservation(std::size_t experts, std::size_t d_hidden) {
  PreservationSet pres;
  pres.keys.assign(experts, Matrix(d_hidden, 0));
  return pres;
}

Tensor3 random_direction_like(Rng& rng, const Tensor3& t) {
  Tensor3 d = rng.normal_tensor(t.d1(), t.d2(), t.d3());
  const double n = d.frobenius_norm();
  for (double& x : d.data()) x /= n;
  return d;
}

Tensor3 add_scaled(const Tensor3& a, const Tensor3& b, double c) {
  Tensor3 out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += c * b.data()[i];
  return out;
}

}  // namespace

TEST_CASE("build_projectors returns identities for an empty preservation set") {
  const auto set = build_projectors(empty_preservation(3, 4), 0.02);
  REQUIRE(set.projectors.size() == 3);
  for (const Matrix& p : set.projectors) CHECK(p == Matrix::identity(4));
}

TEST_CASE("build_projectors annihilates everything when keys span the space evenly") {
  PreservationSet pres;
  pres.keys.push_back(Matrix::identity(4));  // four keys along the axes, equal energy
  const auto set = build_projectors(pres, 0.02);
  CHECK(set.projectors[0].frobenius_norm() == 0.0);
}

TEST_CASE("build_projectors projects onto the complement of a 2-D preserved subspace") {
  // Keys confined to span(e1, e2) inside R^4.
  Matrix keys(4, 4);
  keys(0, 0) = 1.0;
  keys(1, 1) = 1.0;
  keys(0, 2) = 1.0;
  keys(1, 2) = 1.0;
  keys(0, 3) = 1.0;
  keys(1, 3) = -1.0;
  PreservationSet pres;
  pres.keys.push_back(keys);
  const auto set = build_projectors(pres, 0.02);
  const Matrix& p = set.projectors[0];

  for (std::size_t c = 0; c < 4; ++c) CHECK((p.map() * keys.col(c)).norm() <= 1e-8);
  EVector e3 = EVector::Zero(4);
  e3[2] = 1.0;
  EVector e4 = EVector::Zero(4);
  e4[3] = 1.0;
  CHECK((p.map() * e3 - e3).norm() <= 1e-8);
  CHECK((p.map() * e4 - e4).norm() <= 1e-8);
}

TEST_CASE("projectors are symmetric and idempotent with 0/1 eigenvalues") {
  Rng rng(211);
  const MoELayer layer = make_random_layer(4, 2, 6, 5, rng.next_u64());
  const PreservationSet pres = sample_preservation(layer, 25, 5);
  const auto set = build_projectors(pres, 0.02);
  for (const Matrix& p : set.projectors) {
    CHECK((p.map() - p.map().transpose()).norm() <= 1e-8);
    CHECK((p.map() * p.map() - p.map()).norm() <= 1e-8);
    Eigen::SelfAdjointEigenSolver<EMatrix> es(p.map());
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
      const double ev = es.eigenvalues()[i];
      CHECK(std::min(std::abs(ev), std::abs(ev - 1.0)) <= 1e-8);
    }
  }
}

TEST_CASE("build_projectors validates the threshold") {
  CHECK_THROWS_AS(build_projectors(empty_preservation(1, 2), 0.0), Error);
  CHECK_THROWS_AS(build_projectors(empty_preservation(1, 2), 1.0), Error);
}

TEST_CASE("solve_dense_memit returns zero when nothing needs editing") {
  Rng rng(221);
  const Matrix w = rng.normal_matrix(5, 4);
  const Matrix k1 = rng.normal_matrix(4, 3);
  const Matrix v1 = Matrix::from(w.map() * k1.map());
  const Matrix delta = solve_dense_memit(w, k1, v1, Matrix(4, 0), 0.5);
  CHECK(delta.frobenius_norm() <= 1e-12 * w.frobenius_norm());
}

TEST_CASE("solve_dense_memit approaches the rank-one write as lambda vanishes") {
  Rng rng(223);
  const Matrix w = rng.normal_matrix(5, 4);
  Matrix k1(4, 1);
  k1(0, 0) = 1.0;  // key e1
  const Matrix v1 = rng.normal_matrix(5, 1);
  const Matrix delta = solve_dense_memit(w, k1, v1, Matrix(4, 0), 1e-8);
  const EMatrix want = (v1.map() - w.map() * k1.map()) * k1.map().transpose();
  CHECK((delta.map() - want).norm() <= 1e-6 * want.norm());
}

TEST_CASE("solve_dense_memit is a local minimum of the dense objective") {
  Rng rng(227);
  const Matrix w = rng.normal_matrix(4, 6);
  const Matrix k1 = rng.normal_matrix(6, 3);
  const Matrix v1 = rng.normal_matrix(4, 3);
  const Matrix k0 = rng.normal_matrix(6, 8);
  const double lambda = 0.3;
  const Matrix delta = solve_dense_memit(w, k1, v1, k0, lambda);
  const double base = dense_objective(w, delta, k1, v1, k0, lambda);
  const double eps = 1e-3 * std::max(delta.frobenius_norm(), 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix dir = rng.normal_matrix(4, 6);
    dir.map() *= eps / dir.frobenius_norm();
    const Matrix perturbed = Matrix::from(delta.map() + dir.map());
    CHECK(dense_objective(w, perturbed, k1, v1, k0, lambda) >= base - 1e-12);
  }
}

TEST_CASE("global oracle returns zero for zero residuals") {
  Rng rng(229);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 4, 7, 0.0);
  const auto id = NullSpaceProjectorSet::identity(3, 4);
  const LayerDelta d = solve_global_oracle(batch, layer, id, 1.0);
  CHECK(d.delta.frobenius_norm() <= 1e-12);
}

TEST_CASE("global oracle matches the hand-computed single-fact solution") {
  // One fact, one active expert with a unit key, lambda = 1:
  // the active slab is r k^T / (|k|^2 + 1) = r/2 k^T.
  MoELayer layer;
  layer.experts = 2;
  layer.top_k = 1;
  layer.d_model = 3;
  layer.d_hidden = 4;
  layer.activation = Activation::identity;
  layer.expert_embeddings = Matrix(2, 3);
  layer.gate_w = Tensor3(2, 4, 3);
  layer.up_w = Tensor3(2, 4, 3);
  layer.down_w = Tensor3(2, 3, 4);

  Fact fact;
  fact.x = EVector::Zero(3);
  fact.target_v = EVector::Zero(3);
  fact.target_v[1] = 2.0;  // residual r = (0, 2, 0) since W = 0
  fact.gating.selected = {0};
  fact.gating.weights = EVector::Zero(2);
  fact.gating.weights[0] = 1.0;
  fact.keys = Matrix(2, 4);
  fact.keys(0, 1) = 1.0;  // unit key e2
  EditBatch batch;
  batch.facts.push_back(fact);

  const auto id = NullSpaceProjectorSet::identity(2, 4);
  const LayerDelta d = solve_global_oracle(batch, layer, id, 1.0);
  CHECK(d.delta(0, 1, 1) == doctest::Approx(1.0).epsilon(1e-12));  // 2/2
  double total_abs = 0.0;
  for (std::size_t i = 0; i < d.delta.size(); ++i) total_abs += std::abs(d.delta.data()[i]);
  CHECK(total_abs == doctest::Approx(1.0).epsilon(1e-12));  // only that one entry
}

TEST_CASE("global oracle minimizes the projected-key objective") {
  Rng rng(233);
  const MoELayer layer = make_random_layer(4, 2, 6, 8, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 5, 11, 1.0);
  const PreservationSet pres = sample_preservation(layer, 30, 13);
  const auto projectors = build_projectors(pres, 0.02);
  const double lambda = 0.5;
  const LayerDelta d = solve_global_oracle(batch, layer, projectors, lambda);
  const double base = objective_value(batch, layer, d.delta, projectors, lambda);
  const double eps = 1e-3 * std::max(d.delta.frobenius_norm(), 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor3 dir = random_direction_like(rng, d.delta);
    const Tensor3 perturbed = add_scaled(d.delta, dir, eps);
    CHECK(objective_value(batch, layer, perturbed, projectors, lambda) >= base - 1e-12);
  }
}

TEST_CASE("global oracle enforces its size guard") {
  Rng rng(239);
  const MoELayer layer = make_random_layer(9, 2, 4, 60, rng.next_u64());  // 540 > 512
  const EditBatch batch = synthesize_batch(layer, 2, 3, 1.0);
  const auto id = NullSpaceProjectorSet::identity(9, 60);
  CHECK_THROWS_AS(solve_global_oracle(batch, layer, id, 1.0), Error);
  try {
    solve_global_oracle(batch, layer, id, 1.0);
  } catch (const Error& e) {
    CHECK(e.code() == errc::size_guard);
  }
}

TEST_CASE("woodbury solve equals the global oracle") {
  Rng rng(241);
  const double lambdas[] = {1e-3, 0.1, 1.0, 10.0};
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t experts = 1 + static_cast<std::size_t>(rng.uniform() * 5);
    const std::size_t d_hidden = 3 + static_cast<std::size_t>(rng.uniform() * 8);
    const std::size_t top_k =
        1 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(experts - 1));
    const MoELayer layer = make_random_layer(experts, top_k, 6, d_hidden, rng.next_u64());
    const EditBatch batch = synthesize_batch(layer, 1 + trial % 7, rng.next_u64(), 1.0);
    NullSpaceProjectorSet projectors = NullSpaceProjectorSet::identity(experts, d_hidden);
    if (trial % 2 == 1)
      projectors =
          build_projectors(sample_preservation(layer, 4 * d_hidden, rng.next_u64()), 0.02);
    const double lambda = lambdas[trial % 4];
    const LayerDelta oracle = solve_global_oracle(batch, layer, projectors, lambda);
    const LayerDelta fast = solve_woodbury(batch, layer, projectors, lambda);
    double num = 0.0;
    for (std::size_t i = 0; i < oracle.delta.size(); ++i) {
      const double d = oracle.delta.data()[i] - fast.delta.data()[i];
      num += d * d;
    }
    CHECK(std::sqrt(num) <= 1e-9 * oracle.delta.frobenius_norm());
  }
}

TEST_CASE("woodbury returns zero for zero residuals") {
  Rng rng(251);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 4, 7, 0.0);
  const auto id = NullSpaceProjectorSet::identity(3, 4);
  CHECK(solve_woodbury(batch, layer, id, 1.0).delta.frobenius_norm() <= 1e-12);
}

TEST_CASE("woodbury handles duplicated facts as a doubled-weight single fact") {
  Rng rng(257);
  const std::size_t n = 8;
  Matrix psi(n, 2);
  Matrix residuals(3, 2);
  const EVector v = rng.normal_vector(n);
  const EVector r = rng.normal_vector(3);
  for (std::size_t i = 0; i < n; ++i) psi(i, 0) = psi(i, 1) = v[static_cast<Eigen::Index>(i)];
  for (std::size_t i = 0; i < 3; ++i)
    residuals(i, 0) = residuals(i, 1) = r[static_cast<Eigen::Index>(i)];
  const double lambda = 0.25;
  const LayerDelta d = solve_woodbury_with(psi, residuals, 2, lambda);
  REQUIRE(d.delta.all_finite());
  // Closed form for the duplicated pair: 2 r v^T / (2 |v|^2 + lambda).
  const double scale = 2.0 / (2.0 * v.squaredNorm() + lambda);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 4; ++b)
        CHECK(d.delta(j, a, b) ==
              doctest::Approx(scale * r[static_cast<Eigen::Index>(a)] *
                              v[static_cast<Eigen::Index>(j * 4 + b)])
                  .epsilon(1e-10));
}

TEST_CASE("bcd with a single expert reproduces the woodbury solution in one sweep") {
  Rng rng(263);
  const MoELayer layer = make_random_layer(1, 1, 5, 6, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 4, 3, 1.0);
  const auto id = NullSpaceProjectorSet::identity(1, 6);
  const LayerDelta bcd = solve_bcd(batch, layer, id, 0.5, 1);
  const LayerDelta wood = solve_woodbury(batch, layer, id, 0.5);
  double num = 0.0;
  for (std::size_t i = 0; i < bcd.delta.size(); ++i) {
    const double d = bcd.delta.data()[i] - wood.delta.data()[i];
    num += d * d;
  }
  CHECK(std::sqrt(num) <= 1e-10 * wood.delta.frobenius_norm());
}

TEST_CASE("bcd converges in one sweep when expert activations are disjoint") {
  Rng rng(269);
  // K = 1: every fact touches exactly one expert, so blocks decouple.
  const MoELayer layer = make_random_layer(3, 1, 5, 4, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 9, 31, 1.0);
  const auto id = NullSpaceProjectorSet::identity(3, 4);
  const LayerDelta bcd = solve_bcd(batch, layer, id, 0.5, 1);
  const LayerDelta global = solve_global_oracle(batch, layer, id, 0.5);
  double num = 0.0;
  for (std::size_t i = 0; i < bcd.delta.size(); ++i) {
    const double d = bcd.delta.data()[i] - global.delta.data()[i];
    num += d * d;
  }
  CHECK(std::sqrt(num) <= 1e-9 * global.delta.frobenius_norm());
}

TEST_CASE("bcd objective is non-increasing at every block update") {
  Rng rng(271);
  const MoELayer layer = make_random_layer(4, 3, 6, 5, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 7, 41, 1.0);
  const auto id = NullSpaceProjectorSet::identity(4, 5);
  std::vector<double> trace;
  const LayerDelta d = solve_bcd(batch, layer, id, 0.5, 4, &trace);
  REQUIRE(trace.size() == 1 + 4 * 4);
  for (std::size_t i = 1; i < trace.size(); ++i)
    CHECK(trace[i] <= trace[i - 1] + 1e-10 * (1.0 + trace[0]));

  // The trace endpoint is the diagnostic objective of the returned delta.
  const double obj = objective_value(batch, layer, d.delta, id, 0.5);
  CHECK(obj == doctest::Approx(trace.back()).epsilon(1e-10));

  // Approximate descent never beats the exact minimizer.
  const LayerDelta global = solve_global_oracle(batch, layer, id, 0.5);
  const double best = objective_value(batch, layer, global.delta, id, 0.5);
  CHECK(trace.back() >= best - 1e-10 * (1.0 + best));
}

TEST_CASE("compress with identity factors reorders the gate-weighted keys") {
  Rng rng(277);
  const MoELayer layer = make_random_layer(3, 2, 4, 5, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 4, 9, 1.0);
  const auto id = NullSpaceProjectorSet::identity(3, 5);
  TuckerFactors f;
  f.ranks = {3, 4, 5};
  f.u_e = Matrix::identity(3);
  f.u_out = Matrix::identity(4);
  f.u_in = Matrix::identity(5);
  const CompressedBatch c = compress_batch(batch, layer, f, id);
  const Matrix psi = design_matrix(layer, batch, &id);
  const Matrix r = residual_matrix(layer, batch);
  REQUIRE(c.phi.rows() == 4);
  REQUIRE(c.phi.cols() == 15);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t i = 0; i < 15; ++i)
      CHECK(c.phi(t, i) == doctest::Approx(psi(i, t)).epsilon(1e-14));
    for (std::size_t o = 0; o < 4; ++o)
      CHECK(c.rtilde(t, o) == doctest::Approx(r(o, t)).epsilon(1e-14));
  }
}

TEST_CASE("residuals orthogonal to the output factor compress to zero") {
  Matrix psi(4, 1);
  psi(0, 0) = 1.0;
  Matrix residuals(3, 1);
  residuals(1, 0) = 5.0;  // along e2
  TuckerFactors f;
  f.ranks = {2, 1, 2};
  f.u_e = Matrix(2, 2);
  f.u_e(0, 0) = 1.0;
  f.u_e(1, 1) = 1.0;
  f.u_out = Matrix(3, 1);
  f.u_out(0, 0) = 1.0;  // range = span(e1), orthogonal to the residual
  f.u_in = Matrix(2, 2);
  f.u_in(0, 0) = 1.0;
  f.u_in(1, 1) = 1.0;
  const CompressedBatch c = compress_with(psi, residuals, f, 2);
  CHECK(c.rtilde.frobenius_norm() == 0.0);
}

TEST_CASE("compressed keys match the explicit double-loop aggregate") {
  Rng rng(281);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 3, 21, 1.0);
  const PreservationSet pres = sample_preservation(layer, 20, 23);
  const auto projectors = build_projectors(pres, 0.02);
  const TuckerFactors f = hosvd(layer.down_tensor(), {2, 3, 2}, WhiteningConfig{});
  const CompressedBatch c = compress_batch(batch, layer, f, projectors);
  for (std::size_t t = 0; t < 3; ++t) {
    const Fact& fact = batch.facts[t];
    for (std::size_t a = 0; a < 2; ++a) {
      EVector phi_ta = EVector::Zero(2);
      for (std::size_t j = 0; j < 3; ++j) {
        const EVector projected = projectors.projectors[j].map() * fact.keys.row(j);
        phi_ta += fact.gating.weights[static_cast<Eigen::Index>(j)] * f.u_e(j, a) *
                  (f.u_in.map().transpose() * projected);
      }
      for (std::size_t i = 0; i < 2; ++i)
        CHECK(c.phi(t, a * 2 + i) ==
              doctest::Approx(phi_ta[static_cast<Eigen::Index>(i)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("tucker core solve handles zero residuals and the rank-one case") {
  Rng rng(283);
  CompressedBatch c;
  c.ranks = {2, 3, 2};
  c.phi = rng.normal_matrix(5, 4);
  c.rtilde = Matrix(5, 3);
  CHECK(solve_tucker_core(c, 0.5).flat.frobenius_norm() == 0.0);

  CompressedBatch single;
  single.ranks = {1, 2, 3};
  single.phi = rng.normal_matrix(1, 3);
  single.rtilde = rng.normal_matrix(1, 2);
  const double lambda = 0.7;
  const CoreTensor core = solve_tucker_core(single, lambda);
  const double denom = single.phi.map().squaredNorm() + lambda;
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(core.flat(o, i) ==
            doctest::Approx(single.rtilde(0, o) * single.phi(0, i) / denom).epsilon(1e-12));
}

TEST_CASE("both core solve sides agree and match the normal equations") {
  Rng rng(293);
  CompressedBatch c;
  c.ranks = {3, 4, 4};  // p = 12
  c.phi = rng.normal_matrix(6, 12);
  c.rtilde = rng.normal_matrix(6, 4);
  const double lambda = 0.3;
  const CoreTensor a = solve_tucker_core(c, lambda, CoreSide::sample);
  const CoreTensor b = solve_tucker_core(c, lambda, CoreSide::feature);
  CHECK((a.flat.map() - b.flat.map()).norm() <= 1e-10 * std::max(a.flat.frobenius_norm(), 1.0));

  // Independent route: explicit inverse via partial-pivot LU.
  EMatrix normal = c.phi.map().transpose() * c.phi.map();
  normal.diagonal().array() += lambda;
  const EMatrix want = c.rtilde.map().transpose() * c.phi.map() * normal.inverse();
  CHECK((a.flat.map() - want).norm() <= 1e-9 * std::max(want.norm(), 1.0));
}

TEST_CASE("reconstruct_delta of a zero core is zero") {
  Rng rng(307);
  const MoELayer layer = make_random_layer(3, 2, 4, 5, rng.next_u64());
  const TuckerFactors f = hosvd(layer.down_tensor(), {2, 2, 3}, WhiteningConfig{});
  CoreTensor core = core_from_flat(Matrix(2, 6), f.ranks);
  const auto id = NullSpaceProjectorSet::identity(3, 5);
  CHECK(reconstruct_delta(core, f, id).delta.frobenius_norm() == 0.0);
}

TEST_CASE("a shared expert direction gives every expert the same scaled update") {
  Rng rng(311);
  const std::size_t experts = 4;
  const TuckerFactors basis = hosvd(rng.normal_tensor(2, 3, 4), {1, 3, 4}, WhiteningConfig{});
  TuckerFactors f;
  f.ranks = {1, 3, 4};
  f.u_e = Matrix(experts, 1);
  for (std::size_t j = 0; j < experts; ++j) f.u_e(j, 0) = 0.5;  // ones / sqrt(E)
  f.u_out = basis.u_out;
  f.u_in = basis.u_in;
  CoreTensor core = core_from_tensor(rng.normal_tensor(1, 3, 4));
  const auto id = NullSpaceProjectorSet::identity(experts, 4);
  const LayerDelta d = reconstruct_delta(core, f, id);
  for (std::size_t j = 1; j < experts; ++j)
    CHECK((d.delta.slab(j) - d.delta.slab(0)).norm() <= 1e-14);
  const EMatrix expected = 0.5 * f.u_out.map() * core.g.slab(0) * f.u_in.map().transpose();
  CHECK((d.delta.slab(0) - expected).norm() <= 1e-13 * expected.norm());
}

TEST_CASE("reconstruct_delta matches the explicit sum-of-slices oracle") {
  Rng rng(313);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const PreservationSet pres = sample_preservation(layer, 16, 29);
  const auto projectors = build_projectors(pres, 0.02);
  const TuckerFactors f = hosvd(layer.down_tensor(), {2, 3, 2}, WhiteningConfig{});
  const CoreTensor core = core_from_tensor(rng.normal_tensor(2, 3, 2));
  const LayerDelta d = reconstruct_delta(core, f, projectors);
  for (std::size_t j = 0; j < 3; ++j) {
    EMatrix mix = EMatrix::Zero(3, 2);
    for (std::size_t a = 0; a < 2; ++a) mix += f.u_e(j, a) * core.g.slab(a);
    const EMatrix want =
        f.u_out.map() * mix * f.u_in.map().transpose() * projectors.projectors[j].map();
    CHECK((d.delta.slab(j) - want).norm() <= 1e-12 * (want.norm() + 1.0));
  }
}

TEST_CASE("objective_value matches its closed-form special cases") {
  Rng rng(317);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const auto id = NullSpaceProjectorSet::identity(3, 4);

  const EditBatch exact = synthesize_batch(layer, 4, 5, 0.0);
  CHECK(objective_value(exact, layer, Tensor3(3, 5, 4), id, 0.5) <= 1e-20);

  const EditBatch batch = synthesize_batch(layer, 4, 5, 1.0);
  double want = 0.0;
  for (const Fact& f : batch.facts) want += compute_residual(layer, f).squaredNorm();
  CHECK(objective_value(batch, layer, Tensor3(3, 5, 4), id, 0.5) ==
        doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("objective_value includes the preservation diagnostic when given a set") {
  Rng rng(331);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 3, 5, 1.0);
  const PreservationSet pres = sample_preservation(layer, 20, 7);
  const auto id = NullSpaceProjectorSet::identity(3, 4);
  Rng drng(12);
  const Tensor3 delta = drng.normal_tensor(3, 5, 4);
  const double without = objective_value(batch, layer, delta, id, 0.5);
  const double with_pres = objective_value(batch, layer, delta, id, 0.5, &pres);
  CHECK(with_pres > without);  // random deltas hit the preserved keys
}

TEST_CASE("woodbury solution survives 100 random perturbation probes") {
  Rng rng(337);
  const MoELayer layer = make_random_layer(4, 2, 5, 6, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 6, 43, 1.0);
  const auto projectors = build_projectors(sample_preservation(layer, 30, 47), 0.02);
  const double lambda = 0.5;
  const LayerDelta d = solve_woodbury(batch, layer, projectors, lambda);
  const double base = objective_value(batch, layer, d.delta, projectors, lambda);
  const double eps = 1e-3 * std::max(d.delta.frobenius_norm(), 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor3 dir = random_direction_like(rng, d.delta);
    const Tensor3 perturbed = add_scaled(d.delta, dir, eps);
    CHECK(objective_value(batch, layer, perturbed, projectors, lambda) >= base - 1e-12);
  }
}

TEST_CASE("null-space projection annihilates preserved directions in the delta") {
  Rng rng(347);
  const MoELayer layer = make_random_layer(3, 2, 6, 8, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 5, 51, 1.0);
  const PreservationSet pres = sample_preservation(layer, 40, 53);
  const auto projectors = build_projectors(pres, 0.02);
  const LayerDelta d = solve_woodbury(batch, layer, projectors, 0.5);

  for (std::size_t j = 0; j < 3; ++j) {
    const Matrix& keys = pres.keys[j];
    if (keys.cols() == 0) continue;
    // Above-threshold directions are the eigenvectors the projector kills.
    EMatrix gram = (keys.map() * keys.map().transpose()) / static_cast<double>(keys.cols());
    Eigen::SelfAdjointEigenSolver<EMatrix> es(gram);
    const double cutoff = 0.02 * es.eigenvalues().maxCoeff();
    const double dn = d.delta.slab(j).norm();
    if (dn == 0.0) continue;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
      if (es.eigenvalues()[i] < cutoff) continue;
      const EVector k = es.eigenvectors().col(i);
      CHECK((d.delta.slab(j) * k).norm() <= 1e-8 * dn);
    }
  }
}

TEST_CASE("every solver's delta scales exactly with the residuals") {
  Rng rng(349);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 4, 61, 1.0);
  const auto id = NullSpaceProjectorSet::identity(3, 4);
  const Matrix psi = design_matrix(layer, batch, &id);
  const Matrix r = residual_matrix(layer, batch);
  Matrix r2 = r;
  r2.map() *= 2.0;

  const LayerDelta w1 = solve_woodbury_with(psi, r, 3, 0.5);
  const LayerDelta w2 = solve_woodbury_with(psi, r2, 3, 0.5);
  for (std::size_t i = 0; i < w1.delta.size(); ++i)
    CHECK(w2.delta.data()[i] == 2.0 * w1.delta.data()[i]);

  const LayerDelta g1 = solve_global_oracle_with(psi, r, 3, 0.5);
  const LayerDelta g2 = solve_global_oracle_with(psi, r2, 3, 0.5);
  for (std::size_t i = 0; i < g1.delta.size(); ++i)
    CHECK(g2.delta.data()[i] == 2.0 * g1.delta.data()[i]);

  const LayerDelta b1 = solve_bcd_with(psi, r, 3, 0.5, 2);
  const LayerDelta b2 = solve_bcd_with(psi, r2, 3, 0.5, 2);
  for (std::size_t i = 0; i < b1.delta.size(); ++i)
    CHECK(b2.delta.data()[i] == 2.0 * b1.delta.data()[i]);
}
