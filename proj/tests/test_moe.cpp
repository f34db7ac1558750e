// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "mote/editors.hpp"
#include "mote/moe.hpp"
#include "test_util.hpp"

using namespace mote;
using namespace mote::test;

namespace {

// Layer with hand-set weights: identity-ish experts for analytic cases.
MoELayer tiny_layer(std::size_t experts, std::size_t top_k, std::size_t d, Activation act) {
  MoELayer layer;
  layer.experts = experts;
  layer.top_k = top_k;
  layer.d_model = d;
  layer.d_hidden = d;
  layer.activation = act;
  layer.expert_embeddings = Matrix(experts, d);
  layer.gate_w = Tensor3(experts, d, d);
  layer.up_w = Tensor3(experts, d, d);
  layer.down_w = Tensor3(experts, d, d);
  for (std::size_t j = 0; j < experts; ++j) {
    layer.gate_w.slab(j) = Matrix::identity(d).map();
    layer.up_w.slab(j) = Matrix::identity(d).map();
    layer.down_w.slab(j) = Matrix::identity(d).map();
  }
  return layer;
}

}  // namespace

TEST_CASE("route with a single expert returns weight one") {
  Rng rng(1);
  const MoELayer layer = make_random_layer(1, 1, 4, 3, rng.next_u64());
  const GatingResult g = route(layer, rng.normal_vector(4));
  REQUIRE(g.selected.size() == 1);
  CHECK(g.selected[0] == 0);
  CHECK(g.weights[0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("route with equal logits splits weight evenly") {
  MoELayer layer = tiny_layer(3, 3, 2, Activation::identity);
  // All embeddings identical: every logit ties.
  for (std::size_t j = 0; j < 3; ++j) {
    layer.expert_embeddings(j, 0) = 1.0;
    layer.expert_embeddings(j, 1) = 0.0;
  }
  EVector x(2);
  x << 1.0, 0.5;
  const GatingResult g = route(layer, x);
  for (std::size_t j = 0; j < 3; ++j)
    CHECK(g.weights[static_cast<Eigen::Index>(j)] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("route computes the softmax over the selected logits") {
  // Logits (2, 1, 0, -1) with K=2 select experts 0 and 1.
  MoELayer layer = tiny_layer(4, 2, 4, Activation::identity);
  for (std::size_t j = 0; j < 4; ++j)
    layer.expert_embeddings(j, 0) = 2.0 - static_cast<double>(j);
  EVector x = EVector::Zero(4);
  x[0] = 1.0;
  const GatingResult g = route(layer, x);
  REQUIRE(g.selected == std::vector<std::size_t>{0, 1});
  const double e2 = std::exp(2.0), e1 = std::exp(1.0);
  CHECK(g.weights[0] == doctest::Approx(e2 / (e2 + e1)).epsilon(1e-14));
  CHECK(g.weights[1] == doctest::Approx(e1 / (e2 + e1)).epsilon(1e-14));
  CHECK(g.weights[2] == 0.0);
  CHECK(g.weights[3] == 0.0);
}

TEST_CASE("route breaks logit ties toward the lower expert index") {
  MoELayer layer = tiny_layer(3, 1, 2, Activation::identity);
  for (std::size_t j = 0; j < 3; ++j) {
    layer.expert_embeddings(j, 0) = 1.0;  // identical logits
    layer.expert_embeddings(j, 1) = 0.0;
  }
  EVector x(2);
  x << 1.0, 0.0;
  const GatingResult g = route(layer, x);
  CHECK(g.selected == std::vector<std::size_t>{0});
}

TEST_CASE("gating invariants hold on random layers") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t experts = 2 + static_cast<std::size_t>(rng.uniform() * 7);
    const std::size_t top_k = 1 + static_cast<std::size_t>(rng.uniform() *
                                                           static_cast<double>(experts));
    const MoELayer layer = make_random_layer(experts, top_k, 6, 5, rng.next_u64());
    const EVector x = rng.normal_vector(6);
    const GatingResult g = route(layer, x);

    CHECK(g.selected.size() == top_k);
    double sum = 0.0;
    std::size_t nonzero = 0;
    for (Eigen::Index j = 0; j < g.weights.size(); ++j) {
      sum += g.weights[j];
      if (g.weights[j] != 0.0) {
        ++nonzero;
        CHECK(g.weights[j] > 0.0);
      }
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(nonzero == top_k);

    // The argmax logit always survives selection.
    const EVector logits = layer.expert_embeddings.map() * x;
    Eigen::Index argmax = 0;
    logits.maxCoeff(&argmax);
    bool found = false;
    for (std::size_t j : g.selected) found = found || j == static_cast<std::size_t>(argmax);
    CHECK(found);
  }
}

TEST_CASE("expert_key is zero when the up projection is zero") {
  Rng rng(9);
  MoELayer layer = make_random_layer(2, 1, 4, 3, rng.next_u64());
  layer.up_w = Tensor3(2, 3, 4);
  CHECK(expert_key(layer, 0, rng.normal_vector(4)).norm() == 0.0);
}

TEST_CASE("expert_key with identity activation and identity weights squares the input") {
  MoELayer layer = tiny_layer(1, 1, 2, Activation::identity);
  EVector x(2);
  x << 2.0, 3.0;
  const EVector k = expert_key(layer, 0, x);
  CHECK(k[0] == doctest::Approx(4.0));
  CHECK(k[1] == doctest::Approx(9.0));
}

TEST_CASE("expert_key matches a scalar-loop reference with silu") {
  Rng rng(13);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const EVector x = rng.normal_vector(5);
  const EVector k = expert_key(layer, 1, x);
  for (std::size_t i = 0; i < 4; ++i) {
    double gate = 0.0, up = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      gate += layer.gate_w(1, i, c) * x[static_cast<Eigen::Index>(c)];
      up += layer.up_w(1, i, c) * x[static_cast<Eigen::Index>(c)];
    }
    const double want = gate / (1.0 + std::exp(-gate)) * up;
    CHECK(k[static_cast<Eigen::Index>(i)] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("moe_forward is zero when all down projections are zero") {
  Rng rng(15);
  MoELayer layer = make_random_layer(4, 2, 5, 3, rng.next_u64());
  layer.down_w = Tensor3(4, 5, 3);
  CHECK(moe_forward(layer, rng.normal_vector(5)).norm() == 0.0);
}

TEST_CASE("moe_forward with one expert reduces to W k") {
  Rng rng(19);
  const MoELayer layer = make_random_layer(1, 1, 4, 6, rng.next_u64());
  const EVector x = rng.normal_vector(4);
  const EVector want = layer.down(0).map() * expert_key(layer, 0, x);
  CHECK((moe_forward(layer, x) - want).norm() < 1e-14 * want.norm());
}

TEST_CASE("moe_forward equals the dense all-expert sum weighted by the sparse gating") {
  Rng rng(21);
  const MoELayer layer = make_random_layer(4, 2, 6, 5, rng.next_u64());
  const EVector x = rng.normal_vector(6);
  const GatingResult g = route(layer, x);
  EVector dense = EVector::Zero(6);
  for (std::size_t j = 0; j < 4; ++j)
    dense += g.weights[static_cast<Eigen::Index>(j)] *
             (layer.down(j).map() * expert_key(layer, j, x));
  CHECK((moe_forward(layer, x) - dense).norm() <= 1e-13 * dense.norm());
}

TEST_CASE("fact keys are zero exactly for unselected experts") {
  Rng rng(25);
  const MoELayer layer = make_random_layer(5, 2, 4, 3, rng.next_u64());
  const EVector x = rng.normal_vector(4);
  const Fact f = make_fact(layer, x, EVector::Zero(4));
  for (std::size_t j = 0; j < 5; ++j) {
    const bool selected =
        std::find(f.gating.selected.begin(), f.gating.selected.end(), j) !=
        f.gating.selected.end();
    CHECK((f.keys.row(j).norm() == 0.0) == !selected);
  }
}

TEST_CASE("compute_residual is zero for an already-known fact") {
  Rng rng(27);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const EVector x = rng.normal_vector(5);
  const Fact f = make_fact(layer, x, moe_forward(layer, x));
  CHECK(compute_residual(layer, f).norm() < 1e-14);
}

TEST_CASE("compute_residual equals the target when down projections vanish") {
  Rng rng(33);
  MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  layer.down_w = Tensor3(3, 5, 4);
  const EVector target = rng.normal_vector(5);
  const Fact f = make_fact(layer, rng.normal_vector(5), target);
  CHECK((compute_residual(layer, f) - target).norm() == 0.0);
}

TEST_CASE("compute_residual matches the forward-pass subtraction") {
  Rng rng(35);
  const MoELayer layer = make_random_layer(4, 3, 6, 5, rng.next_u64());
  const EVector x = rng.normal_vector(6);
  const EVector target = rng.normal_vector(6);
  const Fact f = make_fact(layer, x, target);
  const EVector want = target - moe_forward(layer, x);
  CHECK((compute_residual(layer, f) - want).norm() <= 1e-12 * (want.norm() + 1.0));
}

TEST_CASE("design vector stacks the single active expert's key") {
  Rng rng(39);
  const MoELayer layer = make_random_layer(3, 1, 4, 3, rng.next_u64());
  const EVector x = rng.normal_vector(4);
  const Fact f = make_fact(layer, x, EVector::Zero(4));
  const EVector psi = build_design_vector(layer, f, nullptr);
  REQUIRE(f.gating.selected.size() == 1);
  const std::size_t j = f.gating.selected[0];
  // Weight is exactly one, so block j is the raw key.
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(psi[static_cast<Eigen::Index>(j * 3 + i)] == doctest::Approx(f.keys(j, i)));
  CHECK(psi.squaredNorm() == doctest::Approx(f.keys.row(j).squaredNorm()).epsilon(1e-12));
}

TEST_CASE("identity projectors leave the design vector unchanged") {
  Rng rng(45);
  const MoELayer layer = make_random_layer(4, 2, 5, 3, rng.next_u64());
  const Fact f = make_fact(layer, rng.normal_vector(5), rng.normal_vector(5));
  const auto id = NullSpaceProjectorSet::identity(4, 3);
  const EVector a = build_design_vector(layer, f, nullptr);
  const EVector b = build_design_vector(layer, f, &id);
  CHECK((a - b).norm() == 0.0);
}

TEST_CASE("design vector blocks match a per-block loop construction") {
  Rng rng(49);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const Fact f = make_fact(layer, rng.normal_vector(5), rng.normal_vector(5));
  const EVector psi = build_design_vector(layer, f, nullptr);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(psi[static_cast<Eigen::Index>(j * 4 + i)] ==
            doctest::Approx(f.gating.weights[static_cast<Eigen::Index>(j)] * f.keys(j, i))
                .epsilon(1e-14));
}

TEST_CASE("synthesize_batch with zero scale produces zero residuals") {
  Rng rng(51);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 6, 99, 0.0);
  for (const Fact& f : batch.facts) CHECK(compute_residual(layer, f).norm() < 1e-14);
}

TEST_CASE("synthesize_batch is bit-identical for a fixed seed") {
  Rng rng(55);
  const MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64());
  const EditBatch a = synthesize_batch(layer, 5, 1234, 1.0);
  const EditBatch b = synthesize_batch(layer, 5, 1234, 1.0);
  REQUIRE(a.facts.size() == b.facts.size());
  for (std::size_t t = 0; t < a.facts.size(); ++t) {
    CHECK((a.facts[t].x - b.facts[t].x).norm() == 0.0);
    CHECK((a.facts[t].target_v - b.facts[t].target_v).norm() == 0.0);
    CHECK(a.facts[t].keys == b.facts[t].keys);
  }
}

TEST_CASE("synthesize_batch residual norms track the requested scale") {
  Rng rng(57);
  const MoELayer layer = make_random_layer(4, 2, 8, 6, rng.next_u64());
  const EditBatch batch = synthesize_batch(layer, 50, 77, 1.0);
  double mean = 0.0;
  for (const Fact& f : batch.facts) mean += compute_residual(layer, f).norm();
  mean /= 50.0;
  CHECK(mean > 0.9);
  CHECK(mean < 1.1);
}

TEST_CASE("transposed_packed down projections round-trip exactly") {
  Rng rng(61);
  MoELayer layer = make_random_layer(3, 2, 5, 4, rng.next_u64(), Activation::silu,
                                     Layout::transposed_packed);
  const Matrix w = rng.normal_matrix(5, 4);
  layer.set_down(1, w);
  CHECK(layer.down(1) == w);
  REQUIRE(layer.down_w.dims() == std::array<std::size_t, 3>{3, 4, 5});
}

TEST_CASE("preservation sampling only collects keys of selected experts") {
  Rng rng(63);
  const MoELayer layer = make_random_layer(6, 2, 5, 4, rng.next_u64());
  const PreservationSet pres = sample_preservation(layer, 40, 17);
  REQUIRE(pres.expert_count() == 6);
  CHECK(pres.total_samples() == 40 * 2);  // K keys per sample
  CHECK(pres.inputs.cols() == 40);
  for (const Matrix& k : pres.keys) CHECK(k.rows() == 4);
}

TEST_CASE("layer save/load round-trips both layouts bit-exactly") {
  namespace fs = std::filesystem;
  Rng rng(65);
  const auto dir = fs::temp_directory_path() /
                   ("mote_layer_test_" + std::to_string(rng.next_u64()));
  for (Layout layout : {Layout::standard, Layout::transposed_packed}) {
    const MoELayer layer =
        make_random_layer(3, 2, 5, 4, rng.next_u64(), Activation::silu, layout);
    save_layer(dir.string(), layer, 7);
    const MoELayer back = load_layer(dir.string());
    CHECK(back.down_w == layer.down_w);
    CHECK(back.gate_w == layer.gate_w);
    CHECK(back.up_w == layer.up_w);
    CHECK(back.expert_embeddings == layer.expert_embeddings);
    CHECK(back.layout == layer.layout);
    CHECK(back.top_k == layer.top_k);
  }
  fs::remove_all(dir);
}

TEST_CASE("invalid layer configs are rejected") {
  Rng rng(67);
  MoELayer layer = make_random_layer(2, 2, 4, 3, rng.next_u64());
  layer.top_k = 3;
  CHECK_THROWS_AS(layer.validate(), Error);
}
