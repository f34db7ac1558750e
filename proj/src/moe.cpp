// SPDX-License-Identifier: Apache-2.0
#include "mote/moe.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "mote/editors.hpp"
#include "mote/io.hpp"

namespace mote {

namespace fs = std::filesystem;

std::string to_string(Activation a) { return a == Activation::silu ? "silu" : "identity"; }
std::string to_string(Layout l) {
  return l == Layout::standard ? "standard" : "transposed_packed";
}

Activation activation_from_string(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "identity") return Activation::identity;
  fail(errc::invalid_argument, "unknown activation: " + s);
}

Layout layout_from_string(const std::string& s) {
  if (s == "standard") return Layout::standard;
  if (s == "transposed_packed") return Layout::transposed_packed;
  fail(errc::invalid_argument, "unknown layout: " + s);
}

void MoELayer::validate() const {
  require(experts >= 1, errc::invalid_argument, "layer must have at least one expert");
  require(top_k >= 1 && top_k <= experts, errc::invalid_argument,
          "top_k must satisfy 1 <= K <= E");
  require(d_model >= 1 && d_hidden >= 1, errc::invalid_argument, "dimensions must be positive");
  require(expert_embeddings.rows() == experts && expert_embeddings.cols() == d_model,
          errc::dimension_mismatch, "expert_embeddings must be E x d_model");
  require(gate_w.dims() == std::array<std::size_t, 3>{experts, d_hidden, d_model},
          errc::dimension_mismatch, "gate_w must be E x d_hidden x d_model");
  require(up_w.dims() == std::array<std::size_t, 3>{experts, d_hidden, d_model},
          errc::dimension_mismatch, "up_w must be E x d_hidden x d_model");
  const auto expected = layout == Layout::standard
                            ? std::array<std::size_t, 3>{experts, d_model, d_hidden}
                            : std::array<std::size_t, 3>{experts, d_hidden, d_model};
  require(down_w.dims() == expected, errc::dimension_mismatch,
          "down_w dims inconsistent with layout");
  require(expert_embeddings.all_finite() && gate_w.all_finite() && up_w.all_finite() &&
              down_w.all_finite(),
          errc::invalid_argument, "layer weights must be finite");
}

Matrix MoELayer::down(std::size_t j) const {
  if (layout == Layout::standard) return Matrix::from(down_w.slab(j));
  return Matrix::from(down_w.slab(j).transpose());
}

void MoELayer::set_down(std::size_t j, const Matrix& w) {
  require(w.rows() == d_model && w.cols() == d_hidden, errc::dimension_mismatch,
          "set_down: expected d_model x d_hidden");
  if (layout == Layout::standard)
    down_w.slab(j) = w.map();
  else
    down_w.slab(j) = w.map().transpose();
}

void MoELayer::add_to_down(std::size_t j, const Matrix& delta) {
  require(delta.rows() == d_model && delta.cols() == d_hidden, errc::dimension_mismatch,
          "add_to_down: expected d_model x d_hidden");
  if (layout == Layout::standard)
    down_w.slab(j) += delta.map();
  else
    down_w.slab(j) += delta.map().transpose();
}

Matrix MoELayer::gate(std::size_t j) const { return Matrix::from(gate_w.slab(j)); }
Matrix MoELayer::up(std::size_t j) const { return Matrix::from(up_w.slab(j)); }

Tensor3 MoELayer::down_tensor() const {
  if (layout == Layout::standard) return down_w;
  Tensor3 t(experts, d_model, d_hidden);
  for (std::size_t j = 0; j < experts; ++j) t.slab(j) = down_w.slab(j).transpose();
  return t;
}

std::size_t PreservationSet::total_samples() const {
  std::size_t n = 0;
  for (const auto& k : keys) n += k.cols();
  return n;
}

GatingResult route(const MoELayer& layer, const EVector& x) {
  require(static_cast<std::size_t>(x.size()) == layer.d_model, errc::dimension_mismatch,
          "route: x length must equal d_model");
  const EVector logits = layer.expert_embeddings.map() * x;

  std::vector<std::size_t> order(layer.experts);
  std::iota(order.begin(), order.end(), 0);
  // Ties broken by the lower expert index.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return logits[static_cast<Eigen::Index>(a)] > logits[static_cast<Eigen::Index>(b)];
  });

  GatingResult g;
  g.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(layer.top_k));
  std::sort(g.selected.begin(), g.selected.end());

  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t j : g.selected)
    max_logit = std::max(max_logit, logits[static_cast<Eigen::Index>(j)]);

  g.weights = EVector::Zero(static_cast<Eigen::Index>(layer.experts));
  double denom = 0.0;
  for (std::size_t j : g.selected) {
    const double w = std::exp(logits[static_cast<Eigen::Index>(j)] - max_logit);
    g.weights[static_cast<Eigen::Index>(j)] = w;
    denom += w;
  }
  for (std::size_t j : g.selected) g.weights[static_cast<Eigen::Index>(j)] /= denom;
  return g;
}

namespace {

double silu(double v) { return v / (1.0 + std::exp(-v)); }

}  // namespace

EVector expert_key(const MoELayer& layer, std::size_t j, const EVector& x) {
  require(j < layer.experts, errc::invalid_argument, "expert index out of range");
  require(static_cast<std::size_t>(x.size()) == layer.d_model, errc::dimension_mismatch,
          "expert_key: x length must equal d_model");
  EVector gated = layer.gate_w.slab(j) * x;
  const EVector up = layer.up_w.slab(j) * x;
  if (layer.activation == Activation::silu)
    for (Eigen::Index i = 0; i < gated.size(); ++i) gated[i] = silu(gated[i]);
  return gated.cwiseProduct(up);
}

EVector moe_forward(const MoELayer& layer, const EVector& x) {
  const GatingResult g = route(layer, x);
  EVector v = EVector::Zero(static_cast<Eigen::Index>(layer.d_model));
  for (std::size_t j : g.selected) {
    const EVector k = expert_key(layer, j, x);
    v += g.weights[static_cast<Eigen::Index>(j)] * (layer.down(j).map() * k);
  }
  return v;
}

Fact make_fact(const MoELayer& layer, const EVector& x, const EVector& target_v) {
  require(static_cast<std::size_t>(target_v.size()) == layer.d_model, errc::dimension_mismatch,
          "make_fact: target length must equal d_model");
  Fact f;
  f.x = x;
  f.target_v = target_v;
  f.gating = route(layer, x);
  f.keys = Matrix(layer.experts, layer.d_hidden);
  for (std::size_t j : f.gating.selected) {
    const EVector k = expert_key(layer, j, x);
    for (std::size_t i = 0; i < layer.d_hidden; ++i)
      f.keys(j, i) = k[static_cast<Eigen::Index>(i)];
  }
  return f;
}

EVector compute_residual(const MoELayer& layer, const Fact& fact) {
  EVector v = EVector::Zero(static_cast<Eigen::Index>(layer.d_model));
  for (std::size_t j : fact.gating.selected)
    v += fact.gating.weights[static_cast<Eigen::Index>(j)] *
         (layer.down(j).map() * fact.keys.row(j));
  return fact.target_v - v;
}

EVector build_design_vector(const MoELayer& layer, const Fact& fact,
                            const NullSpaceProjectorSet* projectors) {
  require(fact.keys.rows() == layer.experts && fact.keys.cols() == layer.d_hidden,
          errc::dimension_mismatch, "design vector: fact does not match layer dims");
  if (projectors)
    require(projectors->projectors.size() == layer.experts, errc::dimension_mismatch,
            "design vector: projector set does not cover all experts");
  EVector psi = EVector::Zero(static_cast<Eigen::Index>(layer.experts * layer.d_hidden));
  for (std::size_t j : fact.gating.selected) {
    EVector k = fact.keys.row(j);
    if (projectors) k = projectors->projectors[j].map() * k;
    psi.segment(static_cast<Eigen::Index>(j * layer.d_hidden),
                static_cast<Eigen::Index>(layer.d_hidden)) =
        fact.gating.weights[static_cast<Eigen::Index>(j)] * k;
  }
  return psi;
}

EditBatch synthesize_batch(const MoELayer& layer, std::size_t count, std::uint64_t seed,
                           double residual_scale, double lambda) {
  require(count >= 1, errc::invalid_argument, "batch must contain at least one fact");
  require(lambda > 0.0, errc::invalid_argument, "batch lambda must be positive");
  Rng rng(seed);
  EditBatch batch;
  batch.lambda = lambda;
  batch.facts.reserve(count);
  for (std::size_t t = 0; t < count; ++t) {
    const EVector x = rng.normal_vector(layer.d_model);
    const EVector base = moe_forward(layer, x);
    EVector dir = rng.normal_vector(layer.d_model);
    dir.normalize();
    batch.facts.push_back(make_fact(layer, x, base + residual_scale * dir));
  }
  return batch;
}

PreservationSet preservation_from_inputs(const MoELayer& layer, const Matrix& inputs) {
  require(inputs.rows() == layer.d_model, errc::dimension_mismatch,
          "preservation inputs must be d_model x M");
  std::vector<std::vector<EVector>> collected(layer.experts);
  for (std::size_t m = 0; m < inputs.cols(); ++m) {
    const EVector x = inputs.col(m);
    const GatingResult g = route(layer, x);
    for (std::size_t j : g.selected) collected[j].push_back(expert_key(layer, j, x));
  }
  PreservationSet pres;
  pres.inputs = inputs;
  pres.keys.reserve(layer.experts);
  for (std::size_t j = 0; j < layer.experts; ++j) {
    Matrix keys(layer.d_hidden, collected[j].size());
    for (std::size_t c = 0; c < collected[j].size(); ++c)
      for (std::size_t i = 0; i < layer.d_hidden; ++i)
        keys(i, c) = collected[j][c][static_cast<Eigen::Index>(i)];
    pres.keys.push_back(std::move(keys));
  }
  return pres;
}

PreservationSet sample_preservation(const MoELayer& layer, std::size_t samples,
                                    std::uint64_t seed) {
  Rng rng(seed);
  Matrix inputs(layer.d_model, samples);
  for (std::size_t m = 0; m < samples; ++m) {
    const EVector x = rng.normal_vector(layer.d_model);
    for (std::size_t i = 0; i < layer.d_model; ++i) inputs(i, m) = x[static_cast<Eigen::Index>(i)];
  }
  return preservation_from_inputs(layer, inputs);
}

MoELayer make_random_layer(std::size_t experts, std::size_t top_k, std::size_t d_model,
                           std::size_t d_hidden, std::uint64_t seed, Activation act,
                           Layout layout) {
  Rng rng(seed);
  MoELayer layer;
  layer.experts = experts;
  layer.top_k = top_k;
  layer.d_model = d_model;
  layer.d_hidden = d_hidden;
  layer.activation = act;
  layer.layout = layout;
  layer.expert_embeddings = rng.normal_matrix(experts, d_model);
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double out_scale = 1.0 / std::sqrt(static_cast<double>(d_hidden));
  layer.gate_w = rng.normal_tensor(experts, d_hidden, d_model, in_scale);
  layer.up_w = rng.normal_tensor(experts, d_hidden, d_model, in_scale);
  Tensor3 down = rng.normal_tensor(experts, d_model, d_hidden, out_scale);
  if (layout == Layout::standard) {
    layer.down_w = std::move(down);
  } else {
    layer.down_w = Tensor3(experts, d_hidden, d_model);
    for (std::size_t j = 0; j < experts; ++j) layer.down_w.slab(j) = down.slab(j).transpose();
  }
  layer.validate();
  return layer;
}

void save_layer(const std::string& dir, const MoELayer& layer, std::uint64_t seed) {
  layer.validate();
  fs::create_directories(dir);
  save_matrix(dir + "/embeddings.mte1", layer.expert_embeddings);
  save_tensor3(dir + "/gate_w.mte1", layer.gate_w);
  save_tensor3(dir + "/up_w.mte1", layer.up_w);
  save_tensor3(dir + "/down_w.mte1", layer.down_w);
  Manifest kv;
  kv["experts"] = std::to_string(layer.experts);
  kv["top_k"] = std::to_string(layer.top_k);
  kv["d_model"] = std::to_string(layer.d_model);
  kv["d_hidden"] = std::to_string(layer.d_hidden);
  kv["layout"] = to_string(layer.layout);
  kv["activation"] = to_string(layer.activation);
  kv["seed"] = std::to_string(seed);
  write_manifest(dir + "/manifest.txt", kv);
}

MoELayer load_layer(const std::string& dir) {
  const Manifest kv = read_manifest(dir + "/manifest.txt");
  MoELayer layer;
  layer.experts = static_cast<std::size_t>(manifest_get_int(kv, "experts"));
  layer.top_k = static_cast<std::size_t>(manifest_get_int(kv, "top_k"));
  layer.d_model = static_cast<std::size_t>(manifest_get_int(kv, "d_model"));
  layer.d_hidden = static_cast<std::size_t>(manifest_get_int(kv, "d_hidden"));
  layer.layout = layout_from_string(manifest_get(kv, "layout"));
  layer.activation = activation_from_string(manifest_get(kv, "activation"));
  layer.expert_embeddings = load_matrix(dir + "/embeddings.mte1");
  layer.gate_w = load_tensor3(dir + "/gate_w.mte1");
  layer.up_w = load_tensor3(dir + "/up_w.mte1");
  layer.down_w = load_tensor3(dir + "/down_w.mte1");
  layer.validate();
  return layer;
}

}  // namespace mote
