// SPDX-License-Identifier: Apache-2.0
//
// Synthetic mixture-of-experts layer: top-K router over learned expert
// embeddings, gated-FFN experts, and extraction of the per-fact quantities
// (gating weights, expert keys, residuals) every solver consumes.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mote/rng.hpp"
#include "mote/types.hpp"

namespace mote {

enum class Activation { silu, identity };
enum class Layout { standard, transposed_packed };

std::string to_string(Activation a);
std::string to_string(Layout l);
Activation activation_from_string(const std::string& s);
Layout layout_from_string(const std::string& s);

struct MoELayer {
  std::size_t experts = 0;   // E
  std::size_t top_k = 0;     // K active experts per token
  std::size_t d_model = 0;
  std::size_t d_hidden = 0;
  Matrix expert_embeddings;  // E x d_model, row j is e_j
  Tensor3 gate_w;            // E x d_hidden x d_model
  Tensor3 up_w;              // E x d_hidden x d_model
  // Down projections. standard: E x d_model x d_hidden with slab j = W_j.
  // transposed_packed: E x d_hidden x d_model storing W_j^T; reads and
  // writes go through down()/add_to_down() which transpose on the fly.
  Tensor3 down_w;
  Layout layout = Layout::standard;
  Activation activation = Activation::silu;

  void validate() const;

  // W_j as a d_model x d_hidden matrix regardless of layout.
  Matrix down(std::size_t j) const;
  void set_down(std::size_t j, const Matrix& w);
  void add_to_down(std::size_t j, const Matrix& delta);

  Matrix gate(std::size_t j) const;  // d_hidden x d_model
  Matrix up(std::size_t j) const;    // d_hidden x d_model

  // Stacked down projections in standard orientation (E x d_model x d_hidden)
  // regardless of storage layout.
  Tensor3 down_tensor() const;
};

struct GatingResult {
  std::vector<std::size_t> selected;  // K expert indices, ascending
  EVector weights;                    // length E, K-sparse, sums to 1
};

struct Fact {
  EVector x;         // pre-FFN hidden state, length d_model
  EVector target_v;  // desired layer output, length d_model
  GatingResult gating;
  Matrix keys;       // E x d_hidden; row j is k_{f,j}, zero if j unselected
};

struct EditBatch {
  std::vector<Fact> facts;
  double lambda = 0.1;
};

struct PreservationSet {
  std::vector<Matrix> keys;  // per expert j: d_hidden x M_j preservation keys
  Matrix inputs;             // d_model x M sampled hidden states (for
                             // covariance estimates and drift metrics)
  std::size_t expert_count() const { return keys.size(); }
  std::size_t total_samples() const;
};

// Forward declaration; defined in editors.hpp.
struct NullSpaceProjectorSet;

// Router logits s_j = x^T e_j, top-K selection (ties to the lowest index),
// softmax over the selected logits with max subtraction.
GatingResult route(const MoELayer& layer, const EVector& x);

// k_j = sigma(W_gate^(j) x) .* (W_up^(j) x)
EVector expert_key(const MoELayer& layer, std::size_t j, const EVector& x);

// v = sum_{j in S} g_j W_j k_j
EVector moe_forward(const MoELayer& layer, const EVector& x);

// Builds a Fact with cached gating and keys for the selected experts.
Fact make_fact(const MoELayer& layer, const EVector& x, const EVector& target_v);

// r_f = target_v - sum_j g_{f,j} W_j k_{f,j}, using the cached gating/keys.
EVector compute_residual(const MoELayer& layer, const Fact& fact);

// psi_f: block j holds g_{f,j} * (P_j) k_{f,j}; zero blocks for unselected
// experts. projectors may be null for the unprojected design vector.
EVector build_design_vector(const MoELayer& layer, const Fact& fact,
                            const NullSpaceProjectorSet* projectors);

// Deterministic batch with targets v_f = moe_forward(x_f) + residual_scale
// times a random unit direction, so every residual has norm residual_scale.
EditBatch synthesize_batch(const MoELayer& layer, std::size_t count, std::uint64_t seed,
                           double residual_scale, double lambda = 0.1);

// Samples hidden states, routes them, and collects the keys of selected
// experts; keys for unselected experts are excluded from the statistics.
PreservationSet sample_preservation(const MoELayer& layer, std::size_t samples,
                                    std::uint64_t seed);

// Recomputes per-expert preservation keys for a (possibly different) layer
// from already-sampled inputs.
PreservationSet preservation_from_inputs(const MoELayer& layer, const Matrix& inputs);

MoELayer make_random_layer(std::size_t experts, std::size_t top_k, std::size_t d_model,
                           std::size_t d_hidden, std::uint64_t seed,
                           Activation act = Activation::silu,
                           Layout layout = Layout::standard);

// Layer directory: one MTE1 container per weight group plus manifest.txt
// recording E, K, d_model, d_hidden, layout, activation and seed.
void save_layer(const std::string& dir, const MoELayer& layer, std::uint64_t seed);
MoELayer load_layer(const std::string& dir);

}  // namespace mote
