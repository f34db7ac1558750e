// SPDX-License-Identifier: Apache-2.0
//
// Tucker factor extraction for the stacked down-projection tensor:
// HOSVD via the Gram trick, optional HOOI refinement, and optional
// multilinear whitening with re-colouring back to the raw space.
#pragma once

#include <optional>
#include <string>

#include "mote/linalg.hpp"
#include "mote/moe.hpp"
#include "mote/types.hpp"

namespace mote {

enum class WhiteningMode { none, in, out, both };

std::string to_string(WhiteningMode m);
WhiteningMode whitening_mode_from_string(const std::string& s);

struct WhiteningConfig {
  WhiteningMode mode = WhiteningMode::none;
  double epsilon = 1e-5;
  std::optional<Matrix> cov_in;   // d_hidden x d_hidden, symmetric PSD
  std::optional<Matrix> cov_out;  // d_model x d_model, symmetric PSD

  bool whitens_in() const { return mode == WhiteningMode::in || mode == WhiteningMode::both; }
  bool whitens_out() const { return mode == WhiteningMode::out || mode == WhiteningMode::both; }
};

struct Ranks {
  std::size_t r_e = 0;
  std::size_t r_out = 0;
  std::size_t r_in = 0;
  bool operator==(const Ranks&) const = default;
};

// Desk-scale defaults; experiments should set ranks explicitly.
Ranks default_ranks(std::size_t experts, std::size_t d_model, std::size_t d_hidden);

struct TuckerFactors {
  Matrix u_e;    // E x r_e
  Matrix u_out;  // d_model x r_out
  Matrix u_in;   // d_hidden x r_in
  Ranks ranks;
};

struct CoreTensor {
  Tensor3 g;    // r_e x r_out x r_in
  Matrix flat;  // r_out x (r_e * r_in), block a is G_a = g[a,:,:]
};

CoreTensor core_from_tensor(Tensor3 g);
CoreTensor core_from_flat(const Matrix& flat, const Ranks& ranks);

struct WhitenResult {
  Tensor3 whitened;
  Matrix recolor_in;   // inverse of the mode-3 whitening factor
  Matrix recolor_out;  // inverse of the mode-2 whitening factor
};

// Whitening multiplies mode-3 by L_in^T (and/or mode-2 by L_out^T) where
// L L^T = Sigma + eps*I, taken as the symmetric square root. Applying the
// recolor matrices on the same modes restores the input.
WhitenResult whiten_tensor(const Tensor3& w, const WhiteningConfig& whitening);

// U_n = top-r_n eigenvectors of What_(n) What_(n)^T on the (optionally
// whitened) tensor; factors are re-coloured to the raw space afterwards.
// Each factor column's largest-magnitude entry is made positive.
TuckerFactors hosvd(const Tensor3& w, const Ranks& ranks, const WhiteningConfig& whitening);

// Alternating refinement of the HOSVD factors; the Frobenius fit in the
// extraction geometry is non-increasing per sweep.
TuckerFactors hooi_refine(const Tensor3& w, const TuckerFactors& factors, std::size_t sweeps,
                          const WhiteningConfig& whitening);

// g = w x1 U_e^T x2 U_out^T x3 U_in^T
CoreTensor compute_core(const Tensor3& w, const TuckerFactors& factors);

Tensor3 reconstruct_tensor(const CoreTensor& core, const TuckerFactors& factors);

// Mode-wise activation covariances. cov_in averages per-expert preservation
// key Grams across experts; cov_out averages layer outputs on the
// preservation inputs.
Matrix estimate_cov_in(const PreservationSet& pres);
Matrix estimate_cov_out(const MoELayer& layer, const Matrix& inputs);

}  // namespace mote
