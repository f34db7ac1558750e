// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mote/types.hpp"

namespace mote {

struct EigPair {
  std::vector<double> values;  // sorted non-increasing
  Matrix vectors;              // n x r, orthonormal columns
};

// Mode-n unfolding with the remaining indices kept in lexicographic order,
// so unfold(t, 1) is the plain (d1) x (d2*d3) reshape of the storage.
Matrix unfold(const Tensor3& t, int mode);

// Inverse of unfold: dims are the dimensions of the reconstructed tensor.
Tensor3 refold(const Matrix& m, int mode, const std::array<std::size_t, 3>& dims);

// Mode-n product t x_n m; requires m.cols == t.dim(mode).
Tensor3 mode_product(const Tensor3& t, const Matrix& m, int mode);

// Top-r eigenpairs of a symmetric matrix, eigenvalues descending.
// Rejects inputs whose asymmetry exceeds 1e-10 relative to the norm.
EigPair top_eig_sym(const Matrix& g, std::size_t r);

// Solves a*x = b for symmetric positive definite a via Cholesky.
// Factorization failure is reported as errc::not_spd.
Matrix solve_spd(const Matrix& a, const Matrix& b);

struct PushThrough {
  Matrix lhs;  // psi^T (psi psi^T + lambda I_n)^-1
  Matrix rhs;  // (psi^T psi + lambda I_T)^-1 psi^T
};

// Evaluates both sides of the push-through identity for a given psi (n x T)
// and lambda > 0. The two results agree up to roundoff; callers that only
// need the cheap side should pick rhs when T < n.
PushThrough push_through(const Matrix& psi, double lambda);

}  // namespace mote
