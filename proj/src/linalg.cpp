// SPDX-License-Identifier: Apache-2.0
#include "mote/linalg.hpp"

#include <algorithm>
#include <cstring>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

namespace mote {

namespace {

void check_mode(int mode) {
  require(mode >= 1 && mode <= 3, errc::invalid_argument, "tensor mode must be 1, 2 or 3");
}

}  // namespace

Matrix unfold(const Tensor3& t, int mode) {
  check_mode(mode);
  const std::size_t d1 = t.d1(), d2 = t.d2(), d3 = t.d3();
  switch (mode) {
    case 1: {
      Matrix m(d1, d2 * d3);
      std::memcpy(m.data().data(), t.data().data(), t.size() * sizeof(double));
      return m;
    }
    case 2: {
      Matrix m(d2, d1 * d3);
      for (std::size_t i = 0; i < d1; ++i)
        for (std::size_t j = 0; j < d2; ++j)
          for (std::size_t k = 0; k < d3; ++k) m(j, i * d3 + k) = t(i, j, k);
      return m;
    }
    default: {
      Matrix m(d3, d1 * d2);
      for (std::size_t i = 0; i < d1; ++i)
        for (std::size_t j = 0; j < d2; ++j)
          for (std::size_t k = 0; k < d3; ++k) m(k, i * d2 + j) = t(i, j, k);
      return m;
    }
  }
}

Tensor3 refold(const Matrix& m, int mode, const std::array<std::size_t, 3>& dims) {
  check_mode(mode);
  const std::size_t d1 = dims[0], d2 = dims[1], d3 = dims[2];
  const std::size_t idx = static_cast<std::size_t>(mode - 1);
  require(m.rows() == dims[idx] && m.size() == d1 * d2 * d3, errc::dimension_mismatch,
          "refold: matrix shape inconsistent with target dims");
  Tensor3 t(d1, d2, d3);
  switch (mode) {
    case 1:
      std::memcpy(t.data().data(), m.data().data(), m.size() * sizeof(double));
      break;
    case 2:
      for (std::size_t i = 0; i < d1; ++i)
        for (std::size_t j = 0; j < d2; ++j)
          for (std::size_t k = 0; k < d3; ++k) t(i, j, k) = m(j, i * d3 + k);
      break;
    default:
      for (std::size_t i = 0; i < d1; ++i)
        for (std::size_t j = 0; j < d2; ++j)
          for (std::size_t k = 0; k < d3; ++k) t(i, j, k) = m(k, i * d2 + j);
      break;
  }
  return t;
}

Tensor3 mode_product(const Tensor3& t, const Matrix& m, int mode) {
  check_mode(mode);
  require(m.cols() == t.dim(mode), errc::dimension_mismatch,
          "mode_product: m.cols must equal the contracted tensor dimension");
  Matrix unf = unfold(t, mode);
  Matrix prod = Matrix::from(m.map() * unf.map());
  auto dims = t.dims();
  dims[static_cast<std::size_t>(mode - 1)] = m.rows();
  return refold(prod, mode, dims);
}

EigPair top_eig_sym(const Matrix& g, std::size_t r) {
  require(g.rows() == g.cols(), errc::invalid_argument, "top_eig_sym: matrix must be square");
  require(r >= 1 && r <= g.rows(), errc::invalid_argument, "top_eig_sym: rank out of range");
  const double scale = g.frobenius_norm();
  const double asym = (g.map() - g.map().transpose()).norm();
  require(asym <= 1e-10 * std::max(scale, 1.0), errc::not_symmetric,
          "top_eig_sym: input is not symmetric");

  EMatrix sym = 0.5 * (g.map() + g.map().transpose());
  Eigen::SelfAdjointEigenSolver<EMatrix> es(sym);
  require(es.info() == Eigen::Success, errc::not_spd, "top_eig_sym: eigensolver failed");

  const Eigen::Index n = sym.rows();
  EigPair out;
  out.values.resize(r);
  out.vectors = Matrix(g.rows(), r);
  auto vecs = out.vectors.map();
  // Eigen sorts ascending; take the trailing r columns in reverse.
  for (std::size_t i = 0; i < r; ++i) {
    const Eigen::Index src = n - 1 - static_cast<Eigen::Index>(i);
    out.values[i] = es.eigenvalues()[src];
    vecs.col(static_cast<Eigen::Index>(i)) = es.eigenvectors().col(src);
  }
  return out;
}

Matrix solve_spd(const Matrix& a, const Matrix& b) {
  require(a.rows() == a.cols(), errc::invalid_argument, "solve_spd: matrix must be square");
  require(a.rows() == b.rows(), errc::dimension_mismatch, "solve_spd: rhs row count mismatch");
  Eigen::LLT<EMatrix> llt(a.map());
  require(llt.info() == Eigen::Success, errc::not_spd,
          "solve_spd: Cholesky factorization failed (matrix not SPD)");
  return Matrix::from(llt.solve(b.map()));
}

PushThrough push_through(const Matrix& psi, double lambda) {
  require(lambda > 0.0, errc::invalid_argument, "push_through: lambda must be positive");

  EMatrix big = psi.map() * psi.map().transpose();
  big.diagonal().array() += lambda;
  Matrix big_m = Matrix::from(big);
  // psi^T (psi psi^T + lambda I)^-1 = ((psi psi^T + lambda I)^-1 psi)^T
  Matrix lhs = Matrix::from(solve_spd(big_m, psi).map().transpose());

  EMatrix small = psi.map().transpose() * psi.map();
  small.diagonal().array() += lambda;
  Matrix small_m = Matrix::from(small);
  Matrix psi_t = Matrix::from(psi.map().transpose());
  Matrix rhs = solve_spd(small_m, psi_t);

  return {std::move(lhs), std::move(rhs)};
}

}  // namespace mote
