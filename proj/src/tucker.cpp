// SPDX-License-Identifier: Apache-2.0
#include "mote/tucker.hpp"

#include <algorithm>

#include <Eigen/Eigenvalues>

namespace mote {

std::string to_string(WhiteningMode m) {
  switch (m) {
    case WhiteningMode::none: return "none";
    case WhiteningMode::in: return "in";
    case WhiteningMode::out: return "out";
    default: return "both";
  }
}

WhiteningMode whitening_mode_from_string(const std::string& s) {
  if (s == "none") return WhiteningMode::none;
  if (s == "in") return WhiteningMode::in;
  if (s == "out") return WhiteningMode::out;
  if (s == "both") return WhiteningMode::both;
  fail(errc::invalid_argument, "unknown whitening mode: " + s);
}

Ranks default_ranks(std::size_t experts, std::size_t d_model, std::size_t d_hidden) {
  return {std::min<std::size_t>(experts, 8), std::max<std::size_t>(1, d_model / 2),
          std::max<std::size_t>(1, d_hidden / 2)};
}

CoreTensor core_from_tensor(Tensor3 g) {
  CoreTensor c;
  c.flat = unfold(g, 2);
  c.g = std::move(g);
  return c;
}

CoreTensor core_from_flat(const Matrix& flat, const Ranks& ranks) {
  require(flat.rows() == ranks.r_out && flat.cols() == ranks.r_e * ranks.r_in,
          errc::dimension_mismatch, "core flat shape inconsistent with ranks");
  CoreTensor c;
  c.g = refold(flat, 2, {ranks.r_e, ranks.r_out, ranks.r_in});
  c.flat = flat;
  return c;
}

namespace {

struct SqrtFactors {
  Matrix l;      // symmetric square root of (sigma + eps I)
  Matrix l_inv;  // its inverse
};

SqrtFactors symmetric_sqrt(const Matrix& sigma, double epsilon, const std::string& which) {
  require(sigma.rows() == sigma.cols(), errc::invalid_argument,
          which + " covariance must be square");
  const double scale = std::max(sigma.frobenius_norm(), 1.0);
  require((sigma.map() - sigma.map().transpose()).norm() <= 1e-8 * scale, errc::not_symmetric,
          which + " covariance must be symmetric");
  EMatrix shifted = 0.5 * (sigma.map() + sigma.map().transpose());
  shifted.diagonal().array() += epsilon;
  Eigen::SelfAdjointEigenSolver<EMatrix> es(shifted);
  require(es.info() == Eigen::Success, errc::not_spd, which + " covariance eigensolve failed");
  require(es.eigenvalues().minCoeff() > 0.0, errc::not_spd,
          which + " covariance is not PSD after the epsilon ridge");
  const Eigen::VectorXd root = es.eigenvalues().array().sqrt();
  SqrtFactors f;
  f.l = Matrix::from(es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose());
  f.l_inv = Matrix::from(es.eigenvectors() * root.cwiseInverse().asDiagonal() *
                         es.eigenvectors().transpose());
  return f;
}

void apply_sign_convention(Matrix& u) {
  for (std::size_t c = 0; c < u.cols(); ++c) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t r = 0; r < u.rows(); ++r) {
      const double a = std::abs(u(r, c));
      if (a > best) {
        best = a;
        arg = r;
      }
    }
    if (u(arg, c) < 0.0)
      for (std::size_t r = 0; r < u.rows(); ++r) u(r, c) = -u(r, c);
  }
}

Matrix gram_top_vectors(const Tensor3& t, int mode, std::size_t rank) {
  Matrix unf = unfold(t, mode);
  Matrix gram = Matrix::from(unf.map() * unf.map().transpose());
  // The product is symmetric up to roundoff; symmetrize before the solver.
  gram.map() = 0.5 * (gram.map() + gram.map().transpose()).eval();
  return top_eig_sym(gram, rank).vectors;
}

struct WhitenContext {
  bool in_active = false;
  bool out_active = false;
  SqrtFactors in_f;
  SqrtFactors out_f;
};

WhitenContext make_whiten_context(const Tensor3& w, const WhiteningConfig& cfg) {
  WhitenContext ctx;
  require(cfg.epsilon > 0.0, errc::invalid_argument, "whitening epsilon must be positive");
  if (cfg.whitens_in()) {
    require(cfg.cov_in.has_value(), errc::invalid_argument,
            "whitening mode requires cov_in to be present");
    require(cfg.cov_in->rows() == w.d3(), errc::dimension_mismatch,
            "cov_in dims must match the third tensor mode");
    ctx.in_f = symmetric_sqrt(*cfg.cov_in, cfg.epsilon, "in");
    ctx.in_active = true;
  }
  if (cfg.whitens_out()) {
    require(cfg.cov_out.has_value(), errc::invalid_argument,
            "whitening mode requires cov_out to be present");
    require(cfg.cov_out->rows() == w.d2(), errc::dimension_mismatch,
            "cov_out dims must match the second tensor mode");
    ctx.out_f = symmetric_sqrt(*cfg.cov_out, cfg.epsilon, "out");
    ctx.out_active = true;
  }
  return ctx;
}

Tensor3 apply_whitening(const Tensor3& w, const WhitenContext& ctx) {
  Tensor3 out = w;
  if (ctx.out_active) out = mode_product(out, ctx.out_f.l, 2);
  if (ctx.in_active) out = mode_product(out, ctx.in_f.l, 3);
  return out;
}

void check_ranks(const Tensor3& w, const Ranks& ranks) {
  require(ranks.r_e >= 1 && ranks.r_out >= 1 && ranks.r_in >= 1, errc::invalid_argument,
          "ranks must be positive");
  require(ranks.r_e <= w.d1() && ranks.r_out <= w.d2() && ranks.r_in <= w.d3(),
          errc::invalid_argument, "rank exceeds the corresponding tensor dimension");
}

}  // namespace

WhitenResult whiten_tensor(const Tensor3& w, const WhiteningConfig& whitening) {
  const WhitenContext ctx = make_whiten_context(w, whitening);
  WhitenResult res;
  res.whitened = apply_whitening(w, ctx);
  res.recolor_in = ctx.in_active ? ctx.in_f.l_inv : Matrix::identity(w.d3());
  res.recolor_out = ctx.out_active ? ctx.out_f.l_inv : Matrix::identity(w.d2());
  return res;
}

TuckerFactors hosvd(const Tensor3& w, const Ranks& ranks, const WhiteningConfig& whitening) {
  check_ranks(w, ranks);
  const WhitenContext ctx = make_whiten_context(w, whitening);
  const Tensor3 white = apply_whitening(w, ctx);

  TuckerFactors f;
  f.ranks = ranks;
  f.u_e = gram_top_vectors(white, 1, ranks.r_e);
  f.u_out = gram_top_vectors(white, 2, ranks.r_out);
  f.u_in = gram_top_vectors(white, 3, ranks.r_in);
  if (ctx.out_active) f.u_out = Matrix::from(ctx.out_f.l_inv.map() * f.u_out.map());
  if (ctx.in_active) f.u_in = Matrix::from(ctx.in_f.l_inv.map() * f.u_in.map());
  apply_sign_convention(f.u_e);
  apply_sign_convention(f.u_out);
  apply_sign_convention(f.u_in);
  return f;
}

TuckerFactors hooi_refine(const Tensor3& w, const TuckerFactors& factors, std::size_t sweeps,
                          const WhiteningConfig& whitening) {
  check_ranks(w, factors.ranks);
  if (sweeps == 0) return factors;
  const WhitenContext ctx = make_whiten_context(w, whitening);
  const Tensor3 white = apply_whitening(w, ctx);

  // Move the factors into the geometry they were extracted in.
  Matrix u_e = factors.u_e;
  Matrix u_out = ctx.out_active ? Matrix::from(ctx.out_f.l.map() * factors.u_out.map())
                                : factors.u_out;
  Matrix u_in =
      ctx.in_active ? Matrix::from(ctx.in_f.l.map() * factors.u_in.map()) : factors.u_in;
  for (const Matrix* u : {&u_e, &u_out, &u_in}) {
    const EMatrix gram = u->map().transpose() * u->map();
    require((gram - EMatrix::Identity(gram.rows(), gram.cols())).norm() <= 1e-6,
            errc::invalid_argument, "hooi_refine: factors must have orthonormal columns");
  }

  auto transpose_of = [](const Matrix& m) { return Matrix::from(m.map().transpose()); };
  for (std::size_t s = 0; s < sweeps; ++s) {
    {
      Tensor3 y = mode_product(white, transpose_of(u_out), 2);
      y = mode_product(y, transpose_of(u_in), 3);
      u_e = gram_top_vectors(y, 1, factors.ranks.r_e);
    }
    {
      Tensor3 y = mode_product(white, transpose_of(u_e), 1);
      y = mode_product(y, transpose_of(u_in), 3);
      u_out = gram_top_vectors(y, 2, factors.ranks.r_out);
    }
    {
      Tensor3 y = mode_product(white, transpose_of(u_e), 1);
      y = mode_product(y, transpose_of(u_out), 2);
      u_in = gram_top_vectors(y, 3, factors.ranks.r_in);
    }
  }

  TuckerFactors out;
  out.ranks = factors.ranks;
  out.u_e = std::move(u_e);
  out.u_out = ctx.out_active ? Matrix::from(ctx.out_f.l_inv.map() * u_out.map()) : u_out;
  out.u_in = ctx.in_active ? Matrix::from(ctx.in_f.l_inv.map() * u_in.map()) : u_in;
  apply_sign_convention(out.u_e);
  apply_sign_convention(out.u_out);
  apply_sign_convention(out.u_in);
  return out;
}

CoreTensor compute_core(const Tensor3& w, const TuckerFactors& factors) {
  require(factors.u_e.rows() == w.d1() && factors.u_out.rows() == w.d2() &&
              factors.u_in.rows() == w.d3(),
          errc::dimension_mismatch, "compute_core: factor dims do not match tensor");
  Tensor3 g = mode_product(w, Matrix::from(factors.u_e.map().transpose()), 1);
  g = mode_product(g, Matrix::from(factors.u_out.map().transpose()), 2);
  g = mode_product(g, Matrix::from(factors.u_in.map().transpose()), 3);
  return core_from_tensor(std::move(g));
}

Tensor3 reconstruct_tensor(const CoreTensor& core, const TuckerFactors& factors) {
  Tensor3 t = mode_product(core.g, factors.u_e, 1);
  t = mode_product(t, factors.u_out, 2);
  return mode_product(t, factors.u_in, 3);
}

Matrix estimate_cov_in(const PreservationSet& pres) {
  std::size_t d_hidden = 0;
  for (const auto& k : pres.keys)
    if (k.rows() > 0) d_hidden = k.rows();
  require(d_hidden > 0, errc::invalid_argument, "no preservation keys to estimate cov_in");
  EMatrix acc = EMatrix::Zero(static_cast<Eigen::Index>(d_hidden),
                              static_cast<Eigen::Index>(d_hidden));
  std::size_t contributing = 0;
  for (const auto& k : pres.keys) {
    if (k.cols() == 0) continue;
    acc += (k.map() * k.map().transpose()) / static_cast<double>(k.cols());
    ++contributing;
  }
  require(contributing > 0, errc::invalid_argument, "no preservation samples for cov_in");
  acc /= static_cast<double>(contributing);
  return Matrix::from(acc);
}

Matrix estimate_cov_out(const MoELayer& layer, const Matrix& inputs) {
  require(inputs.rows() == layer.d_model, errc::dimension_mismatch,
          "cov_out inputs must be d_model x M");
  require(inputs.cols() > 0, errc::invalid_argument, "no inputs to estimate cov_out");
  EMatrix acc = EMatrix::Zero(static_cast<Eigen::Index>(layer.d_model),
                              static_cast<Eigen::Index>(layer.d_model));
  for (std::size_t m = 0; m < inputs.cols(); ++m) {
    const EVector v = moe_forward(layer, inputs.col(m));
    acc += v * v.transpose();
  }
  acc /= static_cast<double>(inputs.cols());
  return Matrix::from(acc);
}

}  // namespace mote
