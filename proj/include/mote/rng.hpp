// SPDX-License-Identifier: Apache-2.0
//
// Deterministic random source. std::mt19937_64 output is pinned by the
// standard; the distributions here are hand-rolled (Box-Muller for normals)
// so that streams are bit-identical across platforms and library versions.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "mote/types.hpp"

namespace mote {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] keeps the log finite.
    const double u1 = (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  EVector normal_vector(std::size_t n) {
    EVector v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal();
    return v;
  }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (double& x : m.data()) x = stddev * normal();
    return m;
  }

  Tensor3 normal_tensor(std::size_t d1, std::size_t d2, std::size_t d3, double stddev = 1.0) {
    Tensor3 t(d1, d2, d3);
    for (double& x : t.data()) x = stddev * normal();
    return t;
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace mote
