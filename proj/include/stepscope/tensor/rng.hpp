#pragma once

#include <cstdint>

#include "stepscope/tensor/tensor.hpp"

namespace stepscope {

// Deterministic 64-bit generator: xoshiro256++ seeded via splitmix64.
// One algorithm for the whole artifact; a fixed seed reproduces the exact
// sample stream on every run of the same build.
//
// Gaussian draws use Box-Muller with a fixed consumption order: each pair of
// uniforms (u1, u2) yields z0 = r*cos(2*pi*u2) first and caches
// z1 = r*sin(2*pi*u2) for the next call, r = sqrt(-2*ln(1-u1)).
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t seed() const { return seed_; }
  uint64_t next_u64();
  // Uniform in [0,1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  // Integer in [0, n), n > 0, via rejection-free modulo of 64 bits is biased;
  // uses Lemire-style widening reduction (bias < 2^-64, fine at this scale).
  uint64_t below(uint64_t n);
  double normal();

  // Derives an independent generator; used to give each instance/worker its
  // own stream without coupling consumption orders.
  Rng fork(uint64_t stream_tag);

 private:
  uint64_t seed_;
  uint64_t s_[4];
  bool has_cached_ = false;
  double cached_ = 0.0;
};

// i.i.d. standard normal samples filled in row-major index order.
Tensor gaussian(Rng& rng, Shape shape, Dtype dtype = Dtype::Float32);
Tensor uniform_tensor(Rng& rng, Shape shape, double lo, double hi, Dtype dtype = Dtype::Float32);

}  // namespace stepscope
