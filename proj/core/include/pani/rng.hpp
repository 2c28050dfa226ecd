#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace pani {

// Deterministic random stream. mt19937_64 output is pinned by the standard,
// but the std::*_distribution adapters are not, so every transform we need
// (uniform, normal, bounded int) is implemented here. A run derives one
// stream per purpose from the master seed; adding a consumer with a new
// label never perturbs draws seen by existing ones.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  static RngStream derive(std::uint64_t master_seed, std::string_view label);

  // Uniform on [0, 1) with 53 random bits.
  double uniform();

  // Standard normal via Box-Muller; pairs are cached, so draws come one
  // generator step apart on even calls and zero steps on odd ones.
  double normal();

  // Uniform integer on [0, n), n >= 1. Multiply-shift bounding; the bias of
  // ~n/2^64 is irrelevant at our scales and the draw cost is one step.
  std::uint64_t uniform_int(std::uint64_t n);

 private:
  std::mt19937_64 gen_;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

// In-place Fisher-Yates shuffle.
void shuffle_indices(std::vector<long>& v, RngStream& rng);

// k distinct values drawn uniformly from {0..n-1} \ {exclude}, in draw
// order. Pass exclude < 0 to draw from the full range.
std::vector<long> sample_without_replacement(long n, long k, long exclude,
                                             RngStream& rng);

}  // namespace pani
