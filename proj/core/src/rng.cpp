#include "pani/rng.hpp"

#include <cmath>

#include "pani/errors.hpp"

namespace pani {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed) : gen_(seed) {}

RngStream RngStream::derive(std::uint64_t master_seed, std::string_view label) {
  return RngStream(splitmix64(master_seed ^ fnv1a64(label)));
}

double RngStream::uniform() {
  return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  // 1 - u keeps the log argument in (0, 1].
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  cached_normal_ = r * std::sin(kTwoPi * u2);
  has_cached_normal_ = true;
  return r * std::cos(kTwoPi * u2);
}

std::uint64_t RngStream::uniform_int(std::uint64_t n) {
  if (n == 0) throw ContractError("uniform_int: n must be >= 1");
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(gen_()) * n) >> 64);
}

void shuffle_indices(std::vector<long>& v, RngStream& rng) {
  for (long i = static_cast<long>(v.size()) - 1; i > 0; --i) {
    long j = static_cast<long>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
    std::swap(v[i], v[j]);
  }
}

std::vector<long> sample_without_replacement(long n, long k, long exclude,
                                             RngStream& rng) {
  std::vector<long> pool;
  pool.reserve(n);
  for (long v = 0; v < n; ++v) {
    if (v != exclude) pool.push_back(v);
  }
  if (k > static_cast<long>(pool.size())) {
    throw ContractError("sample_without_replacement: k exceeds the pool");
  }
  // Partial Fisher-Yates: the first k slots end up with the sample in draw
  // order.
  for (long t = 0; t < k; ++t) {
    long span = static_cast<long>(pool.size()) - t;
    long j = t + static_cast<long>(rng.uniform_int(static_cast<std::uint64_t>(span)));
    std::swap(pool[t], pool[j]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace pani
