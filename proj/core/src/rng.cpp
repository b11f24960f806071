#include "flowdiff/rng.hpp"

#include <cmath>
#include <numbers>

#include "flowdiff/errors.hpp"

namespace flowdiff {

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

// Finalizer from SplitMix64; also used to mix (seed, key) pairs.
std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed) : state_(mix64(seed + 0x9e3779b97f4a7c15ull)) {}

RngStream::RngStream(std::uint64_t seed, std::uint64_t key)
    : state_(mix64(mix64(seed + 0x9e3779b97f4a7c15ull) ^ mix64(key ^ 0xd1342543de82ef95ull))) {}

RngStream RngStream::fork(std::uint64_t key) const {
  RngStream child;
  child.state_ = mix64(state_ ^ mix64(key ^ 0xd1342543de82ef95ull));
  return child;
}

std::uint64_t RngStream::next_u64() {
  state_ += 0x9e3779b97f4a7c15ull;
  return mix64(state_);
}

double RngStream::next_uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_uniform(double lo, double hi) {
  return lo + (hi - lo) * next_uniform();
}

double RngStream::next_normal() {
  // u1 must be strictly positive for the log.
  double u1 = 0.0;
  u1 = next_uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double u2 = next_uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::next_index(std::uint64_t n) {
  if (n == 0) throw PreconditionError("next_index: n must be positive");
  // Rejection sampling over the top multiple of n avoids modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

void RngStream::fill_normal(Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = next_normal();
}

}  // namespace flowdiff
