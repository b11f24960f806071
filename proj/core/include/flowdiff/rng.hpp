#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "flowdiff/tensor.hpp"

namespace flowdiff {

// FNV-1a over the bytes of a string. Used to key per-image RNG streams and
// to digest serialized configs.
std::uint64_t fnv1a(std::string_view bytes);

// Counter-based SplitMix64 stream. The entire state is one u64, so streams
// serialize into checkpoints as a single word and fork cheaply. Keyed
// construction decorrelates substreams derived from one seed.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t seed);
  RngStream(std::uint64_t seed, std::uint64_t key);

  // Child stream keyed off this stream's seed material without advancing it.
  RngStream fork(std::uint64_t key) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1): 53 mantissa bits of a draw.
  double next_uniform();
  // Uniform on [lo, hi).
  double next_uniform(double lo, double hi);
  // Standard normal via Box–Muller. Always consumes exactly two uniform
  // draws and never caches the second deviate, so the state advance per
  // call is fixed.
  double next_normal();
  // Uniform integer in [0, n). Requires n > 0.
  std::uint64_t next_index(std::uint64_t n);

  // Fills t with iid standard normals.
  void fill_normal(Tensor& t);

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_ = 0;
};

}  // namespace flowdiff
