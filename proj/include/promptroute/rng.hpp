#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace promptroute {

// Counter-based generator: output k of stream `key` is mix64(key + (k+1)*gamma)
// (the SplitMix64 finalizer). A stream is identified by a 64-bit seed plus a
// list of labels, so every (distribution, epoch, batch, ...) draw can be
// reproduced independently of evaluation order and of the host language.
//
// Only integer arithmetic and IEEE double operations are used; std::
// distributions are avoided because their output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t key) : key_(key) {}

  // Derives a stream key from `seed` and a label path, e.g.
  // Rng::stream(seed, {"train", "epoch", "12"}).
  static Rng stream(std::uint64_t seed,
                    std::initializer_list<std::string_view> labels);

  // Child stream: independent of the parent's counter position.
  Rng fork(std::string_view label) const;
  Rng fork(std::uint64_t index) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer on [lo, hi] (inclusive), unbiased via rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  // Standard normal via Box-Muller (one value per call, two uniforms).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t z);
std::uint64_t hash_label(std::string_view label);

}  // namespace promptroute
