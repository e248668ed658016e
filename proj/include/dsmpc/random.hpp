/*
 Copyright 2026 The dsmpc Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#ifndef DSMPC_RANDOM_HPP
#define DSMPC_RANDOM_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace dsmpc {

namespace detail {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

}  // namespace detail

/**
 * Counter-based random stream.
 *
 * Output i of a stream is mix64(key + i * golden), where the key is derived
 * from (seed, stream id). The same (seed, id) always replays the same
 * sequence; different ids give unrelated keys. split() derives child streams
 * without consuming draws from the parent, so work can be fanned out over
 * particles or Monte-Carlo runs and stay bit-identical to sequential code.
 *
 * Satisfies UniformRandomBitGenerator.
 */
class RandomStream {
 public:
  using result_type = std::uint64_t;

  RandomStream() : RandomStream(0, 0) {}
  RandomStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed),
        id_(stream_id),
        key_(detail::mix64(detail::mix64(seed + detail::kGolden) ^ (stream_id * 0xd1b54a32d192ed03ULL + 1))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return next_u64(); }

  std::uint64_t next_u64() {
    ++counter_;
    return detail::mix64(key_ + counter_ * detail::kGolden);
  }

  /// Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Child stream `index`; independent of the parent's position.
  RandomStream split(std::uint64_t index) const {
    RandomStream child;
    child.seed_ = seed_;
    child.id_ = id_;
    child.key_ = detail::mix64(key_ ^ detail::mix64(index + 0x632be59bd9b4e019ULL));
    return child;
  }

  /// Child stream keyed on the current position; advances the parent by one draw.
  RandomStream fork() { return split(next_u64()); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return id_; }
  std::uint64_t position() const { return counter_; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t id_ = 0;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dsmpc

#endif  // DSMPC_RANDOM_HPP
