#pragma once

// Counter-based random numbers. Every draw is a pure function of
// (seed, stream, step, slot), so trajectories are reproducible regardless of
// how work is scheduled across threads.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

#include "snls/errors.hpp"

namespace snls::rng {

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

namespace detail {

inline void mulhilo32(std::uint32_t a, std::uint32_t b, std::uint32_t &hi,
                      std::uint32_t &lo) {
  const std::uint64_t product =
      static_cast<std::uint64_t>(a) * static_cast<std::uint64_t>(b);
  hi = static_cast<std::uint32_t>(product >> 32);
  lo = static_cast<std::uint32_t>(product);
}

} // namespace detail

/// Philox4x32 with 10 rounds (Salmon et al., SC'11).
inline Counter philox4x32(Counter ctr, Key key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    detail::mulhilo32(kMul0, ctr[0], hi0, lo0);
    detail::mulhilo32(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Child stream id from a parent id and a tag. Distinct tags give
/// statistically unrelated streams.
inline std::uint64_t derive_stream(std::uint64_t parent, std::uint64_t tag) {
  return splitmix64(splitmix64(parent) ^ (tag * 0xD6E8FEB86659FD93ull));
}

inline std::uint64_t derive_stream(std::uint64_t parent, std::uint64_t tag1,
                                   std::uint64_t tag2) {
  return derive_stream(derive_stream(parent, tag1), tag2);
}

/// Uniform double in the open interval (0, 1) from 64 random bits.
inline double to_open_unit(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

struct GaussianPair {
  double first;
  double second;
};

/// Two independent standard normals from one Philox block (Box-Muller).
inline GaussianPair box_muller(const Counter &block) {
  const std::uint64_t a =
      (static_cast<std::uint64_t>(block[1]) << 32) | block[0];
  const std::uint64_t b =
      (static_cast<std::uint64_t>(block[3]) << 32) | block[2];
  const double radius = std::sqrt(-2.0 * std::log(to_open_unit(a)));
  const double angle = 2.0 * std::numbers::pi * to_open_unit(b);
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

/// Random-access stream: draws are addressed by (step, slot).
class CounterStream {
public:
  CounterStream(std::uint64_t seed, std::uint64_t stream)
      : key_{static_cast<std::uint32_t>(seed),
             static_cast<std::uint32_t>(seed >> 32)},
        stream_(stream) {}

  Counter block(std::uint64_t step, std::uint32_t slot) const {
    if (step > std::numeric_limits<std::uint32_t>::max()) {
      throw ParameterError("counter stream step index exceeds 2^32");
    }
    return philox4x32({static_cast<std::uint32_t>(step), slot,
                       static_cast<std::uint32_t>(stream_),
                       static_cast<std::uint32_t>(stream_ >> 32)},
                      key_);
  }

  GaussianPair normal_pair(std::uint64_t step, std::uint32_t slot) const {
    return box_muller(block(step, slot));
  }

  double uniform(std::uint64_t step, std::uint32_t slot) const {
    const Counter c = block(step, slot);
    return to_open_unit((static_cast<std::uint64_t>(c[1]) << 32) | c[0]);
  }

  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t seed() const noexcept {
    return (static_cast<std::uint64_t>(key_[1]) << 32) | key_[0];
  }

private:
  Key key_;
  std::uint64_t stream_;
};

/// Sequential engine over a counter stream. Satisfies
/// std::uniform_random_bit_generator.
class PhiloxEngine {
public:
  using result_type = std::uint64_t;

  PhiloxEngine(std::uint64_t seed, std::uint64_t stream)
      : key_{static_cast<std::uint32_t>(seed),
             static_cast<std::uint32_t>(seed >> 32)},
        stream_(stream) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() {
    if (cached_ == 0) {
      buffer_ = philox4x32({static_cast<std::uint32_t>(block_),
                            static_cast<std::uint32_t>(block_ >> 32),
                            static_cast<std::uint32_t>(stream_),
                            static_cast<std::uint32_t>(stream_ >> 32)},
                           key_);
      ++block_;
      cached_ = 2;
    }
    const std::size_t base = cached_ == 2 ? 0 : 2;
    --cached_;
    return (static_cast<std::uint64_t>(buffer_[base + 1]) << 32) |
           buffer_[base];
  }

  double uniform() { return to_open_unit((*this)()); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const std::uint64_t a = (*this)();
    const std::uint64_t b = (*this)();
    const double radius = std::sqrt(-2.0 * std::log(to_open_unit(a)));
    const double angle = 2.0 * std::numbers::pi * to_open_unit(b);
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// Integer uniform on [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) {
      throw ParameterError("PhiloxEngine::below requires n > 0");
    }
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) %
           n;
  }

  std::uint64_t stream() const noexcept { return stream_; }

  /// Independent engine for a named sub-task.
  PhiloxEngine split(std::uint64_t tag) const {
    return {(static_cast<std::uint64_t>(key_[1]) << 32) | key_[0],
            derive_stream(stream_, tag)};
  }

private:
  Key key_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  Counter buffer_{};
  int cached_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

} // namespace snls::rng
