#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace fbcp {

/// Counter-based RNG (Philox4x32-10). A generator is a pure function of
/// (key, counter), so independently derived streams can be consumed on any
/// worker in any order without changing the values they produce.
///
/// Stream derivation: CounterRng::stream(seed, {a, b, ...}) mixes the path
/// elements into the key with splitmix64, giving decorrelated substreams,
/// e.g. one stream per trajectory id or per (episode, purpose).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_lo_(static_cast<std::uint32_t>(key)),
                                           key_hi_(static_cast<std::uint32_t>(key >> 32)) {}

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  static CounterRng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t k = splitmix64(seed);
    for (std::uint64_t p : path) k = splitmix64(k ^ splitmix64(p + 0xA5A5A5A5A5A5A5A5ull));
    return CounterRng(k);
  }

  std::uint32_t next_u32() {
    if (buf_pos_ == 4) {
      block_ = philox(counter_, key_lo_, key_hi_);
      ++counter_;
      buf_pos_ = 0;
    }
    return block_[buf_pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t lo = next_u32();
    const std::uint64_t hi = next_u32();
    return (hi << 32) | lo;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (portable, unlike std::normal_distribution).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * std::numbers::pi * u2;
    spare_ = mag * std::sin(ang);
    have_spare_ = true;
    return mag * std::cos(ang);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = n * ((~0ull) / n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

 private:
  static std::array<std::uint32_t, 4> philox(std::uint64_t counter, std::uint32_t k0,
                                             std::uint32_t k1) {
    constexpr std::uint32_t kM0 = 0xD2511F53u;
    constexpr std::uint32_t kM1 = 0xCD9E8D57u;
    constexpr std::uint32_t kW0 = 0x9E3779B9u;
    constexpr std::uint32_t kW1 = 0xBB67AE85u;
    std::array<std::uint32_t, 4> x{static_cast<std::uint32_t>(counter),
                                   static_cast<std::uint32_t>(counter >> 32), 0x243F6A88u,
                                   0x85A308D3u};
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * x[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * x[2];
      const std::uint32_t h0 = static_cast<std::uint32_t>(p0 >> 32);
      const std::uint32_t l0 = static_cast<std::uint32_t>(p0);
      const std::uint32_t h1 = static_cast<std::uint32_t>(p1 >> 32);
      const std::uint32_t l1 = static_cast<std::uint32_t>(p1);
      x = {h1 ^ x[1] ^ k0, l1, h0 ^ x[3] ^ k1, l0};
      k0 += kW0;
      k1 += kW1;
    }
    return x;
  }

  std::uint32_t key_lo_;
  std::uint32_t key_hi_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int buf_pos_ = 4;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace fbcp
