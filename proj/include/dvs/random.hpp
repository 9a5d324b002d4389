#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "dvs/common.hpp"

namespace dvs {

// Named deterministic RNG streams derived from one run seed.  Consumers ask
// for a stream by name ("psi_noise/e", "data/batch", ...) so the draw order
// inside one consumer never perturbs another.  Streams are created on first
// use; serialization captures every stream created so far, which is exactly
// the set needed to resume a run bit-identically.
class RngPool {
 public:
  explicit RngPool(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::mt19937_64& stream(const std::string& name) {
    auto it = streams_.find(name);
    if (it == streams_.end()) {
      std::seed_seq seq{seed_, hash_name(name)};
      it = streams_.emplace(name, std::mt19937_64(seq)).first;
    }
    return it->second;
  }

  // Uniform in [0,1) with 53-bit resolution.
  static double uniform(std::mt19937_64& g) {
    return double(g() >> 11) * 0x1.0p-53;
  }

  // Unbiased integer in [0,n) by rejection.
  static long uniform_int(std::mt19937_64& g, long n) {
    DVS_CHECK(n > 0, "uniform_int: n must be positive, got ", n);
    const std::uint64_t un = std::uint64_t(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
      x = g();
    } while (x >= limit);
    return long(x % un);
  }

  // Stateless Box-Muller: two engine draws per normal, no cached half, so the
  // engine state alone determines every future draw (required for resume).
  static double normal(std::mt19937_64& g) {
    double u1 = uniform(g);
    double u2 = uniform(g);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::string serialize() const {
    std::ostringstream os;
    os << seed_ << '\n' << streams_.size() << '\n';
    for (const auto& [name, eng] : streams_) {
      os << name << '\n' << eng << '\n';
    }
    return os.str();
  }

  void deserialize(const std::string& blob) {
    std::istringstream is(blob);
    std::size_t count = 0;
    is >> seed_ >> count;
    is.ignore();
    streams_.clear();
    for (std::size_t i = 0; i < count; ++i) {
      std::string name;
      std::getline(is, name);
      std::mt19937_64 eng;
      is >> eng;
      is.ignore();
      DVS_CHECK(is.good() || (i + 1 == count && is.eof()),
                "rng state: truncated blob");
      streams_.emplace(std::move(name), eng);
    }
  }

 private:
  static std::uint64_t hash_name(const std::string& name) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : name) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

  std::uint64_t seed_;
  std::map<std::string, std::mt19937_64> streams_;
};

}  // namespace dvs
