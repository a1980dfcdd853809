#pragma once

// Seedable, splittable random streams.
//
// Every random draw in the toolkit comes from an Rng derived from the run
// seed along a fixed path of stream tags, e.g.
//   derive(seed, {Stream::Shuffle, epoch})            minibatch order
//   derive(seed, {Stream::Augment, epoch, sample_id}) per-sample augmentation
//   derive(seed, {Stream::Mask, epoch, sample_id})    per-sample MIM mask
//   derive(seed, {Stream::Init})                      parameter initialization
// so results depend only on (seed, path) and never on call order elsewhere.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace nlxct {

enum class Stream : std::uint64_t {
  Init = 1,
  Shuffle = 2,
  Augment = 3,
  Mask = 4,
  Data = 5,
  Order = 6,
  Slice = 7,
  Split = 8,
  Eval = 9,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(base);
  for (std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ULL));
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static Rng derive(std::uint64_t base, std::initializer_list<std::uint64_t> path) { return Rng(derive_seed(base, path)); }
  static Rng derive(std::uint64_t base, Stream s) { return Rng(derive_seed(base, {static_cast<std::uint64_t>(s)})); }
  template <class... Ts>
  static Rng derive(std::uint64_t base, Stream s, Ts... rest) {
    return Rng(derive_seed(base, {static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(rest)...}));
  }

  /// Uniform in [0, 1).
  double uniform() { return std::generate_canonical<double, 53>(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller keeps the sequence independent of library distribution internals.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(engine_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace nlxct
