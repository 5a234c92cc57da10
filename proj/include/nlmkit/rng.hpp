#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace nlmkit {

// xoshiro256** with splitmix64 seeding. Self-contained so that streams are
// reproducible across compilers and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  // [0, 1)
  double next_double();
  // unbiased integer in [0, n), n >= 1
  int64_t next_below(int64_t n);
  double uniform(double lo, double hi);
  // standard normal, Box-Muller
  double normal();

  // Independent stream derived from this stream's seed and a label. Every
  // component (init, shuffle, sampling, clustering) pulls a named stream off
  // the one config seed so it is reproducible in isolation.
  Rng derive(std::string_view name) const;

  template <typename T>
  void shuffle(std::span<T> v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = next_below(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  uint64_t seed_;
  uint64_t s_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

uint64_t fnv1a64(std::string_view bytes);
uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 1469598103934665603ull);

// Vose alias method for O(1) draws from a fixed discrete distribution.
class AliasTable {
 public:
  explicit AliasTable(std::span<const double> weights);
  int32_t sample(Rng& rng) const;
  int64_t size() const { return static_cast<int64_t>(prob_.size()); }

 private:
  std::vector<double> prob_;
  std::vector<int32_t> alias_;
};

}  // namespace nlmkit
