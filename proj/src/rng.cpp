#include "nlmkit/rng.hpp"

#include <cassert>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nlmkit {

static uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed) : seed_(seed) {
  uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

static inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

uint64_t Rng::next_u64() {
  uint64_t result = rotl(s_[1] * 5, 7) * 9;
  uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

int64_t Rng::next_below(int64_t n) {
  assert(n >= 1);
  uint64_t un = static_cast<uint64_t>(n);
  uint64_t mask = ~uint64_t{0};
  if (n > 1) {
    mask = (uint64_t{1} << (64 - __builtin_clzll(un - 1))) - 1;
  } else {
    return 0;
  }
  for (;;) {
    uint64_t r = next_u64() & mask;
    if (r < un) return static_cast<int64_t>(r);
  }
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = uniform(-1.0, 1.0);
    v = uniform(-1.0, 1.0);
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * f;
  have_spare_ = true;
  return u * f;
}

Rng Rng::derive(std::string_view name) const {
  uint64_t x = seed_ ^ fnv1a64(name);
  return Rng(splitmix64(x));
}

uint64_t fnv1a64(std::string_view bytes) { return fnv1a64(bytes.data(), bytes.size()); }

uint64_t fnv1a64(const void* data, size_t len, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

AliasTable::AliasTable(std::span<const double> weights) {
  int64_t n = static_cast<int64_t>(weights.size());
  if (n == 0) throw std::invalid_argument("AliasTable: empty weight vector");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("AliasTable: negative or NaN weight");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument("AliasTable: all weights zero");

  prob_.resize(n);
  alias_.assign(n, 0);
  std::vector<double> scaled(n);
  for (int64_t i = 0; i < n; ++i) scaled[i] = weights[i] * n / total;

  std::vector<int32_t> small, large;
  small.reserve(n);
  large.reserve(n);
  for (int64_t i = 0; i < n; ++i) {
    (scaled[i] < 1.0 ? small : large).push_back(static_cast<int32_t>(i));
  }
  while (!small.empty() && !large.empty()) {
    int32_t s = small.back();
    small.pop_back();
    int32_t l = large.back();
    large.pop_back();
    prob_[s] = scaled[s];
    alias_[s] = l;
    scaled[l] = (scaled[l] + scaled[s]) - 1.0;
    (scaled[l] < 1.0 ? small : large).push_back(l);
  }
  for (int32_t i : large) prob_[i] = 1.0;
  for (int32_t i : small) prob_[i] = 1.0;
}

int32_t AliasTable::sample(Rng& rng) const {
  int64_t i = rng.next_below(size());
  return rng.next_double() < prob_[i] ? static_cast<int32_t>(i) : alias_[i];
}

}  // namespace nlmkit
