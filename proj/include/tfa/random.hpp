#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace tfa {

// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Seed of the named stream `purpose` under `master`. Streams with different
// names are independent, so new consumers never shift existing ones.
inline std::uint64_t stream_seed(std::uint64_t master, std::string_view purpose) {
  return mix64(mix64(master) ^ fnv1a(purpose));
}

inline std::uint64_t stream_seed(std::uint64_t master, std::string_view purpose, std::uint64_t index) {
  return mix64(stream_seed(master, purpose) ^ mix64(index + 1));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t master, std::string_view purpose) { return Rng(stream_seed(master, purpose)); }

inline Rng make_rng(std::uint64_t master, std::string_view purpose, std::uint64_t index) {
  return Rng(stream_seed(master, purpose, index));
}

// Deterministic Fisher-Yates; std::shuffle's algorithm is implementation-defined.
template <class T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Box-Muller on our own uniform draws so the sequence does not depend on the
// standard library's distribution implementation.
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// Runs f(i) for i in [0, n) on up to `threads` workers with a static strided
// assignment. f must only write to per-index state.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) f(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace tfa
