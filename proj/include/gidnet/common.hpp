#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace gidnet {

/// Base class for all failures raised by this library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape/extent contract violations.
class ShapeError : public Error {
public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// NaN/Inf escaped an operator, or inputs were non-finite.
class NumericError : public Error {
public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// File and serialization failures.
class IoError : public Error {
public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

namespace detail {

inline std::atomic<int>& thread_count_slot() {
  static std::atomic<int> n{0}; // 0 = not configured yet
  return n;
}

inline int default_thread_count() {
  if (const char* env = std::getenv("GIDNET_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

} // namespace detail

inline void set_thread_count(int n) {
  detail::thread_count_slot().store(n < 1 ? 1 : n);
}

inline int thread_count() {
  int n = detail::thread_count_slot().load();
  if (n == 0) {
    n = detail::default_thread_count();
    detail::thread_count_slot().store(n);
  }
  return n;
}

/// Static-partition parallel loop. Each index is processed exactly once by
/// one worker, and every index's own computation is self-contained, so the
/// result is identical for any worker count.
template <typename Fn>
void parallel_for(std::int64_t begin, std::int64_t end, Fn&& fn) {
  const std::int64_t total = end - begin;
  if (total <= 0) return;
  const int workers =
      static_cast<int>(std::min<std::int64_t>(thread_count(), total));
  if (workers <= 1) {
    for (std::int64_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  const std::int64_t chunk = (total + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::int64_t lo = begin + w * chunk;
    const std::int64_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

/// Counter-based deterministic generator (splitmix64 core). Streams can be
/// keyed by (seed, name) so every parameter tensor draws from its own
/// reproducible sequence regardless of build order.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : state_(seed + 0x9e3779b97f4a7c15ULL) {}

  static Rng keyed(std::uint64_t seed, std::string_view name) {
    // FNV-1a over the name, mixed with the seed
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char ch : name) {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
    Rng r(seed);
    r.state_ ^= h;
    r.next_u64();
    return r;
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1), 24 bits of mantissa.
  float uniform() {
    return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

private:
  std::uint64_t state_;
};

} // namespace gidnet
