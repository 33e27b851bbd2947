#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <mutex>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lcrl {

inline constexpr double kProbSumTol = 1e-12;

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

// splitmix64-style mixing to derive independent sub-stream seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (salt + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// mt19937_64 with explicit uniform/normal/categorical mappings. The standard
// distributions are implementation-defined, so streams built from these
// mappings stay reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // [0, 1), 53-bit resolution
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller, two uniforms per draw (no cached second component so the
  // draw count per call is fixed).
  double normal() {
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Inverse-CDF draw over category probabilities in index order.
  int categorical(std::span<const double> probs) {
    const double u = uniform01();
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  std::uint64_t raw() { return engine_(); }

 private:
  static constexpr double kTwoPi = 6.283185307179586476925286766559;
  std::mt19937_64 engine_;
};

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Max-shifted softmax; out may alias in.
inline void softmax(std::span<const double> in, std::span<double> out) {
  const double m = *std::max_element(in.begin(), in.end());
  double s = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - m);
    s += out[i];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= s;
}

inline std::vector<double> softmax(std::span<const double> in) {
  std::vector<double> out(in.size());
  softmax(in, out);
  return out;
}

// 17-significant-digit decimal serialization (exact double round-trip).
inline std::string g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

// Chunked parallel loop. Work item i must be independent of all others;
// callers that need determinism accumulate into per-index slots and reduce
// in index order afterwards.
// Runs fn(lo, hi) over disjoint contiguous ranges covering [0, n). Workers own
// their range, so fn may keep per-range scratch. Results must not depend on
// the range split; reductions happen on the caller's side in index order.
template <typename Fn>
void parallel_chunks(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    if (n > 0) fn(std::size_t{0}, n);
    return;
  }
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = n * w / workers;
    const std::size_t hi = n * (w + 1) / workers;
    pool.emplace_back([lo, hi, &fn, &first_error, &err_mutex] {
      try {
        fn(lo, hi);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  parallel_chunks(n, threads, [&fn](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace lcrl
