// Copyright (c) 2026 MDD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace mdd {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using MaskArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Error taxonomy. Every module throws one of these; messages carry the
// offending value or file so callers can report without re-deriving context.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error { using Error::Error; };
struct ValueError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct RangeError : Error { using Error::Error; };
struct CapacityError : Error { using Error::Error; };
struct IngestError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct ResolutionError : Error { using Error::Error; };
struct TrainingError : Error { using Error::Error; };
struct SamplerError : Error { using Error::Error; };
struct AdapterError : Error { using Error::Error; };
struct CapabilityError : Error { using Error::Error; };
struct DependencyError : Error { using Error::Error; };
struct IllConditionedError : Error { using Error::Error; };

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// splitmix64 finalizer; used to derive independent seed streams.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(a ^ mix64(b)); }

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// uniform/normal mappings below are fixed here so draws are reproducible
// across platforms (std::*_distribution is implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds, unbiased via rejection
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw RangeError("uniform_int: lo > hi");
    uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    if (range == 0) return static_cast<int64_t>(eng_());  // full 64-bit range
    uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % range);
  }

  // Box-Muller with cached spare
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Fills row-major by (row, col); the documented draw order for all
  // seeded matrix draws in this library.
  Mat normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
    return m;
  }

  Rng derive(uint64_t stream) const {
    return Rng(mix64(state_hash(), stream));
  }

 private:
  uint64_t state_hash() const {
    std::mt19937_64 copy = eng_;
    return copy();
  }
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Runs fn(i, worker) for i in [0, n). Work is split into contiguous chunks;
// `worker` identifies the executing chunk so callers can keep worker-local
// scratch state. Results must be written into index-addressed slots so the
// outcome does not depend on the thread count.
inline void parallel_for_workers(
    size_t n, int num_threads, const std::function<void(size_t, int)>& fn) {
  if (n == 0) return;
  int workers = std::min<int>(num_threads, static_cast<int>(n));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  size_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    size_t begin = w * chunk;
    size_t end = std::min(n, begin + chunk);
    pool.emplace_back([&, w, begin, end] {
      try {
        for (size_t i = begin; i < end; ++i) fn(i, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline void parallel_for(size_t n, int num_threads,
                         const std::function<void(size_t)>& fn) {
  parallel_for_workers(n, num_threads, [&](size_t i, int) { fn(i); });
}

inline int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline double round_half_away(double x) {
  return x >= 0 ? std::floor(x + 0.5) : std::ceil(x - 0.5);
}

}  // namespace mdd
