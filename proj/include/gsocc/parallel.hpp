#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace gsocc {

/// Worker cap shared by every parallel loop in the library. 0 means
/// "hardware concurrency".
inline unsigned& thread_cap() {
  static unsigned cap = 0;
  return cap;
}

inline void set_thread_cap(unsigned n) { thread_cap() = n; }

inline unsigned effective_threads() {
  unsigned n = thread_cap();
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

/// Split [0, count) into `chunks` contiguous pieces and run
/// fn(chunk, begin, end) for each. The chunk layout depends only on `count`
/// and `chunks`, never on the number of workers, so callers that reduce
/// per-chunk partials in chunk order get bitwise-identical results for any
/// thread cap.
template <typename Fn>
void parallel_chunks(std::size_t count, std::size_t chunks, Fn&& fn) {
  if (count == 0) return;
  chunks = std::clamp<std::size_t>(chunks, 1, count);
  auto bounds = [&](std::size_t c) { return count * c / chunks; };

  const unsigned workers = std::min<std::size_t>(effective_threads(), chunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c, bounds(c), bounds(c + 1));
    return;
  }

  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t c = w; c < chunks; c += workers) {
        try {
          fn(c, bounds(c), bounds(c + 1));
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Element-wise loop; fn(i) must only write to state owned by index i.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t chunks = std::min<std::size_t>(count, 4 * effective_threads());
  parallel_chunks(count, chunks, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) fn(i);
  });
}

/// Neumaier-compensated accumulator. Makes sums insensitive to term order
/// far below double rounding of the final value.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  [[nodiscard]] double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace gsocc
