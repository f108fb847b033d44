#pragma once

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <vector>

#include "s2attn/field.hpp"

namespace s2attn {

namespace detail {
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{0};
  return n;
}
}  // namespace detail

/// Number of hardware threads OpenMP would use by default.
inline int max_threads() { return std::max(1, omp_get_num_procs()); }

/// Cap the worker pool used by all kernels. `n <= 0` restores the default.
inline void set_num_threads(int n) { detail::thread_setting().store(n > 0 ? n : 0); }

inline int num_threads() {
  const int n = detail::thread_setting().load();
  return n > 0 ? n : max_threads();
}

/// Runs `fn(begin, end)` over contiguous chunks of [0, n). Every chunk is
/// processed by exactly one thread, so per-item results never depend on the
/// thread count. `fn` must not throw.
template <typename Fn>
void parallel_chunks(Index n, Index chunk, Fn&& fn) {
  if (n <= 0) return;
  chunk = std::max<Index>(1, chunk);
  const Index nchunks = (n + chunk - 1) / chunk;
  const int threads = static_cast<int>(std::min<Index>(num_threads(), nchunks));
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads)
  for (Index c = 0; c < nchunks; ++c) {
    const Index begin = c * chunk;
    fn(begin, std::min(n, begin + chunk));
  }
}

/// Pairwise (tree) reduction of a list of partial results, in place.
/// The combination order only depends on `parts.size()`.
template <typename T>
T pairwise_reduce(std::vector<T>& parts) {
  for (std::size_t stride = 1; stride < parts.size(); stride *= 2)
    for (std::size_t i = 0; i + stride < parts.size(); i += 2 * stride) parts[i] += parts[i + stride];
  return parts.front();
}

/// Pairwise summation of a contiguous range with a sequential base case.
template <typename Scalar>
Scalar pairwise_sum(const Scalar* x, Index n) {
  constexpr Index kBase = 32;
  if (n <= kBase) {
    Scalar s = 0;
    for (Index i = 0; i < n; ++i) s += x[i];
    return s;
  }
  const Index half = n / 2;
  return pairwise_sum(x, half) + pairwise_sum(x + half, n - half);
}

template <typename Derived>
typename Derived::Scalar pairwise_sum(const Eigen::DenseBase<Derived>& v) {
  const Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> tmp = v.derived().reshaped();
  return pairwise_sum(tmp.data(), tmp.size());
}

}  // namespace s2attn
