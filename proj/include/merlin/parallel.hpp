#pragma once

#include <cstddef>
#include <functional>
#include <span>

namespace merlin {

/// Runs fn(i) for i in [0, n) on up to `threads` workers with static
/// chunking. The first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

/// Pairwise summation in a fixed order, independent of how values were
/// produced.
double pairwise_sum(std::span<const double> v);

/// Default worker count: MERLIN_THREADS, else 1.
int default_threads();

}  // namespace merlin
