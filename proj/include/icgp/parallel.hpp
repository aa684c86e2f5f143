#pragma once

#include <functional>

namespace icgp {

// Worker count: ICGP_THREADS if set to a positive integer, otherwise the
// hardware concurrency (at least 1).
int worker_count();

// Runs fn(0..n-1) on up to `threads` workers. Each index must write only to
// its own output slot; the first exception is rethrown after all workers stop.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace icgp
