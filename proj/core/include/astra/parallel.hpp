#pragma once

#include <cstddef>
#include <functional>

namespace astra {

// Runs fn(i) for every i in [0, count) using at most `workers` threads.
// workers <= 1 (or count <= 1) executes inline on the calling thread.
// Indices are handed out through a shared counter, so outputs must be written
// to disjoint, index-owned locations.  The first exception raised by any
// invocation is rethrown on the calling thread after all threads finish.
void parallel_for(std::size_t count, int workers,
                  const std::function<void(std::size_t)>& fn);

}  // namespace astra
