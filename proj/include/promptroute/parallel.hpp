#pragma once

#include <cstddef>
#include <functional>

namespace promptroute {

// Worker cap for parallel_for; 0 means hardware concurrency.
void set_max_threads(unsigned threads);
unsigned max_threads();

// Runs body(i) for i in [0, count). Work is split statically, so results
// written by index are independent of the thread count. The first exception
// thrown by any worker is rethrown after all workers join.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace promptroute
