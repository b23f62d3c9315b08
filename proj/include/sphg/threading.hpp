#pragma once

#include <cstdint>
#include <functional>

namespace sphg {

// Process-wide worker count. 1 = fully sequential. Results are bit-identical
// for every thread count: parallel_for hands each worker a disjoint
// contiguous chunk and all loops inside a chunk run in a fixed order.
void set_threads(int n);
int threads();

// Runs body(begin, end) over a static partition of [0, n).
// Nested calls from inside a worker run inline.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace sphg
