#pragma once

#include <cstddef>
#include <functional>

namespace gsstyle {

// Process-wide worker cap. 0 means "use hardware concurrency".
void set_thread_count(int n);
int thread_count();

// Runs body(i) for i in [0, n) over contiguous chunks. Every index is
// processed exactly once; callers must not depend on execution order and
// must write results into index-owned slots so outputs stay deterministic.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace gsstyle
