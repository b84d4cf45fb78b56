#pragma once

#include <cstddef>
#include <functional>

namespace tttseg {

// Thread cap from TTT_SEG_THREADS (default 1). Read once per process.
int max_threads();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks across at
// most max_threads() threads. Chunks must write disjoint outputs; results are
// identical for any thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace tttseg
