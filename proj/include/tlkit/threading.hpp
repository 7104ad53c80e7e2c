#pragma once

#include <cstdint>
#include <functional>

namespace tlkit {

// Worker-thread budget: min(TLKIT_THREADS, hardware concurrency), at least 1.
// Read once at first use.
int thread_budget();

// Runs fn over chunks partitioning [0, n). Every index is handled by exactly
// one invocation with a fixed inner order, so results are identical for any
// thread budget. Nested calls from inside a worker run inline.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace tlkit
