#pragma once

#include <functional>

namespace anerf {

/// Worker count used by parallel_for. Defaults to the ANERF_THREADS
/// environment variable, else the hardware concurrency.
int thread_count();
void set_thread_count(int count);

/// Runs body(i) for i in [begin, end) over contiguous blocks. Each index must
/// write only its own outputs, so results do not depend on the worker count.
void parallel_for(int begin, int end, const std::function<void(int)>& body);

}  // namespace anerf
