#pragma once

#include <cstddef>
#include <functional>

namespace patchsim {

// Worker count used by parallel_for. 0 resets to hardware concurrency.
void set_worker_count(int n);
int worker_count();

// Runs fn over contiguous index ranges [begin, end) partitioned across
// workers. Every index is handled by exactly one worker, so writers to
// disjoint outputs stay bit-deterministic regardless of scheduling.
void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace patchsim
