#pragma once
#include <functional>
#include <thread>
#include <vector>

namespace seqscript {

// Worker cap from SEQSCRIPT_THREADS; defaults to 1 so every run is
// bit-reproducible unless the caller opts in.
int thread_budget();

// Splits [0,n) into at most `threads` fixed contiguous chunks, one thread
// each: fn(begin, end, chunk_index). Chunk boundaries depend only on (n,
// threads), so per-chunk accumulators reduced in chunk order give identical
// results run to run.
void parallel_chunks(int n, int threads, const std::function<void(int, int, int)>& fn);

}  // namespace seqscript
