#include "seqscript/parallel.hpp"

#include <cstdlib>

namespace seqscript {

int thread_budget() {
  const char* env = std::getenv("SEQSCRIPT_THREADS");
  if (!env || !*env) return 1;
  const int v = std::atoi(env);
  if (v < 1) return 1;
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  return hw > 0 ? std::min(v, hw * 4) : v;
}

void parallel_chunks(int n, int threads, const std::function<void(int, int, int)>& fn) {
  if (n <= 0) return;
  const int k = std::max(1, std::min(threads, n));
  if (k == 1) {
    fn(0, n, 0);
    return;
  }
  const int per = (n + k - 1) / k;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    const int begin = c * per;
    const int end = std::min(n, begin + per);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end, c] { fn(begin, end, c); });
  }
  for (std::thread& t : pool) t.join();
}

}  // namespace seqscript
