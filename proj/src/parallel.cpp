#include "tttseg/parallel.hpp"

#include <cstdlib>
#include <thread>
#include <vector>

namespace tttseg {

int max_threads() {
  static const int cached = [] {
    const char* env = std::getenv("TTT_SEG_THREADS");
    if (env == nullptr) return 1;
    int v = std::atoi(env);
    return v >= 1 ? v : 1;
  }();
  return cached;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const int threads = max_threads();
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace tttseg
