// Static-partition data parallelism. Work is split into one contiguous block per
// thread, so results (including floating-point reductions merged in block order)
// depend only on the thread count, never on scheduling.
#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace pulmoreg::parallel {

inline int& thread_count_ref() {
  static int n = 1;
  return n;
}

inline int thread_count() { return thread_count_ref(); }

/// 0 selects std::thread::hardware_concurrency().
inline void set_thread_count(int n) {
  if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  thread_count_ref() = n;
}

struct Block {
  std::size_t begin;
  std::size_t end;
  int index;
};

inline std::vector<Block> partition(std::size_t n, int blocks) {
  blocks = std::max(1, std::min<int>(blocks, static_cast<int>(std::max<std::size_t>(n, 1))));
  std::vector<Block> out;
  out.reserve(static_cast<std::size_t>(blocks));
  for (int b = 0; b < blocks; ++b) {
    out.push_back({n * static_cast<std::size_t>(b) / static_cast<std::size_t>(blocks),
                   n * static_cast<std::size_t>(b + 1) / static_cast<std::size_t>(blocks), b});
  }
  return out;
}

/// Calls fn(block) for each block of [0, n); blocks run concurrently.
template <class Fn>
void for_blocks(std::size_t n, Fn&& fn) {
  const auto blocks = partition(n, thread_count());
  if (blocks.size() == 1) {
    fn(blocks.front());
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(blocks.size());
  workers.reserve(blocks.size() - 1);
  for (std::size_t b = 1; b < blocks.size(); ++b) {
    workers.emplace_back([&, b] {
      try {
        fn(blocks[b]);
      } catch (...) {
        errors[b] = std::current_exception();
      }
    });
  }
  try {
    fn(blocks.front());
  } catch (...) {
    errors[0] = std::current_exception();
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Calls fn(i) for every i in [0, n).
template <class Fn>
void for_each_index(std::size_t n, Fn&& fn) {
  for_blocks(n, [&](const Block& b) {
    for (std::size_t i = b.begin; i < b.end; ++i) fn(i);
  });
}

/// Number of blocks for_blocks will use for n items.
inline int block_count(std::size_t n) { return static_cast<int>(partition(n, thread_count()).size()); }

}  // namespace pulmoreg::parallel
