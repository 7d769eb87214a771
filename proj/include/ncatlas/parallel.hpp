#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ncatlas {

// Worker count used by data-parallel kernels. Initialized from NC_THREADS
// (falls back to hardware concurrency); set_worker_threads overrides it.
std::size_t worker_threads();
void set_worker_threads(std::size_t n);

// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each.
// Chunks only decide who computes what; every kernel that uses this keeps a
// fixed per-element evaluation order, so results never depend on the split.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t min_chunk, Fn&& fn) {
    if (n == 0) return;
    std::size_t threads = std::min(worker_threads(), (n + min_chunk - 1) / std::max<std::size_t>(min_chunk, 1));
    if (threads <= 1) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t chunk = (n + threads - 1) / threads;
    std::vector<std::thread> pool;
    pool.reserve(threads - 1);
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&](std::size_t begin, std::size_t end) {
        try {
            fn(begin, end);
        } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
        }
    };
    for (std::size_t t = 1; t < threads; ++t) {
        const std::size_t begin = t * chunk;
        if (begin >= n) break;
        pool.emplace_back(run, begin, std::min(n, begin + chunk));
    }
    run(0, std::min(n, chunk));
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

} // namespace ncatlas
