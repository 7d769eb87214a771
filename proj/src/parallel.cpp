#include "ncatlas/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace ncatlas {

namespace {

std::size_t initial_threads() {
    if (const char* env = std::getenv("NC_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v >= 1) return static_cast<std::size_t>(v);
        } catch (...) {
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

std::atomic<std::size_t>& thread_setting() {
    static std::atomic<std::size_t> value{initial_threads()};
    return value;
}

} // namespace

std::size_t worker_threads() { return thread_setting().load(std::memory_order_relaxed); }

void set_worker_threads(std::size_t n) { thread_setting().store(n == 0 ? 1 : n, std::memory_order_relaxed); }

} // namespace ncatlas
