#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace dvgaze {

// Worker cap from DVGAZE_THREADS (default 1, i.e. fully sequential).
inline int thread_limit() {
    const char* env = std::getenv("DVGAZE_THREADS");
    if (!env || !*env) return 1;
    try {
        const int n = std::stoi(env);
        return std::max(1, n);
    } catch (const std::exception&) {
        return 1;
    }
}

// Calls fn(i) for i in [0, n) on up to `threads` workers. Work items must be
// independent; the first exception is rethrown after all workers stop.
template <class F>
void parallel_for(std::size_t n, int threads, F&& fn) {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace dvgaze
