// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace gsvox {

// Resolve a worker count: explicit request > GSV_THREADS env > hardware.
// Always returns >= 1.
inline int resolve_threads(int requested = 0) {
    if (requested > 0)
        return requested;
    if (const char* env = std::getenv("GSV_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0)
            return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

// Run fn(i) for i in [0, n). Work is split into contiguous chunks, one per
// worker, so callers whose iterations write disjoint outputs get bit-identical
// results for every thread count.
template <typename Fn>
void parallel_for(std::size_t n, int num_threads, Fn&& fn) {
    const int threads = resolve_threads(num_threads);
    if (n == 0)
        return;
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end)
            break;
        pool.emplace_back([begin, end, &fn]() {
            for (std::size_t i = begin; i < end; ++i)
                fn(i);
        });
    }
    for (auto& t : pool)
        t.join();
}

// Chunked variant: fn(worker_index, begin, end) over contiguous ranges.
// Useful when each worker owns a private buffer merged afterwards in
// worker-index order (deterministic regardless of scheduling).
template <typename Fn>
void parallel_chunks(std::size_t n, int num_threads, Fn&& fn) {
    const int threads = resolve_threads(num_threads);
    if (n == 0)
        return;
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(threads > 0 ? threads : 1), n);
    const std::size_t chunk = (n + workers - 1) / workers;
    if (workers <= 1) {
        fn(std::size_t{0}, std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end)
            break;
        pool.emplace_back([w, begin, end, &fn]() { fn(w, begin, end); });
    }
    for (auto& t : pool)
        t.join();
}

} // namespace gsvox
