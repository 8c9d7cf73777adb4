/*
 * Copyright 2026 The sigmaflow Authors.
 * This file is licensed to you under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software distributed under
 * the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR REPRESENTATIONS
 * OF ANY KIND, either express or implied. See the License for the specific language
 * governing permissions and limitations under the License.
 */

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace sigmaflow {

namespace detail {
inline std::atomic<int>& thread_setting()
{
    static std::atomic<int> n{1};
    return n;
}
} // namespace detail

/// Worker count used by parallel_for. Results never depend on this value.
inline int num_threads() { return detail::thread_setting().load(); }

inline void set_num_threads(int n) { detail::thread_setting().store(std::max(1, n)); }

/// Runs fn(i) for i in [begin, end) over static contiguous chunks. Each index is
/// visited exactly once, so callers that write to disjoint slots stay deterministic.
template <typename Fn>
void parallel_for(std::ptrdiff_t begin, std::ptrdiff_t end, Fn&& fn)
{
    const std::ptrdiff_t count = end - begin;
    const int workers = static_cast<int>(std::min<std::ptrdiff_t>(num_threads(), count));
    if (workers <= 1) {
        for (std::ptrdiff_t i = begin; i < end; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const std::ptrdiff_t chunk = (count + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const std::ptrdiff_t lo = begin + w * chunk;
        const std::ptrdiff_t hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn, &failure, &failure_mutex] {
            try {
                for (std::ptrdiff_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                const std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

} // namespace sigmaflow
