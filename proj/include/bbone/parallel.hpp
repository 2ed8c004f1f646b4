#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace bbone
{
    // Evaluates fn(i) for i < n on `threads` workers pulling indices from a shared counter. Results are
    // stored by index, so the output never depends on scheduling. The first exception is rethrown.
    template <class T, class Fn>
    std::vector<T> parallel_map(std::size_t n, std::size_t threads, Fn&& fn)
    {
        std::vector<T> out(n);
        threads = std::max<std::size_t>(1, std::min(threads, n));
        if (threads <= 1)
        {
            for (std::size_t i = 0; i < n; ++i)
            {
                out[i] = fn(i);
            }
            return out;
        }
        std::atomic<std::size_t> next{0};
        std::exception_ptr error;
        std::mutex error_mutex;
        auto worker = [&] {
            for (;;)
            {
                const std::size_t i = next.fetch_add(1);
                if (i >= n)
                {
                    return;
                }
                try
                {
                    out[i] = fn(i);
                }
                catch (...)
                {
                    std::lock_guard lock(error_mutex);
                    if (!error)
                    {
                        error = std::current_exception();
                    }
                    next.store(n);
                }
            }
        };
        std::vector<std::thread> pool;
        for (std::size_t k = 0; k < threads; ++k)
        {
            pool.emplace_back(worker);
        }
        for (auto& t : pool)
        {
            t.join();
        }
        if (error)
        {
            std::rethrow_exception(error);
        }
        return out;
    }

    inline std::size_t default_threads()
    {
        const unsigned h = std::thread::hardware_concurrency();
        return h == 0 ? 1 : h;
    }
}
