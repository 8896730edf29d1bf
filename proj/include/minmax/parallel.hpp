#pragma once
#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mm {

// Static contiguous partition of [0, n) over `workers` threads. Callers only
// write to slot i from iteration i, so results never depend on the split.
template <class F>
void parallel_for(std::size_t n, int workers, F&& f)
{
    if (workers <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    std::vector<std::thread> pool;
    pool.reserve(nt - 1);
    std::exception_ptr err;
    std::mutex err_mu;
    std::size_t chunk = (n + nt - 1) / nt;
    auto run = [&](std::size_t lo, std::size_t hi) {
        try {
            for (std::size_t i = lo; i < hi; ++i) f(i);
        } catch (...) {
            std::lock_guard<std::mutex> lk(err_mu);
            if (!err) err = std::current_exception();
        }
    };
    for (std::size_t w = 1; w < nt; ++w) {
        std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back(run, lo, hi);
    }
    run(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace mm
