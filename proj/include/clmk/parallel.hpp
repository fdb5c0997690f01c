#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace clmk {

// Tiny persistent worker pool used by the tensor kernels. Work is always
// partitioned statically by index range and every output element is written
// by exactly one worker, so results are bitwise identical for any thread
// count (including 1).
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    size_t worker_count() const { return workers_.size(); }

    // Runs fn(begin, end) over [0, n) split into contiguous chunks, one per
    // worker plus the calling thread. Blocks until all chunks finish.
    void for_range(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
        if (n <= 0) return;
        const int64_t parts = static_cast<int64_t>(workers_.size()) + 1;
        if (parts == 1 || n < 2) {
            fn(0, n);
            return;
        }
        const int64_t chunk = (n + parts - 1) / parts;
        {
            std::unique_lock<std::mutex> lock(mu_);
            task_ = &fn;
            task_n_ = n;
            task_chunk_ = chunk;
            next_chunk_ = 1; // chunk 0 belongs to the caller
            pending_ = 0;
            for (int64_t p = 1; p < parts; ++p) {
                if (p * chunk < n) ++pending_;
            }
            ++generation_;
        }
        cv_.notify_all();
        fn(0, std::min<int64_t>(chunk, n));
        std::unique_lock<std::mutex> lock(mu_);
        done_cv_.wait(lock, [this] { return pending_ == 0; });
        task_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lock(mu_);
            stop_ = true;
            ++generation_;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

private:
    ThreadPool() {
        unsigned hw = std::thread::hardware_concurrency();
        if (hw == 0) hw = 1;
        const unsigned extra = hw > 1 ? hw - 1 : 0;
        for (unsigned i = 0; i < extra; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    void worker_loop() {
        uint64_t seen = 0;
        while (true) {
            const std::function<void(int64_t, int64_t)>* task = nullptr;
            int64_t begin = 0, end = 0;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                if (task_ == nullptr) continue;
                const int64_t p = next_chunk_++;
                begin = p * task_chunk_;
                end = std::min(begin + task_chunk_, task_n_);
                if (begin >= task_n_) continue;
                task = task_;
            }
            (*task)(begin, end);
            {
                std::unique_lock<std::mutex> lock(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(int64_t, int64_t)>* task_ = nullptr;
    int64_t task_n_ = 0;
    int64_t task_chunk_ = 0;
    int64_t next_chunk_ = 0;
    int64_t pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

// Parallel loop over [0, n); fn must write disjoint outputs per index.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    ThreadPool::instance().for_range(n, fn);
}

} // namespace clmk
