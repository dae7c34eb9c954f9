#include "jf/common.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace jf {

namespace {

int resolve_worker_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("JF_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) hw = std::min<long>(v, 64);
    }
    return hw;
}

// Minimal persistent pool; the calling thread executes chunk 0 itself.
class Pool {
public:
    Pool() : workers_(std::max(0, worker_count_ - 1)) {
        for (int i = 0; i < static_cast<int>(workers_.size()); ++i) {
            workers_[i] = std::thread([this, i] { run(i); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    int width() const { return worker_count_; }

    void dispatch(int begin, int end, const std::function<void(int, int)>& fn) {
        const int n = end - begin;
        const int parts = std::min(width(), n);
        if (parts <= 1 || workers_.empty()) {
            fn(begin, end);
            return;
        }
        const int chunk = (n + parts - 1) / parts;
        {
            std::lock_guard<std::mutex> lk(m_);
            job_fn_ = &fn;
            job_begin_ = begin;
            job_end_ = end;
            job_chunk_ = chunk;
            // Every worker acknowledges the epoch, including those that get
            // an empty range.
            remaining_.store(static_cast<int>(workers_.size()), std::memory_order_relaxed);
            epoch_++;
        }
        cv_.notify_all();
        fn(begin, std::min(end, begin + chunk));
        // Wait for the other chunks.
        std::unique_lock<std::mutex> lk(m_);
        done_cv_.wait(lk, [this] { return remaining_.load(std::memory_order_acquire) == 0; });
        job_fn_ = nullptr;
    }

private:
    void run(int worker_index) {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(int, int)>* fn = nullptr;
            int b = 0, e = 0;
            {
                std::unique_lock<std::mutex> lk(m_);
                cv_.wait(lk, [&] { return stop_ || epoch_ != seen; });
                if (stop_) return;
                seen = epoch_;
                fn = job_fn_;
                const int idx = worker_index + 1;  // chunk 0 belongs to the caller
                b = job_begin_ + idx * job_chunk_;
                e = std::min(job_end_, b + job_chunk_);
            }
            if (fn && b < e) (*fn)(b, e);
            if (remaining_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
                std::lock_guard<std::mutex> lk(m_);
                done_cv_.notify_all();
            }
        }
    }

    int worker_count_ = resolve_worker_count();
    std::vector<std::thread> workers_;
    std::mutex m_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    bool stop_ = false;
    std::uint64_t epoch_ = 0;
    const std::function<void(int, int)>* job_fn_ = nullptr;
    int job_begin_ = 0, job_end_ = 0, job_chunk_ = 0;
    std::atomic<int> remaining_{0};
};

Pool& pool() {
    static Pool p;
    return p;
}

}  // namespace

int worker_count() { return pool().width(); }

void parallel_for(int begin, int end, const std::function<void(int, int)>& fn) {
    if (begin >= end) return;
    pool().dispatch(begin, end, fn);
}

}  // namespace jf
