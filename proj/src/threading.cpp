#include "sphg/threading.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace sphg {

namespace {

thread_local bool t_inside_worker = false;

class Pool {
public:
    explicit Pool(int workers) : stop_(false), generation_(0), pending_(0) {
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this, i] { worker_loop(i + 1); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    int lanes() const { return static_cast<int>(threads_.size()) + 1; }

    void run(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
        const int parts = lanes();
        {
            std::lock_guard<std::mutex> lk(mu_);
            job_ = &body;
            job_n_ = n;
            pending_ = parts - 1;
            ++generation_;
        }
        cv_.notify_all();
        run_chunk(0, parts, n, body);
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

private:
    static void run_chunk(int part, int parts, std::int64_t n,
                          const std::function<void(std::int64_t, std::int64_t)>& body) {
        const std::int64_t chunk = (n + parts - 1) / parts;
        const std::int64_t begin = part * chunk;
        const std::int64_t end = std::min<std::int64_t>(n, begin + chunk);
        if (begin < end) body(begin, end);
    }

    void worker_loop(int part) {
        t_inside_worker = true;
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::int64_t, std::int64_t)>* job = nullptr;
            std::int64_t n = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                job = job_;
                n = job_n_;
            }
            if (job) run_chunk(part, lanes(), n, *job);
            {
                std::lock_guard<std::mutex> lk(mu_);
                --pending_;
            }
            done_cv_.notify_one();
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    bool stop_;
    std::uint64_t generation_;
    int pending_;
    const std::function<void(std::int64_t, std::int64_t)>* job_ = nullptr;
    std::int64_t job_n_ = 0;
};

int g_threads = 1;
Pool* g_pool = nullptr;
std::mutex g_pool_mu;

}  // namespace

void set_threads(int n) {
    std::lock_guard<std::mutex> lk(g_pool_mu);
    if (n < 1) n = 1;
    if (n == g_threads) return;
    delete g_pool;
    g_pool = nullptr;
    g_threads = n;
    if (n > 1) g_pool = new Pool(n - 1);
}

int threads() { return g_threads; }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
    if (n <= 0) return;
    Pool* pool;
    {
        std::lock_guard<std::mutex> lk(g_pool_mu);
        pool = g_pool;
    }
    if (!pool || t_inside_worker || n == 1) {
        body(0, n);
        return;
    }
    pool->run(n, body);
}

}  // namespace sphg
