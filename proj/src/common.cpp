#include "mfsmp/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <thread>

namespace mfsmp {

MeanStdErr mean_stderr(const std::vector<double>& xs) {
    MeanStdErr r;
    r.n = xs.size();
    if (r.n == 0) return r;
    double s = 0.0;
    for (double x : xs) s += x;
    r.mean = s / static_cast<double>(r.n);
    if (r.n < 2) return r;
    double ss = 0.0;
    for (double x : xs) {
        double d = x - r.mean;
        ss += d * d;
    }
    double var = ss / static_cast<double>(r.n - 1);
    r.stderr_ = std::sqrt(var / static_cast<double>(r.n));
    return r;
}

bool loglog_slope(const std::vector<double>& x, const std::vector<double>& y,
                  double& slope, double floor) {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
        if (x[i] > 0.0 && y[i] > floor) {
            lx.push_back(std::log(x[i]));
            ly.push_back(std::log(y[i]));
        }
    }
    if (lx.size() < 2) return false;
    double n = static_cast<double>(lx.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sx += lx[i];
        sy += ly[i];
        sxx += lx[i] * lx[i];
        sxy += lx[i] * ly[i];
    }
    double denom = n * sxx - sx * sx;
    if (std::abs(denom) < 1e-30) return false;
    slope = (n * sxy - sx * sy) / denom;
    return true;
}

double r_squared_through_origin(const std::vector<double>& g, const std::vector<double>& y) {
    double gg = 0, gy = 0, yy = 0, sy = 0;
    std::size_t n = std::min(g.size(), y.size());
    if (n == 0) return 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        gg += g[i] * g[i];
        gy += g[i] * y[i];
        yy += y[i] * y[i];
        sy += y[i];
    }
    if (gg < 1e-300) return 0.0;
    double c = gy / gg;
    double ybar = sy / static_cast<double>(n);
    double ss_res = 0, ss_tot = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double r = y[i] - c * g[i];
        ss_res += r * r;
        double d = y[i] - ybar;
        ss_tot += d * d;
    }
    if (ss_tot < 1e-300) return ss_res < 1e-300 ? 1.0 : 0.0;
    return 1.0 - ss_res / ss_tot;
}

namespace {
std::atomic<int> g_max_threads{1};
}

void set_max_threads(int k) { g_max_threads.store(k < 1 ? 1 : k); }
int max_threads() { return g_max_threads.load(); }

void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
    int nthreads = max_threads();
    if (nthreads <= 1 || count < 2048) {
        fn(0, count);
        return;
    }
    // Fixed chunking keeps work assignment independent of the thread count.
    const std::size_t chunk = 1024;
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            std::size_t begin = next.fetch_add(chunk);
            if (begin >= count) return;
            std::size_t end = std::min(begin + chunk, count);
            fn(begin, end);
        }
    };
    std::vector<std::thread> pool;
    int spawn = std::min<int>(nthreads, static_cast<int>((count + chunk - 1) / chunk));
    pool.reserve(static_cast<std::size_t>(spawn));
    for (int i = 0; i < spawn; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
}

std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return std::string(buf);
}

}  // namespace mfsmp
