#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfsmp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Forward scheme produced a non-finite state; names the first offending slot.
class BlowupError : public std::runtime_error {
public:
    BlowupError(std::size_t step, std::size_t particle, const std::string& what)
        : std::runtime_error(what), step(step), particle(particle) {}
    std::size_t step;
    std::size_t particle;
};

class RegressionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FixtureError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct MeanStdErr {
    double mean = 0.0;
    double stderr_ = 0.0;
    std::size_t n = 0;
};

MeanStdErr mean_stderr(const std::vector<double>& xs);

/// Least-squares slope of log(y) against log(x). Requires positive entries;
/// entries with y below `floor` are dropped (identically-zero quantities).
/// Returns false if fewer than two usable points remain.
bool loglog_slope(const std::vector<double>& x, const std::vector<double>& y,
                  double& slope, double floor = 1e-300);

/// R^2 of the best fit y = c * g through the origin.
double r_squared_through_origin(const std::vector<double>& g, const std::vector<double>& y);

void set_max_threads(int k);
int max_threads();

/// Runs fn on [begin,end) chunks of the index range. Chunk boundaries do not
/// depend on the thread count, and callers only write disjoint outputs, so
/// results are bit-identical for any --threads value.
void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn);

/// Round-trip double formatting (%.17g); strtod recovers the exact bits.
std::string format_double(double x);

}  // namespace mfsmp
