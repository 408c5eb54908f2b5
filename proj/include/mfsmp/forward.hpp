#pragma once

#include "mfsmp/common.hpp"
#include "mfsmp/problem.hpp"
#include "mfsmp/rng.hpp"

#include <memory>
#include <vector>

namespace mfsmp {

struct TimeGrid {
    double T = 1.0;
    std::size_t steps = 1;

    TimeGrid() = default;
    TimeGrid(double horizon, std::size_t m) : T(horizon), steps(m) {
        if (m == 0 || horizon <= 0.0) throw std::invalid_argument("TimeGrid: need T > 0, steps >= 1");
    }
    double dt() const { return T / static_cast<double>(steps); }
    double time(std::size_t m) const { return dt() * static_cast<double>(m); }
};

/// Control values indexed by (step, particle). Constant and spiked controls
/// index without materializing the full [M x N x k] array; a dense array form
/// exists for general feedback controls.
class ControlProcess {
public:
    static ControlProcess constant(Vec value, std::size_t steps, std::size_t particles);
    static ControlProcess array(std::vector<double> values, std::size_t steps,
                                std::size_t particles, std::size_t k);
    /// v on the spiked steps, u elsewhere, with the realized spike measure.
    static ControlProcess spiked(ControlProcess base, ControlProcess alt,
                                 std::vector<std::uint8_t> spike_mask);

    std::size_t steps() const { return steps_; }
    std::size_t particles() const { return particles_; }
    std::size_t control_dim() const { return k_; }

    const double* value(std::size_t step, std::size_t particle) const;
    Vec value_vec(std::size_t step, std::size_t particle) const;

    bool is_spiked() const { return mode_ == Mode::Spiked; }
    const std::vector<std::uint8_t>& spike_mask() const { return mask_; }

private:
    enum class Mode { Constant, Array, Spiked };
    Mode mode_ = Mode::Constant;
    std::size_t steps_ = 0, particles_ = 0, k_ = 0;
    Vec const_value_;
    std::vector<double> array_;  // [m][j][a]
    std::shared_ptr<const ControlProcess> base_, alt_;
    std::vector<std::uint8_t> mask_;
};

/// Base control u, alternative v, and the realized spike step set.
struct SpikePerturbation {
    ControlProcess spiked;           // v on spike steps, u elsewhere
    std::vector<std::uint8_t> mask;  // per-step indicator
    double rho = 0.0;                // requested fraction
    double d_value = 0.0;            // realized Lebesgue measure |spike steps| * dt
};

/// N particle trajectories on a uniform grid with their (virtual) noise array
/// and per-knot moment vectors of the uniform empirical measure.
struct ParticlePathEnsemble {
    TimeGrid grid;
    std::size_t N = 0, n = 0;
    std::vector<double> paths;    // [(M+1) x N x n]
    std::vector<double> moments;  // [(M+1) x kb]
    NoiseField noise;
    std::uint64_t seed = 0;

    const double* state(std::size_t m, std::size_t j) const {
        return paths.data() + (m * N + j) * n;
    }
    double* state_mut(std::size_t m, std::size_t j) { return paths.data() + (m * N + j) * n; }
    const double* moment(std::size_t m) const {
        return moments.data() + m * (moments.size() / (grid.steps + 1));
    }
    std::size_t moment_count() const { return moments.size() / (grid.steps + 1); }
    EmpiricalMeasure measure_at(std::size_t m) const;
};

/// Interacting-particle Euler-Maruyama scheme for the mean-field state
/// equation. The law is the same-ensemble uniform empirical measure, and the
/// Gaussian increments come from a counter-based generator keyed by
/// (seed, step, particle, coordinate) so coupled runs share noise paths.
/// A non-finite state aborts with the first offending (step, particle).
ParticlePathEnsemble simulate(const ProblemSpec& spec, const ControlProcess& control,
                              const TimeGrid& grid, std::size_t N, std::uint64_t seed);

/// Variant with an explicit noise field (used for noise-permutation checks).
ParticlePathEnsemble simulate_with_noise(const ProblemSpec& spec, const ControlProcess& control,
                                         const TimeGrid& grid, std::size_t N,
                                         const NoiseField& noise);

struct MomentReport {
    double sup_x8 = 0.0;        // empirical E sup_t |X_t|^8
    double control_l1_8 = 0.0;  // empirical E |int |v_s| ds|^8
    double x0_8 = 0.0;          // |x0|^8
    double ratio = 0.0;         // sup_x8 / (1 + x0_8 + control_l1_8)
    bool finite = true;
};

/// Empirical check of the eighth-moment a-priori bound: the ratio should stay
/// finite and stabilize as N grows.
MomentReport moment_bound_check(const ParticlePathEnsemble& ens, const ControlProcess& control);

}  // namespace mfsmp
