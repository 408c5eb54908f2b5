#include "mfsmp/forward.hpp"

#include "mfsmp/fixtures.hpp"

#include "doctest.h"

#include <cmath>
#include <numeric>

using namespace mfsmp;

namespace {

Fixture zero_problem() {
    Fixture fx = fixtures::example11();
    VarLayout lay = fx.spec.layout();
    fx.spec.name = "zero";
    fx.spec.drift = MomentCoupledFunction(CoefficientKind::Drift, 1, 1, {Poly(lay.count())}, lay,
                                          fx.spec.basis);
    fx.spec.diffusion = MomentCoupledFunction(CoefficientKind::Diffusion, 1, 1, {Poly(lay.count())},
                                              lay, fx.spec.basis);
    fx.spec.running_cost = MomentCoupledFunction(CoefficientKind::RunningCost, 1, 1,
                                                 {Poly(lay.count())}, lay, fx.spec.basis);
    fx.spec.terminal_cost = MomentCoupledFunction(CoefficientKind::TerminalCost, 1, 1,
                                                  {Poly(lay.count())}, lay, fx.spec.basis);
    return fx;
}

}  // namespace

TEST_CASE("zero coefficients freeze the ensemble") {
    Fixture fx = zero_problem();
    TimeGrid grid(1.0, 20);
    auto u = ControlProcess::constant(Vec::Constant(1, 0.0), 20, 64);
    auto ens = simulate(fx.spec, u, grid, 64, 5);
    for (std::size_t m = 0; m <= 20; ++m)
        for (std::size_t j = 0; j < 64; ++j) CHECK(ens.state(m, j)[0] == 1.0);
}

TEST_CASE("the singular benchmark stays at 1 exactly under the candidate") {
    Fixture fx = fixtures::example11();
    TimeGrid grid(1.0, 50);
    auto u = ControlProcess::constant(Vec::Constant(1, 0.0), 50, 256);
    auto ens = simulate(fx.spec, u, grid, 256, 42);
    double dev = 0.0;
    for (std::size_t m = 0; m <= 50; ++m)
        for (std::size_t j = 0; j < 256; ++j)
            dev = std::max(dev, std::abs(ens.state(m, j)[0] - 1.0));
    CHECK(dev == 0.0);
}

TEST_CASE("pure drift integrates deterministically") {
    Fixture fx = zero_problem();
    VarLayout lay = fx.spec.layout();
    fx.spec.drift = MomentCoupledFunction(CoefficientKind::Drift, 1, 1,
                                          {Poly::constant(lay.count(), 1.0)}, lay, fx.spec.basis);
    fx.spec.x0 = Vec::Constant(1, 0.0);
    TimeGrid grid(1.0, 40);
    auto u = ControlProcess::constant(Vec::Constant(1, 0.0), 40, 16);
    auto ens = simulate(fx.spec, u, grid, 16, 9);
    for (std::size_t j = 0; j < 16; ++j)
        CHECK(ens.state(40, j)[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("simulation is bit-deterministic in the seed") {
    Fixture fx = fixtures::example11();
    TimeGrid grid(1.0, 30);
    auto v = ControlProcess::constant(Vec::Constant(1, 1.0), 30, 128);
    auto a = simulate(fx.spec, v, grid, 128, 77);
    auto b = simulate(fx.spec, v, grid, 128, 77);
    CHECK(a.paths == b.paths);
    auto c = simulate(fx.spec, v, grid, 128, 78);
    CHECK(a.paths != c.paths);
}

TEST_CASE("permuting the noise permutes the paths identically") {
    // No mean-field coupling here so particles are fully independent.
    Fixture fx = zero_problem();
    VarLayout lay = fx.spec.layout();
    fx.spec.diffusion = MomentCoupledFunction(CoefficientKind::Diffusion, 1, 1,
                                              {Poly::constant(lay.count(), 0.5)}, lay, fx.spec.basis);
    TimeGrid grid(1.0, 12);
    const std::size_t N = 32;
    auto u = ControlProcess::constant(Vec::Constant(1, 0.0), 12, N);
    auto base = simulate(fx.spec, u, grid, N, 1234);

    std::vector<std::uint32_t> perm(N);
    std::iota(perm.begin(), perm.end(), 0u);
    std::rotate(perm.begin(), perm.begin() + 7, perm.end());
    NoiseField permuted(1234, 12, N, 1);
    permuted.set_particle_map(perm);
    auto moved = simulate_with_noise(fx.spec, u, grid, N, permuted);
    for (std::size_t m = 0; m <= 12; ++m)
        for (std::size_t j = 0; j < N; ++j)
            CHECK(moved.state(m, j)[0] == base.state(m, perm[j])[0]);
}

TEST_CASE("noise increments have small empirical mean") {
    NoiseField noise(31337, 200, 500, 1);
    double acc = 0.0;
    for (std::size_t m = 0; m < 200; ++m)
        for (std::size_t j = 0; j < 500; ++j) acc += noise.gaussian(m, j, 0);
    double mean = acc / (200.0 * 500.0);
    CHECK(std::abs(mean) <= 5.0 / std::sqrt(200.0 * 500.0));
}

TEST_CASE("terminal variance matches sigma^2 T for additive noise") {
    Fixture fx = zero_problem();
    VarLayout lay = fx.spec.layout();
    const double c = 0.7;
    fx.spec.diffusion = MomentCoupledFunction(CoefficientKind::Diffusion, 1, 1,
                                              {Poly::constant(lay.count(), c)}, lay, fx.spec.basis);
    TimeGrid grid(1.0, 50);
    const std::size_t N = 10000;
    auto u = ControlProcess::constant(Vec::Constant(1, 0.0), 50, N);
    auto ens = simulate(fx.spec, u, grid, N, 4242);
    double mean = 0.0;
    for (std::size_t j = 0; j < N; ++j) mean += ens.state(50, j)[0];
    mean /= static_cast<double>(N);
    double var = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
        double dev = ens.state(50, j)[0] - mean;
        var += dev * dev;
    }
    var /= static_cast<double>(N - 1);
    double se = c * c * std::sqrt(2.0 / static_cast<double>(N - 1));
    CHECK(std::abs(var - c * c) <= 3.0 * se);
}

TEST_CASE("empirical mean follows the drift ODE under mean-field diffusion") {
    Fixture fx = fixtures::example11();
    TimeGrid grid(1.0, 100);
    const std::size_t N = 10000;
    auto v = ControlProcess::constant(Vec::Constant(1, 1.0), 100, N);
    auto ens = simulate(fx.spec, v, grid, N, 11);
    double worst = 0.0;
    for (std::size_t m = 0; m <= 100; ++m) {
        double mean = ens.moment(m)[0];
        worst = std::max(worst, std::abs(mean - (1.0 + grid.time(m))));
    }
    CHECK(worst <= grid.dt() + 10.0 / std::sqrt(static_cast<double>(N)));
}

TEST_CASE("eighth-moment diagnostics") {
    Fixture fx = zero_problem();
    TimeGrid grid(1.0, 20);
    auto u = ControlProcess::constant(Vec::Constant(1, 0.0), 20, 64);
    auto ens = simulate(fx.spec, u, grid, 64, 3);
    auto rep = moment_bound_check(ens, u);
    CHECK(rep.ratio == doctest::Approx(0.5));  // sup |X|^8 = 1, denominator 2

    Fixture ex = fixtures::example11();
    auto ens2 = simulate(ex.spec, u, grid, 64, 3);
    auto rep2 = moment_bound_check(ens2, u);
    CHECK(rep2.ratio == doctest::Approx(0.5));

    // Under v == 1 the benchmark's ratio is finite at every sampled size, but
    // its multiplicative mean-field noise puts the eighth moment deep in the
    // tail, so the estimator keeps climbing at feasible N; N-stability is
    // checked on the additive-noise fixture where the moment self-averages.
    for (std::size_t N : {1000u, 4000u, 16000u}) {
        TimeGrid g(1.0, 100);
        auto v = ControlProcess::constant(Vec::Constant(1, 1.0), 100, N);
        auto e = simulate(ex.spec, v, g, N, 21);
        CHECK(std::isfinite(moment_bound_check(e, v).ratio));
    }
    Fixture lt = fixtures::linear_tracking();
    std::vector<double> ratios;
    for (std::size_t N : {1000u, 4000u, 16000u}) {
        TimeGrid g(1.0, 100);
        auto v = ControlProcess::constant(Vec::Constant(1, 1.0), 100, N);
        auto e = simulate(lt.spec, v, g, N, 21);
        ratios.push_back(moment_bound_check(e, v).ratio);
    }
    for (double r : ratios) {
        CHECK(std::isfinite(r));
        CHECK(r == doctest::Approx(ratios.front()).epsilon(0.2));
    }
}

TEST_CASE("cubic drift blows up with diagnostics") {
    Fixture fx = fixtures::cubic_blowup();
    TimeGrid grid(1.0, 100);
    auto u = ControlProcess::constant(Vec::Constant(1, 0.0), 100, 8);
    CHECK_THROWS_AS(simulate(fx.spec, u, grid, 8, 1), BlowupError);
    try {
        simulate(fx.spec, u, grid, 8, 1);
    } catch (const BlowupError& e) {
        CHECK(e.step < 20);  // escapes the double range within a few steps
        CHECK(e.particle < 8);
    }
}
