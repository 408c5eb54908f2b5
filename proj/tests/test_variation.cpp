#include "mfsmp/variation.hpp"

#include "mfsmp/fixtures.hpp"

#include "doctest.h"

#include <cmath>

using namespace mfsmp;

namespace {

Vec scalar(double x) { return Vec::Constant(1, x); }

Fixture drift_only(std::vector<MonomialSpec> drift, double x0) {
    Fixture fx = fixtures::example11();
    VarLayout lay = fx.spec.layout();
    fx.spec.name = "drift_only";
    fx.spec.drift = MomentCoupledFunction(CoefficientKind::Drift, 1, 1,
                                          {poly_from_monomials(lay, drift)}, lay, fx.spec.basis);
    fx.spec.diffusion = MomentCoupledFunction(CoefficientKind::Diffusion, 1, 1, {Poly(lay.count())},
                                              lay, fx.spec.basis);
    fx.spec.running_cost = MomentCoupledFunction(CoefficientKind::RunningCost, 1, 1,
                                                 {Poly(lay.count())}, lay, fx.spec.basis);
    fx.spec.terminal_cost = MomentCoupledFunction(CoefficientKind::TerminalCost, 1, 1,
                                                  {Poly(lay.count())}, lay, fx.spec.basis);
    fx.spec.x0 = scalar(x0);
    return fx;
}

}  // namespace

TEST_CASE("control distance counts differing steps") {
    TimeGrid grid(1.0, 100);
    auto u = ControlProcess::constant(scalar(0.0), 100, 8);
    auto v = ControlProcess::constant(scalar(1.0), 100, 8);
    CHECK(control_distance(u, u, grid) == doctest::Approx(0.0));
    CHECK(control_distance(u, v, grid) == doctest::Approx(1.0));

    std::vector<std::size_t> first_quarter;
    for (std::size_t s = 0; s < 25; ++s) first_quarter.push_back(s);
    auto mixed = spike_control(u, v, first_quarter);
    CHECK(control_distance(u, mixed, grid) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("spike control selects pointwise") {
    TimeGrid grid(1.0, 100);
    auto u = ControlProcess::constant(scalar(0.0), 100, 4);
    auto v = ControlProcess::constant(scalar(1.0), 100, 4);
    auto none = spike_control(u, v, {});
    std::vector<std::size_t> all(100);
    for (std::size_t s = 0; s < 100; ++s) all[s] = s;
    auto full = spike_control(u, v, all);
    std::vector<std::size_t> ten;
    for (std::size_t s = 0; s < 10; ++s) ten.push_back(s);
    auto head = spike_control(u, v, ten);
    for (std::size_t m = 0; m < 100; ++m) {
        CHECK(none.value(m, 0)[0] == 0.0);
        CHECK(full.value(m, 0)[0] == 1.0);
        CHECK(head.value(m, 0)[0] == (m < 10 ? 1.0 : 0.0));
    }
    CHECK_THROWS(spike_control(u, v, {200}));
}

TEST_CASE("partition spike sets take the leading fraction of each cell") {
    TimeGrid grid(1.0, 10);
    auto mask = partition_spike_set(grid, 0.5, {0, 10});
    std::size_t count = 0;
    for (std::size_t s = 0; s < 10; ++s) {
        if (mask[s]) ++count;
        CHECK(static_cast<bool>(mask[s]) == (s < 5));
    }
    CHECK(count == 5);

    TimeGrid g100(1.0, 100);
    auto mask10 = partition_spike_set(g100, 0.1, uniform_partition(100, 10));
    for (std::size_t c = 0; c < 10; ++c)
        for (std::size_t s = 0; s < 10; ++s)
            CHECK(static_cast<bool>(mask10[c * 10 + s]) == (s == 0));

    TimeGrid g8(1.0, 8);
    auto mask25 = partition_spike_set(g8, 0.25, {0, 8});
    std::size_t c25 = 0;
    for (auto b : mask25) c25 += b;
    CHECK(c25 == 2);

    CHECK_THROWS(partition_spike_set(grid, 0.0, {0, 10}));
    CHECK_THROWS(partition_spike_set(grid, 1.0, {0, 10}));
    CHECK_THROWS(partition_spike_set(grid, 0.5, {0, 7}));
}

TEST_CASE("first variation vanishes when the spike is empty") {
    Fixture fx = fixtures::example11();
    TimeGrid grid(1.0, 40);
    auto u = ControlProcess::constant(scalar(0.0), 40, 64);
    auto ens = simulate(fx.spec, u, grid, 64, 7);
    auto x1 = first_variation(fx.spec, ens, u, u);
    for (double v : x1.x) CHECK(v == 0.0);
}

TEST_CASE("first variation mean follows the control increment") {
    Fixture fx = fixtures::example11();
    const std::size_t M = 100, N = 4000;
    const double rho = 0.3;
    TimeGrid grid(1.0, M);
    auto u = ControlProcess::constant(scalar(0.0), M, N);
    auto v = ControlProcess::constant(scalar(1.0), M, N);
    auto ens = simulate(fx.spec, u, grid, N, 19);
    auto spike = make_spike(u, v, grid, rho, uniform_partition(M, 10));
    auto x1 = first_variation(fx.spec, ens, u, spike.spiked);
    double mean_T = x1.mean_at(M)[0];
    CHECK(std::abs(mean_T - rho * 1.0) <= grid.dt() + 3.0 / std::sqrt(static_cast<double>(N)));
}

TEST_CASE("first variation of a pure integral is deterministic") {
    // b = v: no state or measure feedback, so x1_t = |spike cap [0,t]|.
    Fixture fx = drift_only({{1.0, "v"}}, 0.0);
    const std::size_t M = 50, N = 16;
    TimeGrid grid(1.0, M);
    auto u = ControlProcess::constant(scalar(0.0), M, N);
    auto v = ControlProcess::constant(scalar(1.0), M, N);
    auto ens = simulate(fx.spec, u, grid, N, 3);
    std::vector<std::size_t> head;
    for (std::size_t s = 0; s < 20; ++s) head.push_back(s);
    auto vhat = spike_control(u, v, head);
    auto x1 = first_variation(fx.spec, ens, u, vhat);
    for (std::size_t m = 0; m <= M; ++m) {
        double expect = grid.dt() * static_cast<double>(std::min<std::size_t>(m, 20));
        for (std::size_t j = 0; j < N; ++j)
            CHECK(x1.at(m, j)[0] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("second variation is exactly zero for affine problems") {
    Fixture fx = fixtures::example11();
    const std::size_t M = 60, N = 128;
    TimeGrid grid(1.0, M);
    auto u = ControlProcess::constant(scalar(0.0), M, N);
    auto v = ControlProcess::constant(scalar(1.0), M, N);
    auto ens = simulate(fx.spec, u, grid, N, 12);
    auto spike = make_spike(u, v, grid, 0.2, uniform_partition(M, 10));
    auto x1 = first_variation(fx.spec, ens, u, spike.spiked);
    auto x2 = second_variation(fx.spec, ens, u, spike.spiked, x1);
    for (double val : x2.x) CHECK(val == 0.0);

    // And the affine expansion is exact: the remainder is identically zero.
    auto ens_v = simulate(fx.spec, spike.spiked, grid, N, 12);
    auto xs = remainder(ens_v, ens, x1, x2);
    double worst = 0.0;
    for (double val : xs.x) worst = std::max(worst, std::abs(val));
    CHECK(worst <= 1e-12);
}

TEST_CASE("second variation matches the quadratic Taylor term") {
    // b = x^2/2 + v with sigma = 0: everything is a deterministic flow, and
    // x2 must capture X^{vhat} - X^u - x1 up to O(d^3).
    Fixture fx = drift_only({{0.5, "x^2"}, {1.0, "v"}}, 0.0);
    const std::size_t M = 200, N = 4;
    TimeGrid grid(1.0, M);
    auto u = ControlProcess::constant(scalar(0.0), M, N);
    auto v = ControlProcess::constant(scalar(1.0), M, N);
    auto ens = simulate(fx.spec, u, grid, N, 1);

    double prev_ratio = 0.0;
    bool first = true;
    for (double rho : {0.4, 0.2, 0.1}) {
        auto spike = make_spike(u, v, grid, rho,
                                uniform_partition(M, representation_cell_steps(M, rho, 0.4)));
        auto ens_v = simulate(fx.spec, spike.spiked, grid, N, 1);
        auto x1 = first_variation(fx.spec, ens, u, spike.spiked);
        auto x2 = second_variation(fx.spec, ens, u, spike.spiked, x1);
        auto xs = remainder(ens_v, ens, x1, x2);
        double sup = 0.0;
        for (double val : xs.x) sup = std::max(sup, std::abs(val));
        double d = spike.d_value;
        double ratio = sup / (d * d * d);
        CHECK(ratio < 1.0);  // remainder is third order in d
        if (!first) CHECK(ratio <= prev_ratio * 1.5 + 1e-9);
        prev_ratio = ratio;
        first = false;
    }
}

TEST_CASE("transition matrices: trivial and deterministic cases") {
    // No state dependence anywhere: Phi = Psi = I at every knot.
    Fixture fx = drift_only({{1.0, "v"}}, 0.0);
    const std::size_t M = 30, N = 8;
    TimeGrid grid(1.0, M);
    auto u = ControlProcess::constant(scalar(0.0), M, N);
    auto ens = simulate(fx.spec, u, grid, N, 2);
    auto tr = transition_matrix(fx.spec, ens, u);
    for (std::size_t m = 0; m <= M; ++m)
        for (std::size_t j = 0; j < N; ++j) {
            CHECK(tr.phi_at(m, j)(0, 0) == doctest::Approx(1.0));
            CHECK(tr.psi_at(m, j)(0, 0) == doctest::Approx(1.0));
        }

    // b_x = a constant: Phi_t = e^{a t} within the O(dt) Euler bias.
    const double a = 0.8;
    Fixture lin = drift_only({{a, "x"}, {1.0, "v"}}, 1.0);
    auto ens2 = simulate(lin.spec, u, grid, N, 2);
    auto tr2 = transition_matrix(lin.spec, ens2, u);
    for (std::size_t m = 0; m <= M; ++m) {
        double t = grid.time(m);
        double ref = std::exp(a * t);
        CHECK(std::abs(tr2.phi_at(m, 0)(0, 0) - ref) <= ref * a * a * grid.dt() * t + 1e-12);
    }
    CHECK(tr2.max_inverse_gap <= 1e-12);
}

TEST_CASE("transition inverse consistency on the mean-field benchmark") {
    Fixture fx = fixtures::example11();
    const std::size_t M = 1000, N = 128;
    TimeGrid grid(1.0, M);
    auto u = ControlProcess::constant(scalar(0.0), M, N);
    auto ens = simulate(fx.spec, u, grid, N, 5);
    auto tr = transition_matrix(fx.spec, ens, u);
    CHECK(tr.max_inverse_gap <= 5e-3);
}

TEST_CASE("ill-conditioned fundamental matrix is rejected") {
    Fixture fx = drift_only({{-60.0, "x"}, {1.0, "v"}}, 1.0);
    const std::size_t M = 100, N = 4;
    TimeGrid grid(1.0, M);
    auto u = ControlProcess::constant(scalar(0.0), M, N);
    auto ens = simulate(fx.spec, u, grid, N, 2);
    CHECK_THROWS_WITH_AS(transition_matrix(fx.spec, ens, u),
                         doctest::Contains("ill-conditioned"), std::runtime_error);
}

TEST_CASE("order study on the quadratic fixture at reduced scale") {
    Fixture fx = fixtures::quadratic_drift();
    auto res = run_order_study(fx.spec, scalar(0.0), scalar(1.0), {0.4, 0.2, 0.1, 0.05}, 600, 200, 33);
    CHECK(res.x1_slope_ok);
    CHECK(res.slope_x1 >= 1.8);
    CHECK(!res.x2_identically_zero);
    CHECK(res.x2_slope_ok);
    CHECK(res.slope_x2 >= 3.6);
    CHECK(res.remainder_ratio_decreasing);
    CHECK(res.pass);
}

TEST_CASE("order study hook flags a mis-scaled second variation") {
    Fixture fx = fixtures::quadratic_drift();
    OrderStudyOptions opts;
    opts.inject_x2_cubed = 0.05;
    auto res = run_order_study(fx.spec, scalar(0.0), scalar(1.0), {0.4, 0.2, 0.1, 0.05}, 300, 100,
                               33, opts);
    CHECK(!res.x2_slope_ok);
    CHECK(!res.pass);
}

TEST_CASE("representation study vanishes on the multiplicative-noise fixture") {
    Fixture fx = fixtures::geometric();
    auto res =
        run_representation_study(fx.spec, scalar(0.0), scalar(1.0), {0.4, 0.2, 0.1, 0.05}, 400, 1000, 8);
    CHECK(res.scaling_gap_vanishing);
    CHECK(res.representation_gap_vanishing);
    CHECK(res.rungs.back().scaling_gap <= 0.1 * res.rungs.front().scaling_gap);
    // The classical representation is exact in the discrete scheme, so both
    // rungs sit at roundoff.
    CHECK(res.rungs.front().representation_gap <= 1e-12);
    CHECK(res.rungs.back().representation_gap <= 1e-12);
}

TEST_CASE("the rho-scaling gap also vanishes under mean-field coupling") {
    Fixture fx = fixtures::example11();
    auto res =
        run_representation_study(fx.spec, scalar(0.0), scalar(1.0), {0.4, 0.2, 0.1, 0.05}, 400, 1000, 8);
    CHECK(res.scaling_gap_vanishing);
}

namespace {

// Quadratic volatility in both the state and the mean: exercises the
// second-derivative diffusion terms of the expansion.
Fixture quad_vol() {
    Fixture fx = fixtures::example11();
    VarLayout lay = fx.spec.layout();
    fx.spec.name = "quad_vol";
    fx.spec.drift = MomentCoupledFunction(CoefficientKind::Drift, 1, 1,
                                          {poly_from_monomials(lay, {{1.0, "v"}})}, lay,
                                          fx.spec.basis);
    fx.spec.diffusion = MomentCoupledFunction(
        CoefficientKind::Diffusion, 1, 1,
        {poly_from_monomials(lay, {{0.2, ""}, {0.15, "x^2"}, {0.1, "m^2"}})}, lay, fx.spec.basis);
    fx.spec.running_cost = MomentCoupledFunction(CoefficientKind::RunningCost, 1, 1,
                                                 {poly_from_monomials(lay, {{1.0, "x"}})}, lay,
                                                 fx.spec.basis);
    fx.spec.terminal_cost = MomentCoupledFunction(CoefficientKind::TerminalCost, 1, 1,
                                                  {Poly(lay.count())}, lay, fx.spec.basis);
    fx.spec.x0 = scalar(0.5);
    return fx;
}

}  // namespace

TEST_CASE("quadratic volatility: expansion remainder is third order") {
    // With degree-2 coefficients the pointwise Taylor expansion is exact, so
    // the remainder only carries x1-x2 cross products: sup |xstar|^2 = O(d^6),
    // far below d^5. A mis-weighted quadratic term in x2 would leave an O(d^4)
    // floor and fail this bound at small d.
    Fixture fx = quad_vol();
    const std::size_t M = 200, N = 600;
    TimeGrid grid(1.0, M);
    auto u = ControlProcess::constant(scalar(0.0), M, N);
    auto v = ControlProcess::constant(scalar(1.0), M, N);
    auto ens = simulate(fx.spec, u, grid, N, 21);
    for (double rho : {0.2, 0.1, 0.05}) {
        auto spike = make_spike(u, v, grid, rho,
                                uniform_partition(M, representation_cell_steps(M, rho, 0.2)));
        auto ens_v = simulate(fx.spec, spike.spiked, grid, N, 21);
        auto var = build_variation_ensemble(fx.spec, ens, ens_v, u, spike.spiked);
        double d = spike.d_value;
        CHECK(var.xstar.sup_sq().mean <= 0.5 * std::pow(d, 5.0));
        CHECK(var.x2.sup_sq().mean > 0.0);  // the sigma quadratics are active
    }
}
