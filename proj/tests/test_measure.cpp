#include "mfsmp/measure.hpp"

#include "mfsmp/rng.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

using namespace mfsmp;

namespace {

// Independent oracle: exact W2 between equal-count uniform clouds by
// exhaustive search over all permutation couplings.
double w2_bruteforce(const Mat& a, const Mat& b) {
    REQUIRE(a.rows() == b.rows());
    std::vector<int> perm(static_cast<std::size_t>(a.rows()));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double total = 0.0;
        for (Eigen::Index i = 0; i < a.rows(); ++i)
            total += (a.row(i) - b.row(perm[static_cast<std::size_t>(i)])).squaredNorm();
        best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return std::sqrt(best / static_cast<double>(a.rows()));
}

EmpiricalMeasure random_measure_1d(NoiseField& gen, std::size_t probe, std::size_t max_atoms) {
    std::size_t count = 1 + static_cast<std::size_t>(std::floor(
                                std::abs(gen.gaussian(probe, 60, 0)) * 2.7)) % max_atoms;
    std::vector<double> samples(count), weights(count);
    for (std::size_t i = 0; i < count; ++i) {
        samples[i] = 2.0 * gen.gaussian(probe, i, 1);
        weights[i] = 0.1 + std::abs(gen.gaussian(probe, i, 2));
    }
    return empirical_from_samples(samples, &weights);
}

std::shared_ptr<const MomentBasis> mean_basis() {
    return std::make_shared<const MomentBasis>(
        1, std::vector<Poly>{Poly::monomial(1, 1.0, {{0, 1}})});
}

std::shared_ptr<const MomentBasis> square_basis() {
    return std::make_shared<const MomentBasis>(
        1, std::vector<Poly>{Poly::monomial(1, 1.0, {{0, 2}})});
}

}  // namespace

TEST_CASE("empirical measure construction") {
    auto m1 = empirical_from_samples(std::vector<double>{0.0});
    CHECK(m1.size() == 1);
    CHECK(m1.weights()[0] == doctest::Approx(1.0));

    auto m3 = empirical_from_samples(std::vector<double>{1.0, 1.0, 1.0});
    for (int i = 0; i < 3; ++i) CHECK(m3.weights()[i] == doctest::Approx(1.0 / 3));

    std::vector<double> w{3.0, 1.0};
    auto mw = empirical_from_samples(std::vector<double>{0.0, 2.0}, &w);
    CHECK(mw.weights()[0] == doctest::Approx(0.75));
    CHECK(mw.weights()[1] == doctest::Approx(0.25));

    CHECK_THROWS(empirical_from_samples(std::vector<double>{}));
    std::vector<double> neg{1.0, -0.5};
    CHECK_THROWS(empirical_from_samples(std::vector<double>{0.0, 1.0}, &neg));
    std::vector<double> zero{0.0, 0.0};
    CHECK_THROWS(empirical_from_samples(std::vector<double>{0.0, 1.0}, &zero));
}

TEST_CASE("moment vectors") {
    auto basis1 = mean_basis();
    auto d2 = empirical_from_samples(std::vector<double>{2.0});
    CHECK(moment_vector(d2, *basis1)[0] == doctest::Approx(2.0));

    auto basis_sq = square_basis();
    auto m02 = empirical_from_samples(std::vector<double>{0.0, 2.0});
    CHECK(moment_vector(m02, *basis_sq)[0] == doctest::Approx(2.0));

    auto basis2 = std::make_shared<const MomentBasis>(
        1, std::vector<Poly>{Poly::monomial(1, 1.0, {{0, 1}}), Poly::monomial(1, 1.0, {{0, 2}})});
    auto m123 = empirical_from_samples(std::vector<double>{1.0, 2.0, 3.0});
    Vec mv = moment_vector(m123, *basis2);
    CHECK(mv[0] == doctest::Approx(2.0));
    CHECK(mv[1] == doctest::Approx(14.0 / 3.0));
}

TEST_CASE("wasserstein2 basics") {
    auto a = empirical_from_samples(std::vector<double>{0.3, -1.0, 2.0});
    CHECK(wasserstein2(a, a) == doctest::Approx(0.0));

    auto d0 = empirical_from_samples(std::vector<double>{0.0});
    auto d3 = empirical_from_samples(std::vector<double>{3.0});
    CHECK(wasserstein2(d0, d3) == doctest::Approx(3.0));

    auto u1 = empirical_from_samples(std::vector<double>{0.0, 1.0, 2.0, 3.0});
    auto u2 = empirical_from_samples(std::vector<double>{1.0, 2.0, 3.0, 4.0});
    CHECK(wasserstein2(u1, u2) == doctest::Approx(1.0).epsilon(1e-12));
    // DERIVED oracle: exhaustive matching over all 4! couplings.
    Mat s1(4, 1), s2(4, 1);
    s1 << 0, 1, 2, 3;
    s2 << 1, 2, 3, 4;
    CHECK(wasserstein2(u1, u2) == doctest::Approx(w2_bruteforce(s1, s2)).epsilon(1e-10));

    Mat x(2, 2);
    x << 0, 0, 1, 1;
    auto mu2 = empirical_from_samples(x);
    auto nu1 = empirical_from_samples(std::vector<double>{0.0});
    CHECK_THROWS(wasserstein2(mu2, nu1));  // dimension mismatch
    Mat y(3, 2);
    y << 0, 0, 1, 1, 2, 2;
    CHECK_THROWS(wasserstein2(mu2, empirical_from_samples(y)));  // unequal counts in dim > 1
    Vec w(2);
    w << 0.9, 0.1;
    CHECK_THROWS(wasserstein2(mu2, EmpiricalMeasure(x, w)));  // non-uniform weights in dim > 1
}

TEST_CASE("wasserstein2 metric axioms on random one-dimensional measures") {
    NoiseField gen(2024, 4096, 128, 16);
    for (std::size_t probe = 0; probe < 110; ++probe) {
        auto mu = random_measure_1d(gen, 3 * probe, 8);
        auto nu = random_measure_1d(gen, 3 * probe + 1, 8);
        auto rho = random_measure_1d(gen, 3 * probe + 2, 8);
        double ab = wasserstein2(mu, nu), ba = wasserstein2(nu, mu);
        double ac = wasserstein2(mu, rho), cb = wasserstein2(rho, nu);
        CHECK(std::abs(ab - ba) <= 1e-10);
        CHECK(ab <= ac + cb + 1e-10);
    }
}

TEST_CASE("wasserstein2 equals the permutation oracle for small uniform clouds") {
    NoiseField gen(7, 4096, 64, 16);
    for (std::size_t dim = 1; dim <= 3; ++dim) {
        for (std::size_t probe = 0; probe < 25; ++probe) {
            std::size_t atoms = 2 + probe % 5;  // up to 6
            Mat a(static_cast<Eigen::Index>(atoms), static_cast<Eigen::Index>(dim));
            Mat b(static_cast<Eigen::Index>(atoms), static_cast<Eigen::Index>(dim));
            for (std::size_t i = 0; i < atoms; ++i)
                for (std::size_t c = 0; c < dim; ++c) {
                    a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
                        gen.gaussian(probe * 31 + dim, i, c);
                    b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
                        gen.gaussian(probe * 31 + dim, i + 16, c);
                }
            double fast = wasserstein2(empirical_from_samples(a), empirical_from_samples(b));
            CHECK(fast == doctest::Approx(w2_bruteforce(a, b)).epsilon(1e-10));
        }
    }
}

TEST_CASE("lions derivative closed forms") {
    auto basis_mean = mean_basis();
    auto basis_sq = square_basis();

    // phi(m) = m with h(y) = y.
    Poly phi_m = Poly::monomial(1, 1.0, {{0, 1}});
    auto b1 = lions_bundle(phi_m, basis_mean);
    auto mu = empirical_from_samples(std::vector<double>{0.5, 1.5, -2.0});
    Vec y = Vec::Constant(1, 0.7);
    CHECK(b1.d_mu(mu, y)[0] == doctest::Approx(1.0));
    CHECK(b1.d2_mu(mu, y, y)(0, 0) == doctest::Approx(0.0));
    CHECK(b1.dy_dmu(mu, y)(0, 0) == doctest::Approx(0.0));

    // phi(m) = m^2 with h(y) = y at a cloud with mean 2: d_mu = 2m = 4.
    Poly phi_m2 = Poly::monomial(1, 1.0, {{0, 2}});
    auto b2 = lions_bundle(phi_m2, basis_mean);
    auto mu2 = empirical_from_samples(std::vector<double>{1.0, 3.0});
    CHECK(b2.d_mu(mu2, y)[0] == doctest::Approx(4.0));

    // phi(m) = m^2 with h(y) = y^2, cloud {1, 2}: m = 2.5, d_mu(y) = 2m * 2y = 10y.
    auto b3 = lions_bundle(phi_m2, basis_sq);
    auto mu3 = empirical_from_samples(std::vector<double>{1.0, 2.0});
    for (double yy : {0.3, 1.0, -1.7})
        CHECK(b3.d_mu(mu3, Vec::Constant(1, yy))[0] == doctest::Approx(10.0 * yy));
}

namespace {

struct MomentFunctional {
    Poly phi;  // in the moment coordinates
    std::shared_ptr<const MomentBasis> basis;

    double operator()(const EmpiricalMeasure& mu) const {
        Vec m = moment_vector(mu, *basis);
        return phi.eval(m.data());
    }
};

double direction_value(int which, double x) {
    switch (which) {
        case 0: return 1.0;
        case 1: return x;
        case 2: return x * x;
        case 3: return 2.0 * x + 1.0;
        default: return x * x - x;
    }
}

EmpiricalMeasure perturb(const EmpiricalMeasure& mu, int dir, double eps) {
    Mat s = mu.samples();
    for (Eigen::Index i = 0; i < s.rows(); ++i) s(i, 0) += eps * direction_value(dir, s(i, 0));
    return EmpiricalMeasure(s, mu.weights());
}

}  // namespace

TEST_CASE("lions derivative matches difference quotients with first-order accuracy") {
    auto basis2 = std::make_shared<const MomentBasis>(
        1, std::vector<Poly>{Poly::monomial(1, 1.0, {{0, 1}}), Poly::monomial(1, 1.0, {{0, 2}})});
    std::vector<MomentFunctional> corpus;
    {
        // m0, m0^2, m0 m1, m1^2 - 3 m0, cubic mix
        Poly p1 = Poly::monomial(2, 1.0, {{0, 1}});
        Poly p2 = Poly::monomial(2, 1.0, {{0, 2}});
        Poly p3 = Poly::monomial(2, 1.0, {{0, 1}, {1, 1}});
        Poly p4 = Poly::monomial(2, 1.0, {{1, 2}}) + Poly::monomial(2, -3.0, {{0, 1}});
        Poly p5 = Poly::monomial(2, 0.5, {{0, 2}, {1, 1}}) + Poly::monomial(2, 1.0, {{1, 1}});
        for (const Poly& p : {p1, p2, p3, p4, p5}) corpus.push_back({p, basis2});
    }
    NoiseField gen(99, 64, 64, 8);
    std::vector<double> samples(40);
    for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = 0.4 * gen.gaussian(1, i, 0) + 0.3;
    auto mu = empirical_from_samples(samples);

    for (const auto& f : corpus) {
        auto bundle = lions_bundle(f.phi, basis2);
        for (int dir = 0; dir < 5; ++dir) {
            // E[d_mu f(mu, xi) . phi_hat(xi)] over the cloud.
            double pairing = 0.0;
            for (std::size_t i = 0; i < samples.size(); ++i) {
                Vec xi = Vec::Constant(1, samples[i]);
                pairing += bundle.d_mu(mu, xi)[0] * direction_value(dir, samples[i]);
            }
            pairing /= static_cast<double>(samples.size());

            double err_large = std::abs((f(perturb(mu, dir, 1e-3)) - f(mu)) / 1e-3 - pairing);
            double err_small = std::abs((f(perturb(mu, dir, 1e-4)) - f(mu)) / 1e-4 - pairing);
            if (err_large < 1e-11) {
                CHECK(err_small < 1e-10);  // exact pair, both errors at roundoff
            } else {
                double slope = std::log(err_large / err_small) / std::log(10.0);
                CHECK(slope >= 0.9);
                // The fitted constant C = err / eps must be stable across eps.
                double c_large = err_large / 1e-3, c_small = err_small / 1e-4;
                CHECK(c_small == doctest::Approx(c_large).epsilon(0.25));
            }
        }
    }
}

TEST_CASE("second lions derivative matches second difference quotients") {
    auto basis2 = std::make_shared<const MomentBasis>(
        1, std::vector<Poly>{Poly::monomial(1, 1.0, {{0, 1}}), Poly::monomial(1, 1.0, {{0, 2}})});
    Poly phi = Poly::monomial(2, 1.0, {{0, 2}, {1, 1}}) + Poly::monomial(2, 0.7, {{1, 2}});
    MomentFunctional f{phi, basis2};
    auto bundle = lions_bundle(phi, basis2);

    NoiseField gen(3, 64, 64, 8);
    std::vector<double> samples(30);
    for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = 0.5 * gen.gaussian(2, i, 0) + 0.2;
    auto mu = empirical_from_samples(samples);

    for (int dir = 1; dir < 5; ++dir) {
        double expected = 0.0;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            Vec xi = Vec::Constant(1, samples[i]);
            double phi_i = direction_value(dir, samples[i]);
            for (std::size_t j = 0; j < samples.size(); ++j) {
                Vec xj = Vec::Constant(1, samples[j]);
                expected += bundle.d2_mu(mu, xi, xj)(0, 0) * phi_i * direction_value(dir, samples[j]);
            }
            expected += bundle.dy_dmu(mu, xi)(0, 0) * phi_i * phi_i * static_cast<double>(samples.size());
        }
        expected /= static_cast<double>(samples.size() * samples.size());
        auto second_quotient = [&](double eps) {
            return (f(perturb(mu, dir, eps)) - 2.0 * f(mu) + f(perturb(mu, dir, -eps))) / (eps * eps);
        };
        double err_large = std::abs(second_quotient(1e-3) - expected);
        double err_small = std::abs(second_quotient(5e-4) - expected);
        if (err_large < 1e-9) {
            CHECK(err_small < 1e-8);
        } else {
            double order = std::log(err_large / err_small) / std::log(2.0);
            CHECK(order >= 1.6);  // second-order accurate central difference
        }
    }
}
