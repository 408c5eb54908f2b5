#include "mfsmp/problem.hpp"

#include "mfsmp/fixture_io.hpp"
#include "mfsmp/fixtures.hpp"
#include "mfsmp/rng.hpp"

#include "doctest.h"

#include <cmath>
#include <fstream>
#include <sstream>

using namespace mfsmp;

namespace {

Vec scalar(double x) { return Vec::Constant(1, x); }

EmpiricalMeasure cloud(std::initializer_list<double> xs) {
    return empirical_from_samples(std::vector<double>(xs));
}

}  // namespace

TEST_CASE("example fixture coefficient evaluation") {
    Fixture fx = fixtures::example11();
    // sigma at x = 1 on the delta_1 cloud is 0 (the flat optimal path).
    CHECK(eval_coefficient(fx.spec.diffusion, 0.0, scalar(1.0), cloud({1.0}), scalar(0.0))(0, 0) ==
          doctest::Approx(0.0));
    // drift is the control itself.
    CHECK(eval_coefficient(fx.spec.drift, 0.3, scalar(5.0), cloud({1.0, 2.0}), scalar(-1.0))(0, 0) ==
          doctest::Approx(-1.0));
}

TEST_CASE("constant coefficients evaluate to the constant everywhere") {
    auto basis = std::make_shared<const MomentBasis>(
        1, std::vector<Poly>{Poly::monomial(1, 1.0, {{0, 1}})});
    VarLayout lay{1, 1, 1};
    MomentCoupledFunction f(CoefficientKind::RunningCost, 1, 1,
                            {Poly::constant(lay.count(), 2.5)}, lay, basis);
    for (double x : {-3.0, 0.0, 7.0})
        CHECK(eval_coefficient(f, 0.1 * x, scalar(x), cloud({x, -x}), scalar(x))(0, 0) ==
              doctest::Approx(2.5));
}

TEST_CASE("example fixture derivatives are affine-exact") {
    Fixture fx = fixtures::example11();
    auto mu = cloud({0.5, 1.5, 1.0});
    auto der = eval_derivatives(fx.spec.diffusion, 0, 0, 0.2, scalar(0.8), mu, scalar(0.0),
                                scalar(1.3), scalar(-0.4));
    CHECK(der.grad_x[0] == doctest::Approx(1.0));
    CHECK(der.d_mu[0] == doctest::Approx(1.0));
    CHECK(der.hess_xx(0, 0) == doctest::Approx(0.0));
    CHECK(der.d_x_mu(0, 0) == doctest::Approx(0.0));
    CHECK(der.d_y_mu(0, 0) == doctest::Approx(0.0));
    CHECK(der.d_mu_mu(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("product coefficient x*m has the expected mixed derivatives") {
    auto basis = std::make_shared<const MomentBasis>(
        1, std::vector<Poly>{Poly::monomial(1, 1.0, {{0, 1}})});
    VarLayout lay{1, 1, 1};
    Poly body = Poly::monomial(lay.count(), 1.0, {{lay.x(0), 1}, {lay.m(0), 1}});
    MomentCoupledFunction f(CoefficientKind::RunningCost, 1, 1, {body}, lay, basis);

    auto mu = cloud({1.0, 3.0});  // mean 2
    double x = 0.7, y = -1.2;
    auto der = eval_derivatives(f, 0, 0, 0.0, scalar(x), mu, scalar(0.0), scalar(y), scalar(y));
    CHECK(der.grad_x[0] == doctest::Approx(2.0));   // f_x = m
    CHECK(der.d_mu[0] == doctest::Approx(x));       // f_mu = x * grad h(y) = x
    CHECK(der.d_x_mu(0, 0) == doctest::Approx(1.0));

    // DERIVED check: finite difference of the lifted function on the cloud.
    auto value_at = [&](const EmpiricalMeasure& m_) {
        return eval_coefficient(f, 0.0, scalar(x), m_, scalar(0.0))(0, 0);
    };
    double eps = 1e-6;
    Mat bumped = mu.samples();
    bumped.array() += eps;  // direction phi_hat == 1
    double fd = (value_at(EmpiricalMeasure(bumped, mu.weights())) - value_at(mu)) / eps;
    double pairing = 0.0;
    for (std::size_t j = 0; j < mu.size(); ++j) {
        auto dj = eval_derivatives(f, 0, 0, 0.0, scalar(x), mu, scalar(0.0), mu.sample(j), mu.sample(j));
        pairing += dj.d_mu[0];
    }
    pairing /= static_cast<double>(mu.size());
    CHECK(fd == doctest::Approx(pairing).epsilon(1e-5));
}

TEST_CASE("shipped fixtures pass the derivative table audit") {
    for (const auto& name : fixtures::names()) {
        Fixture fx = fixtures::by_name(name);
        CAPTURE(name);
        CHECK(fx.spec.drift.audit_partials(11, 50) <= 1e-6);
        CHECK(fx.spec.diffusion.audit_partials(12, 50) <= 1e-6);
        CHECK(fx.spec.running_cost.audit_partials(13, 50) <= 1e-6);
        CHECK(fx.spec.terminal_cost.audit_partials(14, 50) <= 1e-6);
    }
}

TEST_CASE("f_mumu symmetry for moment-coupled coefficients") {
    Fixture fx = fixtures::example11();
    auto mu = cloud({0.2, 1.1, 2.4});
    Vec y = scalar(0.4), ybar = scalar(-1.0);
    auto a = eval_derivatives(fx.spec.terminal_cost, 0, 0, 1.0, scalar(0.6), mu, scalar(0.0), y, ybar);
    auto b = eval_derivatives(fx.spec.terminal_cost, 0, 0, 1.0, scalar(0.6), mu, scalar(0.0), ybar, y);
    CHECK(a.d_mu_mu(0, 0) == doctest::Approx(b.d_mu_mu(0, 0)));
}

TEST_CASE("diffusion never depends on the control") {
    Fixture fx = fixtures::example11();
    auto mu = cloud({0.9, 1.2});
    double s1 = eval_coefficient(fx.spec.diffusion, 0.0, scalar(2.0), mu, scalar(-1.0))(0, 0);
    double s2 = eval_coefficient(fx.spec.diffusion, 0.0, scalar(2.0), mu, scalar(1.0))(0, 0);
    CHECK(s1 == s2);  // bitwise

    // Constructing a diffusion with a v-term is rejected outright.
    auto basis = fx.spec.basis;
    VarLayout lay{1, 1, 1};
    Poly bad = Poly::monomial(lay.count(), 1.0, {{lay.v(0), 1}});
    CHECK_THROWS(MomentCoupledFunction(CoefficientKind::Diffusion, 1, 1, {bad}, lay, basis));
}

TEST_CASE("degree cap on coefficient bodies") {
    auto basis = std::make_shared<const MomentBasis>(
        1, std::vector<Poly>{Poly::monomial(1, 1.0, {{0, 1}})});
    VarLayout lay{1, 1, 1};
    Poly deg5 = Poly::monomial(lay.count(), 1.0, {{lay.x(0), 5}});
    CHECK_THROWS(MomentCoupledFunction(CoefficientKind::Drift, 1, 1, {deg5}, lay, basis));
}

TEST_CASE("validate_problem spot checks") {
    // The benchmark's diffusion is 1-Lipschitz in x and in the mean separately,
    // so the joint perturbation realizes a ratio of 2.
    Fixture fx = fixtures::example11();
    auto vreport = validate_problem(fx.spec, 40);
    const CoefficientProbeReport* sigma = nullptr;
    for (const auto& c : vreport.coefficients)
        if (c.coefficient == "diffusion") sigma = &c;
    REQUIRE(sigma != nullptr);
    CHECK(vreport.spot_check_only);
    CHECK(sigma->lipschitz_ratio == doctest::Approx(2.0).epsilon(0.05));
    CHECK(!sigma->warn);

    // All-zero coefficients: every ratio is zero and the check passes.
    auto basis = fx.spec.basis;
    VarLayout lay{1, 1, 1};
    ProblemSpec zero = fx.spec;
    zero.drift = MomentCoupledFunction(CoefficientKind::Drift, 1, 1, {Poly(lay.count())}, lay, basis);
    zero.diffusion =
        MomentCoupledFunction(CoefficientKind::Diffusion, 1, 1, {Poly(lay.count())}, lay, basis);
    auto rep0 = validate_problem(zero, 10);
    CHECK(rep0.pass);
    for (const auto& c : rep0.coefficients)
        if (c.coefficient == "drift") CHECK(c.lipschitz_ratio == doctest::Approx(0.0));

    // Cubic drift over a wide probe box trips the derivative threshold.
    ProblemSpec cubic = fixtures::cubic_blowup().spec;
    ProbeOptions wide;
    wide.box_halfwidth = 4.0;
    auto repc = validate_problem(cubic, 40, wide);
    bool warned = false;
    for (const auto& c : repc.coefficients)
        if (c.coefficient == "drift") warned = c.warn;
    CHECK(warned);
}

TEST_CASE("fixture files match the built-in definitions") {
    for (const auto& name : fixtures::names()) {
        CAPTURE(name);
        Fixture built = fixtures::by_name(name);
        Fixture loaded = load_fixture(std::string(MFSMP_FIXTURE_DIR) + "/" + name + ".toml");
        CHECK(fixture_to_config_text(built) == fixture_to_config_text(loaded));
        CHECK(fixture_hash(built) == fixture_hash(loaded));
    }
}

TEST_CASE("fixture text round-trips through parse and serialize") {
    Fixture fx = fixtures::example11();
    std::string text = fixture_to_config_text(fx);
    Fixture again = fixture_from_config(parse_config(text));
    CHECK(fixture_to_config_text(again) == text);
}

TEST_CASE("config parser handles the document subset") {
    const char* doc = R"(
# comment
name = "demo"
[alpha]
flag = true
nums = [1, 2.5,
        -3e-2]
inline = {a = 1, b = "two"}
)";
    ConfigValue root = parse_config(doc);
    CHECK(root.at("name").as_string() == "demo");
    CHECK(root.at("alpha").at("flag").as_bool());
    CHECK(root.at("alpha").at("nums").as_array().size() == 3);
    CHECK(root.at("alpha").at("nums").as_array()[2].as_number() == doctest::Approx(-0.03));
    CHECK(root.at("alpha").at("inline").at("b").as_string() == "two");

    CHECK_THROWS_AS(parse_config("x = "), FixtureError);
    CHECK_THROWS_AS(parse_config("[a]\nk = 1\n[a]\n"), FixtureError);
    CHECK_THROWS_AS(parse_config("k = \"unterminated"), FixtureError);
    CHECK_THROWS_AS(parse_config("t = {a = 1, a = 2}"), FixtureError);
}

TEST_CASE("control set grids") {
    auto boxed = ControlSet::box(Vec::Constant(1, -1.0), Vec::Constant(1, 1.0), {5});
    CHECK(boxed.points.size() == 5);
    CHECK(boxed.points.front()[0] == doctest::Approx(-1.0));
    CHECK(boxed.points.back()[0] == doctest::Approx(1.0));
    CHECK_THROWS(ControlSet::finite({}));
    CHECK_THROWS(ControlSet::box(Vec::Constant(1, 0.0), Vec::Constant(1, 1.0), {0}));
}
