#include "mfsmp/fixtures.hpp"

#include <stdexcept>

namespace mfsmp::fixtures {

namespace {

struct ScalarProblem {
    std::string name;
    std::vector<MonomialSpec> drift, diffusion, running_cost, terminal_cost;
    std::vector<double> controls;
    double x0 = 0.0;
    double T = 1.0;
    double candidate = 0.0;
    double alternative = 1.0;
};

Fixture build_scalar(const ScalarProblem& def) {
    // One-dimensional state with the mean as the single moment coordinate.
    auto basis = std::make_shared<const MomentBasis>(
        1, std::vector<Poly>{basis_poly_from_monomials(1, {{1.0, "x"}})});
    VarLayout lay{1, 1, 1};
    Fixture fx;
    fx.spec.n = fx.spec.d = fx.spec.k = 1;
    fx.spec.basis = basis;
    fx.spec.name = def.name;
    fx.spec.drift = MomentCoupledFunction(CoefficientKind::Drift, 1, 1,
                                          {poly_from_monomials(lay, def.drift)}, lay, basis);
    fx.spec.diffusion = MomentCoupledFunction(CoefficientKind::Diffusion, 1, 1,
                                              {poly_from_monomials(lay, def.diffusion)}, lay, basis);
    fx.spec.running_cost = MomentCoupledFunction(
        CoefficientKind::RunningCost, 1, 1, {poly_from_monomials(lay, def.running_cost)}, lay, basis);
    fx.spec.terminal_cost = MomentCoupledFunction(
        CoefficientKind::TerminalCost, 1, 1, {poly_from_monomials(lay, def.terminal_cost)}, lay, basis);
    std::vector<Vec> pts;
    for (double c : def.controls) {
        Vec v(1);
        v[0] = c;
        pts.push_back(v);
    }
    fx.spec.controls = ControlSet::finite(std::move(pts));
    fx.spec.x0 = Vec::Constant(1, def.x0);
    fx.spec.horizon = def.T;
    fx.candidate = Vec::Constant(1, def.candidate);
    fx.alternative = Vec::Constant(1, def.alternative);
    fx.spec.check();
    return fx;
}

}  // namespace

Fixture example11() {
    ScalarProblem def;
    def.name = "example11";
    def.drift = {{1.0, "v"}};
    def.diffusion = {{1.0, "x"}, {1.0, "m"}, {-2.0, ""}};
    def.terminal_cost = {{0.5, "x^2"}, {0.5, "m^2"}, {1.0, "x m"}, {-2.0, "x"}, {-2.0, "m"}, {2.0, ""}};
    def.controls = {-1.0, 0.0, 1.0};
    def.x0 = 1.0;
    def.candidate = 0.0;
    def.alternative = 1.0;
    return build_scalar(def);
}

Fixture linear_tracking() {
    ScalarProblem def;
    def.name = "linear_tracking";
    def.drift = {{1.0, "v"}};
    def.diffusion = {{0.2, ""}};
    def.running_cost = {{1.0, "x"}, {1.0, "v^2"}};
    def.controls = {-1.0, 0.0, 1.0};
    def.x0 = 0.0;
    def.candidate = 0.0;
    def.alternative = 1.0;
    return build_scalar(def);
}

Fixture bsde_quadratic() {
    ScalarProblem def;
    def.name = "bsde_quadratic";
    def.drift = {{1.0, "v"}};
    def.diffusion = {{0.3, "x"}};
    def.running_cost = {{0.5, "x^2"}};
    def.controls = {-1.0, 0.0, 1.0};
    def.x0 = 1.0;
    def.candidate = 0.0;
    def.alternative = 1.0;
    return build_scalar(def);
}

Fixture quadratic_drift() {
    ScalarProblem def;
    def.name = "quadratic_drift";
    def.drift = {{0.5, "x^2"}, {1.0, "v"}};
    def.diffusion = {{0.2, ""}};
    def.controls = {-1.0, 0.0, 1.0};
    def.x0 = 0.0;
    def.candidate = 0.0;
    def.alternative = 1.0;
    return build_scalar(def);
}

Fixture geometric() {
    ScalarProblem def;
    def.name = "geometric";
    def.drift = {{1.0, "v"}};
    def.diffusion = {{0.3, "x"}};
    def.controls = {-1.0, 0.0, 1.0};
    def.x0 = 1.0;
    def.candidate = 0.0;
    def.alternative = 1.0;
    return build_scalar(def);
}

Fixture quadratic_tracking() {
    ScalarProblem def;
    def.name = "quadratic_tracking";
    def.drift = {{1.0, "v"}};
    def.diffusion = {{0.5, ""}};
    def.running_cost = {{0.5, "x^2"}, {1.0, "v"}};
    def.controls = {-1.0, 0.0, 1.0};
    def.x0 = 0.0;
    def.candidate = 0.0;
    def.alternative = 1.0;
    return build_scalar(def);
}

Fixture suboptimal_tracking() {
    ScalarProblem def;
    def.name = "suboptimal_tracking";
    def.drift = {{1.0, "v"}};
    def.diffusion = {{0.2, ""}};
    def.running_cost = {{1.0, "v^2"}, {-2.0, "v"}, {1.0, ""}};  // (v-1)^2
    def.controls = {-1.0, 0.0, 1.0};
    def.x0 = 0.0;
    def.candidate = 0.0;
    def.alternative = 1.0;
    return build_scalar(def);
}

Fixture cubic_blowup() {
    ScalarProblem def;
    def.name = "cubic_blowup";
    def.drift = {{1.0, "x^3"}};
    def.diffusion = {};
    def.controls = {0.0};
    def.x0 = 20.0;
    def.candidate = 0.0;
    def.alternative = 0.0;
    return build_scalar(def);
}

Fixture by_name(const std::string& name) {
    if (name == "example11") return example11();
    if (name == "linear_tracking") return linear_tracking();
    if (name == "bsde_quadratic") return bsde_quadratic();
    if (name == "quadratic_drift") return quadratic_drift();
    if (name == "geometric") return geometric();
    if (name == "quadratic_tracking") return quadratic_tracking();
    if (name == "suboptimal_tracking") return suboptimal_tracking();
    if (name == "cubic_blowup") return cubic_blowup();
    throw std::invalid_argument("unknown fixture: " + name);
}

std::vector<std::string> names() {
    return {"example11",        "linear_tracking",   "bsde_quadratic", "quadratic_drift",
            "geometric",        "quadratic_tracking", "suboptimal_tracking", "cubic_blowup"};
}

}  // namespace mfsmp::fixtures
