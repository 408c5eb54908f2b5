#pragma once

#include "mfsmp/fixture_io.hpp"

namespace mfsmp::fixtures {

/// Singular mean-field benchmark: dX = v dt + {(X-1) + E[X-1]} dB, X_0 = 1,
/// U = {-1, 0, 1}, terminal cost (1/2){(X_T-1) + E[X_T-1]}^2. The candidate
/// u = 0 keeps X = 1 and makes the Hamiltonian flat in v.
Fixture example11();

/// b = v, sigma = 0.2, h = x + v^2: closed-form adjoint p_t = T - t and a
/// nonsingular Hamiltonian gap (the c1 coefficient oracle).
Fixture linear_tracking();

/// b = v, sigma = 0.3 x, h = x^2/2: scalar backward oracle
/// P_t = (e^{a^2 (T-t)} - 1)/a^2 with a = 0.3.
Fixture bsde_quadratic();

/// b = x^2/2 + v, sigma = 0.2: quadratic drift for the variation order study.
Fixture quadratic_drift();

/// b = v, sigma = 0.3 x: multiplicative noise with no cost, for the
/// transition-matrix representation study.
Fixture geometric();

/// b = v, sigma = 0.5, h = x^2/2 + v: classical quadratic fixture where the
/// cost expansion coefficients are exactly c1 = 1, c2 = 1/6 at u=0, v=1.
Fixture quadratic_tracking();

/// b = v, h = (v-1)^2 at u = 0: deliberately suboptimal candidate with a
/// first-order violation witnessed at v = 1.
Fixture suboptimal_tracking();

/// b = x^3 from x0 = 20: the Euler scheme exceeds the double range within a
/// handful of steps (blow-up diagnostics path).
Fixture cubic_blowup();

Fixture by_name(const std::string& name);
std::vector<std::string> names();

}  // namespace mfsmp::fixtures
