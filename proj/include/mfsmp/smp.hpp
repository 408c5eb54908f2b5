#pragma once

#include "mfsmp/adjoint.hpp"
#include "mfsmp/common.hpp"
#include "mfsmp/forward.hpp"
#include "mfsmp/variation.hpp"

#include <optional>
#include <vector>

namespace mfsmp {

/// H(t,x,mu,p,q,v) = p.b + q:sigma + h.
double hamiltonian(const ProblemSpec& spec, double t, const Vec& x, const EmpiricalMeasure& mu,
                   const Vec& p, const Mat& q, const Vec& v);

/// Per-knot, per-control-point particle averages of
/// H(t,X,mu,p,q,v) - H(t,X,mu,p,q,u), with standard errors.
struct GapTable {
    std::vector<double> times;       // knots 0..M-1
    std::vector<Vec> control_points;
    Mat gap;  // times x points
    Mat se;
};

GapTable hamiltonian_gap(const ProblemSpec& spec, const ParticlePathEnsemble& ens_u,
                         const ControlProcess& u, const FirstOrderAdjoint& adj,
                         const std::vector<Vec>& control_points);

struct FirstOrderResidual {
    double violation = 0.0;  // max over (t, v) of (-E dH)_+
    std::size_t witness_step = 0;
    std::size_t witness_control = 0;
    bool significant = false;  // beyond 3 standard errors
};

FirstOrderResidual first_order_residual(const GapTable& gaps);

struct SingularRegion {
    std::vector<std::pair<std::size_t, std::size_t>> cells;  // (knot, control index)
    bool positive_measure = false;  // >= 2 knots and >= 1 non-candidate control point
    bool full_grid = false;
    double tol_used = 0.0;
};

/// Cells with |E dH| <= tol. tol_sing < 0 selects the default of 3 MC standard
/// errors per cell (exact equality is unobservable under sampling noise).
SingularRegion detect_singular_region(const GapTable& gaps, double tol_sing,
                                      const Vec* u_constant = nullptr);

/// Second-order optimality condition value per (knot, control point):
/// dH_x.db + E~[dH_mu db~] + db* P db, particle-averaged, with standard errors.
struct ConditionTable {
    std::vector<double> times;
    std::vector<Vec> control_points;
    Mat value;
    Mat se;
    /// 5th percentile of the per-particle values: the almost-sure statement
    /// holds pathwise, so isolated negative particles at finite N are
    /// diagnostic output, not a verdict.
    Mat q05;
};

ConditionTable second_order_condition(const ProblemSpec& spec, const ParticlePathEnsemble& ens_u,
                                      const ControlProcess& u, const FirstOrderAdjoint& first,
                                      const SecondOrderAdjoint& second,
                                      const std::vector<Vec>& control_points);

struct CostEstimate {
    double value = 0.0;
    double se = 0.0;
    std::vector<double> per_particle;
};

CostEstimate cost(const ProblemSpec& spec, const ParticlePathEnsemble& ens,
                  const ControlProcess& control);

struct SMPReport {
    GapTable gaps;
    FirstOrderResidual first_order;
    SingularRegion singular;
    ConditionTable second_order;
    double second_order_violation = 0.0;  // max (-value)_+ over the singular region
    bool second_order_significant = false;
    double tol_sing = -1.0;
};

SMPReport build_smp_report(const ProblemSpec& spec, const ParticlePathEnsemble& ens_u,
                           const ControlProcess& u, const AdjointSolution& adj,
                           const std::vector<Vec>& control_points, double tol_sing,
                           const Vec* u_constant = nullptr);

/// Cost expansion audit over a rho ladder: spike the control on partition
/// spike sets, difference the costs under common random numbers, fit
/// c1*rho + c2*rho^2, and compare against the adjoint-based predictions
/// c1 = E int dH dt and c2 = E int {dH_x.x1 + E~[dH_mu x~1] + db* P x1} dt.
struct ExpansionAudit {
    std::vector<double> rho;
    std::vector<double> delta_cost;
    std::vector<double> delta_se;
    double c1_fitted = 0.0, c2_fitted = 0.0;
    double c1_fit_se = 0.0, c2_fit_se = 0.0;
    double c1_predicted = 0.0, c2_predicted = 0.0;
    std::vector<double> residual_over_rho2;
    std::vector<double> residual_se_over_rho2;
    bool residual_decreasing = false;
    bool c1_consistent = false;  // 10% (or both consistent with zero)
    bool c2_consistent = false;  // 25%; fails by construction when the single-matrix
                                 // P pairing cannot carry the terminal-cost couplings
};

struct ExpansionOptions {
    std::size_t partition_cell_steps = 0;  // 0: M/100 rounded up
    RegressionBasis basis{2, 1e-8};
    SecondOrderOptions second_order{};
};

ExpansionAudit expansion_audit(const ProblemSpec& spec, const Vec& u_const, const Vec& v_const,
                               const std::vector<double>& rho_ladder, std::size_t N, std::size_t M,
                               std::uint64_t seed, const ExpansionOptions& opts = {});

/// Itô-formula residual for a scalar moment-coupled functional along the
/// simulated flow, batched over sub-clouds for the standard error. Finite-N
/// empirical measures carry an O(1/batch) bias on nonlinear functionals, which
/// the caller's tolerance (3 SE + O(dt)) is expected to absorb.
struct ItoResidual {
    double residual = 0.0;
    double se = 0.0;
};

ItoResidual ito_residual(const ProblemSpec& spec, const MomentCoupledFunction& phi,
                         const ParticlePathEnsemble& ens, const ControlProcess& control,
                         std::size_t knot, std::size_t batches = 16);

/// Duality audit of the first-order adjoint against the variation processes:
/// E int {h_x.x12 + E~[h_mu x12~]} dt + E[p_T.x12_T] computed directly and via
/// the Itô pairing of p with x12 (control increment + quadratic terms).
struct DualityReport {
    double direct = 0.0;
    double pairing = 0.0;
    double rel_gap = 0.0;  // |direct - pairing| / max(|direct|, |pairing|, 1e-12)
};

DualityReport duality_gap(const ProblemSpec& spec, const ParticlePathEnsemble& ens_u,
                          const ControlProcess& u, const ControlProcess& vhat,
                          const FirstOrderAdjoint& adj, const VariationPaths& x1,
                          const VariationPaths& x2);

}  // namespace mfsmp
