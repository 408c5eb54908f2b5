#pragma once

#include "mfsmp/common.hpp"
#include "mfsmp/measure.hpp"
#include "mfsmp/poly.hpp"

#include <memory>
#include <string>
#include <vector>

namespace mfsmp {

/// Variable slate shared by all coefficient bodies: [t, x_0..x_{n-1}, m_0..m_{kb-1}, v_0..v_{kc-1}].
struct VarLayout {
    std::size_t n = 0;   // state dim
    std::size_t kb = 0;  // moment count
    std::size_t kc = 0;  // control dim

    std::size_t count() const { return 1 + n + kb + kc; }
    std::size_t t() const { return 0; }
    std::size_t x(std::size_t i) const { return 1 + i; }
    std::size_t m(std::size_t i) const { return 1 + n + i; }
    std::size_t v(std::size_t i) const { return 1 + n + kb + i; }
};

enum class CoefficientKind { Drift, Diffusion, RunningCost, TerminalCost };

std::string to_string(CoefficientKind k);

/// Shaped coefficient f(t,x,mu,v) = phi(t,x,m(mu),v) with m(mu) the moment
/// vector of `basis`. Components are polynomial bodies of total degree <= 4;
/// every first and second partial in (x,m,v) is generated by exact
/// differentiation at construction, so the Lions derivatives of the
/// moment-coupled family are available in closed form.
class MomentCoupledFunction {
public:
    MomentCoupledFunction() = default;
    MomentCoupledFunction(CoefficientKind kind, std::size_t rows, std::size_t cols,
                          std::vector<Poly> components, VarLayout layout,
                          std::shared_ptr<const MomentBasis> basis);

    CoefficientKind kind() const { return kind_; }
    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    const VarLayout& layout() const { return layout_; }
    const MomentBasis& basis() const { return *basis_; }
    std::shared_ptr<const MomentBasis> basis_ptr() const { return basis_; }
    const Poly& body(std::size_t r, std::size_t c) const { return components_[idx(r, c)]; }

    // z is a packed point per VarLayout. Fast paths write into caller storage.
    double value(std::size_t r, std::size_t c, const double* z) const;
    void value_all(const double* z, double* out_row_major) const;
    void grad_x(std::size_t r, std::size_t c, const double* z, double* out) const;   // n
    void grad_m(std::size_t r, std::size_t c, const double* z, double* out) const;   // kb
    void grad_v(std::size_t r, std::size_t c, const double* z, double* out) const;   // kc
    void hess_xx(std::size_t r, std::size_t c, const double* z, Mat& out) const;     // n x n
    void hess_xm(std::size_t r, std::size_t c, const double* z, Mat& out) const;     // n x kb
    void hess_mm(std::size_t r, std::size_t c, const double* z, Mat& out) const;     // kb x kb

    bool depends_on_control() const;

    /// Central finite-difference audit of the generated partial tables at
    /// random probe points. Returns the max relative error observed.
    double audit_partials(std::uint64_t seed, int probes = 20) const;

private:
    std::size_t idx(std::size_t r, std::size_t c) const { return r * cols_ + c; }

    CoefficientKind kind_ = CoefficientKind::Drift;
    std::size_t rows_ = 0, cols_ = 0;
    VarLayout layout_;
    std::shared_ptr<const MomentBasis> basis_;
    std::vector<Poly> components_;
    // Partial tables, one entry per component.
    std::vector<std::vector<Poly>> dx_, dm_, dv_;
    std::vector<std::vector<Poly>> dxx_, dxm_, dmm_;  // flattened [a*n+b], [a*kb+i], [i*kb+j]
};

struct ControlSet {
    enum class Kind { Finite, Box };
    Kind kind = Kind::Finite;
    std::vector<Vec> points;  // the evaluation grid (explicit list, or generated box grid)
    Vec lo, hi;               // box bounds when kind == Box
    std::vector<std::size_t> box_counts;

    static ControlSet finite(std::vector<Vec> pts);
    static ControlSet box(Vec lo, Vec hi, const std::vector<std::size_t>& counts);
    std::size_t dim() const { return points.empty() ? 0 : static_cast<std::size_t>(points[0].size()); }
};

/// The tuple (b, sigma, h, Phi, U, x0, T) defining one control problem.
/// Immutable after construction; evaluations are pure.
struct ProblemSpec {
    std::size_t n = 1, d = 1, k = 1;
    std::shared_ptr<const MomentBasis> basis;
    MomentCoupledFunction drift;          // n x 1
    MomentCoupledFunction diffusion;      // n x d, control-free
    MomentCoupledFunction running_cost;   // 1 x 1
    MomentCoupledFunction terminal_cost;  // 1 x 1
    ControlSet controls;
    Vec x0;
    double horizon = 1.0;
    std::string name;

    VarLayout layout() const { return VarLayout{n, basis ? basis->size() : 0, k}; }
    void check() const;  // shape compatibility, T > 0
    void pack(double t, const double* x, const double* m, const double* v, double* z) const;
};

/// Closed-form derivative bundle of one scalar component at a point, with the
/// Lions derivatives evaluated at copy points y (and ybar for the second one).
struct ComponentDerivatives {
    double value = 0.0;
    Vec grad_x;   // n
    Vec d_mu;     // n, at y
    Mat hess_xx;  // n x n
    Mat d_x_mu;   // n x n, rows x-index, cols y-index, at y
    Mat d_y_mu;   // n x n, at y
    Mat d_mu_mu;  // n x n, rows y-index, cols ybar-index
};

double eval_coefficient_scalar(const MomentCoupledFunction& f, std::size_t r, std::size_t c,
                               double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v);

/// phi(t, x, m(mu), v) for all components, shaped rows x cols.
Mat eval_coefficient(const MomentCoupledFunction& f, double t, const Vec& x,
                     const EmpiricalMeasure& mu, const Vec& v);

ComponentDerivatives eval_derivatives(const MomentCoupledFunction& f, std::size_t r, std::size_t c,
                                      double t, const Vec& x, const EmpiricalMeasure& mu,
                                      const Vec& v, const Vec& y, const Vec& ybar);

struct CoefficientProbeReport {
    std::string coefficient;
    double lipschitz_ratio = 0.0;   // max |df| / max-norm of the (x, mu, v) perturbation
    double max_grad_x = 0.0;
    double max_grad_m = 0.0;
    double partial_table_max_rel_err = 0.0;
    bool warn = false;
};

struct ValidationReport {
    bool spot_check_only = true;  // never a proof of the standing hypotheses
    bool pass = true;
    double lipschitz_threshold = 0.0;
    double derivative_threshold = 0.0;
    std::vector<CoefficientProbeReport> coefficients;
};

struct ProbeOptions {
    double box_halfwidth = 1.0;   // probe states in x0 +- halfwidth per coordinate
    double lipschitz_threshold = 25.0;
    double derivative_threshold = 25.0;
    std::uint64_t seed = 1234;
};

/// Samples random (t,x,mu,v) tuples, estimates local Lipschitz ratios and
/// derivative magnitudes for b, sigma, h, Phi, and flags values above the
/// thresholds. A spot check, not a certificate.
ValidationReport validate_problem(const ProblemSpec& spec, int probe_count,
                                  const ProbeOptions& opts = {});

}  // namespace mfsmp
