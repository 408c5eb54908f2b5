#include "mfsmp/problem.hpp"

#include "mfsmp/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace mfsmp {

std::string to_string(CoefficientKind k) {
    switch (k) {
        case CoefficientKind::Drift: return "drift";
        case CoefficientKind::Diffusion: return "diffusion";
        case CoefficientKind::RunningCost: return "running_cost";
        case CoefficientKind::TerminalCost: return "terminal_cost";
    }
    return "?";
}

MomentCoupledFunction::MomentCoupledFunction(CoefficientKind kind, std::size_t rows,
                                             std::size_t cols, std::vector<Poly> components,
                                             VarLayout layout,
                                             std::shared_ptr<const MomentBasis> basis)
    : kind_(kind), rows_(rows), cols_(cols), layout_(layout), basis_(std::move(basis)),
      components_(std::move(components)) {
    if (components_.size() != rows_ * cols_)
        throw std::invalid_argument("MomentCoupledFunction: component count != rows*cols");
    if (!basis_) throw std::invalid_argument("MomentCoupledFunction: missing moment basis");
    if (basis_->size() != layout_.kb)
        throw std::invalid_argument("MomentCoupledFunction: basis size != layout moment count");
    for (const auto& p : components_) {
        if (p.nvars() != layout_.count())
            throw std::invalid_argument("MomentCoupledFunction: body variable count != layout");
        if (p.total_degree() > 4)
            throw std::invalid_argument("MomentCoupledFunction: body degree exceeds 4");
        if (kind_ == CoefficientKind::Diffusion || kind_ == CoefficientKind::TerminalCost) {
            for (std::size_t a = 0; a < layout_.kc; ++a) {
                if (p.depends_on(layout_.v(a)))
                    throw std::invalid_argument("MomentCoupledFunction: " + to_string(kind_) +
                                                " references the control");
            }
        }
    }
    const std::size_t n = layout_.n, kb = layout_.kb, kc = layout_.kc;
    dx_.resize(components_.size());
    dm_.resize(components_.size());
    dv_.resize(components_.size());
    dxx_.resize(components_.size());
    dxm_.resize(components_.size());
    dmm_.resize(components_.size());
    for (std::size_t c = 0; c < components_.size(); ++c) {
        for (std::size_t a = 0; a < n; ++a) dx_[c].push_back(components_[c].derivative(layout_.x(a)));
        for (std::size_t i = 0; i < kb; ++i) dm_[c].push_back(components_[c].derivative(layout_.m(i)));
        for (std::size_t a = 0; a < kc; ++a) dv_[c].push_back(components_[c].derivative(layout_.v(a)));
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) dxx_[c].push_back(dx_[c][a].derivative(layout_.x(b)));
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t i = 0; i < kb; ++i) dxm_[c].push_back(dx_[c][a].derivative(layout_.m(i)));
        for (std::size_t i = 0; i < kb; ++i)
            for (std::size_t j = 0; j < kb; ++j) dmm_[c].push_back(dm_[c][i].derivative(layout_.m(j)));
    }
}

double MomentCoupledFunction::value(std::size_t r, std::size_t c, const double* z) const {
    return components_[idx(r, c)].eval(z);
}

void MomentCoupledFunction::value_all(const double* z, double* out) const {
    for (std::size_t i = 0; i < components_.size(); ++i) out[i] = components_[i].eval(z);
}

void MomentCoupledFunction::grad_x(std::size_t r, std::size_t c, const double* z, double* out) const {
    const auto& tab = dx_[idx(r, c)];
    for (std::size_t a = 0; a < layout_.n; ++a) out[a] = tab[a].eval(z);
}

void MomentCoupledFunction::grad_m(std::size_t r, std::size_t c, const double* z, double* out) const {
    const auto& tab = dm_[idx(r, c)];
    for (std::size_t i = 0; i < layout_.kb; ++i) out[i] = tab[i].eval(z);
}

void MomentCoupledFunction::grad_v(std::size_t r, std::size_t c, const double* z, double* out) const {
    const auto& tab = dv_[idx(r, c)];
    for (std::size_t a = 0; a < layout_.kc; ++a) out[a] = tab[a].eval(z);
}

void MomentCoupledFunction::hess_xx(std::size_t r, std::size_t c, const double* z, Mat& out) const {
    const std::size_t n = layout_.n;
    out.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    const auto& tab = dxx_[idx(r, c)];
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
            out(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = tab[a * n + b].eval(z);
}

void MomentCoupledFunction::hess_xm(std::size_t r, std::size_t c, const double* z, Mat& out) const {
    const std::size_t n = layout_.n, kb = layout_.kb;
    out.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kb));
    const auto& tab = dxm_[idx(r, c)];
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t i = 0; i < kb; ++i)
            out(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(i)) = tab[a * kb + i].eval(z);
}

void MomentCoupledFunction::hess_mm(std::size_t r, std::size_t c, const double* z, Mat& out) const {
    const std::size_t kb = layout_.kb;
    out.resize(static_cast<Eigen::Index>(kb), static_cast<Eigen::Index>(kb));
    const auto& tab = dmm_[idx(r, c)];
    for (std::size_t i = 0; i < kb; ++i)
        for (std::size_t j = 0; j < kb; ++j)
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = tab[i * kb + j].eval(z);
}

bool MomentCoupledFunction::depends_on_control() const {
    for (const auto& p : components_) {
        for (std::size_t a = 0; a < layout_.kc; ++a)
            if (p.depends_on(layout_.v(a))) return true;
    }
    return false;
}

double MomentCoupledFunction::audit_partials(std::uint64_t seed, int probes) const {
    NoiseField gen(seed, 4096, 64, layout_.count() + 4);
    const double eps = 1e-5;
    double worst = 0.0;
    std::vector<double> z(layout_.count()), zp(layout_.count()), zm(layout_.count());
    for (int p = 0; p < probes; ++p) {
        for (std::size_t i = 0; i < layout_.count(); ++i)
            z[i] = gen.gaussian(static_cast<std::size_t>(p), 0, i);
        for (std::size_t comp = 0; comp < components_.size(); ++comp) {
            std::size_t r = comp / cols_, c = comp % cols_;
            for (std::size_t var = 1; var < layout_.count(); ++var) {
                zp = z; zm = z;
                zp[var] += eps;
                zm[var] -= eps;
                double fd = (components_[comp].eval(zp.data()) - components_[comp].eval(zm.data())) / (2 * eps);
                double exact;
                if (var >= layout_.v(0) && layout_.kc > 0) {
                    double buf[16];
                    grad_v(r, c, z.data(), buf);
                    exact = buf[var - layout_.v(0)];
                } else if (var >= layout_.m(0) && layout_.kb > 0) {
                    double buf[16];
                    grad_m(r, c, z.data(), buf);
                    exact = buf[var - layout_.m(0)];
                } else {
                    double buf[16];
                    grad_x(r, c, z.data(), buf);
                    exact = buf[var - layout_.x(0)];
                }
                double scale = std::max({1.0, std::abs(fd), std::abs(exact)});
                worst = std::max(worst, std::abs(fd - exact) / scale);
            }
        }
    }
    return worst;
}

ControlSet ControlSet::finite(std::vector<Vec> pts) {
    if (pts.empty()) throw std::invalid_argument("ControlSet: empty point list");
    ControlSet s;
    s.kind = Kind::Finite;
    s.points = std::move(pts);
    return s;
}

ControlSet ControlSet::box(Vec lo, Vec hi, const std::vector<std::size_t>& counts) {
    if (lo.size() != hi.size() || static_cast<std::size_t>(lo.size()) != counts.size())
        throw std::invalid_argument("ControlSet: box shape mismatch");
    for (std::size_t c : counts)
        if (c < 1) throw std::invalid_argument("ControlSet: empty box grid");
    ControlSet s;
    s.kind = Kind::Box;
    s.lo = lo;
    s.hi = hi;
    s.box_counts = counts;
    std::size_t total = 1;
    for (std::size_t c : counts) total *= c;
    s.points.reserve(total);
    std::vector<std::size_t> ix(counts.size(), 0);
    for (std::size_t t = 0; t < total; ++t) {
        Vec p(lo.size());
        for (Eigen::Index a = 0; a < lo.size(); ++a) {
            std::size_t cnt = counts[static_cast<std::size_t>(a)];
            double frac = cnt == 1 ? 0.5 : static_cast<double>(ix[static_cast<std::size_t>(a)]) /
                                               static_cast<double>(cnt - 1);
            p[a] = lo[a] + frac * (hi[a] - lo[a]);
        }
        s.points.push_back(p);
        for (std::size_t a = 0; a < counts.size(); ++a) {
            if (++ix[a] < counts[a]) break;
            ix[a] = 0;
        }
    }
    return s;
}

void ProblemSpec::check() const {
    if (!basis) throw std::invalid_argument("ProblemSpec: missing basis");
    if (horizon <= 0.0) throw std::invalid_argument("ProblemSpec: horizon must be positive");
    if (static_cast<std::size_t>(x0.size()) != n) throw std::invalid_argument("ProblemSpec: x0 dim != n");
    if (drift.rows() != n || drift.cols() != 1) throw std::invalid_argument("ProblemSpec: drift shape");
    if (diffusion.rows() != n || diffusion.cols() != d)
        throw std::invalid_argument("ProblemSpec: diffusion shape");
    if (running_cost.rows() != 1 || running_cost.cols() != 1)
        throw std::invalid_argument("ProblemSpec: running cost shape");
    if (terminal_cost.rows() != 1 || terminal_cost.cols() != 1)
        throw std::invalid_argument("ProblemSpec: terminal cost shape");
    if (controls.points.empty()) throw std::invalid_argument("ProblemSpec: empty control set");
    if (controls.dim() != k) throw std::invalid_argument("ProblemSpec: control dim != k");
    if (basis->state_dim() != n) throw std::invalid_argument("ProblemSpec: basis state dim != n");
}

void ProblemSpec::pack(double t, const double* x, const double* m, const double* v, double* z) const {
    VarLayout lay = layout();
    z[lay.t()] = t;
    for (std::size_t i = 0; i < lay.n; ++i) z[lay.x(i)] = x[i];
    for (std::size_t i = 0; i < lay.kb; ++i) z[lay.m(i)] = m[i];
    for (std::size_t i = 0; i < lay.kc; ++i) z[lay.v(i)] = v ? v[i] : 0.0;
}

namespace {
std::vector<double> packed_point(const MomentCoupledFunction& f, double t, const Vec& x,
                                 const EmpiricalMeasure& mu, const Vec& v) {
    const VarLayout& lay = f.layout();
    if (static_cast<std::size_t>(x.size()) != lay.n)
        throw std::invalid_argument("eval_coefficient: x dim mismatch");
    Vec m = moment_vector(mu, f.basis());
    std::vector<double> z(lay.count(), 0.0);
    z[lay.t()] = t;
    for (std::size_t i = 0; i < lay.n; ++i) z[lay.x(i)] = x[static_cast<Eigen::Index>(i)];
    for (std::size_t i = 0; i < lay.kb; ++i) z[lay.m(i)] = m[static_cast<Eigen::Index>(i)];
    for (std::size_t i = 0; i < lay.kc; ++i)
        z[lay.v(i)] = i < static_cast<std::size_t>(v.size()) ? v[static_cast<Eigen::Index>(i)] : 0.0;
    return z;
}
}  // namespace

double eval_coefficient_scalar(const MomentCoupledFunction& f, std::size_t r, std::size_t c,
                               double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
    auto z = packed_point(f, t, x, mu, v);
    double out = f.value(r, c, z.data());
    if (!std::isfinite(out)) throw std::runtime_error("eval_coefficient: non-finite output");
    return out;
}

Mat eval_coefficient(const MomentCoupledFunction& f, double t, const Vec& x,
                     const EmpiricalMeasure& mu, const Vec& v) {
    auto z = packed_point(f, t, x, mu, v);
    Mat out(static_cast<Eigen::Index>(f.rows()), static_cast<Eigen::Index>(f.cols()));
    for (std::size_t r = 0; r < f.rows(); ++r)
        for (std::size_t c = 0; c < f.cols(); ++c) {
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = f.value(r, c, z.data());
        }
    if (!out.allFinite()) throw std::runtime_error("eval_coefficient: non-finite output");
    return out;
}

ComponentDerivatives eval_derivatives(const MomentCoupledFunction& f, std::size_t r, std::size_t c,
                                      double t, const Vec& x, const EmpiricalMeasure& mu,
                                      const Vec& v, const Vec& y, const Vec& ybar) {
    const VarLayout& lay = f.layout();
    const std::size_t n = lay.n, kb = lay.kb;
    auto z = packed_point(f, t, x, mu, v);
    const MomentBasis& basis = f.basis();

    ComponentDerivatives out;
    out.value = f.value(r, c, z.data());
    out.grad_x.resize(static_cast<Eigen::Index>(n));
    f.grad_x(r, c, z.data(), out.grad_x.data());

    Vec gm(static_cast<Eigen::Index>(kb));
    f.grad_m(r, c, z.data(), gm.data());
    Mat hxm, hmm;
    f.hess_xm(r, c, z.data(), hxm);
    f.hess_mm(r, c, z.data(), hmm);
    f.hess_xx(r, c, z.data(), out.hess_xx);

    Mat gy(static_cast<Eigen::Index>(kb), static_cast<Eigen::Index>(n));
    Mat gybar(static_cast<Eigen::Index>(kb), static_cast<Eigen::Index>(n));
    std::vector<double> buf(n);
    for (std::size_t i = 0; i < kb; ++i) {
        basis.gradient(i, y.data(), buf.data());
        for (std::size_t a = 0; a < n; ++a)
            gy(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = buf[a];
        basis.gradient(i, ybar.data(), buf.data());
        for (std::size_t a = 0; a < n; ++a)
            gybar(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = buf[a];
    }

    out.d_mu = gy.transpose() * gm;             // sum_i dphi/dm_i grad h_i(y)
    out.d_x_mu = hxm * gy;                      // rows x, cols y
    out.d_mu_mu = gy.transpose() * hmm * gybar; // rows y, cols ybar
    out.d_y_mu = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    Mat hess;
    for (std::size_t i = 0; i < kb; ++i) {
        double coeff = gm[static_cast<Eigen::Index>(i)];
        if (coeff == 0.0) continue;
        basis.hessian(i, y.data(), hess);
        out.d_y_mu += coeff * hess;
    }
    return out;
}

ValidationReport validate_problem(const ProblemSpec& spec, int probe_count,
                                  const ProbeOptions& opts) {
    if (probe_count < 1) throw std::invalid_argument("validate_problem: probe_count >= 1 required");
    spec.check();
    ValidationReport report;
    report.lipschitz_threshold = opts.lipschitz_threshold;
    report.derivative_threshold = opts.derivative_threshold;

    NoiseField gen(opts.seed, static_cast<std::size_t>(probe_count) + 1, 64, 64);
    const std::size_t n = spec.n;
    const std::size_t cloud = 5;

    const MomentCoupledFunction* coeffs[4] = {&spec.drift, &spec.diffusion, &spec.running_cost,
                                              &spec.terminal_cost};
    for (const MomentCoupledFunction* f : coeffs) {
        CoefficientProbeReport cr;
        cr.coefficient = to_string(f->kind());
        cr.partial_table_max_rel_err = f->audit_partials(opts.seed ^ 0x5eedULL, 20);

        for (int p = 0; p < probe_count; ++p) {
            auto g = [&](std::size_t slot) {
                return gen.gaussian(static_cast<std::size_t>(p), 0, slot);
            };
            double t = 0.5 * (1.0 + std::tanh(g(0))) * spec.horizon;
            Vec x(static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < n; ++i)
                x[static_cast<Eigen::Index>(i)] = spec.x0[static_cast<Eigen::Index>(i)] +
                                                  opts.box_halfwidth * g(1 + i);
            Mat atoms(static_cast<Eigen::Index>(cloud), static_cast<Eigen::Index>(n));
            for (std::size_t a = 0; a < cloud; ++a)
                for (std::size_t i = 0; i < n; ++i)
                    atoms(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(i)) =
                        spec.x0[static_cast<Eigen::Index>(i)] + opts.box_halfwidth * g(8 + a * n + i);
            const Vec& v = spec.controls.points[static_cast<std::size_t>(p) % spec.controls.points.size()];

            EmpiricalMeasure mu = empirical_from_samples(atoms);
            Mat base = eval_coefficient(*f, t, x, mu, v);
            if (!base.allFinite())
                throw std::runtime_error("validate_problem: non-finite coefficient at probe");

            // Direction for the joint (x, measure) perturbation.
            Vec e(static_cast<Eigen::Index>(n));
            double norm = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                e[static_cast<Eigen::Index>(i)] = g(40 + i);
                norm += e[static_cast<Eigen::Index>(i)] * e[static_cast<Eigen::Index>(i)];
            }
            e /= std::max(1e-12, std::sqrt(norm));
            double delta = 0.1;

            // Variant 1: move x only. Variant 2: translate the cloud only.
            // Variant 3: move both together. The denominator is the max norm of
            // the perturbation, so the joint variant exposes additive couplings.
            Mat shifted_atoms = atoms;
            for (std::size_t a = 0; a < cloud; ++a) shifted_atoms.row(static_cast<Eigen::Index>(a)) += delta * e.transpose();
            EmpiricalMeasure mu_shift = empirical_from_samples(shifted_atoms);

            Mat v1 = eval_coefficient(*f, t, x + delta * e, mu, v);
            Mat v2 = eval_coefficient(*f, t, x, mu_shift, v);
            Mat v3 = eval_coefficient(*f, t, x + delta * e, mu_shift, v);
            cr.lipschitz_ratio = std::max(cr.lipschitz_ratio, (v1 - base).norm() / delta);
            cr.lipschitz_ratio = std::max(cr.lipschitz_ratio, (v2 - base).norm() / delta);
            cr.lipschitz_ratio = std::max(cr.lipschitz_ratio, (v3 - base).norm() / delta);

            // Derivative magnitudes at the probe.
            Vec m = moment_vector(mu, *spec.basis);
            std::vector<double> z(f->layout().count());
            spec.pack(t, x.data(), m.data(), v.data(), z.data());
            std::vector<double> gx(n), gmv(spec.basis->size());
            for (std::size_t r = 0; r < f->rows(); ++r)
                for (std::size_t c = 0; c < f->cols(); ++c) {
                    f->grad_x(r, c, z.data(), gx.data());
                    f->grad_m(r, c, z.data(), gmv.data());
                    for (double d1 : gx) cr.max_grad_x = std::max(cr.max_grad_x, std::abs(d1));
                    for (double d2 : gmv) cr.max_grad_m = std::max(cr.max_grad_m, std::abs(d2));
                }
        }
        cr.warn = cr.lipschitz_ratio > opts.lipschitz_threshold ||
                  cr.max_grad_x > opts.derivative_threshold ||
                  cr.max_grad_m > opts.derivative_threshold ||
                  cr.partial_table_max_rel_err > 1e-6;
        report.pass = report.pass && !cr.warn;
        report.coefficients.push_back(cr);
    }
    return report;
}

}  // namespace mfsmp
