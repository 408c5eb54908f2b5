#include "mfsmp/forward.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>

namespace mfsmp {

ControlProcess ControlProcess::constant(Vec value, std::size_t steps, std::size_t particles) {
    ControlProcess c;
    c.mode_ = Mode::Constant;
    c.const_value_ = std::move(value);
    c.steps_ = steps;
    c.particles_ = particles;
    c.k_ = static_cast<std::size_t>(c.const_value_.size());
    return c;
}

ControlProcess ControlProcess::array(std::vector<double> values, std::size_t steps,
                                     std::size_t particles, std::size_t k) {
    if (values.size() != steps * particles * k)
        throw std::invalid_argument("ControlProcess::array: size mismatch");
    ControlProcess c;
    c.mode_ = Mode::Array;
    c.array_ = std::move(values);
    c.steps_ = steps;
    c.particles_ = particles;
    c.k_ = k;
    return c;
}

ControlProcess ControlProcess::spiked(ControlProcess base, ControlProcess alt,
                                      std::vector<std::uint8_t> spike_mask) {
    if (base.steps() != alt.steps() || base.particles() != alt.particles() ||
        base.control_dim() != alt.control_dim())
        throw std::invalid_argument("ControlProcess::spiked: shape mismatch");
    if (spike_mask.size() != base.steps())
        throw std::invalid_argument("ControlProcess::spiked: mask length != steps");
    ControlProcess c;
    c.mode_ = Mode::Spiked;
    c.steps_ = base.steps();
    c.particles_ = base.particles();
    c.k_ = base.control_dim();
    c.base_ = std::make_shared<ControlProcess>(std::move(base));
    c.alt_ = std::make_shared<ControlProcess>(std::move(alt));
    c.mask_ = std::move(spike_mask);
    return c;
}

const double* ControlProcess::value(std::size_t step, std::size_t particle) const {
    switch (mode_) {
        case Mode::Constant: return const_value_.data();
        case Mode::Array: return array_.data() + (step * particles_ + particle) * k_;
        case Mode::Spiked: return (mask_[step] ? alt_ : base_)->value(step, particle);
    }
    return nullptr;
}

Vec ControlProcess::value_vec(std::size_t step, std::size_t particle) const {
    const double* p = value(step, particle);
    Vec out(static_cast<Eigen::Index>(k_));
    for (std::size_t a = 0; a < k_; ++a) out[static_cast<Eigen::Index>(a)] = p[a];
    return out;
}

EmpiricalMeasure ParticlePathEnsemble::measure_at(std::size_t m) const {
    Mat s(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < N; ++j)
        for (std::size_t i = 0; i < n; ++i)
            s(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = state(m, j)[i];
    return empirical_from_samples(s);
}

namespace {

void compute_moments(const ProblemSpec& spec, ParticlePathEnsemble& ens, std::size_t m) {
    const std::size_t kb = spec.basis->size();
    double* out = ens.moments.data() + m * kb;
    for (std::size_t i = 0; i < kb; ++i) out[i] = 0.0;
    for (std::size_t j = 0; j < ens.N; ++j) {
        const double* x = ens.state(m, j);
        for (std::size_t i = 0; i < kb; ++i) out[i] += spec.basis->value(i, x);
    }
    for (std::size_t i = 0; i < kb; ++i) out[i] /= static_cast<double>(ens.N);
}

}  // namespace

ParticlePathEnsemble simulate_with_noise(const ProblemSpec& spec, const ControlProcess& control,
                                         const TimeGrid& grid, std::size_t N,
                                         const NoiseField& noise) {
    spec.check();
    if (N < 2) throw std::invalid_argument("simulate: N >= 2 required");
    if (control.steps() != grid.steps)
        throw std::invalid_argument("simulate: control steps != grid steps");
    if (control.particles() != N && control.particles() != 1)
        throw std::invalid_argument("simulate: control particle count mismatch");
    if (control.control_dim() != spec.k)
        throw std::invalid_argument("simulate: control dim != spec.k");

    const std::size_t n = spec.n, d = spec.d, kb = spec.basis->size();
    const std::size_t M = grid.steps;
    const double dt = grid.dt();

    ParticlePathEnsemble ens;
    ens.grid = grid;
    ens.N = N;
    ens.n = n;
    ens.paths.assign((M + 1) * N * n, 0.0);
    ens.moments.assign((M + 1) * kb, 0.0);
    ens.noise = noise;
    ens.seed = noise.seed();

    for (std::size_t j = 0; j < N; ++j)
        for (std::size_t i = 0; i < n; ++i) ens.state_mut(0, j)[i] = spec.x0[static_cast<Eigen::Index>(i)];

    const VarLayout lay = spec.layout();
    std::size_t blow_step = M + 1, blow_particle = 0;

    for (std::size_t m = 0; m < M; ++m) {
        compute_moments(spec, ens, m);
        const double* mom = ens.moments.data() + m * kb;
        const double t = grid.time(m);

        std::atomic<std::size_t> first_bad{N};
        parallel_for(N, [&](std::size_t begin, std::size_t end) {
            std::vector<double> z(lay.count());
            std::vector<double> bval(n), sval(n * d);
            for (std::size_t j = begin; j < end; ++j) {
                const double* x = ens.state(m, j);
                const double* v = control.value(m, control.particles() == 1 ? 0 : j);
                spec.pack(t, x, mom, v, z.data());
                spec.drift.value_all(z.data(), bval.data());
                spec.diffusion.value_all(z.data(), sval.data());
                double* xn = ens.state_mut(m + 1, j);
                bool ok = true;
                for (std::size_t i = 0; i < n; ++i) {
                    double inc = bval[i] * dt;
                    for (std::size_t r = 0; r < d; ++r)
                        inc += sval[i * d + r] * ens.noise.increment(m, j, r, dt);
                    xn[i] = x[i] + inc;
                    ok = ok && std::isfinite(xn[i]);
                }
                if (!ok) {
                    std::size_t seen = first_bad.load();
                    while (j < seen && !first_bad.compare_exchange_weak(seen, j)) {
                    }
                }
            }
        });
        if (first_bad.load() < N) {
            blow_step = m;
            blow_particle = first_bad.load();
            break;
        }
    }
    if (blow_step <= M) {
        throw BlowupError(blow_step, blow_particle,
                          "simulate: non-finite state at step " + std::to_string(blow_step) +
                              ", particle " + std::to_string(blow_particle));
    }
    compute_moments(spec, ens, M);
    return ens;
}

ParticlePathEnsemble simulate(const ProblemSpec& spec, const ControlProcess& control,
                              const TimeGrid& grid, std::size_t N, std::uint64_t seed) {
    return simulate_with_noise(spec, control, grid, N, NoiseField(seed, grid.steps, N, spec.d));
}

MomentReport moment_bound_check(const ParticlePathEnsemble& ens, const ControlProcess& control) {
    MomentReport rep;
    const std::size_t M = ens.grid.steps;
    const double dt = ens.grid.dt();
    double sup_sum = 0.0, ctrl_sum = 0.0;
    for (std::size_t j = 0; j < ens.N; ++j) {
        double sup = 0.0;
        for (std::size_t m = 0; m <= M; ++m) {
            double norm2 = 0.0;
            const double* x = ens.state(m, j);
            for (std::size_t i = 0; i < ens.n; ++i) norm2 += x[i] * x[i];
            sup = std::max(sup, norm2);
        }
        sup_sum += std::pow(sup, 4.0);  // |x|^8 = (|x|^2)^4
        double l1 = 0.0;
        for (std::size_t m = 0; m < M; ++m) {
            const double* v = control.value(m, control.particles() == 1 ? 0 : j);
            double norm2 = 0.0;
            for (std::size_t a = 0; a < control.control_dim(); ++a) norm2 += v[a] * v[a];
            l1 += std::sqrt(norm2) * dt;
        }
        ctrl_sum += std::pow(l1, 8.0);
    }
    rep.sup_x8 = sup_sum / static_cast<double>(ens.N);
    rep.control_l1_8 = ctrl_sum / static_cast<double>(ens.N);
    double x0n2 = 0.0;
    for (std::size_t i = 0; i < ens.n; ++i) x0n2 += ens.state(0, 0)[i] * ens.state(0, 0)[i];
    rep.x0_8 = std::pow(x0n2, 4.0);
    rep.ratio = rep.sup_x8 / (1.0 + rep.x0_8 + rep.control_l1_8);
    rep.finite = std::isfinite(rep.sup_x8) && std::isfinite(rep.control_l1_8);
    if (!rep.finite) throw std::runtime_error("moment_bound_check: non-finite moments");
    return rep;
}

}  // namespace mfsmp
