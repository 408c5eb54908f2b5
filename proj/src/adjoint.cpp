#include "mfsmp/adjoint.hpp"

#include <cmath>
#include <stdexcept>

namespace mfsmp {

namespace {

Mat states_at(const ParticlePathEnsemble& ens, std::size_t m) {
    Mat S(static_cast<Eigen::Index>(ens.N), static_cast<Eigen::Index>(ens.n));
    for (std::size_t j = 0; j < ens.N; ++j)
        for (std::size_t i = 0; i < ens.n; ++i)
            S(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = ens.state(m, j)[i];
    return S;
}

}  // namespace

FirstOrderAdjoint solve_first_order(const ProblemSpec& spec, const ParticlePathEnsemble& ens_u,
                                    const ControlProcess& u, const RegressionBasis& basis) {
    spec.check();
    const std::size_t M = ens_u.grid.steps, N = ens_u.N, n = spec.n, d = spec.d,
                      kb = spec.basis->size();
    const double dt = ens_u.grid.dt();
    const VarLayout lay = spec.layout();

    FirstOrderAdjoint adj;
    adj.grid = ens_u.grid;
    adj.N = N;
    adj.n = n;
    adj.d = d;
    adj.p.assign((M + 1) * N * n, 0.0);
    adj.q.assign(M * N * n * d, 0.0);
    adj.step_residual_rms.assign(M, 0.0);
    adj.step_residual_mean.assign(M, 0.0);

    // Terminal condition: Phi_x at the particle plus the copy average of
    // Phi_mu, which factors through the moment basis.
    {
        const double* mom = ens_u.moment(M);
        const double T = spec.horizon;
        std::vector<double> z(lay.count());
        std::vector<double> gm(kb), gx(n), gh(n);
        std::vector<double> c(kb, 0.0);
        for (std::size_t l = 0; l < N; ++l) {
            spec.pack(T, ens_u.state(M, l), mom, nullptr, z.data());
            spec.terminal_cost.grad_m(0, 0, z.data(), gm.data());
            for (std::size_t kk = 0; kk < kb; ++kk) c[kk] += gm[kk];
        }
        for (std::size_t kk = 0; kk < kb; ++kk) c[kk] /= static_cast<double>(N);
        for (std::size_t j = 0; j < N; ++j) {
            spec.pack(T, ens_u.state(M, j), mom, nullptr, z.data());
            spec.terminal_cost.grad_x(0, 0, z.data(), gx.data());
            double* pT = adj.p.data() + (M * N + j) * n;
            for (std::size_t i = 0; i < n; ++i) pT[i] = gx[i];
            for (std::size_t kk = 0; kk < kb; ++kk) {
                spec.basis->gradient(kk, ens_u.state(M, j), gh.data());
                for (std::size_t i = 0; i < n; ++i) pT[i] += c[kk] * gh[i];
            }
        }
    }

    for (std::size_t m = M; m-- > 0;) {
        Mat S = states_at(ens_u, m);
        FeatureRegression reg(S, basis);
        const double* mom = ens_u.moment(m);
        const double t = ens_u.grid.time(m);

        // q estimate: E[p_{m+1} dB^T | X_m] / dt.
        Mat Yq(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n * d));
        for (std::size_t j = 0; j < N; ++j) {
            const double* pn = adj.p.data() + ((m + 1) * N + j) * n;
            for (std::size_t r = 0; r < d; ++r) {
                double db = ens_u.noise.increment(m, j, r, dt);
                for (std::size_t i = 0; i < n; ++i)
                    Yq(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i * d + r)) =
                        pn[i] * db / dt;
            }
        }
        Mat qfit = reg.fit(Yq);
        for (std::size_t j = 0; j < N; ++j)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t r = 0; r < d; ++r)
                    adj.q[(m * N + j) * n * d + i * d + r] =
                        qfit(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i * d + r));

        // Copy-average weights of the driver's E~ block: the copy's own
        // (p~, q~) pair with the moment partials at the copy state, and the
        // basis gradient lands on the receiving particle.
        std::vector<double> w(kb, 0.0);
        {
            std::vector<double> z(lay.count());
            std::vector<double> gm(kb);
            for (std::size_t l = 0; l < N; ++l) {
                const double* ul = u.value(m, u.particles() == 1 ? 0 : l);
                spec.pack(t, ens_u.state(m, l), mom, ul, z.data());
                const double* pl = adj.p.data() + ((m + 1) * N + l) * n;
                const double* ql = adj.q.data() + (m * N + l) * n * d;
                for (std::size_t i = 0; i < n; ++i) {
                    spec.drift.grad_m(i, 0, z.data(), gm.data());
                    for (std::size_t kk = 0; kk < kb; ++kk) w[kk] += pl[i] * gm[kk];
                    for (std::size_t r = 0; r < d; ++r) {
                        spec.diffusion.grad_m(i, r, z.data(), gm.data());
                        for (std::size_t kk = 0; kk < kb; ++kk) w[kk] += ql[i * d + r] * gm[kk];
                    }
                }
                spec.running_cost.grad_m(0, 0, z.data(), gm.data());
                for (std::size_t kk = 0; kk < kb; ++kk) w[kk] += gm[kk];
            }
            for (std::size_t kk = 0; kk < kb; ++kk) w[kk] /= static_cast<double>(N);
        }

        Mat Yp(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
        parallel_for(N, [&](std::size_t begin, std::size_t end) {
            std::vector<double> z(lay.count());
            std::vector<double> gx(n), gh(n), drv(n);
            for (std::size_t j = begin; j < end; ++j) {
                const double* uj = u.value(m, u.particles() == 1 ? 0 : j);
                spec.pack(t, ens_u.state(m, j), mom, uj, z.data());
                const double* pn = adj.p.data() + ((m + 1) * N + j) * n;
                const double* qj = adj.q.data() + (m * N + j) * n * d;
                for (std::size_t a = 0; a < n; ++a) drv[a] = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    spec.drift.grad_x(i, 0, z.data(), gx.data());
                    for (std::size_t a = 0; a < n; ++a) drv[a] += gx[a] * pn[i];
                    for (std::size_t r = 0; r < d; ++r) {
                        spec.diffusion.grad_x(i, r, z.data(), gx.data());
                        for (std::size_t a = 0; a < n; ++a) drv[a] += gx[a] * qj[i * d + r];
                    }
                }
                spec.running_cost.grad_x(0, 0, z.data(), gx.data());
                for (std::size_t a = 0; a < n; ++a) drv[a] += gx[a];
                for (std::size_t kk = 0; kk < kb; ++kk) {
                    spec.basis->gradient(kk, ens_u.state(m, j), gh.data());
                    for (std::size_t a = 0; a < n; ++a) drv[a] += w[kk] * gh[a];
                }
                for (std::size_t a = 0; a < n; ++a)
                    Yp(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(a)) =
                        pn[a] + dt * drv[a];
            }
        });
        Mat pfit = reg.fit(Yp);
        Mat resid = Yp - pfit;
        adj.step_residual_rms[m] = std::sqrt(resid.squaredNorm() / static_cast<double>(resid.size()));
        adj.step_residual_mean[m] = resid.mean();
        for (std::size_t j = 0; j < N; ++j)
            for (std::size_t i = 0; i < n; ++i)
                adj.p[(m * N + j) * n + i] =
                    pfit(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
        if (!pfit.allFinite())
            throw RegressionError("solve_first_order: non-finite backward values at step " +
                                  std::to_string(m));
    }
    return adj;
}

SecondOrderAdjoint solve_second_order(const ProblemSpec& spec, const ParticlePathEnsemble& ens_u,
                                      const ControlProcess& u, const FirstOrderAdjoint& first,
                                      const RegressionBasis& basis,
                                      const SecondOrderOptions& opts) {
    spec.check();
    const std::size_t M = ens_u.grid.steps, N = ens_u.N, n = spec.n, d = spec.d,
                      kb = spec.basis->size();
    const double dt = ens_u.grid.dt();
    const VarLayout lay = spec.layout();
    if (opts.verbatim_q_term && d != 1)
        throw std::invalid_argument(
            "solve_second_order: the verbatim Q-term only typechecks for d == 1");

    SecondOrderAdjoint adj;
    adj.grid = ens_u.grid;
    adj.N = N;
    adj.n = n;
    adj.d = d;
    adj.P.assign((M + 1) * N * n * n, 0.0);
    adj.Q.assign(M * N * n * n * d, 0.0);
    adj.step_residual_rms.assign(M, 0.0);

    auto basis_gradbar = [&](std::size_t m) {
        std::vector<Vec> gbar(kb, Vec::Zero(static_cast<Eigen::Index>(n)));
        std::vector<double> gh(n);
        for (std::size_t l = 0; l < N; ++l)
            for (std::size_t kk = 0; kk < kb; ++kk) {
                spec.basis->gradient(kk, ens_u.state(m, l), gh.data());
                for (std::size_t i = 0; i < n; ++i)
                    gbar[kk][static_cast<Eigen::Index>(i)] += gh[i];
            }
        for (auto& g : gbar) g /= static_cast<double>(N);
        return gbar;
    };

    // Terminal condition assembled from the terminal-cost second derivatives:
    // Phi_xx + (E~[Phi_xmu] + transpose) + E-E~[Phi_mumu] + E~[Phi_ymu].
    {
        const double* mom = ens_u.moment(M);
        const double T = spec.horizon;
        auto gbar = basis_gradbar(M);
        std::vector<double> z(lay.count());
        std::vector<double> gm(kb), gh(n);
        Mat hxx, hxm, hmm, hbasis;
        // Average basis Hessian over the cloud (the y-argument of Phi_ymu is the copy).
        std::vector<Mat> hbar(kb, Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
        for (std::size_t l = 0; l < N; ++l)
            for (std::size_t kk = 0; kk < kb; ++kk) {
                spec.basis->hessian(kk, ens_u.state(M, l), hbasis);
                hbar[kk] += hbasis;
            }
        for (auto& h : hbar) h /= static_cast<double>(N);

        for (std::size_t j = 0; j < N; ++j) {
            spec.pack(T, ens_u.state(M, j), mom, nullptr, z.data());
            spec.terminal_cost.hess_xx(0, 0, z.data(), hxx);
            spec.terminal_cost.hess_xm(0, 0, z.data(), hxm);
            spec.terminal_cost.hess_mm(0, 0, z.data(), hmm);
            spec.terminal_cost.grad_m(0, 0, z.data(), gm.data());
            Mat PT = hxx;
            for (std::size_t kk = 0; kk < kb; ++kk) {
                Vec col = hxm.col(static_cast<Eigen::Index>(kk));
                PT += col * gbar[kk].transpose() + gbar[kk] * col.transpose();
                PT += gm[kk] * hbar[kk];
                for (std::size_t kk2 = 0; kk2 < kb; ++kk2)
                    PT += hmm(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(kk2)) *
                          gbar[kk] * gbar[kk2].transpose();
            }
            double* dst = adj.P.data() + (M * N + j) * n * n;
            for (std::size_t a = 0; a < n; ++a)
                for (std::size_t b = 0; b < n; ++b)
                    dst[a * n + b] = PT(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
        }
    }

    for (std::size_t m = M; m-- > 0;) {
        Mat S = states_at(ens_u, m);
        FeatureRegression reg(S, basis);
        const double* mom = ens_u.moment(m);
        const double t = ens_u.grid.time(m);
        auto gbar = basis_gradbar(m);

        // Q estimate: E[P_{m+1} dB_r | X_m] / dt, entrywise.
        Mat Yq(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n * n * d));
        for (std::size_t j = 0; j < N; ++j) {
            const double* Pn = adj.P.data() + ((m + 1) * N + j) * n * n;
            for (std::size_t r = 0; r < d; ++r) {
                double db = ens_u.noise.increment(m, j, r, dt);
                for (std::size_t e = 0; e < n * n; ++e)
                    Yq(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(r * n * n + e)) =
                        Pn[e] * db / dt;
            }
        }
        Mat qfit = reg.fit(Yq);
        for (std::size_t j = 0; j < N; ++j)
            for (std::size_t r = 0; r < d; ++r)
                for (std::size_t e = 0; e < n * n; ++e)
                    adj.Q[((m * N + j) * d + r) * n * n + e] =
                        qfit(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(r * n * n + e));

        // Cloud aggregates for the mean-field and Hamiltonian blocks. The
        // copy's (p, q) weights ride along with the copy-state evaluations.
        std::vector<Vec> wbm(kb, Vec::Zero(static_cast<Eigen::Index>(n)));  // E~[b_mu] weights
        std::vector<std::vector<Vec>> wsm(d, std::vector<Vec>(kb, Vec::Zero(static_cast<Eigen::Index>(n))));
        std::vector<Vec> Wxm(kb, Vec::Zero(static_cast<Eigen::Index>(n)));  // E~[H_xmu] weights
        Mat umm = Mat::Zero(static_cast<Eigen::Index>(kb), static_cast<Eigen::Index>(kb));
        std::vector<double> wH(kb, 0.0);
        {
            std::vector<double> z(lay.count());
            std::vector<double> gm(kb);
            Mat hxm, hmm;
            for (std::size_t l = 0; l < N; ++l) {
                const double* ul = u.value(m, u.particles() == 1 ? 0 : l);
                spec.pack(t, ens_u.state(m, l), mom, ul, z.data());
                const double* pl = first.p.data() + ((m + 1) * N + l) * n;
                const double* ql = first.q.data() + (m * N + l) * n * d;
                for (std::size_t i = 0; i < n; ++i) {
                    spec.drift.grad_m(i, 0, z.data(), gm.data());
                    for (std::size_t kk = 0; kk < kb; ++kk) {
                        wbm[kk][static_cast<Eigen::Index>(i)] += gm[kk];
                        wH[kk] += pl[i] * gm[kk];
                    }
                    spec.drift.hess_xm(i, 0, z.data(), hxm);
                    for (std::size_t kk = 0; kk < kb; ++kk)
                        Wxm[kk] += pl[i] * hxm.col(static_cast<Eigen::Index>(kk));
                    spec.drift.hess_mm(i, 0, z.data(), hmm);
                    umm += pl[i] * hmm;
                    for (std::size_t r = 0; r < d; ++r) {
                        spec.diffusion.grad_m(i, r, z.data(), gm.data());
                        for (std::size_t kk = 0; kk < kb; ++kk) {
                            wsm[r][kk][static_cast<Eigen::Index>(i)] += gm[kk];
                            wH[kk] += ql[i * d + r] * gm[kk];
                        }
                        spec.diffusion.hess_xm(i, r, z.data(), hxm);
                        for (std::size_t kk = 0; kk < kb; ++kk)
                            Wxm[kk] += ql[i * d + r] * hxm.col(static_cast<Eigen::Index>(kk));
                        spec.diffusion.hess_mm(i, r, z.data(), hmm);
                        umm += ql[i * d + r] * hmm;
                    }
                }
                spec.running_cost.grad_m(0, 0, z.data(), gm.data());
                for (std::size_t kk = 0; kk < kb; ++kk) wH[kk] += gm[kk];
                spec.running_cost.hess_xm(0, 0, z.data(), hxm);
                for (std::size_t kk = 0; kk < kb; ++kk) Wxm[kk] += hxm.col(static_cast<Eigen::Index>(kk));
                spec.running_cost.hess_mm(0, 0, z.data(), hmm);
                umm += hmm;
            }
            double inv = 1.0 / static_cast<double>(N);
            for (std::size_t kk = 0; kk < kb; ++kk) {
                wbm[kk] *= inv;
                Wxm[kk] *= inv;
                wH[kk] *= inv;
                for (std::size_t r = 0; r < d; ++r) wsm[r][kk] *= inv;
            }
            umm *= inv;
        }

        Mat Yp(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n * n));
        std::vector<double> asym(N, 0.0);
        parallel_for(N, [&](std::size_t begin, std::size_t end) {
            std::vector<double> z(lay.count());
            std::vector<double> gx(n), gh(n);
            std::vector<Vec> ghj(kb);
            Mat Jb(n, n), Mb(n, n), C(n, n), Js(n, n), Ms(n, n), D(n, n), hxx, hbasis;
            for (std::size_t j = begin; j < end; ++j) {
                const double* uj = u.value(m, u.particles() == 1 ? 0 : j);
                const double* xj = ens_u.state(m, j);
                spec.pack(t, xj, mom, uj, z.data());
                Eigen::Map<const Mat> Pn(adj.P.data() + ((m + 1) * N + j) * n * n,
                                         static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
                const double* pj = first.p.data() + ((m + 1) * N + j) * n;
                const double* qj = first.q.data() + (m * N + j) * n * d;
                for (std::size_t kk = 0; kk < kb; ++kk) {
                    spec.basis->gradient(kk, xj, gh.data());
                    ghj[kk] = Eigen::Map<const Vec>(gh.data(), static_cast<Eigen::Index>(n));
                }

                for (std::size_t i = 0; i < n; ++i) {
                    spec.drift.grad_x(i, 0, z.data(), gx.data());
                    for (std::size_t a = 0; a < n; ++a)
                        Jb(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = gx[a];
                }
                Mb.setZero();
                for (std::size_t kk = 0; kk < kb; ++kk) Mb += wbm[kk] * ghj[kk].transpose();
                D = (Jb + Mb).transpose() * Pn + Pn * (Jb + Mb);

                for (std::size_t r = 0; r < d; ++r) {
                    for (std::size_t i = 0; i < n; ++i) {
                        spec.diffusion.grad_x(i, r, z.data(), gx.data());
                        for (std::size_t a = 0; a < n; ++a)
                            Js(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = gx[a];
                    }
                    Ms.setZero();
                    for (std::size_t kk = 0; kk < kb; ++kk) Ms += wsm[r][kk] * ghj[kk].transpose();
                    C = Js + Ms;
                    Eigen::Map<const Mat> Qr(adj.Q.data() + ((m * N + j) * d + r) * n * n,
                                             static_cast<Eigen::Index>(n),
                                             static_cast<Eigen::Index>(n));
                    D += C.transpose() * Pn * C;
                    if (opts.verbatim_q_term) {
                        // As printed: sigma_x* Q + P sigma_x + E~[sigma_mu*] Q + Q E~[sigma_mu].
                        D += Js.transpose() * Qr + Pn * Js + Ms.transpose() * Qr + Qr * Ms;
                    } else {
                        D += C.transpose() * Qr + Qr * C;
                    }
                }

                // Hamiltonian second-derivative blocks.
                for (std::size_t i = 0; i < n; ++i) {
                    spec.drift.hess_xx(i, 0, z.data(), hxx);
                    D += pj[i] * hxx;
                    for (std::size_t r = 0; r < d; ++r) {
                        spec.diffusion.hess_xx(i, r, z.data(), hxx);
                        D += qj[i * d + r] * hxx;
                    }
                }
                spec.running_cost.hess_xx(0, 0, z.data(), hxx);
                D += hxx;
                for (std::size_t kk = 0; kk < kb; ++kk) {
                    D += Wxm[kk] * ghj[kk].transpose() + ghj[kk] * Wxm[kk].transpose();
                    spec.basis->hessian(kk, xj, hbasis);
                    D += wH[kk] * hbasis;
                    for (std::size_t kk2 = 0; kk2 < kb; ++kk2)
                        D += umm(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(kk2)) *
                             gbar[kk] * ghj[kk2].transpose();
                }

                for (std::size_t a = 0; a < n; ++a)
                    for (std::size_t b = 0; b < n; ++b)
                        Yp(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(a * n + b)) =
                            Pn(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) +
                            dt * D(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
            }
        });
        Mat pfit = reg.fit(Yp);
        Mat resid = Yp - pfit;
        adj.step_residual_rms[m] = std::sqrt(resid.squaredNorm() / static_cast<double>(resid.size()));
        if (!pfit.allFinite())
            throw RegressionError("solve_second_order: non-finite backward values at step " +
                                  std::to_string(m));
        for (std::size_t j = 0; j < N; ++j) {
            double worst = 0.0;
            double* dst = adj.P.data() + (m * N + j) * n * n;
            for (std::size_t a = 0; a < n; ++a)
                for (std::size_t b = 0; b < n; ++b) {
                    double ab = pfit(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(a * n + b));
                    double ba = pfit(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(b * n + a));
                    dst[a * n + b] = 0.5 * (ab + ba);
                    worst = std::max(worst, std::abs(ab - ba));
                }
            asym[j] = worst;
        }
        for (std::size_t j = 0; j < N; ++j)
            adj.max_presym_asymmetry = std::max(adj.max_presym_asymmetry, asym[j]);
    }
    return adj;
}

AdjointSolution solve_adjoints(const ProblemSpec& spec, const ParticlePathEnsemble& ens_u,
                               const ControlProcess& u, const RegressionBasis& basis,
                               const SecondOrderOptions& opts) {
    AdjointSolution sol;
    sol.first = solve_first_order(spec, ens_u, u, basis);
    sol.second = solve_second_order(spec, ens_u, u, sol.first, basis, opts);
    return sol;
}

std::vector<Mat> second_order_ode_oracle(const ProblemSpec& spec, const Vec& x_frozen,
                                         const Vec& u_frozen, const std::vector<double>& times,
                                         std::size_t fine_steps, double p_const, double q_const) {
    spec.check();
    const std::size_t n = spec.n, d = spec.d, kb = spec.basis->size();
    const VarLayout lay = spec.layout();
    const double T = spec.horizon;

    // One-atom law at the frozen state.
    Vec mom(static_cast<Eigen::Index>(kb));
    for (std::size_t kk = 0; kk < kb; ++kk)
        mom[static_cast<Eigen::Index>(kk)] = spec.basis->value(kk, x_frozen.data());
    std::vector<double> gh(n);
    std::vector<Vec> gradh(kb);
    std::vector<Mat> hessh(kb);
    for (std::size_t kk = 0; kk < kb; ++kk) {
        spec.basis->gradient(kk, x_frozen.data(), gh.data());
        gradh[kk] = Eigen::Map<const Vec>(gh.data(), static_cast<Eigen::Index>(n));
        spec.basis->hessian(kk, x_frozen.data(), hessh[kk]);
    }

    auto pack_at = [&](double t, std::vector<double>& z) {
        spec.pack(t, x_frozen.data(), mom.data(), u_frozen.data(), z.data());
    };

    // Terminal value per the terminal-cost second-derivative assembly.
    Mat P(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    {
        std::vector<double> z(lay.count());
        pack_at(T, z);
        Mat hxx, hxm, hmm;
        std::vector<double> gm(kb);
        spec.terminal_cost.hess_xx(0, 0, z.data(), hxx);
        spec.terminal_cost.hess_xm(0, 0, z.data(), hxm);
        spec.terminal_cost.hess_mm(0, 0, z.data(), hmm);
        spec.terminal_cost.grad_m(0, 0, z.data(), gm.data());
        P = hxx;
        for (std::size_t kk = 0; kk < kb; ++kk) {
            Vec col = hxm.col(static_cast<Eigen::Index>(kk));
            P += col * gradh[kk].transpose() + gradh[kk] * col.transpose();
            P += gm[kk] * hessh[kk];
            for (std::size_t kk2 = 0; kk2 < kb; ++kk2)
                P += hmm(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(kk2)) *
                     gradh[kk] * gradh[kk2].transpose();
        }
    }

    auto driver = [&](double t, const Mat& Pm) {
        std::vector<double> z(lay.count());
        pack_at(t, z);
        std::vector<double> gx(n), gm(kb);
        Mat Jb(n, n), Mb(n, n), C(n, n), D(n, n), hxx, hxm, hmm;
        for (std::size_t i = 0; i < n; ++i) {
            spec.drift.grad_x(i, 0, z.data(), gx.data());
            for (std::size_t a = 0; a < n; ++a)
                Jb(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = gx[a];
        }
        Mb.setZero();
        for (std::size_t i = 0; i < n; ++i) {
            spec.drift.grad_m(i, 0, z.data(), gm.data());
            for (std::size_t kk = 0; kk < kb; ++kk) Mb.row(static_cast<Eigen::Index>(i)) += gm[kk] * gradh[kk].transpose();
        }
        D = (Jb + Mb).transpose() * Pm + Pm * (Jb + Mb);
        for (std::size_t r = 0; r < d; ++r) {
            C.setZero();
            for (std::size_t i = 0; i < n; ++i) {
                spec.diffusion.grad_x(i, r, z.data(), gx.data());
                spec.diffusion.grad_m(i, r, z.data(), gm.data());
                for (std::size_t a = 0; a < n; ++a)
                    C(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = gx[a];
                for (std::size_t kk = 0; kk < kb; ++kk)
                    C.row(static_cast<Eigen::Index>(i)) += gm[kk] * gradh[kk].transpose();
            }
            D += C.transpose() * Pm * C;  // Q = 0 along the deterministic path
        }
        // Hamiltonian blocks with constant scalar (p, q) weights.
        auto add_H = [&](const MomentCoupledFunction& f, std::size_t r, std::size_t c, double wgt) {
            if (wgt == 0.0) return;
            f.hess_xx(r, c, z.data(), hxx);
            f.hess_xm(r, c, z.data(), hxm);
            f.hess_mm(r, c, z.data(), hmm);
            f.grad_m(r, c, z.data(), gm.data());
            D += wgt * hxx;
            for (std::size_t kk = 0; kk < kb; ++kk) {
                Vec col = hxm.col(static_cast<Eigen::Index>(kk));
                D += wgt * (col * gradh[kk].transpose() + gradh[kk] * col.transpose());
                D += wgt * gm[kk] * hessh[kk];
                for (std::size_t kk2 = 0; kk2 < kb; ++kk2)
                    D += wgt * hmm(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(kk2)) *
                         gradh[kk] * gradh[kk2].transpose();
            }
        };
        for (std::size_t i = 0; i < n; ++i) add_H(spec.drift, i, 0, p_const);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t r = 0; r < d; ++r) add_H(spec.diffusion, i, r, q_const);
        add_H(spec.running_cost, 0, 0, 1.0);
        return D;
    };

    // Integrate dP/ds = driver(T - s, P) forward in s from s = 0 (t = T).
    const double h = T / static_cast<double>(fine_steps);
    std::vector<Mat> curve(fine_steps + 1);
    curve[0] = P;
    Mat k1, k2, k3, k4;
    for (std::size_t s = 0; s < fine_steps; ++s) {
        double sv = h * static_cast<double>(s);
        k1 = driver(T - sv, P);
        k2 = driver(T - sv - 0.5 * h, P + 0.5 * h * k1);
        k3 = driver(T - sv - 0.5 * h, P + 0.5 * h * k2);
        k4 = driver(T - sv - h, P + h * k3);
        P += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        curve[s + 1] = P;
    }
    // curve[s] holds P at t = T - s*h; interpolate at the requested times.
    std::vector<Mat> out;
    out.reserve(times.size());
    for (double t : times) {
        double s = (T - t) / h;
        std::size_t lo = static_cast<std::size_t>(std::max(0.0, std::floor(s)));
        lo = std::min(lo, fine_steps);
        std::size_t hi = std::min(lo + 1, fine_steps);
        double frac = std::min(1.0, std::max(0.0, s - static_cast<double>(lo)));
        out.push_back((1.0 - frac) * curve[lo] + frac * curve[hi]);
    }
    return out;
}

}  // namespace mfsmp
