#include "mfsmp/measure.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mfsmp {

EmpiricalMeasure::EmpiricalMeasure(Mat samples, Vec weights)
    : samples_(std::move(samples)), weights_(std::move(weights)) {
    if (samples_.rows() == 0) throw std::invalid_argument("EmpiricalMeasure: empty sample list");
    if (weights_.size() != samples_.rows())
        throw std::invalid_argument("EmpiricalMeasure: weight/sample count mismatch");
    if (!samples_.allFinite()) throw std::invalid_argument("EmpiricalMeasure: non-finite sample");
    double total = 0.0;
    for (Eigen::Index i = 0; i < weights_.size(); ++i) {
        if (!(weights_[i] >= 0.0))
            throw std::invalid_argument("EmpiricalMeasure: negative or non-finite weight");
        total += weights_[i];
    }
    if (total <= 0.0) throw std::invalid_argument("EmpiricalMeasure: all weights zero");
    weights_ /= total;
}

bool EmpiricalMeasure::uniform_weights(double tol) const {
    double w0 = 1.0 / static_cast<double>(size());
    for (Eigen::Index i = 0; i < weights_.size(); ++i) {
        if (std::abs(weights_[i] - w0) > tol) return false;
    }
    return true;
}

EmpiricalMeasure empirical_from_samples(const Mat& samples, const Vec* weights) {
    if (samples.rows() == 0) throw std::invalid_argument("empirical_from_samples: empty sample list");
    Vec w;
    if (weights) {
        w = *weights;
    } else {
        w = Vec::Constant(samples.rows(), 1.0 / static_cast<double>(samples.rows()));
    }
    return EmpiricalMeasure(samples, w);
}

EmpiricalMeasure empirical_from_samples(const std::vector<double>& samples_1d,
                                        const std::vector<double>* weights) {
    Mat s(static_cast<Eigen::Index>(samples_1d.size()), 1);
    for (std::size_t i = 0; i < samples_1d.size(); ++i) s(static_cast<Eigen::Index>(i), 0) = samples_1d[i];
    if (!weights) return empirical_from_samples(s, nullptr);
    Vec w(static_cast<Eigen::Index>(weights->size()));
    for (std::size_t i = 0; i < weights->size(); ++i) w[static_cast<Eigen::Index>(i)] = (*weights)[i];
    return empirical_from_samples(s, &w);
}

MomentBasis::MomentBasis(std::size_t state_dim, std::vector<Poly> functions)
    : state_dim_(state_dim), h_(std::move(functions)) {
    for (const auto& h : h_) {
        if (h.nvars() != state_dim_)
            throw std::invalid_argument("MomentBasis: function variable count != state dim");
        if (h.total_degree() > 2)
            throw std::invalid_argument("MomentBasis: moment function degree exceeds 2");
    }
    grad_.resize(h_.size());
    hess_.resize(h_.size());
    for (std::size_t i = 0; i < h_.size(); ++i) {
        grad_[i].reserve(state_dim_);
        for (std::size_t a = 0; a < state_dim_; ++a) grad_[i].push_back(h_[i].derivative(a));
        hess_[i].resize(state_dim_);
        for (std::size_t a = 0; a < state_dim_; ++a) {
            hess_[i][a].reserve(state_dim_);
            for (std::size_t b = 0; b < state_dim_; ++b)
                hess_[i][a].push_back(grad_[i][a].derivative(b));
        }
    }
}

void MomentBasis::gradient(std::size_t i, const double* x, double* grad) const {
    for (std::size_t a = 0; a < state_dim_; ++a) grad[a] = grad_[i][a].eval(x);
}

void MomentBasis::hessian(std::size_t i, const double* x, Mat& hess) const {
    hess.resize(static_cast<Eigen::Index>(state_dim_), static_cast<Eigen::Index>(state_dim_));
    for (std::size_t a = 0; a < state_dim_; ++a)
        for (std::size_t b = 0; b < state_dim_; ++b)
            hess(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = hess_[i][a][b].eval(x);
}

Vec moment_vector(const EmpiricalMeasure& mu, const MomentBasis& basis) {
    if (mu.dim() != basis.state_dim())
        throw std::invalid_argument("moment_vector: dimension mismatch");
    Vec m = Vec::Zero(static_cast<Eigen::Index>(basis.size()));
    for (std::size_t j = 0; j < mu.size(); ++j) {
        Vec x = mu.sample(j);
        double w = mu.weights()[static_cast<Eigen::Index>(j)];
        for (std::size_t i = 0; i < basis.size(); ++i)
            m[static_cast<Eigen::Index>(i)] += w * basis.value(i, x.data());
    }
    return m;
}

namespace {

double wasserstein2_1d(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
    auto sorted_atoms = [](const EmpiricalMeasure& m) {
        std::vector<std::size_t> idx(m.size());
        std::iota(idx.begin(), idx.end(), 0u);
        // Stable sort on value; equal values keep sample order.
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return m.samples()(static_cast<Eigen::Index>(a), 0) <
                   m.samples()(static_cast<Eigen::Index>(b), 0);
        });
        return idx;
    };
    auto ia = sorted_atoms(mu);
    auto ib = sorted_atoms(nu);

    // Walk the quantile axis, pairing mass between the two sorted atom lists.
    double w2sq = 0.0;
    std::size_t a = 0, b = 0;
    double ra = mu.weights()[static_cast<Eigen::Index>(ia[0])];
    double rb = nu.weights()[static_cast<Eigen::Index>(ib[0])];
    while (a < ia.size() && b < ib.size()) {
        double mass = std::min(ra, rb);
        double xa = mu.samples()(static_cast<Eigen::Index>(ia[a]), 0);
        double xb = nu.samples()(static_cast<Eigen::Index>(ib[b]), 0);
        double d = xa - xb;
        w2sq += mass * d * d;
        ra -= mass;
        rb -= mass;
        if (ra <= 1e-15) {
            ++a;
            if (a < ia.size()) ra = mu.weights()[static_cast<Eigen::Index>(ia[a])];
        }
        if (rb <= 1e-15) {
            ++b;
            if (b < ib.size()) rb = nu.weights()[static_cast<Eigen::Index>(ib[b])];
        }
    }
    return std::sqrt(std::max(0.0, w2sq));
}

/// Jonker-Volgenant style shortest augmenting path assignment, O(n^3).
/// cost is n x n; returns the minimum total cost.
double solve_assignment(const Mat& cost) {
    const int n = static_cast<int>(cost.rows());
    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1, INF);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            int i0 = p[static_cast<std::size_t>(j0)], j1 = 0;
            double delta = INF;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    double total = 0.0;
    for (int j = 1; j <= n; ++j) total += cost(p[static_cast<std::size_t>(j)] - 1, j - 1);
    return total;
}

}  // namespace

double wasserstein2(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
    if (mu.dim() != nu.dim()) throw std::invalid_argument("wasserstein2: dimension mismatch");
    if (mu.dim() == 1) return wasserstein2_1d(mu, nu);
    if (mu.size() != nu.size())
        throw std::invalid_argument("wasserstein2: dim>1 requires equal atom counts");
    if (!mu.uniform_weights() || !nu.uniform_weights())
        throw std::invalid_argument("wasserstein2: dim>1 requires uniform weights");
    if (mu.size() > 64)
        throw std::invalid_argument("wasserstein2: dim>1 assignment limited to 64 atoms");
    const int n = static_cast<int>(mu.size());
    Mat cost(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            cost(i, j) = (mu.samples().row(i) - nu.samples().row(j)).squaredNorm();
    double total = solve_assignment(cost);
    return std::sqrt(std::max(0.0, total / static_cast<double>(n)));
}

LionsDerivativeBundle lions_bundle(const Poly& phi_in_m, std::shared_ptr<const MomentBasis> basis) {
    const std::size_t k = basis->size();
    if (phi_in_m.nvars() != k)
        throw std::invalid_argument("lions_bundle: phi variable count != moment count");
    auto d1 = std::make_shared<std::vector<Poly>>();
    auto d2 = std::make_shared<std::vector<std::vector<Poly>>>();
    for (std::size_t i = 0; i < k; ++i) d1->push_back(phi_in_m.derivative(i));
    d2->resize(k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) (*d2)[i].push_back((*d1)[i].derivative(j));

    LionsDerivativeBundle b;
    b.d_mu = [basis, d1](const EmpiricalMeasure& mu, const Vec& y) {
        Vec m = moment_vector(mu, *basis);
        Vec out = Vec::Zero(static_cast<Eigen::Index>(basis->state_dim()));
        std::vector<double> g(basis->state_dim());
        for (std::size_t i = 0; i < basis->size(); ++i) {
            double c = (*d1)[i].eval(m.data());
            if (c == 0.0) continue;
            basis->gradient(i, y.data(), g.data());
            for (std::size_t a = 0; a < basis->state_dim(); ++a)
                out[static_cast<Eigen::Index>(a)] += c * g[a];
        }
        return out;
    };
    b.d2_mu = [basis, d2](const EmpiricalMeasure& mu, const Vec& x, const Vec& y) {
        Vec m = moment_vector(mu, *basis);
        const std::size_t n = basis->state_dim();
        Mat out = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        std::vector<double> gx(n), gy(n);
        for (std::size_t i = 0; i < basis->size(); ++i) {
            basis->gradient(i, x.data(), gx.data());
            for (std::size_t j = 0; j < basis->size(); ++j) {
                double c = (*d2)[i][j].eval(m.data());
                if (c == 0.0) continue;
                basis->gradient(j, y.data(), gy.data());
                for (std::size_t a = 0; a < n; ++a)
                    for (std::size_t bcol = 0; bcol < n; ++bcol)
                        out(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(bcol)) +=
                            c * gx[a] * gy[bcol];
            }
        }
        return out;
    };
    b.dy_dmu = [basis, d1](const EmpiricalMeasure& mu, const Vec& y) {
        Vec m = moment_vector(mu, *basis);
        const std::size_t n = basis->state_dim();
        Mat out = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        Mat hess;
        for (std::size_t i = 0; i < basis->size(); ++i) {
            double c = (*d1)[i].eval(m.data());
            if (c == 0.0) continue;
            basis->hessian(i, y.data(), hess);
            out += c * hess;
        }
        return out;
    };
    return b;
}

}  // namespace mfsmp
