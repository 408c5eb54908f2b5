#pragma once

#include "mfsmp/common.hpp"
#include "mfsmp/poly.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace mfsmp {

/// Weighted particle cloud standing in for a law on R^n. Weights sum to one;
/// copy-variable expectations elsewhere in the library are plain averages over
/// an independent index into the same cloud.
class EmpiricalMeasure {
public:
    EmpiricalMeasure() = default;
    EmpiricalMeasure(Mat samples, Vec weights);

    std::size_t size() const { return static_cast<std::size_t>(samples_.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(samples_.cols()); }
    const Mat& samples() const { return samples_; }
    const Vec& weights() const { return weights_; }
    Vec sample(std::size_t i) const { return samples_.row(static_cast<Eigen::Index>(i)); }
    bool uniform_weights(double tol = 1e-12) const;

private:
    Mat samples_;  // one row per atom
    Vec weights_;
};

/// samples as rows; omitted weights default to uniform. Weights are normalized.
EmpiricalMeasure empirical_from_samples(const Mat& samples, const Vec* weights = nullptr);
EmpiricalMeasure empirical_from_samples(const std::vector<double>& samples_1d,
                                        const std::vector<double>* weights = nullptr);

/// Moment functions h_1..h_k, each a polynomial in the state of degree <= 2.
class MomentBasis {
public:
    MomentBasis() = default;
    MomentBasis(std::size_t state_dim, std::vector<Poly> functions);

    std::size_t size() const { return h_.size(); }
    std::size_t state_dim() const { return state_dim_; }
    const Poly& function(std::size_t i) const { return h_[i]; }

    double value(std::size_t i, const double* x) const { return h_[i].eval(x); }
    /// grad must have state_dim entries.
    void gradient(std::size_t i, const double* x, double* grad) const;
    void hessian(std::size_t i, const double* x, Mat& hess) const;

private:
    std::size_t state_dim_ = 0;
    std::vector<Poly> h_;
    std::vector<std::vector<Poly>> grad_;           // [i][a]
    std::vector<std::vector<std::vector<Poly>>> hess_;  // [i][a][b]
};

/// Component i of the result is sum_j w_j h_i(sample_j).
Vec moment_vector(const EmpiricalMeasure& mu, const MomentBasis& basis);

/// Exact 2-Wasserstein distance. dim==1 uses the quantile coupling with
/// arbitrary weights (ties broken by sample index); dim>1 requires equal-count
/// uniform clouds with at most 64 atoms and solves the optimal assignment.
double wasserstein2(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu);

/// Lions derivatives of f(mu) = phi(m(mu)) for a polynomial phi over the
/// moment coordinates of `basis` (the closed-form moment-coupled family).
struct LionsDerivativeBundle {
    std::function<Vec(const EmpiricalMeasure&, const Vec&)> d_mu;             // (mu, y)
    std::function<Mat(const EmpiricalMeasure&, const Vec&, const Vec&)> d2_mu;  // (mu, x, y)
    std::function<Mat(const EmpiricalMeasure&, const Vec&)> dy_dmu;           // (mu, y)
};

LionsDerivativeBundle lions_bundle(const Poly& phi_in_m, std::shared_ptr<const MomentBasis> basis);

}  // namespace mfsmp
