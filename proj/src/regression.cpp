#include "mfsmp/regression.hpp"

#include <cmath>
#include <stdexcept>

namespace mfsmp {

namespace {

void enumerate_exponents(std::size_t n, std::size_t budget, std::vector<std::size_t>& cur,
                         std::vector<std::vector<std::size_t>>& out) {
    if (cur.size() == n) {
        out.push_back(cur);
        return;
    }
    for (std::size_t e = 0; e <= budget; ++e) {
        cur.push_back(e);
        enumerate_exponents(n, budget - e, cur, out);
        cur.pop_back();
    }
}

std::vector<std::vector<std::size_t>> exponent_table(std::size_t n, std::size_t degree) {
    std::vector<std::vector<std::size_t>> out;
    std::vector<std::size_t> cur;
    enumerate_exponents(n, degree, cur, out);
    return out;
}

}  // namespace

std::size_t feature_count(std::size_t state_dim, std::size_t degree) {
    return exponent_table(state_dim, degree).size();
}

Mat feature_matrix(const Mat& states, const RegressionBasis& basis) {
    const auto expo = exponent_table(static_cast<std::size_t>(states.cols()), basis.degree);
    Mat A(states.rows(), static_cast<Eigen::Index>(expo.size()));
    for (Eigen::Index j = 0; j < states.rows(); ++j) {
        for (std::size_t f = 0; f < expo.size(); ++f) {
            double v = 1.0;
            for (std::size_t a = 0; a < expo[f].size(); ++a) {
                for (std::size_t e = 0; e < expo[f][a]; ++e) v *= states(j, static_cast<Eigen::Index>(a));
            }
            A(j, static_cast<Eigen::Index>(f)) = v;
        }
    }
    return A;
}

FeatureRegression::FeatureRegression(const Mat& states, const RegressionBasis& basis)
    : A_(feature_matrix(states, basis)), ridge_(basis.ridge) {
    const std::size_t N = static_cast<std::size_t>(A_.rows());
    const std::size_t F = static_cast<std::size_t>(A_.cols());
    if (N < 10 * F)
        throw RegressionError("regression: fewer than 10 samples per feature (N=" +
                              std::to_string(N) + ", features=" + std::to_string(F) + ")");
    if (ridge_ < 0.0) throw RegressionError("regression: negative ridge");
    if (ridge_ == 0.0) {
        use_qr_ = true;
        qr_.compute(A_);
        if (qr_.rank() < A_.cols())
            throw RegressionError(
                "regression: rank-deficient design with ridge 0; supply a positive ridge");
    } else {
        Mat G = A_.transpose() * A_;
        G.diagonal().array() += ridge_;
        ldlt_.compute(G);
        if (ldlt_.info() != Eigen::Success)
            throw RegressionError("regression: normal-equations factorization failed");
    }
}

Mat FeatureRegression::coefficients(const Mat& targets) const {
    if (targets.rows() != A_.rows()) throw RegressionError("regression: target row count mismatch");
    if (use_qr_) return qr_.solve(targets);
    return ldlt_.solve(A_.transpose() * targets);
}

Mat FeatureRegression::fit(const Mat& targets) const { return A_ * coefficients(targets); }

RegressionFit regress_conditional(const Mat& targets, const Mat& states,
                                  const RegressionBasis& basis) {
    FeatureRegression reg(states, basis);
    RegressionFit out;
    out.coefficients = reg.coefficients(targets);
    out.fitted = feature_matrix(states, basis) * out.coefficients;
    Mat resid = targets - out.fitted;
    out.residual_rms = std::sqrt(resid.squaredNorm() / static_cast<double>(resid.size()));
    out.residual_mean = resid.colwise().mean();
    if (!out.fitted.allFinite()) throw RegressionError("regression: non-finite fit");
    return out;
}

}  // namespace mfsmp
