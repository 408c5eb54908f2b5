#pragma once

#include "mfsmp/common.hpp"

#include <vector>

namespace mfsmp {

/// Polynomial feature basis for conditional-expectation regression: all state
/// monomials of total degree <= degree, plus the constant.
struct RegressionBasis {
    std::size_t degree = 2;
    double ridge = 0.0;
};

std::size_t feature_count(std::size_t state_dim, std::size_t degree);

/// Feature matrix (one row per state sample).
Mat feature_matrix(const Mat& states, const RegressionBasis& basis);

struct RegressionFit {
    Mat coefficients;  // F x r
    Mat fitted;        // N x r
    double residual_rms = 0.0;
    Vec residual_mean;  // per target column
};

/// Ridge least squares of targets on features(states). With ridge == 0 a
/// rank-deficient design is an error instructing a positive ridge.
RegressionFit regress_conditional(const Mat& targets, const Mat& states,
                                  const RegressionBasis& basis);

/// Per-step regression with the design factored once and reused across target
/// blocks (the backward solvers fit q, then p, on the same states).
class FeatureRegression {
public:
    FeatureRegression(const Mat& states, const RegressionBasis& basis);
    Mat fit(const Mat& targets) const;           // fitted values at the states
    Mat coefficients(const Mat& targets) const;  // F x r
    std::size_t features() const { return static_cast<std::size_t>(A_.cols()); }

private:
    Mat A_;
    double ridge_ = 0.0;
    Eigen::LDLT<Mat> ldlt_;                       // ridge > 0
    Eigen::ColPivHouseholderQR<Mat> qr_;          // ridge == 0
    bool use_qr_ = false;
};

}  // namespace mfsmp
