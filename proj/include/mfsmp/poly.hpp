#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace mfsmp {

/// Sparse multivariate polynomial over a fixed variable slate. Coefficient
/// bodies and basis functions are all instances of this; derivatives stay in
/// the same class, so every partial used anywhere in the library is exact.
class Poly {
public:
    struct Term {
        double coeff = 0.0;
        // (variable index, power) pairs, sorted by index, powers >= 1.
        std::vector<std::pair<std::uint16_t, std::uint16_t>> factors;
    };

    Poly() = default;
    explicit Poly(std::size_t nvars) : nvars_(nvars) {}

    static Poly constant(std::size_t nvars, double c);
    /// coeff * prod_i var_{idx[i]}^{pow[i]}
    static Poly monomial(std::size_t nvars, double coeff,
                         const std::vector<std::pair<std::size_t, std::size_t>>& powers);

    std::size_t nvars() const { return nvars_; }
    const std::vector<Term>& terms() const { return terms_; }
    bool is_zero() const { return terms_.empty(); }
    int total_degree() const;
    int degree_in(std::size_t var) const;
    bool depends_on(std::size_t var) const;

    double eval(const double* vars) const;

    Poly derivative(std::size_t var) const;

    Poly& operator+=(const Poly& other);
    Poly operator+(const Poly& other) const;
    Poly operator*(const Poly& other) const;
    Poly scaled(double s) const;

    void add_term(double coeff, std::vector<std::pair<std::uint16_t, std::uint16_t>> factors);

    std::string to_string(const std::vector<std::string>& var_names) const;

private:
    void compress();

    std::size_t nvars_ = 0;
    std::vector<Term> terms_;
};

}  // namespace mfsmp
