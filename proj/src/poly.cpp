#include "mfsmp/poly.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mfsmp {

Poly Poly::constant(std::size_t nvars, double c) {
    Poly p(nvars);
    if (c != 0.0) p.terms_.push_back(Term{c, {}});
    return p;
}

Poly Poly::monomial(std::size_t nvars, double coeff,
                    const std::vector<std::pair<std::size_t, std::size_t>>& powers) {
    Poly p(nvars);
    Term t;
    t.coeff = coeff;
    for (auto [idx, pw] : powers) {
        if (idx >= nvars) throw std::invalid_argument("Poly::monomial: variable index out of range");
        if (pw == 0) continue;
        t.factors.emplace_back(static_cast<std::uint16_t>(idx), static_cast<std::uint16_t>(pw));
    }
    std::sort(t.factors.begin(), t.factors.end());
    if (coeff != 0.0) p.terms_.push_back(std::move(t));
    p.compress();
    return p;
}

int Poly::total_degree() const {
    int deg = 0;
    for (const auto& t : terms_) {
        int d = 0;
        for (auto [idx, pw] : t.factors) d += pw;
        deg = std::max(deg, d);
    }
    return deg;
}

int Poly::degree_in(std::size_t var) const {
    int deg = 0;
    for (const auto& t : terms_) {
        for (auto [idx, pw] : t.factors) {
            if (idx == var) deg = std::max(deg, static_cast<int>(pw));
        }
    }
    return deg;
}

bool Poly::depends_on(std::size_t var) const { return degree_in(var) > 0; }

double Poly::eval(const double* vars) const {
    double acc = 0.0;
    for (const auto& t : terms_) {
        double m = t.coeff;
        for (auto [idx, pw] : t.factors) {
            double v = vars[idx];
            switch (pw) {
                case 1: m *= v; break;
                case 2: m *= v * v; break;
                case 3: m *= v * v * v; break;
                default: m *= std::pow(v, static_cast<double>(pw)); break;
            }
        }
        acc += m;
    }
    return acc;
}

Poly Poly::derivative(std::size_t var) const {
    Poly out(nvars_);
    for (const auto& t : terms_) {
        for (std::size_t f = 0; f < t.factors.size(); ++f) {
            if (t.factors[f].first != var) continue;
            Term d;
            d.coeff = t.coeff * static_cast<double>(t.factors[f].second);
            d.factors = t.factors;
            if (d.factors[f].second == 1) {
                d.factors.erase(d.factors.begin() + static_cast<std::ptrdiff_t>(f));
            } else {
                d.factors[f].second -= 1;
            }
            out.terms_.push_back(std::move(d));
        }
    }
    out.compress();
    return out;
}

Poly& Poly::operator+=(const Poly& other) {
    if (nvars_ == 0) nvars_ = other.nvars_;
    for (const auto& t : other.terms_) terms_.push_back(t);
    compress();
    return *this;
}

Poly Poly::operator+(const Poly& other) const {
    Poly out = *this;
    out += other;
    return out;
}

Poly Poly::operator*(const Poly& other) const {
    Poly out(std::max(nvars_, other.nvars_));
    for (const auto& a : terms_) {
        for (const auto& b : other.terms_) {
            Term t;
            t.coeff = a.coeff * b.coeff;
            std::map<std::uint16_t, std::uint16_t> pw;
            for (auto [i, p] : a.factors) pw[i] += p;
            for (auto [i, p] : b.factors) pw[i] += p;
            for (auto [i, p] : pw) t.factors.emplace_back(i, p);
            out.terms_.push_back(std::move(t));
        }
    }
    out.compress();
    return out;
}

Poly Poly::scaled(double s) const {
    Poly out(nvars_);
    for (const auto& t : terms_) {
        Term c = t;
        c.coeff *= s;
        out.terms_.push_back(std::move(c));
    }
    out.compress();
    return out;
}

void Poly::add_term(double coeff, std::vector<std::pair<std::uint16_t, std::uint16_t>> factors) {
    std::sort(factors.begin(), factors.end());
    terms_.push_back(Term{coeff, std::move(factors)});
    compress();
}

void Poly::compress() {
    std::map<std::vector<std::pair<std::uint16_t, std::uint16_t>>, double> merged;
    for (auto& t : terms_) {
        std::sort(t.factors.begin(), t.factors.end());
        merged[t.factors] += t.coeff;
    }
    terms_.clear();
    for (auto& [factors, coeff] : merged) {
        if (coeff != 0.0) terms_.push_back(Term{coeff, factors});
    }
}

std::string Poly::to_string(const std::vector<std::string>& var_names) const {
    if (terms_.empty()) return "0";
    std::ostringstream os;
    bool first = true;
    for (const auto& t : terms_) {
        if (!first) os << " + ";
        first = false;
        os << t.coeff;
        for (auto [idx, pw] : t.factors) {
            os << "*" << (idx < var_names.size() ? var_names[idx] : "z" + std::to_string(idx));
            if (pw > 1) os << "^" << pw;
        }
    }
    return os.str();
}

}  // namespace mfsmp
