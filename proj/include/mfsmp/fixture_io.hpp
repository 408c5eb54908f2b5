#pragma once

#include "mfsmp/common.hpp"
#include "mfsmp/problem.hpp"

#include <map>
#include <string>
#include <vector>

namespace mfsmp {

/// Minimal TOML-style configuration tree: [section] tables, key = value pairs,
/// numbers, booleans, strings, arrays, and inline tables. This is the subset
/// the fixture schema uses; the parser is whitespace-insensitive and values
/// may span lines.
struct ConfigValue {
    enum class Kind { Number, Bool, String, Array, Table };
    Kind kind = Kind::Table;
    double number = 0.0;
    bool boolean = false;
    std::string str;
    std::vector<ConfigValue> array;
    std::map<std::string, ConfigValue> table;

    bool has(const std::string& key) const { return table.count(key) > 0; }
    const ConfigValue& at(const std::string& key) const;
    double as_number() const;
    std::size_t as_index() const;
    bool as_bool() const;
    const std::string& as_string() const;
    const std::vector<ConfigValue>& as_array() const;
};

ConfigValue parse_config(const std::string& text);
ConfigValue parse_config_file(const std::string& path);

/// One control problem plus the candidate control it is checked at.
struct Fixture {
    ProblemSpec spec;
    Vec candidate;    // constant candidate control u
    Vec alternative;  // constant spike alternative v
};

Fixture fixture_from_config(const ConfigValue& root);
Fixture load_fixture(const std::string& path);

/// Canonical serialization of a fixture back to the configuration format.
std::string fixture_to_config_text(const Fixture& fixture);

std::uint64_t fixture_hash(const Fixture& fixture);

/// "x0^2 m1 v" style monomial variable strings -> packed variable indices.
std::vector<std::pair<std::size_t, std::size_t>> parse_monomial_vars(const std::string& vars,
                                                                     const VarLayout& layout);

/// Builder used by in-code fixtures and the config reader alike.
struct MonomialSpec {
    double coeff;
    std::string vars;
};

Poly poly_from_monomials(const VarLayout& layout, const std::vector<MonomialSpec>& monomials);
/// Basis functions are polynomials in the state only ("x"-variables).
Poly basis_poly_from_monomials(std::size_t state_dim, const std::vector<MonomialSpec>& monomials);

}  // namespace mfsmp
