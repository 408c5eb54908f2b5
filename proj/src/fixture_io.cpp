#include "mfsmp/fixture_io.hpp"

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace mfsmp {

const ConfigValue& ConfigValue::at(const std::string& key) const {
    auto it = table.find(key);
    if (it == table.end()) throw FixtureError("missing key: " + key);
    return it->second;
}

double ConfigValue::as_number() const {
    if (kind != Kind::Number) throw FixtureError("expected a number");
    return number;
}

std::size_t ConfigValue::as_index() const {
    double v = as_number();
    if (v < 0 || std::floor(v) != v) throw FixtureError("expected a nonnegative integer");
    return static_cast<std::size_t>(v);
}

bool ConfigValue::as_bool() const {
    if (kind != Kind::Bool) throw FixtureError("expected a boolean");
    return boolean;
}

const std::string& ConfigValue::as_string() const {
    if (kind != Kind::String) throw FixtureError("expected a string");
    return str;
}

const std::vector<ConfigValue>& ConfigValue::as_array() const {
    if (kind != Kind::Array) throw FixtureError("expected an array");
    return array;
}

namespace {

class Cursor {
public:
    explicit Cursor(const std::string& text) : text_(text) {}

    void skip_ws() {
        while (pos_ < text_.size()) {
            char c = text_[pos_];
            if (c == '#') {
                while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    bool done() {
        skip_ws();
        return pos_ >= text_.size();
    }

    char peek() {
        skip_ws();
        return pos_ < text_.size() ? text_[pos_] : '\0';
    }

    char take() {
        skip_ws();
        if (pos_ >= text_.size()) throw FixtureError("unexpected end of fixture text");
        return text_[pos_++];
    }

    void expect(char c) {
        char got = take();
        if (got != c)
            throw FixtureError(std::string("expected '") + c + "' but found '" + got + "'");
    }

    std::string ident() {
        skip_ws();
        std::size_t start = pos_;
        while (pos_ < text_.size()) {
            char c = text_[pos_];
            if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.' ||
                c == '+')
                ++pos_;
            else
                break;
        }
        if (start == pos_) throw FixtureError("expected an identifier or number");
        return text_.substr(start, pos_ - start);
    }

    std::string string_literal() {
        expect('"');
        std::string out;
        while (pos_ < text_.size() && text_[pos_] != '"') out.push_back(text_[pos_++]);
        if (pos_ >= text_.size()) throw FixtureError("unterminated string");
        ++pos_;
        return out;
    }

private:
    const std::string& text_;
    std::size_t pos_ = 0;
};

ConfigValue parse_value(Cursor& cur);

ConfigValue parse_inline_table(Cursor& cur) {
    ConfigValue out;
    out.kind = ConfigValue::Kind::Table;
    cur.expect('{');
    if (cur.peek() == '}') {
        cur.take();
        return out;
    }
    for (;;) {
        std::string key = cur.ident();
        cur.expect('=');
        if (!out.table.emplace(key, parse_value(cur)).second)
            throw FixtureError("duplicate key in inline table: " + key);
        char c = cur.take();
        if (c == '}') break;
        if (c != ',') throw FixtureError("expected ',' or '}' in inline table");
    }
    return out;
}

ConfigValue parse_value(Cursor& cur) {
    char c = cur.peek();
    ConfigValue out;
    if (c == '"') {
        out.kind = ConfigValue::Kind::String;
        out.str = cur.string_literal();
        return out;
    }
    if (c == '[') {
        cur.take();
        out.kind = ConfigValue::Kind::Array;
        if (cur.peek() == ']') {
            cur.take();
            return out;
        }
        for (;;) {
            out.array.push_back(parse_value(cur));
            char t = cur.take();
            if (t == ']') break;
            if (t != ',') throw FixtureError("expected ',' or ']' in array");
            if (cur.peek() == ']') {  // trailing comma
                cur.take();
                break;
            }
        }
        return out;
    }
    if (c == '{') return parse_inline_table(cur);
    std::string word = cur.ident();
    if (word == "true" || word == "false") {
        out.kind = ConfigValue::Kind::Bool;
        out.boolean = (word == "true");
        return out;
    }
    char* end = nullptr;
    double num = std::strtod(word.c_str(), &end);
    if (end == word.c_str() || *end != '\0')
        throw FixtureError("cannot parse value: " + word);
    out.kind = ConfigValue::Kind::Number;
    out.number = num;
    return out;
}

}  // namespace

ConfigValue parse_config(const std::string& text) {
    Cursor cur(text);
    ConfigValue root;
    root.kind = ConfigValue::Kind::Table;
    ConfigValue* current = &root;
    while (!cur.done()) {
        if (cur.peek() == '[') {
            cur.take();
            std::string name = cur.ident();
            cur.expect(']');
            ConfigValue section;
            section.kind = ConfigValue::Kind::Table;
            auto [it, inserted] = root.table.emplace(name, std::move(section));
            if (!inserted) throw FixtureError("duplicate section: " + name);
            current = &it->second;
        } else {
            std::string key = cur.ident();
            cur.expect('=');
            if (current->table.count(key)) throw FixtureError("duplicate key: " + key);
            current->table[key] = parse_value(cur);
        }
    }
    return root;
}

ConfigValue parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FixtureError("cannot open fixture: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::vector<std::pair<std::size_t, std::size_t>> parse_monomial_vars(const std::string& vars,
                                                                     const VarLayout& layout) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::istringstream ss(vars);
    std::string token;
    while (ss >> token) {
        std::size_t power = 1;
        auto caret = token.find('^');
        std::string name = token;
        if (caret != std::string::npos) {
            name = token.substr(0, caret);
            power = static_cast<std::size_t>(std::stoul(token.substr(caret + 1)));
        }
        if (name.empty()) throw FixtureError("empty variable token in: " + vars);
        char kind = name[0];
        std::size_t idx = 0;
        if (name.size() > 1) idx = static_cast<std::size_t>(std::stoul(name.substr(1)));
        std::size_t var = 0;
        switch (kind) {
            case 't': var = layout.t(); break;
            case 'x':
                if (idx >= layout.n) throw FixtureError("x index out of range in: " + vars);
                var = layout.x(idx);
                break;
            case 'm':
                if (idx >= layout.kb) throw FixtureError("m index out of range in: " + vars);
                var = layout.m(idx);
                break;
            case 'v':
                if (idx >= layout.kc) throw FixtureError("v index out of range in: " + vars);
                var = layout.v(idx);
                break;
            default: throw FixtureError("unknown variable '" + name + "' (use t, x, m, v)");
        }
        out.emplace_back(var, power);
    }
    return out;
}

Poly poly_from_monomials(const VarLayout& layout, const std::vector<MonomialSpec>& monomials) {
    Poly p(layout.count());
    for (const auto& m : monomials) {
        auto powers = parse_monomial_vars(m.vars, layout);
        std::vector<std::pair<std::size_t, std::size_t>> cast(powers.begin(), powers.end());
        p += Poly::monomial(layout.count(), m.coeff, cast);
    }
    return p;
}

Poly basis_poly_from_monomials(std::size_t state_dim, const std::vector<MonomialSpec>& monomials) {
    // Basis functions live on the state alone; reuse the x-slot names with a
    // layout that has no moment or control slots, then shift indices down.
    VarLayout lay{state_dim, 0, 0};
    Poly packed = poly_from_monomials(lay, monomials);
    Poly out(state_dim);
    for (const auto& term : packed.terms()) {
        std::vector<std::pair<std::size_t, std::size_t>> factors;
        for (auto [var, pw] : term.factors) {
            if (var == lay.t()) throw FixtureError("basis functions cannot reference t");
            factors.emplace_back(var - 1, pw);
        }
        out += Poly::monomial(state_dim, term.coeff, factors);
    }
    return out;
}

namespace {

std::vector<MonomialSpec> monomials_from_config(const ConfigValue& arr) {
    std::vector<MonomialSpec> out;
    for (const auto& mono : arr.as_array()) {
        MonomialSpec ms;
        ms.coeff = mono.at("coeff").as_number();
        ms.vars = mono.has("vars") ? mono.at("vars").as_string() : std::string();
        out.push_back(std::move(ms));
    }
    return out;
}

MomentCoupledFunction coefficient_from_config(const ConfigValue& section, CoefficientKind kind,
                                              std::size_t rows, std::size_t cols,
                                              const VarLayout& layout,
                                              std::shared_ptr<const MomentBasis> basis) {
    std::vector<Poly> comps(rows * cols, Poly(layout.count()));
    if (section.has("monomials")) {
        if (rows * cols != 1)
            throw FixtureError(to_string(kind) + ": use 'components' for non-scalar shapes");
        comps[0] = poly_from_monomials(layout, monomials_from_config(section.at("monomials")));
    } else if (section.has("components")) {
        for (const auto& comp : section.at("components").as_array()) {
            std::size_t r = comp.has("row") ? comp.at("row").as_index() : 0;
            std::size_t c = comp.has("col") ? comp.at("col").as_index() : 0;
            if (r >= rows || c >= cols) throw FixtureError(to_string(kind) + ": component out of range");
            comps[r * cols + c] =
                poly_from_monomials(layout, monomials_from_config(comp.at("monomials")));
        }
    }  // otherwise identically zero
    return MomentCoupledFunction(kind, rows, cols, std::move(comps), layout, std::move(basis));
}

Vec vec_from_config(const ConfigValue& arr) {
    const auto& a = arr.as_array();
    Vec v(static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].as_number();
    return v;
}

}  // namespace

Fixture fixture_from_config(const ConfigValue& root) {
    const auto& dims = root.at("dims");
    std::size_t n = dims.at("n").as_index();
    std::size_t d = dims.at("d").as_index();
    std::size_t k = dims.at("k").as_index();
    if (n == 0 || d == 0 || k == 0) throw FixtureError("dims must be positive");

    std::vector<Poly> hs;
    for (const auto& h : root.at("basis").at("h").as_array())
        hs.push_back(basis_poly_from_monomials(n, monomials_from_config(h.at("monomials"))));
    auto basis = std::make_shared<const MomentBasis>(n, std::move(hs));

    VarLayout layout{n, basis->size(), k};

    Fixture fx;
    fx.spec.n = n;
    fx.spec.d = d;
    fx.spec.k = k;
    fx.spec.basis = basis;
    fx.spec.drift =
        coefficient_from_config(root.at("drift"), CoefficientKind::Drift, n, 1, layout, basis);
    fx.spec.diffusion = coefficient_from_config(root.at("diffusion"), CoefficientKind::Diffusion, n,
                                                d, layout, basis);
    fx.spec.running_cost = coefficient_from_config(root.at("running_cost"),
                                                   CoefficientKind::RunningCost, 1, 1, layout, basis);
    fx.spec.terminal_cost = coefficient_from_config(root.at("terminal_cost"),
                                                    CoefficientKind::TerminalCost, 1, 1, layout, basis);

    const auto& controls = root.at("controls");
    std::string ckind = controls.at("kind").as_string();
    if (ckind == "finite") {
        std::vector<Vec> pts;
        for (const auto& p : controls.at("points").as_array()) {
            if (p.kind == ConfigValue::Kind::Number) {
                Vec v(1);
                v[0] = p.as_number();
                pts.push_back(v);
            } else {
                pts.push_back(vec_from_config(p));
            }
        }
        fx.spec.controls = ControlSet::finite(std::move(pts));
    } else if (ckind == "box") {
        std::vector<std::size_t> counts;
        for (const auto& c : controls.at("grid").as_array()) counts.push_back(c.as_index());
        fx.spec.controls =
            ControlSet::box(vec_from_config(controls.at("lo")), vec_from_config(controls.at("hi")), counts);
    } else {
        throw FixtureError("controls.kind must be \"finite\" or \"box\"");
    }

    const auto& horizon = root.at("horizon");
    fx.spec.horizon = horizon.at("T").as_number();
    fx.spec.x0 = vec_from_config(horizon.at("x0"));
    if (root.has("name")) fx.spec.name = root.at("name").as_string();

    fx.candidate = vec_from_config(root.at("candidate").at("constant"));
    if (root.has("alternative")) {
        fx.alternative = vec_from_config(root.at("alternative").at("constant"));
    } else {
        fx.alternative = fx.candidate;
        for (const auto& p : fx.spec.controls.points) {
            if ((p - fx.candidate).norm() > 1e-14) {
                fx.alternative = p;
                break;
            }
        }
    }
    fx.spec.check();
    if (static_cast<std::size_t>(fx.candidate.size()) != k)
        throw FixtureError("candidate control dim != k");
    return fx;
}

Fixture load_fixture(const std::string& path) { return fixture_from_config(parse_config_file(path)); }

namespace {

std::string monomials_to_text(const Poly& p, const VarLayout& layout) {
    std::vector<std::string> names(layout.count());
    names[layout.t()] = "t";
    for (std::size_t i = 0; i < layout.n; ++i) names[layout.x(i)] = layout.n == 1 ? "x" : "x" + std::to_string(i);
    for (std::size_t i = 0; i < layout.kb; ++i) names[layout.m(i)] = layout.kb == 1 ? "m" : "m" + std::to_string(i);
    for (std::size_t i = 0; i < layout.kc; ++i) names[layout.v(i)] = layout.kc == 1 ? "v" : "v" + std::to_string(i);
    std::ostringstream os;
    os << "[ ";
    bool first = true;
    for (const auto& term : p.terms()) {
        if (!first) os << ", ";
        first = false;
        std::ostringstream vs;
        bool vfirst = true;
        for (auto [var, pw] : term.factors) {
            if (!vfirst) vs << ' ';
            vfirst = false;
            vs << names[var];
            if (pw > 1) vs << '^' << pw;
        }
        os << "{vars = \"" << vs.str() << "\", coeff = " << format_double(term.coeff) << "}";
    }
    os << " ]";
    return os.str();
}

std::string vec_to_text(const Vec& v) {
    std::ostringstream os;
    os << "[";
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i) os << ", ";
        os << format_double(v[i]);
    }
    os << "]";
    return os.str();
}

void coefficient_to_text(std::ostream& os, const char* section, const MomentCoupledFunction& f) {
    os << "[" << section << "]\n";
    if (f.rows() * f.cols() == 1) {
        os << "monomials = " << monomials_to_text(f.body(0, 0), f.layout()) << "\n\n";
        return;
    }
    os << "components = [\n";
    for (std::size_t r = 0; r < f.rows(); ++r)
        for (std::size_t c = 0; c < f.cols(); ++c) {
            os << "  {row = " << r << ", col = " << c
               << ", monomials = " << monomials_to_text(f.body(r, c), f.layout()) << "},\n";
        }
    os << "]\n\n";
}

}  // namespace

std::string fixture_to_config_text(const Fixture& fixture) {
    const ProblemSpec& spec = fixture.spec;
    std::ostringstream os;
    if (!spec.name.empty()) os << "name = \"" << spec.name << "\"\n\n";
    os << "[dims]\nn = " << spec.n << "\nd = " << spec.d << "\nk = " << spec.k << "\n\n";
    os << "[horizon]\nT = " << format_double(spec.horizon) << "\nx0 = " << vec_to_text(spec.x0)
       << "\n\n";
    os << "[basis]\nh = [ ";
    VarLayout xonly{spec.n, 0, 0};
    for (std::size_t i = 0; i < spec.basis->size(); ++i) {
        if (i) os << ", ";
        // Re-embed the basis polynomial into the x-slot naming.
        Poly embedded(xonly.count());
        for (const auto& term : spec.basis->function(i).terms()) {
            std::vector<std::pair<std::size_t, std::size_t>> factors;
            for (auto [var, pw] : term.factors) factors.emplace_back(var + 1, pw);
            embedded += Poly::monomial(xonly.count(), term.coeff, factors);
        }
        os << "{monomials = " << monomials_to_text(embedded, xonly) << "}";
    }
    os << " ]\n\n";
    coefficient_to_text(os, "drift", spec.drift);
    coefficient_to_text(os, "diffusion", spec.diffusion);
    coefficient_to_text(os, "running_cost", spec.running_cost);
    coefficient_to_text(os, "terminal_cost", spec.terminal_cost);
    os << "[controls]\n";
    if (spec.controls.kind == ControlSet::Kind::Finite) {
        os << "kind = \"finite\"\npoints = [";
        for (std::size_t i = 0; i < spec.controls.points.size(); ++i) {
            if (i) os << ", ";
            os << vec_to_text(spec.controls.points[i]);
        }
        os << "]\n\n";
    } else {
        os << "kind = \"box\"\nlo = " << vec_to_text(spec.controls.lo)
           << "\nhi = " << vec_to_text(spec.controls.hi) << "\ngrid = [";
        for (std::size_t i = 0; i < spec.controls.box_counts.size(); ++i) {
            if (i) os << ", ";
            os << spec.controls.box_counts[i];
        }
        os << "]\n\n";
    }
    os << "[candidate]\nconstant = " << vec_to_text(fixture.candidate) << "\n\n";
    os << "[alternative]\nconstant = " << vec_to_text(fixture.alternative) << "\n";
    return os.str();
}

std::uint64_t fixture_hash(const Fixture& fixture) {
    std::string text = fixture_to_config_text(fixture);
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace mfsmp
