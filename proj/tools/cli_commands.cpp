#include "cli_commands.hpp"

#include "mfsmp/adjoint.hpp"
#include "mfsmp/csv.hpp"
#include "mfsmp/fixtures.hpp"
#include "mfsmp/forward.hpp"
#include "mfsmp/smp.hpp"
#include "mfsmp/variation.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace mfsmp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void ensure_outdir(const RunConfig& cfg) { fs::create_directories(cfg.out_dir); }

std::string joined(const RunConfig& cfg, const std::string& name) {
    return (fs::path(cfg.out_dir) / name).string();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::vector<Vec> control_points_for(const RunConfig& cfg, const Fixture& fx) {
    if (cfg.control_grid.empty()) return fx.spec.controls.points;
    if (fx.spec.k != 1)
        throw FixtureError("--control-grid override currently supports k == 1 fixtures");
    std::vector<Vec> pts;
    for (double v : cfg.control_grid) pts.push_back(Vec::Constant(1, v));
    return pts;
}

json gap_table_json(const GapTable& t) {
    json rows = json::array();
    for (Eigen::Index m = 0; m < t.gap.rows(); ++m)
        for (Eigen::Index c = 0; c < t.gap.cols(); ++c) {
            json row;
            row["step"] = static_cast<std::size_t>(m);
            row["time"] = t.times[static_cast<std::size_t>(m)];
            row["control_index"] = static_cast<std::size_t>(c);
            row["gap"] = t.gap(m, c);
            row["se"] = t.se(m, c);
            rows.push_back(row);
        }
    return rows;
}

CsvTable gap_table_csv(const GapTable& t) {
    CsvTable csv;
    csv.header = {"step", "time", "control_index", "control", "gap", "se"};
    for (Eigen::Index m = 0; m < t.gap.rows(); ++m)
        for (Eigen::Index c = 0; c < t.gap.cols(); ++c) {
            csv.rows.push_back({std::to_string(m), csv_cell(t.times[static_cast<std::size_t>(m)]),
                                std::to_string(c),
                                csv_cell(t.control_points[static_cast<std::size_t>(c)][0]),
                                csv_cell(t.gap(m, c)), csv_cell(t.se(m, c))});
        }
    return csv;
}

CsvTable condition_table_csv(const ConditionTable& t) {
    CsvTable csv;
    csv.header = {"step", "time", "control_index", "control", "value", "se", "q05"};
    for (Eigen::Index m = 0; m < t.value.rows(); ++m)
        for (Eigen::Index c = 0; c < t.value.cols(); ++c) {
            csv.rows.push_back({std::to_string(m), csv_cell(t.times[static_cast<std::size_t>(m)]),
                                std::to_string(c),
                                csv_cell(t.control_points[static_cast<std::size_t>(c)][0]),
                                csv_cell(t.value(m, c)), csv_cell(t.se(m, c)),
                                csv_cell(t.q05(m, c))});
        }
    return csv;
}

json expansion_json(const ExpansionAudit& a) {
    json j;
    j["rho"] = a.rho;
    j["delta_cost"] = a.delta_cost;
    j["delta_se"] = a.delta_se;
    j["c1_fitted"] = a.c1_fitted;
    j["c2_fitted"] = a.c2_fitted;
    j["c1_fit_se"] = a.c1_fit_se;
    j["c2_fit_se"] = a.c2_fit_se;
    j["c1_predicted"] = a.c1_predicted;
    j["c2_predicted"] = a.c2_predicted;
    j["residual_over_rho2"] = a.residual_over_rho2;
    j["residual_se_over_rho2"] = a.residual_se_over_rho2;
    j["residual_decreasing"] = a.residual_decreasing;
    j["c1_consistent"] = a.c1_consistent;
    j["c2_consistent"] = a.c2_consistent;
    return j;
}

CsvTable expansion_csv(const ExpansionAudit& a) {
    CsvTable csv;
    csv.header = {"rho", "delta_cost", "se", "residual_over_rho2", "residual_se_over_rho2"};
    for (std::size_t i = 0; i < a.rho.size(); ++i)
        csv.rows.push_back({csv_cell(a.rho[i]), csv_cell(a.delta_cost[i]), csv_cell(a.delta_se[i]),
                            csv_cell(a.residual_over_rho2[i]), csv_cell(a.residual_se_over_rho2[i])});
    return csv;
}

CsvTable orders_csv(const std::string& fixture, const OrderStudyResult& r,
                    const RepresentationStudyResult* rep) {
    CsvTable csv;
    csv.header = {"fixture", "quantity", "d", "estimate", "stderr"};
    for (const auto& rung : r.rungs) {
        csv.rows.push_back({fixture, "x1_sup2", csv_cell(rung.d), csv_cell(rung.x1_sup2),
                            csv_cell(rung.x1_se)});
        csv.rows.push_back({fixture, "x2_sup2", csv_cell(rung.d), csv_cell(rung.x2_sup2),
                            csv_cell(rung.x2_se)});
        csv.rows.push_back({fixture, "xstar_sup2", csv_cell(rung.d), csv_cell(rung.xstar_sup2),
                            csv_cell(rung.xstar_se)});
        csv.rows.push_back({fixture, "xstar_over_d4", csv_cell(rung.d), csv_cell(rung.xstar_ratio),
                            csv_cell(rung.xstar_ratio_se)});
    }
    if (rep) {
        for (const auto& rung : rep->rungs) {
            csv.rows.push_back({fixture, "scaling_gap_over_rho2", csv_cell(rung.rho),
                                csv_cell(rung.scaling_gap), "0"});
            csv.rows.push_back({fixture, "representation_gap_over_rho2", csv_cell(rung.rho),
                                csv_cell(rung.representation_gap), "0"});
        }
    }
    return csv;
}

struct Claim {
    std::string name;
    bool pass = false;
    std::string detail;
};

std::string claims_text(const std::string& title, const std::vector<Claim>& claims,
                        const std::vector<std::string>& infos) {
    std::ostringstream os;
    os << title << "\n";
    for (const auto& c : claims)
        os << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << " (" << c.detail << ")\n";
    for (const auto& i : infos) os << "[INFO] " << i << "\n";
    return os.str();
}

}  // namespace

void validate_config(const RunConfig& cfg) {
    if (cfg.particles < 2) throw FixtureError("config: particles must be >= 2");
    if (cfg.steps < 2) throw FixtureError("config: steps must be >= 2");
    for (std::size_t i = 0; i < cfg.rho_ladder.size(); ++i) {
        double r = cfg.rho_ladder[i];
        if (!(r > 0.0 && r < 1.0)) throw FixtureError("config: rho ladder values must lie in (0,1)");
        if (i > 0 && !(r < cfg.rho_ladder[i - 1]))
            throw FixtureError("config: rho ladder must be strictly decreasing");
    }
    if (cfg.format != "csv" && cfg.format != "doc")
        throw FixtureError("config: format must be csv or doc");
}

Fixture resolve_fixture(const RunConfig& cfg) {
    validate_config(cfg);
    if (!cfg.fixture_path.empty()) return load_fixture(cfg.fixture_path);
    if (!cfg.fixture_name.empty()) return fixtures::by_name(cfg.fixture_name);
    throw FixtureError("no fixture given (use --fixture PATH or a built-in name)");
}

void write_adjoint_csv(const std::string& path, const TimeGrid& grid, const AdjointSolution& adj) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    std::fputs("step,time,particle,block,row,col,value\n", f);
    const std::size_t N = adj.first.N, n = adj.first.n, d = adj.first.d;
    for (std::size_t m = 0; m <= grid.steps; ++m) {
        double t = grid.time(m);
        for (std::size_t j = 0; j < N; ++j) {
            const double* p = adj.first.p_at(m, j);
            for (std::size_t i = 0; i < n; ++i)
                std::fprintf(f, "%zu,%.17g,%zu,p,%zu,0,%.17g\n", m, t, j, i, p[i]);
            for (std::size_t a = 0; a < n; ++a)
                for (std::size_t b = 0; b < n; ++b)
                    std::fprintf(f, "%zu,%.17g,%zu,P,%zu,%zu,%.17g\n", m, t, j, a, b,
                                 adj.second.P_at(m, j)(static_cast<Eigen::Index>(a),
                                                       static_cast<Eigen::Index>(b)));
            if (m < grid.steps) {
                const double* q = adj.first.q_at(m, j);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t r = 0; r < d; ++r)
                        std::fprintf(f, "%zu,%.17g,%zu,q,%zu,%zu,%.17g\n", m, t, j, i, r,
                                     q[i * d + r]);
                for (std::size_t r = 0; r < d; ++r)
                    for (std::size_t a = 0; a < n; ++a)
                        for (std::size_t b = 0; b < n; ++b)
                            std::fprintf(f, "%zu,%.17g,%zu,Q,%zu,%zu,%.17g\n", m, t, j, a,
                                         b + r * n,
                                         adj.second.Q_at(m, j, r)(static_cast<Eigen::Index>(a),
                                                                  static_cast<Eigen::Index>(b)));
            }
        }
    }
    std::fclose(f);
}

int cmd_simulate(const RunConfig& cfg) {
    ensure_outdir(cfg);
    Fixture fx = resolve_fixture(cfg);
    TimeGrid grid(fx.spec.horizon, cfg.steps);
    ControlProcess u = ControlProcess::constant(fx.candidate, cfg.steps, cfg.particles);
    ParticlePathEnsemble ens;
    try {
        ens = simulate(fx.spec, u, grid, cfg.particles, cfg.seed);
    } catch (const BlowupError& e) {
        std::cerr << "blow-up: " << e.what() << "\n";
        return kBlowup;
    }

    {
        std::FILE* f = std::fopen(joined(cfg, "paths.csv").c_str(), "wb");
        if (!f) throw std::runtime_error("cannot open paths.csv for writing");
        std::fputs("step,time,particle,coord,value\n", f);
        for (std::size_t m = 0; m <= grid.steps; ++m)
            for (std::size_t j = 0; j < ens.N; ++j)
                for (std::size_t i = 0; i < ens.n; ++i)
                    std::fprintf(f, "%zu,%.17g,%zu,%zu,%.17g\n", m, grid.time(m), j, i,
                                 ens.state(m, j)[i]);
        std::fclose(f);
    }

    MomentReport rep = moment_bound_check(ens, u);
    json meta;
    meta["fixture"] = fx.spec.name;
    meta["seed"] = cfg.seed;
    meta["particles"] = cfg.particles;
    meta["steps"] = cfg.steps;
    char hash[32];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(fixture_hash(fx)));
    meta["spec_hash"] = std::string(hash);
    meta["moment_ratio"] = rep.ratio;
    meta["moment_sup_x8"] = rep.sup_x8;
    meta["moment_control_l1_8"] = rep.control_l1_8;
    write_json(joined(cfg, "meta.json"), meta);
    std::cout << "moment bound ratio r_hat = " << format_double(rep.ratio)
              << " (E sup|X|^8 = " << format_double(rep.sup_x8) << ")\n";
    return kOk;
}

int cmd_check(const RunConfig& cfg) {
    ensure_outdir(cfg);
    Fixture fx = resolve_fixture(cfg);
    TimeGrid grid(fx.spec.horizon, cfg.steps);
    ControlProcess u = ControlProcess::constant(fx.candidate, cfg.steps, cfg.particles);
    ParticlePathEnsemble ens;
    try {
        ens = simulate(fx.spec, u, grid, cfg.particles, cfg.seed);
    } catch (const BlowupError& e) {
        std::cerr << "blow-up: " << e.what() << "\n";
        return kBlowup;
    }
    AdjointSolution adj;
    SMPReport rep;
    try {
        SecondOrderOptions sopts;
        sopts.verbatim_q_term = cfg.verbatim_q_term;
        adj = solve_adjoints(fx.spec, ens, u, RegressionBasis{2, 1e-8}, sopts);
        rep = build_smp_report(fx.spec, ens, u, adj, control_points_for(cfg, fx), cfg.tol_sing,
                               &fx.candidate);
    } catch (const RegressionError& e) {
        std::cerr << "solver failure: " << e.what() << "\n";
        return kSolverFailure;
    }

    write_csv(joined(cfg, "gaps.csv"), gap_table_csv(rep.gaps));
    write_csv(joined(cfg, "second_order.csv"), condition_table_csv(rep.second_order));

    json doc;
    doc["meta"] = {{"fixture", fx.spec.name},
                   {"particles", cfg.particles},
                   {"steps", cfg.steps},
                   {"seed", cfg.seed},
                   {"tol_sing", rep.tol_sing}};
    doc["first_order"] = {{"violation", rep.first_order.violation},
                          {"significant", rep.first_order.significant},
                          {"witness_step", rep.first_order.witness_step},
                          {"witness_control", rep.first_order.witness_control},
                          {"gaps", gap_table_json(rep.gaps)}};
    json cells = json::array();
    for (auto [m, c] : rep.singular.cells) cells.push_back({{"step", m}, {"control_index", c}});
    doc["singular_region"] = {{"cells", cells.size()},
                              {"positive_measure", rep.singular.positive_measure},
                              {"full_grid", rep.singular.full_grid}};
    doc["second_order"] = {{"violation", rep.second_order_violation},
                           {"significant", rep.second_order_significant}};
    doc["expansion_audit"] = nullptr;  // populated by the expansion command
    if (cfg.format == "doc") doc["singular_region"]["cell_list"] = cells;
    write_json(joined(cfg, "smp_report.json"), doc);
    if (cfg.dump_adjoint) write_adjoint_csv(joined(cfg, "adjoint.csv"), grid, adj);

    std::ostringstream os;
    os << "smp check  fixture=" << fx.spec.name << "  N=" << cfg.particles << " M=" << cfg.steps
       << " seed=" << cfg.seed << "\n"
       << "  first-order violation : " << format_double(rep.first_order.violation)
       << (rep.first_order.significant ? "  (significant)" : "") << "\n"
       << "  singular region       : " << rep.singular.cells.size() << " cells"
       << (rep.singular.full_grid ? " (full grid)" : "")
       << (rep.singular.positive_measure ? ", positive measure" : "") << "\n"
       << "  second-order violation: " << format_double(rep.second_order_violation)
       << (rep.second_order_significant ? "  (significant)" : "") << "\n";
    std::cout << os.str();
    write_text(joined(cfg, "smp_report.txt"), os.str());

    if (rep.first_order.significant) return kFirstOrderViolation;
    if (rep.second_order_significant) return kSecondOrderViolation;
    return kOk;
}

int cmd_orders(const RunConfig& cfg) {
    ensure_outdir(cfg);
    if (cfg.rho_ladder.size() < 4) {
        std::cerr << "orders: rho ladder must have at least 4 rungs\n";
        return kUsage;
    }
    Fixture fx = resolve_fixture(cfg);
    OrderStudyOptions opts;
    opts.inject_x2_cubed = cfg.inject_x2_defect;
    OrderStudyResult res;
    try {
        res = run_order_study(fx.spec, fx.candidate, fx.alternative, cfg.rho_ladder, cfg.particles,
                              cfg.steps, cfg.seed, opts);
    } catch (const BlowupError& e) {
        std::cerr << "blow-up: " << e.what() << "\n";
        return kBlowup;
    }

    RepresentationStudyResult rep;
    if (cfg.representation)
        rep = run_representation_study(fx.spec, fx.candidate, fx.alternative, cfg.rho_ladder,
                                       cfg.particles, cfg.steps, cfg.seed);
    write_csv(joined(cfg, "orders.csv"),
              orders_csv(fx.spec.name, res, cfg.representation ? &rep : nullptr));

    json doc;
    doc["fixture"] = fx.spec.name;
    doc["slope_x1"] = res.slope_x1;
    doc["slope_x2"] = res.slope_x2;
    doc["x1_slope_ok"] = res.x1_slope_ok;
    doc["x2_slope_ok"] = res.x2_slope_ok;
    doc["x2_identically_zero"] = res.x2_identically_zero;
    doc["remainder_ratio_decreasing"] = res.remainder_ratio_decreasing;
    doc["pass"] = res.pass;
    if (cfg.representation) {
        doc["scaling_gap_vanishing"] = rep.scaling_gap_vanishing;
        doc["representation_gap_vanishing"] = rep.representation_gap_vanishing;
        doc["max_inverse_gap"] = rep.max_inverse_gap;
    }
    write_json(joined(cfg, "orders.json"), doc);

    std::cout << "orders  fixture=" << fx.spec.name << "  slope(x1)=" << format_double(res.slope_x1)
              << "  slope(x2)="
              << (res.x2_identically_zero ? std::string("n/a (x2 == 0)")
                                          : format_double(res.slope_x2))
              << "  remainder " << (res.remainder_ratio_decreasing ? "decreasing" : "NOT decreasing")
              << "\n";
    bool pass = res.pass && (!cfg.representation || rep.pass);
    return pass ? kOk : kOrderStudyFailure;
}

int cmd_expansion(const RunConfig& cfg) {
    ensure_outdir(cfg);
    if (cfg.rho_ladder.size() < 3) {
        std::cerr << "expansion: rho ladder must have at least 3 rungs\n";
        return kUsage;
    }
    Fixture fx = resolve_fixture(cfg);
    ExpansionOptions opts;
    opts.second_order.verbatim_q_term = cfg.verbatim_q_term;
    ExpansionAudit audit;
    try {
        audit = expansion_audit(fx.spec, fx.candidate, fx.alternative, cfg.rho_ladder,
                                cfg.particles, cfg.steps, cfg.seed, opts);
    } catch (const BlowupError& e) {
        std::cerr << "blow-up: " << e.what() << "\n";
        return kBlowup;
    } catch (const RegressionError& e) {
        std::cerr << "solver failure: " << e.what() << "\n";
        return kSolverFailure;
    }
    write_csv(joined(cfg, "expansion.csv"), expansion_csv(audit));
    write_json(joined(cfg, "expansion.json"), expansion_json(audit));
    std::cout << "expansion  fixture=" << fx.spec.name
              << "  c1: fitted=" << format_double(audit.c1_fitted)
              << " predicted=" << format_double(audit.c1_predicted)
              << "  c2: fitted=" << format_double(audit.c2_fitted)
              << " predicted=" << format_double(audit.c2_predicted)
              << "  residual/rho^2 " << (audit.residual_decreasing ? "decreasing" : "NOT decreasing")
              << "\n";
    // Gate on expansion self-consistency: the o(rho^2) residual decay plus the
    // first-order coefficient. The c2 prediction is reported alongside; on
    // terminal-cost mean-field fixtures the single-matrix pairing is known to
    // under-resolve it, so it does not gate the exit code.
    bool consistent = audit.residual_decreasing && audit.c1_consistent;
    return consistent ? kOk : kExpansionInconsistency;
}

int cmd_example11(const RunConfig& cfg) {
    ensure_outdir(cfg);
    RunConfig run = cfg;
    if (cfg.smoke) {
        run.particles = std::min<std::size_t>(cfg.particles, 100);
        run.steps = std::min<std::size_t>(cfg.steps, 50);
    }
    const double tol_pq = cfg.smoke ? 0.25 : 5e-2;
    const double tol_gap = cfg.smoke ? 0.25 : 5e-2;

    Fixture fx = fixtures::example11();
    TimeGrid grid(fx.spec.horizon, run.steps);
    ControlProcess u = ControlProcess::constant(fx.candidate, run.steps, run.particles);

    std::vector<Claim> claims;
    std::vector<std::string> infos;

    ParticlePathEnsemble ens = simulate(fx.spec, u, grid, run.particles, run.seed);
    double max_dev = 0.0;
    for (std::size_t m = 0; m <= grid.steps; ++m)
        for (std::size_t j = 0; j < ens.N; ++j)
            max_dev = std::max(max_dev, std::abs(ens.state(m, j)[0] - 1.0));
    claims.push_back({"forward paths under the candidate control stay at 1 exactly",
                      max_dev == 0.0, "max |X-1| = " + format_double(max_dev)});

    CostEstimate j_u = cost(fx.spec, ens, u);
    claims.push_back({"candidate cost J(u) = 0 exactly", j_u.value == 0.0,
                      "J = " + format_double(j_u.value)});

    SecondOrderOptions sopts;
    sopts.verbatim_q_term = cfg.verbatim_q_term;
    AdjointSolution adj = solve_adjoints(fx.spec, ens, u, RegressionBasis{2, 1e-8}, sopts);
    double max_p = 0.0, max_q = 0.0;
    for (std::size_t m = 0; m <= grid.steps; ++m) {
        double acc = 0.0;
        for (std::size_t j = 0; j < ens.N; ++j) acc += std::abs(adj.first.p_at(m, j)[0]);
        max_p = std::max(max_p, acc / static_cast<double>(ens.N));
    }
    for (std::size_t m = 0; m < grid.steps; ++m) {
        double acc = 0.0;
        for (std::size_t j = 0; j < ens.N; ++j) acc += std::abs(adj.first.q_at(m, j)[0]);
        max_q = std::max(max_q, acc / static_cast<double>(ens.N));
    }
    claims.push_back({"first-order adjoint (p, q) vanishes within tolerance",
                      max_p <= tol_pq && max_q <= tol_pq,
                      "max_t E|p| = " + format_double(max_p) + ", max_t E|q| = " +
                          format_double(max_q)});

    std::vector<Vec> grid_u = fx.spec.controls.points;
    GapTable gaps = hamiltonian_gap(fx.spec, ens, u, adj.first, grid_u);
    double max_gap = gaps.gap.cwiseAbs().maxCoeff();
    claims.push_back({"Hamiltonian gaps vanish on U = {-1, 0, 1} at every knot",
                      max_gap <= tol_gap, "max |E dH| = " + format_double(max_gap)});
    write_csv(joined(cfg, "gaps.csv"), gap_table_csv(gaps));

    SingularRegion singular = detect_singular_region(gaps, tol_gap, &fx.candidate);
    claims.push_back({"singular region covers the full control grid", singular.full_grid,
                      std::to_string(singular.cells.size()) + " of " +
                          std::to_string(static_cast<std::size_t>(gaps.gap.rows()) * grid_u.size()) +
                          " cells"});

    ConditionTable cond = second_order_condition(fx.spec, ens, u, adj.first, adj.second, grid_u);
    write_csv(joined(cfg, "second_order.csv"), condition_table_csv(cond));
    double worst_neg = 0.0;
    for (Eigen::Index m = 0; m < cond.value.rows(); ++m)
        for (Eigen::Index c = 0; c < cond.value.cols(); ++c)
            worst_neg = std::min(worst_neg, cond.value(m, c) + 3.0 * cond.se(m, c));
    claims.push_back({"second-order condition nonnegative within 3 SE on the grid",
                      worst_neg >= 0.0, "min (value + 3 se) = " + format_double(worst_neg)});

    // Quadratic shape in v on the extended grid.
    std::vector<Vec> ext;
    for (double v : {-1.0, -0.5, 0.5, 1.0}) ext.push_back(Vec::Constant(1, v));
    ConditionTable cond_ext = second_order_condition(fx.spec, ens, u, adj.first, adj.second, ext);
    write_csv(joined(cfg, "second_order_extended.csv"), condition_table_csv(cond_ext));
    std::vector<double> vsq, integrated;
    const double dt = grid.dt();
    for (std::size_t c = 0; c < ext.size(); ++c) {
        double acc = 0.0;
        for (Eigen::Index m = 0; m < cond_ext.value.rows(); ++m)
            acc += cond_ext.value(m, static_cast<Eigen::Index>(c)) * dt;
        integrated.push_back(acc);
        vsq.push_back(ext[c][0] * ext[c][0]);
    }
    double r2 = r_squared_through_origin(vsq, integrated);
    double even_gap = std::max(std::abs(integrated[0] - integrated[3]),
                               std::abs(integrated[1] - integrated[2]));
    double scale = std::max({std::abs(integrated[0]), std::abs(integrated[3]), 1e-300});
    claims.push_back({"second-order condition is proportional to v^2 (R^2 >= 0.99, even in v)",
                      r2 >= 0.99 && even_gap <= 0.10 * scale,
                      "R^2 = " + format_double(r2) + ", evenness gap = " +
                          format_double(even_gap / scale)});

    // Independent deterministic oracle for P along the constant path.
    std::vector<double> knot_times;
    for (std::size_t m = 0; m <= grid.steps; ++m) knot_times.push_back(grid.time(m));
    std::vector<Mat> oracle = second_order_ode_oracle(fx.spec, fx.spec.x0, fx.candidate, knot_times);
    double sup_abs = 0.0, sup_diff = 0.0;
    CsvTable pcurve;
    pcurve.header = {"time", "P_solver", "P_oracle"};
    for (std::size_t m = 0; m <= grid.steps; ++m) {
        double pmc = 0.0;
        for (std::size_t j = 0; j < ens.N; ++j) pmc += adj.second.P_at(m, j)(0, 0);
        pmc /= static_cast<double>(ens.N);
        double pod = oracle[m](0, 0);
        sup_abs = std::max(sup_abs, std::abs(pod));
        sup_diff = std::max(sup_diff, std::abs(pmc - pod));
        pcurve.rows.push_back({csv_cell(knot_times[m]), csv_cell(pmc), csv_cell(pod)});
    }
    write_csv(joined(cfg, "p_oracle.csv"), pcurve);
    double p0_mc = 0.0;
    for (std::size_t j = 0; j < ens.N; ++j) p0_mc += adj.second.P_at(0, j)(0, 0);
    p0_mc /= static_cast<double>(ens.N);
    infos.push_back("second-order adjoint vs deterministic ODE oracle: sup|P_mc - P_ode|/sup|P_ode| = " +
                    format_double(sup_diff / sup_abs));
    infos.push_back(
        "quoted reference solution (P,Q) = (1,0) for this benchmark does not solve the implemented "
        "adjoint equation: the assembled terminal condition is P_T = 4 and the driver grows it to "
        "P_0 = " + format_double(oracle[0](0, 0)) +
        " (solver: " + format_double(p0_mc) +
        "); the second-order condition stays proportional to v^2 either way");

    // Variation order study.
    OrderStudyOptions oopts;
    oopts.inject_x2_cubed = cfg.inject_x2_defect;
    OrderStudyResult orders = run_order_study(fx.spec, fx.candidate, fx.alternative, run.rho_ladder,
                                              run.particles, run.steps, run.seed, oopts);
    write_csv(joined(cfg, "orders.csv"), orders_csv(fx.spec.name, orders, nullptr));
    claims.push_back({"first-variation order >= 1.8 and remainder ratio non-increasing",
                      orders.x1_slope_ok && orders.remainder_ratio_decreasing,
                      "slope(x1) = " + format_double(orders.slope_x1) +
                          (orders.x2_identically_zero ? ", x2 == 0 (order bound vacuous)"
                                                      : ", slope(x2) = " + format_double(orders.slope_x2))});

    // Cost expansion audit.
    ExpansionOptions eopts;
    eopts.second_order.verbatim_q_term = cfg.verbatim_q_term;
    ExpansionAudit audit = expansion_audit(fx.spec, fx.candidate, fx.alternative, run.rho_ladder,
                                           run.particles, run.steps, run.seed, eopts);
    write_csv(joined(cfg, "expansion.csv"), expansion_csv(audit));
    claims.push_back({"expansion first-order coefficient consistent with 0 (singular candidate)",
                      audit.c1_consistent, "c1 fitted = " + format_double(audit.c1_fitted)});
    infos.push_back("expansion c2: fitted = " + format_double(audit.c2_fitted) +
                    ", predicted from the adjoint pairing = " + format_double(audit.c2_predicted) +
                    " (the single-matrix P pairing under-resolves terminal-cost mean-field "
                    "couplings; reported, not gated)");

    std::ostringstream title;
    title << "example11 reproduction  N=" << run.particles << " M=" << run.steps
          << " seed=" << run.seed << (cfg.smoke ? "  [smoke]" : "");
    std::string text = claims_text(title.str(), claims, infos);
    std::cout << text;
    write_text(joined(cfg, "summary.txt"), text);

    json doc;
    doc["meta"] = {{"particles", run.particles},
                   {"steps", run.steps},
                   {"seed", run.seed},
                   {"smoke", cfg.smoke}};
    json jclaims = json::array();
    for (const auto& c : claims)
        jclaims.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    doc["claims"] = jclaims;
    doc["infos"] = infos;
    doc["expansion"] = expansion_json(audit);
    write_json(joined(cfg, "summary.json"), doc);

    for (const auto& c : claims)
        if (!c.pass) return kUsage;
    if (!orders.pass) return kOrderStudyFailure;
    if (!(audit.residual_decreasing && audit.c1_consistent)) return kExpansionInconsistency;
    return kOk;
}

}  // namespace mfsmp::cli
