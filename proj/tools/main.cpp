#include "cli_commands.hpp"

#include "mfsmp/common.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <iostream>

namespace {

void add_common_options(CLI::App* app, mfsmp::cli::RunConfig& cfg) {
    app->add_option("--fixture", cfg.fixture_path, "Fixture file (configuration document)");
    app->add_option("--builtin", cfg.fixture_name, "Built-in fixture name");
    app->add_option("--particles", cfg.particles, "Particle count N");
    app->add_option("--steps", cfg.steps, "Time steps M");
    app->add_option("--seed", cfg.seed, "RNG seed");
    app->add_option("--rho-ladder", cfg.rho_ladder, "Spike fractions, strictly decreasing")
        ->delimiter(',');
    app->add_option("--control-grid", cfg.control_grid, "Control grid override (k == 1)")
        ->delimiter(',');
    app->add_option("--tol-sing", cfg.tol_sing,
                    "Singularity tolerance (< 0: 3 MC standard errors per cell)");
    app->add_option("--out", cfg.out_dir, "Output directory");
    app->add_option("--format", cfg.format, "csv | doc")->check(CLI::IsMember({"csv", "doc"}));
    app->add_option("--threads", cfg.threads, "Particle-parallelism cap");
    app->add_flag("--verbatim-q-term", cfg.verbatim_q_term,
                  "Second-order driver exactly as printed in the source display (d == 1)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mean-field stochastic maximum principle checker"};
    app.require_subcommand(1);

    mfsmp::cli::RunConfig cfg;
    if (const char* env = std::getenv("MFSMP_THREADS")) cfg.threads = std::max(1, std::atoi(env));

    auto* sim = app.add_subcommand("simulate", "Forward particle simulation + moment diagnostics");
    add_common_options(sim, cfg);

    auto* check = app.add_subcommand("check", "First- and second-order SMP check of the candidate");
    add_common_options(check, cfg);
    check->add_flag("--dump-adjoint", cfg.dump_adjoint,
                    "Write the full (p, q, P, Q) trajectory CSV (large)");

    auto* orders = app.add_subcommand("orders", "Variation order studies over the rho ladder");
    add_common_options(orders, cfg);
    orders->add_flag("--representation", cfg.representation,
                     "Also run the transition-matrix representation study");
    orders
        ->add_option("--inject-x2-defect", cfg.inject_x2_defect,
                     "Test hook: add c*d^3 to the x2 statistic")
        ->group("");

    auto* expansion = app.add_subcommand("expansion", "Cost expansion audit over the rho ladder");
    add_common_options(expansion, cfg);

    auto* ex11 = app.add_subcommand("example11", "One-shot reproduction of the singular benchmark");
    add_common_options(ex11, cfg);
    ex11->add_flag("--smoke", cfg.smoke, "Reduced-scale run with widened tolerances");
    ex11->add_option("--inject-x2-defect", cfg.inject_x2_defect)->group("");

    CLI11_PARSE(app, argc, argv);
    mfsmp::set_max_threads(cfg.threads);

    try {
        if (sim->parsed()) return mfsmp::cli::cmd_simulate(cfg);
        if (check->parsed()) return mfsmp::cli::cmd_check(cfg);
        if (orders->parsed()) return mfsmp::cli::cmd_orders(cfg);
        if (expansion->parsed()) return mfsmp::cli::cmd_expansion(cfg);
        if (ex11->parsed()) return mfsmp::cli::cmd_example11(cfg);
    } catch (const mfsmp::BlowupError& e) {
        std::cerr << "blow-up: " << e.what() << "\n";
        return mfsmp::cli::kBlowup;
    } catch (const mfsmp::RegressionError& e) {
        std::cerr << "solver failure: " << e.what() << "\n";
        return mfsmp::cli::kSolverFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return mfsmp::cli::kUsage;
    }
    return mfsmp::cli::kUsage;
}
