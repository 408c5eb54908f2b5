#pragma once

#include "mfsmp/fixture_io.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mfsmp::cli {

/// Stable exit-code contract.
enum ExitCode : int {
    kOk = 0,
    kUsage = 1,
    kBlowup = 2,
    kFirstOrderViolation = 3,
    kSecondOrderViolation = 4,
    kSolverFailure = 5,
    kOrderStudyFailure = 6,
    kExpansionInconsistency = 7,
};

struct RunConfig {
    std::string fixture_path;              // empty: use built-in name
    std::string fixture_name;              // built-in fallback ("example11", ...)
    std::size_t particles = 10000;
    std::size_t steps = 100;
    std::uint64_t seed = 42;
    std::vector<double> rho_ladder{0.4, 0.2, 0.1, 0.05};
    std::vector<double> control_grid;      // override, flattened k==1 values
    double tol_sing = -1.0;                // <0: 3 MC standard errors per cell
    std::string out_dir = "out";
    std::string format = "csv";            // csv | doc (doc adds JSON)
    int threads = 1;
    bool smoke = false;                    // reduced-scale example11 mode
    double inject_x2_defect = 0.0;         // test hook for the order gate
    bool representation = false;           // add the transition-representation study to orders
    bool verbatim_q_term = false;          // strict reading of the P driver
    bool dump_adjoint = false;             // write the full adjoint CSV (large)
};

/// Throws FixtureError on invariant violations (N >= 2, M >= 2, ladder
/// strictly decreasing inside (0,1)).
void validate_config(const RunConfig& cfg);

Fixture resolve_fixture(const RunConfig& cfg);

int cmd_simulate(const RunConfig& cfg);
int cmd_check(const RunConfig& cfg);
int cmd_orders(const RunConfig& cfg);
int cmd_expansion(const RunConfig& cfg);
int cmd_example11(const RunConfig& cfg);

}  // namespace mfsmp::cli
