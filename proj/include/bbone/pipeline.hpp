#pragma once

#include "bbone/backbone.hpp"
#include "bbone/fixedpoint.hpp"
#include "bbone/scenario.hpp"
#include "bbone/stats.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace bbone
{
    struct RunOptions
    {
        std::string out = "out";
        std::size_t threads = 1;
        // cmd_simulate: also write per-particle positions.
        bool positions = false;
        // Progress and summary lines; null silences them.
        std::ostream* log = nullptr;
    };

    // w as used by the decorated construction (after the scenario's w factor) and the solver's w.
    struct WSetup
    {
        WSolution solved;
        // Non-spatial mechanisms: the largest root of ψ, cross-checked against `solved`.
        bool constant = false;
        double root = 0.0;
        GridFunction w_used;
        BackboneModel model;
    };

    WSetup setup_w(const Scenario& sc);

    // x-only test function on a grid.
    GridFunction sample_field(const FieldConfig& f, const std::vector<double>& xs);
    // Value at (x, t) by linear interpolation in x and t.
    double grid_value(const GridFunction& g, double x, double t);
    // exp(−⟨u(·, t), μ⟩) by integrating the interpolated grid function against μ.
    double laplace_oracle(const GridFunction& u, const InitialMeasure& mu, double t);

    enum class Target
    {
        X,
        Delta,
        Backbone
    };

    Target parse_target(const std::string& s);

    struct VerifyResult
    {
        std::vector<FunctionalTestReport> reports;
        std::string json_path;
        std::string csv_path;
        bool pass() const;
    };

    // Writes w.csv, solutions.csv and solve.json to opt.out. Returns the exit status.
    int cmd_solve(const Scenario& sc, const RunOptions& opt);
    // Writes runs.csv, manifest.json and, with opt.positions, snapshots.csv.
    int cmd_simulate(const Scenario& sc, Target target, const RunOptions& opt);
    // Runs the selected tests and writes report.json and report.csv.
    VerifyResult run_verify(const Scenario& sc, const RunOptions& opt);
    int cmd_verify(const Scenario& sc, const RunOptions& opt);
    // Merges report JSON files (one scenario hash only) into report_long.csv.
    int cmd_report(const std::vector<std::string>& inputs, const RunOptions& opt);

    // Exit statuses of the command-line tool.
    inline constexpr int kExitPass = 0;
    inline constexpr int kExitFail = 1;
    inline constexpr int kExitConfig = 2;
    inline constexpr int kExitRuntime = 3;
}
