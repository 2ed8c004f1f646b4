#pragma once

#include "bbone/fixedpoint.hpp"
#include "bbone/mechanism.hpp"
#include "bbone/motion.hpp"
#include "bbone/particle.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace bbone
{
    // A number or an expression in x, with optional declared bounds [lo, hi].
    struct FieldConfig
    {
        std::string text = "0";
        bool constant = true;
        double value = 0.0;
        std::function<double(double)> fn;
        bool has_bounds = false;
        double lo = 0.0;
        double hi = 0.0;

        static FieldConfig number(double v);
        double at(double x) const { return constant ? value : fn(x); }
        // Undeclared bounds are taken from the samples.
        SpatialField field(const std::vector<double>& samples) const;
    };

    struct SimulationConfig
    {
        double n = 1e3;
        double n_sub = 1e2;
        double epsilon = 1e-2;
        double dt = 1e-3;
        double horizon = 1.0;
        std::vector<double> times{0.0, 0.5, 1.0};
        std::size_t replications = 100;
        std::size_t population_cap = 1'000'000;
        Domain domain;
    };

    struct EquivalenceConfig
    {
        bool enabled = false;
        std::vector<FieldConfig> f;
        std::vector<double> times;
        std::vector<double> epsilon_refinement;
        // "oracle" (fixedpoint) or "X" (two-sample against simulated X).
        std::string side_b = "oracle";
    };

    struct PoissonFieldConfig
    {
        bool enabled = false;
        std::vector<std::pair<FieldConfig, FieldConfig>> pairs;
        std::vector<double> times;
    };

    struct ExtinctionConfig
    {
        bool enabled = false;
        double n = 1e3;
        std::size_t replications = 1000;
        std::vector<double> horizons{2.5, 5.0, 10.0};
        // Chains stop once the rescaled population reaches this mass.
        double stop_mass = 2.0;
    };

    struct ConditionalTreeConfig
    {
        bool enabled = false;
        FieldConfig f = FieldConfig::number(1.0);
        double t = 1.0;
        std::size_t replications = 1000;
        std::uint64_t tree_replication = 0;
    };

    struct ProbeConfig
    {
        bool enabled = false;
        std::vector<Domain> ladder;
        FieldConfig f = FieldConfig::number(1.0);
        FieldConfig h = FieldConfig::number(1.0);
        std::size_t replications = 100;
        double n = 50.0;
        double n_sub = 10.0;
        double dt = 1e-2;
    };

    struct Scenario
    {
        std::string name;
        std::string source;
        std::uint64_t seed = 0;
        std::string hash;

        BranchingMechanism mech;
        DiffusionSpec motion;
        InitialMeasure mu;
        std::vector<double> xs;
        SolverConfig solver;
        WLadder w_ladder;
        // Factor applied to w before building the backbone (1 = exact; the negative control corrupts it).
        double w_factor = 1.0;
        SimulationConfig sim;

        EquivalenceConfig equivalence;
        PoissonFieldConfig poisson_field;
        ExtinctionConfig extinction;
        ConditionalTreeConfig conditional_tree;
        ProbeConfig probe;

        bool any_tests() const;
    };

    // Parses the YAML scenario format described in the README. Errors are ConfigError with
    // "name:line:column: key: message" diagnostics. A given seed overrides the file's.
    Scenario parse_scenario(const std::string& text, const std::string& source_name, std::optional<std::uint64_t> seed = {});
    Scenario load_scenario(const std::string& path, std::optional<std::uint64_t> seed = {});

    // Locates scenarios/NAME.yaml in the working directory or the installed scenario directory.
    std::string find_scenario(const std::string& name);

    // FNV-1a of the scenario text and the effective seed, as 16 hex digits.
    std::string scenario_hash(const std::string& text, std::uint64_t seed);
}
