#include "bbone/parallel.hpp"
#include "bbone/pipeline.hpp"
#include "bbone/scenario.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

int main(int argc, char** argv)
{
    using namespace bbone;

    CLI::App app{"Backbone decomposition toolkit: solve, simulate, verify, report"};
    app.require_subcommand(1);

    std::string config;
    std::string scenario;
    std::optional<std::uint64_t> seed;
    RunOptions opt;
    opt.threads = default_threads();
    opt.log = &std::cout;
    std::string target = "delta";
    std::vector<std::string> inputs;

    auto add_common = [&](CLI::App* sub) {
        auto* c = sub->add_option("--config", config, "scenario file (YAML)");
        auto* s = sub->add_option("--scenario", scenario, "scenario name under scenarios/");
        c->excludes(s);
        sub->add_option("--seed", seed, "override the scenario seed");
        sub->add_option("--out", opt.out, "output directory")->capture_default_str();
        sub->add_option("--threads", opt.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    };

    auto* solve = app.add_subcommand("solve", "solve the fixed-point equations and write w, u, u*, v");
    add_common(solve);
    auto* simulate = app.add_subcommand("simulate", "simulate replications of X, the decorated process or the backbone");
    add_common(simulate);
    simulate->add_option("--target", target, "X, delta or backbone")->capture_default_str();
    simulate->add_flag("--positions", opt.positions, "also write particle positions");
    auto* verify = app.add_subcommand("verify", "run the scenario's test suite; exit 0 iff all pass");
    add_common(verify);
    auto* report = app.add_subcommand("report", "merge report JSON files into a long-format CSV");
    report->add_option("inputs", inputs, "report.json files")->required();
    report->add_option("--out", opt.out, "output directory")->capture_default_str();

    try
    {
        app.parse(argc, argv);
    }
    catch (const CLI::ParseError& e)
    {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try
    {
        if (report->parsed())
        {
            return cmd_report(inputs, opt);
        }
        if (config.empty() && scenario.empty())
        {
            std::cerr << "one of --config or --scenario is required\n";
            return kExitConfig;
        }
        const std::string path = config.empty() ? find_scenario(scenario) : config;
        const Scenario sc = load_scenario(path, seed);
        if (solve->parsed())
        {
            return cmd_solve(sc, opt);
        }
        if (simulate->parsed())
        {
            return cmd_simulate(sc, parse_target(target), opt);
        }
        return cmd_verify(sc, opt);
    }
    catch (const ConfigError& e)
    {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    }
    catch (const std::exception& e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}
