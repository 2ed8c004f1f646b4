#include "bbone/scenario.hpp"

#include "bbone/backbone.hpp"
#include "bbone/expression.hpp"
#include "bbone/kernel.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#ifndef BBONE_SCENARIO_DIR
#define BBONE_SCENARIO_DIR "scenarios"
#endif

namespace bbone
{
    namespace
    {
        class Reader
        {
        public:
            explicit Reader(std::string source) : source_(std::move(source)) {}

            [[noreturn]] void fail(const YAML::Node& node, const std::string& key, const std::string& what) const
            {
                std::ostringstream os;
                os << source_;
                if (node.IsDefined() && node.Mark().line >= 0)
                {
                    os << ':' << node.Mark().line + 1 << ':' << node.Mark().column + 1;
                }
                os << ": " << key << ": " << what;
                throw ConfigError(os.str());
            }

            void allow(const YAML::Node& map, const std::string& where, std::initializer_list<const char*> keys) const
            {
                if (!map.IsDefined() || map.IsNull())
                {
                    return;
                }
                if (!map.IsMap())
                {
                    fail(map, where, "expected a mapping");
                }
                const std::set<std::string> ok(keys.begin(), keys.end());
                for (const auto& kv : map)
                {
                    const auto k = kv.first.as<std::string>();
                    if (!ok.count(k))
                    {
                        fail(kv.first, where + "." + k, "unknown key");
                    }
                }
            }

            double number(const YAML::Node& n, const std::string& key) const
            {
                if (!n.IsScalar())
                {
                    fail(n, key, "expected a number");
                }
                const auto s = n.Scalar();
                double v = 0.0;
                std::istringstream is(s);
                is.imbue(std::locale::classic());
                is >> v;
                if (is.fail() || !is.eof())
                {
                    fail(n, key, "expected a number, got '" + s + "'");
                }
                return v;
            }

            double number(const YAML::Node& map, const char* key, const std::string& where, double fallback) const
            {
                const auto n = map[key];
                return n.IsDefined() ? number(n, where + "." + key) : fallback;
            }

            double positive(const YAML::Node& map, const char* key, const std::string& where, double fallback) const
            {
                const double v = number(map, key, where, fallback);
                if (!(v > 0.0) || !std::isfinite(v))
                {
                    fail(map[key], where + "." + key, "must be positive");
                }
                return v;
            }

            std::size_t count(const YAML::Node& map, const char* key, const std::string& where, std::size_t fallback) const
            {
                const auto n = map[key];
                if (!n.IsDefined())
                {
                    return fallback;
                }
                const double v = number(n, where + "." + key);
                if (v < 0.0 || v != std::floor(v))
                {
                    fail(n, where + "." + key, "expected a nonnegative integer");
                }
                return static_cast<std::size_t>(v);
            }

            std::vector<double> numbers(const YAML::Node& map, const char* key, const std::string& where,
                                        std::vector<double> fallback) const
            {
                const auto n = map[key];
                if (!n.IsDefined())
                {
                    return fallback;
                }
                if (!n.IsSequence())
                {
                    fail(n, where + "." + key, "expected a list of numbers");
                }
                std::vector<double> out;
                for (const auto& e : n)
                {
                    out.push_back(number(e, where + "." + key));
                }
                return out;
            }

            FieldConfig field(const YAML::Node& n, const std::string& key) const
            {
                FieldConfig f;
                if (n.IsMap())
                {
                    allow(n, key, {"expr", "bounds"});
                    if (!n["expr"].IsDefined())
                    {
                        fail(n, key, "missing expr");
                    }
                    const auto b = n["bounds"];
                    if (b.IsDefined())
                    {
                        if (!b.IsSequence() || b.size() != 2)
                        {
                            fail(b, key + ".bounds", "expected [lo, hi]");
                        }
                        f.has_bounds = true;
                        f.lo = number(b[0], key + ".bounds");
                        f.hi = number(b[1], key + ".bounds");
                        if (!(f.lo <= f.hi))
                        {
                            fail(b, key + ".bounds", "lo must not exceed hi");
                        }
                    }
                }
                // YAML::Node assignment rebinds the referenced node, so the value node is chosen once.
                const YAML::Node expr = n.IsMap() ? n["expr"] : n;
                if (!expr.IsScalar())
                {
                    fail(expr, key, "expected a number or an expression in x");
                }
                f.text = expr.Scalar();
                std::istringstream is(f.text);
                is.imbue(std::locale::classic());
                double v = 0.0;
                is >> v;
                if (!is.fail() && is.eof())
                {
                    f.constant = true;
                    f.value = v;
                    return f;
                }
                try
                {
                    f.fn = parse_expression(f.text);
                }
                catch (const ConfigError& e)
                {
                    fail(expr, key, e.what());
                }
                f.constant = false;
                return f;
            }

            FieldConfig field(const YAML::Node& map, const char* key, const std::string& where, double fallback) const
            {
                const auto n = map[key];
                return n.IsDefined() ? field(n, where + "." + key) : FieldConfig::number(fallback);
            }

            Domain domain(const YAML::Node& n, const std::string& key) const
            {
                if (n.IsScalar() && n.Scalar() == "whole")
                {
                    return Domain::whole_space();
                }
                if (!n.IsSequence() || n.size() != 2)
                {
                    fail(n, key, "expected 'whole' or [lo, hi]");
                }
                const double lo = number(n[0], key);
                const double hi = number(n[1], key);
                if (!(lo < hi))
                {
                    fail(n, key, "empty interval");
                }
                return Domain::interval(lo, hi);
            }

        private:
            std::string source_;
        };

        void check_times(const Reader& rd, const YAML::Node& node, const std::string& key, const std::vector<double>& times,
                         double horizon)
        {
            if (!std::is_sorted(times.begin(), times.end()))
            {
                rd.fail(node, key, "times must be sorted");
            }
            for (double t : times)
            {
                if (t < 0.0 || t > horizon)
                {
                    rd.fail(node, key, "times must lie in [0, simulation.horizon]");
                }
            }
        }
    }

    FieldConfig FieldConfig::number(double v)
    {
        FieldConfig f;
        std::ostringstream os;
        os.imbue(std::locale::classic());
        os << std::setprecision(17) << v;
        f.text = os.str();
        f.constant = true;
        f.value = v;
        return f;
    }

    SpatialField FieldConfig::field(const std::vector<double>& samples) const
    {
        if (constant)
        {
            return SpatialField::constant(value);
        }
        double lo = this->lo;
        double hi = this->hi;
        if (!has_bounds)
        {
            lo = std::numeric_limits<double>::infinity();
            hi = -lo;
            for (double x : samples)
            {
                lo = std::min(lo, fn(x));
                hi = std::max(hi, fn(x));
            }
        }
        auto g = fn;
        return SpatialField::make([g](const Point& x) { return g(x[0]); }, lo, hi);
    }

    bool Scenario::any_tests() const
    {
        return equivalence.enabled || poisson_field.enabled || extinction.enabled || conditional_tree.enabled || probe.enabled;
    }

    std::string scenario_hash(const std::string& text, std::uint64_t seed)
    {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](unsigned char c) {
            h ^= c;
            h *= 0x100000001b3ULL;
        };
        for (unsigned char c : text)
        {
            mix(c);
        }
        for (int k = 0; k < 8; ++k)
        {
            mix(static_cast<unsigned char>(seed >> (8 * k)));
        }
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << h;
        return os.str();
    }

    Scenario parse_scenario(const std::string& text, const std::string& source_name, std::optional<std::uint64_t> seed)
    {
        Reader rd(source_name);
        YAML::Node root;
        try
        {
            root = YAML::Load(text);
        }
        catch (const YAML::Exception& e)
        {
            std::ostringstream os;
            os << source_name << ':' << e.mark.line + 1 << ':' << e.mark.column + 1 << ": " << e.msg;
            throw ConfigError(os.str());
        }
        if (!root.IsMap())
        {
            rd.fail(root, "scenario", "expected a mapping at the top level");
        }
        rd.allow(root, "scenario", {"name", "seed", "mechanism", "motion", "initial", "grid", "solver", "w", "simulation", "tests"});

        Scenario sc;
        sc.source = text;
        sc.name = root["name"].IsDefined() ? root["name"].as<std::string>() : std::string("scenario");
        if (seed)
        {
            sc.seed = *seed;
        }
        else
        {
            const auto s = root["seed"];
            if (!s.IsDefined())
            {
                rd.fail(root, "seed", "missing (the seed is mandatory)");
            }
            const double v = rd.number(s, "seed");
            if (v < 0.0 || v != std::floor(v) || v > 9.007199254740992e15)
            {
                rd.fail(s, "seed", "expected a nonnegative integer");
            }
            sc.seed = std::stoull(s.Scalar());
        }
        sc.hash = scenario_hash(text, sc.seed);

        const auto grid = root["grid"];
        rd.allow(grid, "grid", {"lo", "hi", "nodes"});
        const double glo = rd.number(grid, "lo", "grid", -4.0);
        const double ghi = rd.number(grid, "hi", "grid", 4.0);
        const std::size_t gn = rd.count(grid, "nodes", "grid", 81);
        if (!(glo < ghi) || gn < 3)
        {
            rd.fail(grid, "grid", "need lo < hi and at least 3 nodes");
        }
        sc.xs = uniform_nodes(glo, ghi, gn);

        const auto mech = root["mechanism"];
        if (!mech.IsDefined())
        {
            rd.fail(root, "mechanism", "missing");
        }
        rd.allow(mech, "mechanism", {"alpha", "beta", "pi"});
        sc.mech.alpha = rd.field(mech, "alpha", "mechanism", 0.0).field(sc.xs);
        sc.mech.beta = rd.field(mech, "beta", "mechanism", 0.0).field(sc.xs);
        sc.mech.pi = LevyMeasure::none();
        if (const auto pi = mech["pi"]; pi.IsDefined())
        {
            if (!pi.IsSequence())
            {
                rd.fail(pi, "mechanism.pi", "expected a list of atoms {z, c}");
            }
            std::vector<Atom> atoms;
            for (const auto& a : pi)
            {
                rd.allow(a, "mechanism.pi[]", {"z", "c"});
                const double z = rd.positive(a, "z", "mechanism.pi[]", 1.0);
                atoms.push_back(Atom{z, rd.field(a, "c", "mechanism.pi[]", 0.0).field(sc.xs)});
            }
            sc.mech.pi = LevyMeasure::atoms(std::move(atoms));
        }
        std::vector<Point> samples;
        for (double x : sc.xs)
        {
            samples.push_back(point1(x));
        }
        try
        {
            validate(sc.mech, samples);
        }
        catch (const ConfigError& e)
        {
            rd.fail(mech, "mechanism", e.what());
        }

        const auto motion = root["motion"];
        rd.allow(motion, "motion", {"a", "b"});
        const auto a = rd.field(motion, "a", "motion", 0.5);
        const auto b = rd.field(motion, "b", "motion", 0.0);
        if (a.constant && b.constant)
        {
            if (!(a.value > 0.0))
            {
                rd.fail(motion, "motion.a", "must be positive");
            }
            sc.motion = brownian(1, a.value, b.value);
        }
        else
        {
            double gamma = std::numeric_limits<double>::infinity();
            for (double x : sc.xs)
            {
                gamma = std::min(gamma, a.at(x));
            }
            if (!(gamma > 0.0))
            {
                rd.fail(motion, "motion.a", "must be positive on the grid");
            }
            sc.motion = make_diffusion(
                1,
                [a](const Point& x) {
                    Matrix m{};
                    m[0][0] = a.at(x[0]);
                    return m;
                },
                [b](const Point& x) { return point1(b.at(x[0])); }, Domain::whole_space(), gamma);
        }

        const auto init = root["initial"];
        rd.allow(init, "initial", {"atoms", "density"});
        if (const auto atoms = init["atoms"]; atoms.IsDefined())
        {
            if (!atoms.IsSequence())
            {
                rd.fail(atoms, "initial.atoms", "expected a list of {x, mass}");
            }
            for (const auto& at : atoms)
            {
                rd.allow(at, "initial.atoms[]", {"x", "mass"});
                const double m = rd.number(at, "mass", "initial.atoms[]", 1.0);
                if (m < 0.0)
                {
                    rd.fail(at, "initial.atoms[].mass", "must be nonnegative");
                }
                sc.mu.atoms.push_back({point1(rd.number(at, "x", "initial.atoms[]", 0.0)), m});
            }
        }
        if (const auto d = init["density"]; d.IsDefined())
        {
            rd.allow(d, "initial.density", {"expr", "lo", "hi", "bound"});
            const auto f = rd.field(d, "expr", "initial.density", 0.0);
            sc.mu.density_lo = rd.number(d, "lo", "initial.density", 0.0);
            sc.mu.density_hi = rd.number(d, "hi", "initial.density", 0.0);
            sc.mu.density_bound = rd.positive(d, "bound", "initial.density", 1.0);
            if (!(sc.mu.density_lo < sc.mu.density_hi))
            {
                rd.fail(d, "initial.density", "need lo < hi");
            }
            sc.mu.density = [f](double x) { return f.at(x); };
        }

        const auto solver = root["solver"];
        rd.allow(solver, "solver", {"nt", "step_control", "tolerance", "kernel", "max_iterations"});
        sc.solver.nt = rd.count(solver, "nt", "solver", sc.solver.nt);
        sc.solver.step_control = rd.positive(solver, "step_control", "solver", sc.solver.step_control);
        sc.solver.tolerance = rd.positive(solver, "tolerance", "solver", sc.solver.tolerance);
        sc.solver.max_iterations = rd.count(solver, "max_iterations", "solver", sc.solver.max_iterations);
        if (const auto k = solver["kernel"]; k.IsDefined())
        {
            const auto s = k.as<std::string>();
            if (s == "auto")
            {
                sc.solver.kernel = KernelMode::Auto;
            }
            else if (s == "analytic")
            {
                sc.solver.kernel = KernelMode::Analytic;
            }
            else if (s == "monte_carlo")
            {
                sc.solver.kernel = KernelMode::MonteCarlo;
            }
            else
            {
                rd.fail(k, "solver.kernel", "expected auto, analytic or monte_carlo");
            }
        }
        sc.solver.seed = sc.seed;
        try
        {
            sc.solver.validate();
        }
        catch (const ConfigError& e)
        {
            rd.fail(solver, "solver", e.what());
        }

        const auto w = root["w"];
        rd.allow(w, "w", {"factor", "theta", "T", "tolerance", "dt"});
        sc.w_factor = rd.positive(w, "factor", "w", 1.0);
        sc.w_ladder.theta = rd.numbers(w, "theta", "w", sc.w_ladder.theta);
        sc.w_ladder.T = rd.numbers(w, "T", "w", sc.w_ladder.T);
        sc.w_ladder.tolerance = rd.positive(w, "tolerance", "w", sc.w_ladder.tolerance);
        sc.w_ladder.dt = rd.positive(w, "dt", "w", sc.w_ladder.dt);

        const auto sim = root["simulation"];
        rd.allow(sim, "simulation", {"n", "n_sub", "epsilon", "dt", "horizon", "times", "replications", "population_cap", "domain"});
        auto& s = sc.sim;
        s.n = rd.positive(sim, "n", "simulation", s.n);
        s.n_sub = rd.positive(sim, "n_sub", "simulation", s.n_sub);
        s.epsilon = rd.positive(sim, "epsilon", "simulation", s.epsilon);
        if (s.epsilon > kEpsilonMax)
        {
            rd.fail(sim["epsilon"], "simulation.epsilon", "must lie in (0, 1]");
        }
        if (s.n < 1.0 || s.n_sub < 1.0)
        {
            rd.fail(sim, "simulation", "scaling levels n and n_sub must be >= 1");
        }
        s.dt = rd.positive(sim, "dt", "simulation", s.dt);
        s.horizon = rd.positive(sim, "horizon", "simulation", s.horizon);
        s.times = rd.numbers(sim, "times", "simulation", {0.0, 0.5 * s.horizon, s.horizon});
        check_times(rd, sim, "simulation.times", s.times, s.horizon);
        s.replications = rd.count(sim, "replications", "simulation", s.replications);
        s.population_cap = rd.count(sim, "population_cap", "simulation", s.population_cap);
        if (const auto d = sim["domain"]; d.IsDefined())
        {
            s.domain = rd.domain(d, "simulation.domain");
        }

        const auto tests = root["tests"];
        rd.allow(tests, "tests", {"equivalence", "poisson_field", "extinction", "conditional_tree", "probe"});
        if (const auto e = tests["equivalence"]; e.IsDefined())
        {
            rd.allow(e, "tests.equivalence", {"f", "times", "epsilon_refinement", "side_b"});
            auto& q = sc.equivalence;
            q.enabled = true;
            const auto fs = e["f"];
            if (!fs.IsSequence() || fs.size() == 0)
            {
                rd.fail(e, "tests.equivalence.f", "expected a nonempty list of test functions");
            }
            for (const auto& f : fs)
            {
                q.f.push_back(rd.field(f, "tests.equivalence.f"));
            }
            q.times = rd.numbers(e, "times", "tests.equivalence", {s.horizon});
            check_times(rd, e, "tests.equivalence.times", q.times, s.horizon);
            q.epsilon_refinement = rd.numbers(e, "epsilon_refinement", "tests.equivalence", {});
            for (double v : q.epsilon_refinement)
            {
                if (!(v > 0.0) || v > kEpsilonMax || v == s.epsilon)
                {
                    rd.fail(e, "tests.equivalence.epsilon_refinement", "values must lie in (0, 1] and differ from simulation.epsilon");
                }
            }
            if (e["side_b"].IsDefined())
            {
                q.side_b = e["side_b"].as<std::string>();
                if (q.side_b != "oracle" && q.side_b != "X")
                {
                    rd.fail(e["side_b"], "tests.equivalence.side_b", "expected oracle or X");
                }
            }
        }
        if (const auto p = tests["poisson_field"]; p.IsDefined())
        {
            rd.allow(p, "tests.poisson_field", {"pairs", "times"});
            auto& q = sc.poisson_field;
            q.enabled = true;
            const auto pairs = p["pairs"];
            if (!pairs.IsSequence() || pairs.size() == 0)
            {
                rd.fail(p, "tests.poisson_field.pairs", "expected a nonempty list of [f, h]");
            }
            for (const auto& pr : pairs)
            {
                if (!pr.IsSequence() || pr.size() != 2)
                {
                    rd.fail(pr, "tests.poisson_field.pairs", "expected [f, h]");
                }
                q.pairs.emplace_back(rd.field(pr[0], "tests.poisson_field.pairs.f"), rd.field(pr[1], "tests.poisson_field.pairs.h"));
            }
            q.times = rd.numbers(p, "times", "tests.poisson_field", s.times);
            check_times(rd, p, "tests.poisson_field.times", q.times, s.horizon);
        }
        if (const auto x = tests["extinction"]; x.IsDefined())
        {
            rd.allow(x, "tests.extinction", {"n", "replications", "horizons", "stop_mass"});
            auto& q = sc.extinction;
            q.enabled = true;
            q.n = rd.positive(x, "n", "tests.extinction", q.n);
            q.replications = rd.count(x, "replications", "tests.extinction", q.replications);
            q.horizons = rd.numbers(x, "horizons", "tests.extinction", q.horizons);
            if (q.horizons.empty() || !std::is_sorted(q.horizons.begin(), q.horizons.end()) || !(q.horizons.front() > 0.0))
            {
                rd.fail(x, "tests.extinction.horizons", "expected an increasing list of positive horizons");
            }
            q.stop_mass = rd.positive(x, "stop_mass", "tests.extinction", q.stop_mass);
        }
        if (const auto l = tests["conditional_tree"]; l.IsDefined())
        {
            rd.allow(l, "tests.conditional_tree", {"f", "t", "replications", "tree_replication"});
            auto& q = sc.conditional_tree;
            q.enabled = true;
            q.f = rd.field(l, "f", "tests.conditional_tree", 1.0);
            q.t = rd.positive(l, "t", "tests.conditional_tree", s.horizon);
            if (q.t > s.horizon)
            {
                rd.fail(l, "tests.conditional_tree.t", "must not exceed simulation.horizon");
            }
            q.replications = rd.count(l, "replications", "tests.conditional_tree", q.replications);
            q.tree_replication = rd.count(l, "tree_replication", "tests.conditional_tree", 0);
        }
        if (const auto pr = tests["probe"]; pr.IsDefined())
        {
            rd.allow(pr, "tests.probe", {"ladder", "f", "h", "replications", "n", "n_sub", "dt"});
            auto& q = sc.probe;
            q.enabled = true;
            const auto ladder = pr["ladder"];
            if (!ladder.IsSequence() || ladder.size() < 2)
            {
                rd.fail(pr, "tests.probe.ladder", "expected at least two nested intervals");
            }
            for (const auto& d : ladder)
            {
                q.ladder.push_back(rd.domain(d, "tests.probe.ladder"));
            }
            q.f = rd.field(pr, "f", "tests.probe", 1.0);
            q.h = rd.field(pr, "h", "tests.probe", 1.0);
            q.replications = rd.count(pr, "replications", "tests.probe", q.replications);
            q.n = rd.positive(pr, "n", "tests.probe", q.n);
            q.n_sub = rd.positive(pr, "n_sub", "tests.probe", q.n_sub);
            q.dt = rd.positive(pr, "dt", "tests.probe", q.dt);
        }
        return sc;
    }

    Scenario load_scenario(const std::string& path, std::optional<std::uint64_t> seed)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in)
        {
            throw ConfigError(path + ": cannot open");
        }
        std::ostringstream os;
        os << in.rdbuf();
        return parse_scenario(os.str(), path, seed);
    }

    std::string find_scenario(const std::string& name)
    {
        namespace fs = std::filesystem;
        for (const auto& dir : {fs::path("scenarios"), fs::path(BBONE_SCENARIO_DIR)})
        {
            const auto p = dir / (name + ".yaml");
            if (fs::exists(p))
            {
                return p.string();
            }
        }
        throw ConfigError("scenario '" + name + "' not found in ./scenarios or " BBONE_SCENARIO_DIR);
    }
}
