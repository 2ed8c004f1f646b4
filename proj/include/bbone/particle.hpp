#pragma once

#include "bbone/mechanism.hpp"
#include "bbone/motion.hpp"
#include "bbone/rng.hpp"
#include "bbone/types.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace bbone
{
    // Equal-weight point configuration. Branching-process runs use weight 1, rescaled
    // superprocess approximations weight 1/n. Exit measures also carry the exit times.
    struct WeightedMeasure
    {
        std::vector<Point> points;
        std::vector<double> times;
        double weight = 1.0;

        std::size_t size() const { return points.size(); }
        bool empty() const { return points.empty(); }
        double mass() const { return weight * static_cast<double>(points.size()); }
        double integrate(const std::function<double(const Point&)>& f) const;
    };

    using AtomicMeasure = WeightedMeasure;

    // Finite measure μ: point masses plus an optional bounded density on a 1-d interval.
    struct InitialMeasure
    {
        struct PointMass
        {
            Point x;
            double mass;
        };
        std::vector<PointMass> atoms;
        std::function<double(double)> density;
        double density_lo = 0.0;
        double density_hi = 0.0;
        double density_bound = 0.0;

        static InitialMeasure dirac(const Point& x, double mass);
        bool is_zero() const;
        double integrate(const std::function<double(const Point&)>& f) const;
    };

    // Poisson random measure with intensity scale·g(x)μ(dx); g defaults to 1 and must be
    // bounded by g_bound on the density support.
    AtomicMeasure poisson_field(const InitialMeasure& mu, double scale, Stream& rng,
                                const std::function<double(const Point&)>& g = {}, double g_bound = 1.0);

    struct TreeNode
    {
        std::vector<std::uint32_t> label;
        std::int64_t parent = -1;
        std::uint64_t key = 0;
        double birth = 0.0;
        // +inf when the particle is still alive at the horizon or stopped at an exit.
        double death = std::numeric_limits<double>::infinity();
        int offspring = 0;
        double branch_mass = 0.0;
        bool has_branch_mass = false;
        bool exited = false;
        double exit_time = std::numeric_limits<double>::infinity();
        // Trajectory on [birth, min(death, exit, horizon)], on the dt grid plus event times.
        StoppedPath path;

        double end_time(double horizon) const;
    };

    // Ulam–Harris labelled genealogy. Roots are labelled (1), (2), ...; the k-th child of u is uk.
    struct BackboneTree
    {
        std::vector<TreeNode> nodes;
        double horizon = 0.0;
        Domain domain;

        std::string label_string(std::size_t i) const;
        // Position of node i at time r ∈ [birth, end], linearly interpolated on its path.
        Point position(std::size_t i, double r) const;
        bool alive_at(std::size_t i, double t) const;
        AtomicMeasure population(double t) const;
        std::size_t count(double t) const;
        // Labels unique and of the parent-plus-index form, children born at the parent's
        // death at its death location, d ≥ b, trajectories covering exactly [b, end].
        bool check_consistency(std::string* why = nullptr) const;
    };

    // Rate q(x) and offspring law of a branching particle system.
    struct BranchingRule
    {
        std::function<double(const Point&)> rate;
        std::function<int(const Point&, Stream&)> offspring;
        double rate_bound = 0.0;
        // Constant rate: lifetimes are drawn directly without thinning.
        bool constant_rate = false;

        static BranchingRule constant(double rate, OffspringLaw law);
    };

    struct MbpOptions
    {
        double horizon = 1.0;
        double dt = 1e-3;
        std::vector<double> snapshot_times;
        // Lines of descent stop at their first exit from D; the exit atoms are recorded.
        Domain domain;
        bool record_tree = false;
        // Censoring guards: particles alive at a snapshot time, and total nodes.
        std::size_t population_cap = 1'000'000;
        std::uint64_t node_cap = 200'000'000;
    };

    struct MbpResult
    {
        BackboneTree tree;
        std::vector<WeightedMeasure> snapshots;
        WeightedMeasure exits;
        bool censored = false;
        std::uint64_t nodes = 0;
        std::uint64_t branch_events = 0;
    };

    // Depth-first simulation of the branching particle system started from ν. Every node owns streams
    // derived from its label, so runs that differ only in D or in the horizon share all noise along the
    // common part of each line of descent. Motion is exact for constant-coefficient motion in the
    // whole space without tree recording, and Euler–Maruyama with step dt otherwise.
    MbpResult simulate_mbp(const DiffusionSpec& motion, const BranchingRule& rule, const AtomicMeasure& nu,
                           const MbpOptions& opt, const Stream& rng);

    // Level-n rule of the rescaled particle approximation of the (P, ψ)-superprocess.
    BranchingRule superprocess_rule(const BranchingMechanism& mech, double n);

    // Initial Poisson field of intensity nμ, branching per superprocess_rule, snapshots weighted 1/n.
    MbpResult superprocess_approx(const BranchingMechanism& mech, const DiffusionSpec& motion, const InitialMeasure& mu,
                                  double n, const MbpOptions& opt, const Stream& rng);
    // Same, started from a given particle configuration.
    MbpResult superprocess_from(const BranchingRule& rule, const DiffusionSpec& motion, const AtomicMeasure& particles,
                                double n, const MbpOptions& opt, const Stream& rng);

    // Exit measure on ∂(D×[0,t)) read off a recorded run: for each line of descent the first point where
    // its path leaves D before t, else its position at t. The run must have been recorded on a domain
    // containing D (or the whole space) up to at least t.
    AtomicMeasure exit_measure(const BackboneTree& tree, const Domain& D, double t, int dim = 1);

    // Mean and SE of e^{−⟨f, X⟩} over replications.
    Estimate laplace_estimator(const std::vector<WeightedMeasure>& snapshots, const std::function<double(const Point&)>& f);
    Estimate laplace_estimator(const std::vector<double>& pairings);

    // Total-population chain of a non-spatial system, run until extinction, the last horizon, or the
    // first time the population reaches stop_count. After an early stop at τ with N particles, the
    // extinction probability by h is p(h − τ)^N with p from extinction_probability_by; `extinct_by`
    // holds these conditional probabilities (indicators when the chain ran to the end).
    struct CountPath
    {
        std::vector<double> extinct_by;
        bool stopped_early = false;
        double stop_time = 0.0;
        std::uint64_t final_count = 0;
        std::uint64_t events = 0;
    };
    CountPath simulate_counts(double rate, const OffspringLaw& law, std::uint64_t initial, const std::vector<double>& horizons,
                              std::uint64_t stop_count, Stream& rng);

    // P(a single particle's line is extinct by t) from the generating-function equation
    // s' = rate·(G(s) − s), s(0) = 0, integrated with RK4.
    double extinction_probability_by(double rate, const OffspringLaw& law, double t);
}
