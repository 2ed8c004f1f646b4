#pragma once

#include "bbone/grid.hpp"
#include "bbone/mechanism.hpp"
#include "bbone/motion.hpp"
#include "bbone/particle.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace bbone
{
    // Everything the decorated process needs from (ψ, ξ, w), built once per scenario.
    struct BackboneModel
    {
        BranchingMechanism mech;
        BranchingMechanism mech_star;
        SpatialField w;
        DiffusionSpec motion;
        DiffusionSpec backbone_motion;
        BranchingRule backbone_rule;
        // Thinning bounds for the continuum rate 2β and the discontinuous rate m = ∫ y e^{−wy} π(dy).
        double beta_bound = 0.0;
        double jump_rate_bound = 0.0;
    };

    // w is an x-only grid function (as returned by solve_w); `samples` are the points where the thinning
    // bounds are evaluated (defaults to the grid nodes and midpoints), inflated by `margin`.
    BackboneModel make_backbone_model(const BranchingMechanism& mech, const DiffusionSpec& motion, const GridFunction& w,
                                      double margin = 1.1);
    BackboneModel make_backbone_model(const BranchingMechanism& mech, const DiffusionSpec& motion, double w_const);

    // Initial backbone: a given configuration, or the Poisson random field with intensity w·μ.
    struct BackboneInit
    {
        bool poissonized = true;
        InitialMeasure mu;
        AtomicMeasure particles;

        static BackboneInit poisson(InitialMeasure mu);
        static BackboneInit fixed(AtomicMeasure particles);
    };

    BackboneTree sample_backbone(const BackboneModel& model, const BackboneInit& init, double T, const Domain& D, double dt,
                                 const Stream& rng, bool* censored = nullptr);

    enum class ImmigrationKind
    {
        Continuum,
        Discontinuous,
        BranchPoint
    };

    struct ImmigrationEvent
    {
        ImmigrationKind kind;
        std::size_t node;
        double time;
        Point x;
        double mass;
        std::uint64_t key;
    };

    inline constexpr double kEpsilonMax = 1.0;

    // Poisson events along each backbone segment (b_u, min(d_u, τ^D_u, T)] at rate 2β(z_u(r))/ε.
    std::vector<ImmigrationEvent> immigrate_continuum(const BackboneTree& tree, const BackboneModel& model, double T,
                                                      double epsilon, const Stream& rng);
    // Poisson events at rate m(z_u(r)) with masses from y e^{−wy} π(dy) / m.
    std::vector<ImmigrationEvent> immigrate_discontinuous(const BackboneTree& tree, const BackboneModel& model, double T,
                                                          const Stream& rng);
    // Y_u ~ η_{N_u}(z_u(d_u)) at every branch point before τ^D_u and T; stores Y_u in the tree and
    // returns the events with Y_u > 0.
    std::vector<ImmigrationEvent> immigrate_branchpoint(BackboneTree& tree, const BackboneModel& model, double T,
                                                        const Stream& rng);

    // Evolves each immigrant as a level-n_sub ψ*-superprocess from mass·δ_x at its time and adds the alive
    // particles at each snapshot time to out[k] (weight 1/n_sub).
    struct SubprocessOptions
    {
        double n_sub = 100.0;
        double dt = 1e-3;
        Domain domain;
        std::size_t population_cap = 1'000'000;
    };
    bool evolve_immigrants(const BackboneModel& model, const BranchingRule& star_rule, const std::vector<ImmigrationEvent>& events,
                           const std::vector<double>& times, const SubprocessOptions& opt, const Stream& rng,
                           std::vector<WeightedMeasure>& out);

    struct DecoratedState
    {
        double t = 0.0;
        WeightedMeasure x_star;
        WeightedMeasure continuum;
        WeightedMeasure discontinuous;
        WeightedMeasure branchpoint;
        AtomicMeasure backbone;

        // ⟨f, Δ_t⟩ as the sum of the four component integrals.
        double integrate(const std::function<double(const Point&)>& f) const;
        double mass() const;
    };

    struct DeltaOptions
    {
        double horizon = 1.0;
        std::vector<double> times{1.0};
        Domain domain;
        double epsilon = 1e-2;
        double n = 1e3;
        double n_sub = 1e2;
        double dt = 1e-3;
        std::size_t population_cap = 1'000'000;
        bool keep_tree = false;
    };

    struct DecoratedRun
    {
        std::vector<DecoratedState> states;
        BackboneTree tree;
        std::size_t continuum_events = 0;
        std::size_t discontinuous_events = 0;
        std::size_t branchpoint_events = 0;
        bool censored = false;
    };

    // One replication of Δ = X* + I^{N*} + I^{P*} + I^η with its backbone Z. Component streams are keyed by
    // (seed, component tag, replication), so runs that differ only in D or ε share all others.
    DecoratedRun assemble_delta(const BackboneModel& model, const InitialMeasure& mu, const DeltaOptions& opt,
                                std::uint64_t seed, std::uint64_t replication);

    struct MonotonicityReport
    {
        std::size_t replications = 0;
        std::size_t violations = 0;
        std::size_t stabilized = 0;
        double worst = 0.0;
        bool pass() const { return violations == 0; }
    };

    // Runs every domain of a nested ladder with shared noise and checks that ⟨h, Z^{D_j}_t⟩ and ⟨f, Δ^{D_j}_t⟩
    // are nondecreasing in j.
    MonotonicityReport global_limit_probe(const BackboneModel& model, const InitialMeasure& mu, const std::vector<Domain>& ladder,
                                          const std::function<double(const Point&)>& f,
                                          const std::function<double(const Point&)>& h, const DeltaOptions& opt,
                                          std::uint64_t seed, std::size_t replications);
}
