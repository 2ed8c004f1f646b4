#pragma once

#include "bbone/grid.hpp"
#include "bbone/kernel.hpp"
#include "bbone/mechanism.hpp"
#include "bbone/motion.hpp"

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace bbone
{
    struct SolverConfig
    {
        // Pointwise Picard tolerance, relative to max(1, |u|).
        double tolerance = 1e-12;
        std::size_t max_iterations = 200;
        // Relaxation u ← (1−d)u + d·T(u) applied to every Picard update.
        double damping = 1.0;
        std::string quadrature = "trapezoid";
        // Output time points on [0, T], including 0.
        std::size_t nt = 101;
        // Substeps δ are dyadic fractions of the output step with δ·sup|∂F/∂u|/2 ≤ step_control.
        double step_control = 0.25;
        int max_refinement = 40;
        KernelMode kernel = KernelMode::Auto;
        std::size_t mc_samples = 4000;
        double mc_dt = 1e-3;
        std::uint64_t seed = 1;
        // Global (whole-horizon) Picard iteration used by uniqueness_probe.
        double global_tolerance = 1e-10;
        std::size_t global_max_iterations = 500;
        std::size_t global_nt = 21;

        void validate() const;
    };

    enum class ExitVariant
    {
        Killed,
        Absorbed
    };

    struct SolveReport
    {
        std::string kernel_mode;
        double picard_residual = 0.0;
        std::size_t max_picard_iterations = 0;
        std::size_t substeps = 0;
        std::size_t clamp_count = 0;
        std::size_t clamp_at_convergence = 0;
        // Accumulated one-step defect of the supplied w under the unconditioned scheme.
        double w_defect = 0.0;
        // Certified error level: Picard error accumulated over substeps plus w_defect.
        double tolerance = 0.0;
        double identity_residual = std::numeric_limits<double>::quiet_NaN();
        double identity_tolerance = std::numeric_limits<double>::quiet_NaN();
        bool suspect = false;
    };

    struct Solution
    {
        GridFunction value;
        SolveReport report;
    };

    // f is x-only on a uniform grid. When spec.domain is bounded the motion is killed on leaving it,
    // and the grid must span it exactly.
    Solution solve_u(const BranchingMechanism& mech, const DiffusionSpec& spec, const GridFunction& f, double T,
                     const SolverConfig& config);

    Solution solve_u_exit(const BranchingMechanism& mech, const DiffusionSpec& spec, const Domain& D, const GridFunction& f,
                          double T, const SolverConfig& config, ExitVariant variant);

    struct WLadder
    {
        std::vector<double> theta{1.0, 10.0, 1e2, 1e3, 1e4};
        std::vector<double> T{1.0, 2.0, 4.0, 8.0};
        double tolerance = 1e-6;
        double theta_cap = 1e10;
        double T_cap = 256.0;
        double dt = 0.05;
        double floor = 1e-6;
        double ceiling = 1e6;
    };

    struct WDiagnostics
    {
        bool converged = false;
        bool w_bounded = false;
        double w_min = 0.0;
        double w_max = 0.0;
        std::vector<double> theta_used;
        std::vector<double> T_used;
        bool theta_extended = false;
        bool T_extended = false;
        double last_theta_change = 0.0;
        double last_T_change = 0.0;
        // The θ ladder diverged (∫^∞ 1/ψ = ∞ suspected) and the limits were taken T-first.
        bool grey_fallback = false;
        // Non-spatial mechanisms: largest root of ψ and its gap to the ladder limit.
        double root = std::numeric_limits<double>::quiet_NaN();
        double root_gap = std::numeric_limits<double>::quiet_NaN();
        std::string message;
    };

    struct WSolution
    {
        GridFunction w;
        WDiagnostics diag;

        void require_bounded() const;
        SpatialField field() const { return as_field(w); }
    };

    WSolution solve_w(const BranchingMechanism& mech, const DiffusionSpec& spec, const std::vector<double>& xs,
                      const SolverConfig& config, const WLadder& ladder = {});

    // u^{D,*}_f. Also solves ũ^D_{f+w} (boundary value w) and requires u* = ũ_{f+w} − w within
    // 2× the certified tolerance; throws ConsistencyError otherwise. D may be the whole space.
    Solution solve_u_star(const BranchingMechanism& mech, const DiffusionSpec& spec, const Domain& D, const GridFunction& w,
                          const GridFunction& f, double T, const SolverConfig& config);

    struct VSolution
    {
        GridFunction exp_neg_v;
        GridFunction u_star;
        SolveReport report;
    };

    VSolution solve_v(const BranchingMechanism& mech, const DiffusionSpec& spec, const Domain& D, const GridFunction& w,
                      const GridFunction& f, const GridFunction& h, double T, const SolverConfig& config);

    double evaluate_H(const BranchingMechanism& mech, const SpatialField& w, double u_star_val, const Point& x, double lam);

    // sup over the test points of |H(−we^{−W}) − φ(u*)we^{−W} − ψ(w)e^{−W} − [ψ*(−we^{−W}+u*) − ψ*(u*)]|.
    double h_identity_residual(const BranchingMechanism& mech, const SpatialField& w, const std::vector<double>& xs,
                               const std::vector<double>& Ws, const std::vector<double>& u_stars);

    struct PoissonizationReport
    {
        GridFunction lhs;
        GridFunction rhs;
        GridFunction third;
        double lhs_rhs = 0.0;
        double lhs_third = 0.0;
        double rhs_third = 0.0;
        double tolerance = 0.0;
        bool pass = false;
        SolveReport report;

        void require() const;
    };

    PoissonizationReport check_poissonization(const BranchingMechanism& mech, const DiffusionSpec& spec, const Domain& D,
                                              const GridFunction& w, const GridFunction& f, const GridFunction& h, double T,
                                              const SolverConfig& config);

    enum class Equation
    {
        U,
        UExitKilled,
        UExitAbsorbed,
        UStar,
        V
    };

    std::string to_string(Equation e);

    struct Problem
    {
        BranchingMechanism mech;
        DiffusionSpec spec;
        Domain D;
        GridFunction f;
        GridFunction h;
        GridFunction w;
        double T = 1.0;
    };

    struct UniquenessReport
    {
        std::string equation;
        std::size_t iterations_a = 0;
        std::size_t iterations_b = 0;
        bool converged = false;
        double gap = 0.0;
        double tolerance = 0.0;
        bool pass = false;
    };

    // Runs the whole-horizon Picard iteration from two starts: {0, P_t f} for the u-type equations
    // and {e^{−h}, 1} for e^{−v}.
    UniquenessReport uniqueness_probe(Equation eq, const Problem& p, const SolverConfig& config);
    UniquenessReport uniqueness_probe_w(const BranchingMechanism& mech, const DiffusionSpec& spec,
                                        const std::vector<double>& xs, const SolverConfig& config, const WLadder& a,
                                        const WLadder& b);

    GridFunction constant_grid(const std::vector<double>& xs, double c);
    GridFunction sample_grid(const std::vector<double>& xs, const std::function<double(double)>& fn);
    // Linear interpolation of an x-only grid function onto new nodes.
    GridFunction resample(const GridFunction& g, const std::vector<double>& xs);
}
