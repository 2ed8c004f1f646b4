#pragma once

#include "bbone/backbone.hpp"
#include "bbone/particle.hpp"
#include "bbone/types.hpp"

#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace bbone
{
    // Declared systematic errors of a comparison, by source.
    struct BiasBudget
    {
        double epsilon = 0.0;
        double n = 0.0;
        double dt = 0.0;
        double horizon = 0.0;
        // Certified fixed-point error carried into an oracle value.
        double solver = 0.0;

        double total() const { return epsilon + n + dt + horizon + solver; }
    };

    struct FunctionalTestReport
    {
        std::string id;
        Estimate a;
        Estimate b;
        // SE of A − B: the root-sum-square for independent sides, the paired SE otherwise.
        double combined_se = 0.0;
        double z = 0.0;
        double threshold = 3.0;
        BiasBudget bias;
        bool pass = false;
        bool inconclusive = false;
        std::string note;

        double residual() const { return a.mean - b.mean; }
        double tolerance() const { return threshold * combined_se + bias.total(); }
    };

    Estimate mean_estimate(const std::vector<double>& values);

    // pass ⇔ |A − B| ≤ threshold·se + bias. Throws ConsistencyError when se = 0 and the values differ beyond the bias.
    FunctionalTestReport compare(std::string id, const Estimate& a, const Estimate& b, double se, const BiasBudget& bias = {},
                                 double threshold = 3.0);

    // Ê e^{−⟨f,Δ_t⟩} against Ê e^{−⟨f,X_t⟩} from two independent run sets (inputs are the pairings ⟨f,·⟩).
    FunctionalTestReport equivalence_test(std::string id, const std::vector<double>& pairings_a, const std::vector<double>& pairings_b,
                                          const BiasBudget& bias = {}, double threshold = 3.0);
    // Same against a deterministic oracle value such as exp(−⟨u_f(·,t), μ⟩).
    FunctionalTestReport equivalence_test(std::string id, const std::vector<double>& pairings_a, double oracle,
                                          const BiasBudget& bias = {}, double threshold = 3.0);

    // Per replication: ⟨f, Δ_t⟩, ⟨h, Z_t⟩ and ⟨w(1 − e^{−h}), Δ_t⟩.
    struct JointSample
    {
        double f_delta = 0.0;
        double h_z = 0.0;
        double wh_delta = 0.0;
    };

    struct PoissonFieldReport
    {
        // E e^{−⟨h,Z_t⟩−⟨f,Δ_t⟩} against the oracle.
        FunctionalTestReport joint;
        // The same against e^{−⟨f + w(1−e^{−h}), Δ_t⟩} on the same replications (paired).
        FunctionalTestReport conditional;
        bool pass() const { return joint.pass && conditional.pass; }
    };

    PoissonFieldReport poisson_field_test(std::string id, const std::vector<JointSample>& samples, double oracle,
                                          const BiasBudget& bias = {}, double threshold = 3.0);

    struct ExtinctionReport
    {
        FunctionalTestReport report;
        std::vector<double> horizons;
        std::vector<Estimate> by_horizon;
        // Mean increase of the extinct-by fraction between the last two horizons.
        double last_increment = 0.0;
        bool stabilizing = false;
    };

    // Extinct-by fractions along the horizon ladder against exp(−⟨w, μ⟩). A ladder whose last increment exceeds
    // `stab_factor` times the SE at T_max is flagged inconclusive rather than failed.
    ExtinctionReport extinction_test(std::string id, const std::vector<CountPath>& paths, const std::vector<double>& horizons,
                                     double oracle, const BiasBudget& bias = {}, double threshold = 3.0,
                                     double stab_factor = 0.5);

    // exp(−∫₀^t ⟨φ(·, u*_f(·, t−s)), Z_s⟩ ds) along the recorded backbone, by the trapezoid rule on each node's
    // alive interval with steps ≤ ds. u_star(x, r) is u*_f at x after time r.
    double conditional_tree_formula(const BackboneTree& tree, const BackboneModel& model,
                          const std::function<double(const Point&, double)>& u_star, double t, double ds);

    // Conditional replications e^{−⟨f, I^{N*}_t + I^{P*}_t⟩} over a frozen tree against the formula value.
    FunctionalTestReport conditional_tree_test(std::string id, const std::vector<double>& conditional_values, double formula,
                                                 const BiasBudget& bias = {}, double threshold = 3.0);

    struct ChiSquareResult
    {
        double statistic = 0.0;
        int dof = 0;
        double p_value = 1.0;
        std::size_t cells = 0;
        bool pass(double level = 0.01) const { return p_value > level; }
    };

    // Pearson goodness of fit; adjacent cells are pooled until each expectation reaches min_expected.
    ChiSquareResult chi_square_test(const std::vector<double>& counts, const std::vector<double>& probs, double min_expected = 5.0);

    // Laplace exponents of the approximations, for non-spatial mechanisms. An infinite n gives the
    // superprocess limit, ε = 0 the exact excursion immigration.
    //
    // Level-n system from Poisson(nx₀δ) particles: E e^{−θ⟨1,X_t⟩} = exp(−x₀·U), U' = −ψ(U) − α⁺U²/n,
    // U(0) = n(1 − e^{−θ/n}).
    double level_n_exponent(const BranchingMechanism& mech, double n, double theta, double t);

    struct DecoratedLevels
    {
        double n = std::numeric_limits<double>::infinity();
        double n_sub = std::numeric_limits<double>::infinity();
        double epsilon = 0.0;
    };

    // E exp(−θ_f⟨1,Δ_t⟩ − θ_h⟨1,Z_t⟩) of the decorated construction from μ = x₀δ with constant w, by the
    // backbone generating-function equation with immigration hazards from the subprocess exponents.
    double decorated_laplace(const BackboneModel& model, double x0, double theta_f, double theta_h, double t,
                             const DecoratedLevels& levels);

    // Bias of the construction at `levels` against the exact limit, split into the ε part and the n part.
    BiasBudget decorated_bias(const BackboneModel& model, double x0, double theta_f, double theta_h, double t,
                              const DecoratedLevels& levels);

    // Conditional value E[e^{−θ⟨1, I^{N*}_t + I^{P*}_t⟩} | Z] of the construction at `levels` (n unused) along a
    // recorded tree, for non-spatial mechanisms; the exact limit reduces to conditional_tree_formula with u*_θ.
    double conditional_tree_construction(const BackboneTree& tree, const BackboneModel& model, double theta, double t,
                               const DecoratedLevels& levels, double ds);

    std::string report_json(const std::vector<FunctionalTestReport>& reports, const std::string& scenario_hash);
    std::string report_csv(const std::vector<FunctionalTestReport>& reports, const std::string& scenario_hash);
    // Long format (test, quantity, value) for plotting.
    std::string report_long_csv(const std::vector<FunctionalTestReport>& reports, const std::string& scenario_hash);
    // Inverse of report_json. Throws ConfigError on malformed input.
    std::vector<FunctionalTestReport> reports_from_json(const std::string& text, std::string& scenario_hash);
}
