#include <doctest.h>

#include "bbone/stats.hpp"

#include <json.hpp>

#include <cmath>

using namespace bbone;

namespace
{
    double logistic(double theta, double t, double beta = 1.0)
    {
        const double e = std::exp(t);
        return theta * e / (1.0 + beta * theta * (e - 1.0));
    }

    // u' = −ψ(u) by RK4, independent of the library's tabulation.
    double rk4_exponent(const std::function<double(double)>& psi_fn, double u0, double t, int m = 20000)
    {
        double u = u0;
        const double h = t / m;
        for (int i = 0; i < m; ++i)
        {
            const double k1 = -psi_fn(u);
            const double k2 = -psi_fn(u + 0.5 * h * k1);
            const double k3 = -psi_fn(u + 0.5 * h * k2);
            const double k4 = -psi_fn(u + h * k3);
            u += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0;
        }
        return u;
    }

    BackboneModel quadratic_model() { return make_backbone_model(quadratic_mechanism(1.0, 1.0), brownian(1, 0.5), 1.0); }
}

TEST_CASE("compare and equivalence_test: trivial inputs, symmetry, deterministic mismatch")
{
    const std::vector<double> zeros(100, 0.0);
    const auto r = equivalence_test("f=0", zeros, zeros);
    CHECK(r.pass);
    CHECK(r.a.mean == 1.0);
    CHECK(r.b.mean == 1.0);
    CHECK(equivalence_test("f=0 oracle", zeros, 1.0).pass);
    CHECK_THROWS_AS(equivalence_test("bad", zeros, 0.5), ConsistencyError);

    std::vector<double> a;
    std::vector<double> b;
    for (int i = 0; i < 200; ++i)
    {
        a.push_back(0.01 * (i % 17));
        b.push_back(0.013 * (i % 11));
    }
    const auto ab = equivalence_test("ab", a, b);
    const auto ba = equivalence_test("ba", b, a);
    CHECK(ab.z == -ba.z);
    CHECK(ab.combined_se == ba.combined_se);
    CHECK(ab.pass == (std::abs(ab.residual()) <= 3.0 * ab.combined_se));

    BiasBudget big;
    big.epsilon = 1.0;
    CHECK(compare("budget", Estimate{0.2, 0.01, 10}, Estimate{0.9, 0.0, 0}, 0.01, big).pass);
    CHECK_FALSE(compare("no budget", Estimate{0.2, 0.01, 10}, Estimate{0.9, 0.0, 0}, 0.01).pass);
}

TEST_CASE("chi_square_test: closed-form statistic and pooling")
{
    const auto r = chi_square_test({10, 20, 30}, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    CHECK(r.statistic == doctest::Approx(10.0));
    CHECK(r.dof == 2);
    // Survival of χ²₂ at 10 is e^{−5}.
    CHECK(r.p_value == doctest::Approx(std::exp(-5.0)).epsilon(1e-12));
    CHECK_FALSE(r.pass());

    const auto exact = chi_square_test({25, 25, 50}, {0.25, 0.25, 0.5});
    CHECK(exact.statistic == 0.0);
    CHECK(exact.p_value == doctest::Approx(1.0));

    // Cells 2..4 have expectations 2, 2 and 1; they are pooled into one cell of expectation 5.
    const auto pooled = chi_square_test({50, 45, 2, 2, 1}, {0.5, 0.45, 0.02, 0.02, 0.01});
    CHECK(pooled.cells == 3);
    CHECK(pooled.statistic == doctest::Approx(0.0));
}

TEST_CASE("level_n_exponent and decorated_laplace against closed forms")
{
    const auto quad = quadratic_mechanism(1.0, 1.0);
    const double inf = std::numeric_limits<double>::infinity();
    for (double theta : {0.5, 1.0, 2.0})
    {
        CHECK(level_n_exponent(quad, inf, theta, 1.0) == doctest::Approx(logistic(theta, 1.0)).epsilon(1e-10));
        // Level n: β becomes 1 + 1/n and the start is n(1 − e^{−θ/n}).
        const double n = 50.0;
        const double u0 = -n * std::expm1(-theta / n);
        CHECK(level_n_exponent(quad, n, theta, 1.0) == doctest::Approx(logistic(u0, 1.0, 1.0 + 1.0 / n)).epsilon(1e-10));
    }

    const auto model = quadratic_model();
    for (double t : {0.5, 1.0})
    {
        for (double theta : {0.5, 1.0})
        {
            const double exact = decorated_laplace(model, 1.0, theta, 0.0, t, DecoratedLevels{});
            CHECK(exact == doctest::Approx(std::exp(-logistic(theta, t))).epsilon(1e-9));
        }
        // Joint functional with h ≡ 1 is exp(−u_{f + w(1−e^{−h})}).
        const double joint = decorated_laplace(model, 1.0, 1.0, 1.0, t, DecoratedLevels{});
        CHECK(joint == doctest::Approx(std::exp(-logistic(1.0 + (1.0 - std::exp(-1.0)), t))).epsilon(1e-9));
    }

    // The ε surrogate is biased downward in the exponent: larger functional, shrinking with ε.
    DecoratedLevels coarse{1000, 100, 0.1};
    DecoratedLevels fine{1000, 100, 0.01};
    const auto bc = decorated_bias(model, 1.0, 1.0, 0.0, 1.0, coarse);
    const auto bf = decorated_bias(model, 1.0, 1.0, 0.0, 1.0, fine);
    CHECK(bc.epsilon > bf.epsilon);
    CHECK(bf.epsilon > 0.0);
    CHECK(bc.n == doctest::Approx(bf.n));

    // Stable atom π = 2δ₁: exact decoration recovers u' = −ψ(u).
    BranchingMechanism stable;
    stable.alpha = SpatialField::constant(1.0);
    stable.beta = SpatialField::constant(0.0);
    stable.pi = LevyMeasure::atoms({{1.0, SpatialField::constant(2.0)}});
    const auto sm = make_backbone_model(stable, brownian(1, 0.5), largest_root(stable));
    const auto psi_fn = [](double u) { return -u + 2.0 * (std::exp(-u) - 1.0 + u); };
    CHECK(decorated_laplace(sm, 1.0, 1.0, 0.0, 1.0, DecoratedLevels{}) ==
          doctest::Approx(std::exp(-rk4_exponent(psi_fn, 1.0, 1.0))).epsilon(1e-9));
}

TEST_CASE("conditional_tree_formula on a single straight backbone line")
{
    BackboneTree tree;
    tree.horizon = 1.0;
    TreeNode n;
    n.label = {1};
    n.path.times = {0.0, 1.0};
    n.path.points = {point1(0.0), point1(0.0)};
    tree.nodes.push_back(n);
    const auto model = quadratic_model();
    const double theta = 1.0;
    // u*' = −u* − u*², so ∫₀¹ 2u*(r) dr = 2 log(1 + θ(1 − e^{−1})).
    const auto u_star = [theta](const Point&, double r) {
        return theta * std::exp(-r) / (1.0 + theta * (1.0 - std::exp(-r)));
    };
    const double oracle = std::pow(1.0 + theta * (1.0 - std::exp(-1.0)), -2.0);
    CHECK(conditional_tree_formula(tree, model, u_star, 1.0, 1e-3) == doctest::Approx(oracle).epsilon(1e-6));
    CHECK(conditional_tree_construction(tree, model, theta, 1.0, DecoratedLevels{}, 1e-3) == doctest::Approx(oracle).epsilon(1e-6));
    CHECK(conditional_tree_construction(tree, model, theta, 1.0, DecoratedLevels{std::numeric_limits<double>::infinity(), 100, 0.01}, 1e-3) > oracle);

    std::vector<double> vals(50, oracle);
    CHECK(conditional_tree_test("flat", vals, oracle).pass);
}

TEST_CASE("poisson_field_test and extinction_test plumbing")
{
    std::vector<JointSample> s;
    for (int i = 0; i < 400; ++i)
    {
        s.push_back({0.0, static_cast<double>(i % 3), 0.0});
    }
    // E e^{−⟨h,Z⟩} over the {0,1,2} cycle.
    const double oracle = (1.0 + std::exp(-1.0) + std::exp(-2.0)) / 3.0;
    const auto pf = poisson_field_test("cycle", s, oracle);
    CHECK(pf.joint.a.mean == doctest::Approx(oracle).epsilon(1e-3));
    CHECK(pf.joint.pass);
    CHECK_FALSE(pf.conditional.pass);

    std::vector<CountPath> paths(1000);
    for (std::size_t i = 0; i < paths.size(); ++i)
    {
        const double v = i % 4 == 0 ? 1.0 : 0.0;
        paths[i].extinct_by = {v * (i % 8 == 0 ? 1.0 : 0.0), v, v};
    }
    const auto ext = extinction_test("ladder", paths, {1.0, 5.0, 10.0}, 0.25);
    CHECK(ext.stabilizing);
    CHECK_FALSE(ext.report.inconclusive);
    CHECK(ext.report.pass);
    CHECK(ext.by_horizon[0].mean == doctest::Approx(0.125));

    std::vector<CountPath> growing(1000);
    for (std::size_t i = 0; i < growing.size(); ++i)
    {
        growing[i].extinct_by = {0.0, i % 2 == 0 ? 1.0 : 0.0};
    }
    const auto g = extinction_test("growing", growing, {1.0, 2.0}, 0.5);
    CHECK(g.report.inconclusive);
}

TEST_CASE("report serialization")
{
    const std::vector<double> zeros(10, 0.0);
    const std::vector<FunctionalTestReport> reports{equivalence_test("t1", zeros, 1.0)};
    const auto j = nlohmann::json::parse(report_json(reports, "abc"));
    CHECK(j["scenario_hash"] == "abc");
    CHECK(j["pass"] == true);
    CHECK(j["reports"][0]["id"] == "t1");
    const auto csv = report_csv(reports, "abc");
    CHECK(csv.find("abc,t1,1,1,0,0,0,1") != std::string::npos);
    CHECK(report_long_csv(reports, "abc").find("abc,t1,pass,1") != std::string::npos);
}
