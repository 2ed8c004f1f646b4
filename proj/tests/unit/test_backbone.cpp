#include <doctest.h>

#include "bbone/backbone.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <map>

using namespace bbone;

namespace
{
    struct MeanSe
    {
        double mean;
        double se;
    };

    MeanSe mean_se(const std::vector<double>& v)
    {
        double m = 0.0;
        for (double x : v)
        {
            m += x;
        }
        m /= static_cast<double>(v.size());
        double s = 0.0;
        for (double x : v)
        {
            s += (x - m) * (x - m);
        }
        return {m, std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()))};
    }

    // Pearson χ² p-value of counts against probabilities, cells with expectation < 5 pooled.
    double chi_square_p(const std::vector<double>& counts, const std::vector<double>& probs)
    {
        double total = 0.0;
        for (double c : counts)
        {
            total += c;
        }
        double stat = 0.0;
        int cells = 0;
        double pc = 0.0;
        double pe = 0.0;
        for (std::size_t k = 0; k < counts.size(); ++k)
        {
            pc += counts[k];
            pe += probs[k] * total;
            if (pe >= 5.0)
            {
                stat += (pc - pe) * (pc - pe) / pe;
                ++cells;
                pc = pe = 0.0;
            }
        }
        if (pe > 0.0)
        {
            stat += (pc - pe) * (pc - pe) / pe;
            ++cells;
        }
        return cells > 1 ? boost::math::gamma_q(0.5 * (cells - 1), 0.5 * stat) : 1.0;
    }

    // One unbranching backbone particle at x0 over [0, T].
    BackboneTree single_particle(double T, double x0 = 0.0)
    {
        BackboneTree t;
        t.horizon = T;
        TreeNode n;
        n.label = {1};
        n.key = 42;
        n.path.times = {0.0, T};
        n.path.points = {point1(x0), point1(x0)};
        t.nodes.push_back(n);
        return t;
    }

    BranchingMechanism stable_atom(double alpha, double c, double z)
    {
        BranchingMechanism m;
        m.alpha = SpatialField::constant(alpha);
        m.beta = SpatialField::constant(0.0);
        m.pi = LevyMeasure::atoms({{z, SpatialField::constant(c)}});
        return m;
    }

    double bisect(const std::function<double(double)>& g, double lo, double hi)
    {
        for (int i = 0; i < 200; ++i)
        {
            const double mid = 0.5 * (lo + hi);
            (g(lo) * g(mid) <= 0.0 ? hi : lo) = mid;
        }
        return 0.5 * (lo + hi);
    }
}

TEST_CASE("sample_backbone: Poisson start and Yule mean in the quadratic case")
{
    const auto model = make_backbone_model(quadratic_mechanism(1.0, 1.0), brownian(1, 0.5), 1.0);
    CHECK(model.backbone_rule.constant_rate);
    CHECK(model.backbone_rule.rate_bound == doctest::Approx(1.0).epsilon(1e-12));
    const double x0 = 2.0;
    const auto init = BackboneInit::poisson(InitialMeasure::dirac(point1(0.0), x0));
    std::vector<double> c0;
    std::vector<double> c1;
    for (std::uint64_t r = 0; r < 10000; ++r)
    {
        const auto tree = sample_backbone(model, init, 1.0, Domain::whole_space(), 1e-2, Stream(1, Tag::Backbone, r));
        c0.push_back(static_cast<double>(tree.count(0.0)));
        c1.push_back(static_cast<double>(tree.count(1.0)));
        for (const auto& n : tree.nodes)
        {
            if (n.death <= 1.0)
            {
                CHECK(n.offspring == 2);
            }
        }
    }
    const auto m0 = mean_se(c0);
    const auto m1 = mean_se(c1);
    CHECK(std::abs(m0.mean - x0) < 3.0 * m0.se);
    CHECK(std::abs(m1.mean - x0 * std::exp(1.0)) < 3.0 * m1.se);

    InitialMeasure zero;
    for (std::uint64_t r = 0; r < 20; ++r)
    {
        CHECK(sample_backbone(model, BackboneInit::poisson(zero), 1.0, Domain::whole_space(), 1e-2, Stream(2, Tag::Backbone, r))
                  .nodes.empty());
    }
}

TEST_CASE("sample_backbone: offspring histogram matches the backbone pmf")
{
    // Quadratic plus a size-1 atom gives a pmf with mass on several n.
    BranchingMechanism mech = quadratic_mechanism(1.0, 0.5);
    mech.pi = LevyMeasure::atoms({{1.0, SpatialField::constant(1.5)}});
    const double w = largest_root(mech);
    const auto model = make_backbone_model(mech, brownian(1, 0.5), w);
    const auto pmf = offspring_pmf(mech, model.w, Point{});
    std::vector<double> counts(pmf.p.size(), 0.0);
    double events = 0.0;
    AtomicMeasure one;
    one.points = {point1(0.0)};
    for (std::uint64_t r = 0; events < 1e5; ++r)
    {
        const auto tree = sample_backbone(model, BackboneInit::fixed(one), 3.0, Domain::whole_space(), 0.1, Stream(3, Tag::Backbone, r));
        for (const auto& n : tree.nodes)
        {
            if (n.death <= 3.0)
            {
                counts[static_cast<std::size_t>(n.offspring)] += 1.0;
                events += 1.0;
            }
        }
    }
    CHECK(counts[0] == 0.0);
    CHECK(counts[1] == 0.0);
    CHECK(chi_square_p(counts, pmf.p) > 0.01);
}

TEST_CASE("immigrate_continuum: event counts and domain errors")
{
    const auto tree = single_particle(1.0);
    const auto quad = make_backbone_model(quadratic_mechanism(1.0, 1.0), brownian(1, 0.5), 1.0);
    std::vector<double> counts;
    for (std::uint64_t r = 0; r < 2000; ++r)
    {
        const auto ev = immigrate_continuum(tree, quad, 1.0, 0.01, Stream(4, Tag::Continuum, r));
        counts.push_back(static_cast<double>(ev.size()));
        for (const auto& e : ev)
        {
            CHECK(e.time > 0.0);
            CHECK(e.time <= 1.0);
            CHECK(e.mass == 0.01);
        }
    }
    const auto m = mean_se(counts);
    CHECK(std::abs(m.mean - 200.0) < 3.0 * m.se);

    const auto no_beta = make_backbone_model(stable_atom(1.0, 2.0, 1.0), brownian(1, 0.5), 1.5);
    CHECK(immigrate_continuum(tree, no_beta, 1.0, 0.01, Stream(5, Tag::Continuum, 0)).empty());
    CHECK_THROWS_AS(immigrate_continuum(tree, quad, 1.0, 0.0, Stream(5, Tag::Continuum, 0)), std::domain_error);
    CHECK_THROWS_AS(immigrate_continuum(tree, quad, 1.0, 2.0, Stream(5, Tag::Continuum, 0)), std::domain_error);
}

TEST_CASE("immigrate_discontinuous: rate and tilted mass law")
{
    const auto tree = single_particle(1.0);
    const auto quad = make_backbone_model(quadratic_mechanism(1.0, 1.0), brownian(1, 0.5), 1.0);
    CHECK(immigrate_discontinuous(tree, quad, 1.0, Stream(6, Tag::Discontinuous, 0)).empty());

    // π = 2δ₁, α = 1: w solves 2e^{−w} + w − 2 = 0.
    const auto mech = stable_atom(1.0, 2.0, 1.0);
    const double w = bisect([](double v) { return 2.0 * std::exp(-v) + v - 2.0; }, 0.5, 3.0);
    CHECK(w == doctest::Approx(1.5936).epsilon(1e-4));
    const auto model = make_backbone_model(mech, brownian(1, 0.5), w);
    const double m = 2.0 * std::exp(-w);
    CHECK(model.jump_rate_bound == doctest::Approx(m).epsilon(1e-12));
    std::vector<double> counts;
    for (std::uint64_t r = 0; r < 20000; ++r)
    {
        const auto ev = immigrate_discontinuous(tree, model, 1.0, Stream(7, Tag::Discontinuous, r));
        counts.push_back(static_cast<double>(ev.size()));
        for (const auto& e : ev)
        {
            CHECK(e.mass == 1.0);
        }
    }
    const auto ms = mean_se(counts);
    CHECK(std::abs(ms.mean - m) < 3.0 * ms.se);

    // Two atoms: masses drawn proportional to c·y·e^{−wy}.
    BranchingMechanism two = stable_atom(1.0, 1.0, 0.5);
    two.pi = LevyMeasure::atoms({{0.5, SpatialField::constant(1.0)}, {2.0, SpatialField::constant(0.5)}});
    const double w2 = largest_root(two);
    const auto model2 = make_backbone_model(two, brownian(1, 0.5), w2);
    const std::vector<double> weights{0.5 * std::exp(-0.5 * w2), 0.5 * 2.0 * std::exp(-2.0 * w2)};
    const std::vector<double> probs{weights[0] / (weights[0] + weights[1]), weights[1] / (weights[0] + weights[1])};
    std::vector<double> hist(2, 0.0);
    const auto long_tree = single_particle(1.0);
    for (std::uint64_t r = 0; r < 20000; ++r)
    {
        for (const auto& e : immigrate_discontinuous(long_tree, model2, 1.0, Stream(8, Tag::Discontinuous, r)))
        {
            hist[e.mass == 0.5 ? 0 : 1] += 1.0;
        }
    }
    CHECK(hist[0] + hist[1] > 1000.0);
    CHECK(chi_square_p(hist, probs) > 0.01);
}

TEST_CASE("immigrate_branchpoint: quadratic gives zero mass, a single atom gives its size")
{
    const auto quad = make_backbone_model(quadratic_mechanism(1.0, 1.0), brownian(1, 0.5), 1.0);
    AtomicMeasure three;
    three.points.assign(3, point1(0.0));
    const double z0 = 0.7;
    const auto mech = stable_atom(1.0, 3.0, z0);
    const auto atom = make_backbone_model(mech, brownian(1, 0.5), largest_root(mech));
    for (std::uint64_t r = 0; r < 50; ++r)
    {
        auto t1 = sample_backbone(quad, BackboneInit::fixed(three), 1.0, Domain::whole_space(), 1e-2, Stream(9, Tag::Backbone, r));
        CHECK(immigrate_branchpoint(t1, quad, 1.0, Stream(9, Tag::BranchPoint, r)).empty());
        for (const auto& n : t1.nodes)
        {
            CHECK(n.has_branch_mass == (n.death <= 1.0));
            CHECK(n.branch_mass == 0.0);
        }

        auto t2 = sample_backbone(atom, BackboneInit::fixed(three), 1.0, Domain::whole_space(), 1e-2, Stream(10, Tag::Backbone, r));
        const auto ev = immigrate_branchpoint(t2, atom, 1.0, Stream(10, Tag::BranchPoint, r));
        std::size_t branches = 0;
        for (const auto& n : t2.nodes)
        {
            branches += n.death <= 1.0 ? 1 : 0;
        }
        CHECK(ev.size() == branches);
        for (const auto& e : ev)
        {
            CHECK(e.mass == z0);
            CHECK(e.time == t2.nodes[e.node].death);
        }
    }
    auto lone = single_particle(1.0);
    CHECK(immigrate_branchpoint(lone, atom, 1.0, Stream(11, Tag::BranchPoint, 0)).empty());
}

TEST_CASE("assemble_delta: zero start, additivity, first moment")
{
    const auto model = make_backbone_model(quadratic_mechanism(1.0, 1.0), brownian(1, 0.5), 1.0);
    DeltaOptions opt;
    opt.horizon = 1.0;
    opt.times = {0.0, 0.5, 1.0};
    opt.n = 50.0;
    opt.n_sub = 20.0;
    opt.epsilon = 0.05;
    opt.dt = 1e-2;

    const auto empty = assemble_delta(model, InitialMeasure{}, opt, 1, 0);
    for (const auto& st : empty.states)
    {
        CHECK(st.mass() == 0.0);
        CHECK(st.backbone.empty());
    }

    const auto mu = InitialMeasure::dirac(point1(0.0), 1.0);
    const auto f = [](const Point& x) { return std::exp(-x[0] * x[0]); };
    std::vector<double> m1;
    for (std::uint64_t r = 0; r < 1500; ++r)
    {
        const auto run = assemble_delta(model, mu, opt, 2, r);
        REQUIRE_FALSE(run.censored);
        const auto& st = run.states[2];
        const double parts =
            st.x_star.integrate(f) + st.continuum.integrate(f) + st.discontinuous.integrate(f) + st.branchpoint.integrate(f);
        CHECK(st.integrate(f) == parts);
        CHECK(st.discontinuous.empty());
        CHECK(st.branchpoint.empty());
        CHECK(run.states[0].continuum.empty());
        m1.push_back(st.mass());
    }
    // Immigration at rate 2β/ε of mass ε with mean decay e^{α*s} keeps the first moment exact: E⟨1,Δ_t⟩ = e^t.
    const auto m = mean_se(m1);
    CHECK(std::abs(m.mean - std::exp(1.0)) < 3.0 * m.se);
}

TEST_CASE("immigration events lie inside the alive-in-D interval of their node")
{
    const auto model = make_backbone_model(quadratic_mechanism(1.0, 1.0), brownian(1, 0.5), 1.0);
    const Domain D = Domain::interval(-0.7, 0.7);
    AtomicMeasure two;
    two.points.assign(2, point1(0.0));
    for (std::uint64_t r = 0; r < 40; ++r)
    {
        const auto tree = sample_backbone(model, BackboneInit::fixed(two), 1.5, D, 1e-2, Stream(12, Tag::Backbone, r));
        for (const auto& e : immigrate_continuum(tree, model, 1.5, 0.1, Stream(12, Tag::Continuum, r)))
        {
            const auto& n = tree.nodes[e.node];
            CHECK(e.time > n.birth);
            CHECK(e.time <= n.end_time(1.5));
        }
    }
}

TEST_CASE("global_limit_probe: nested domains under shared noise")
{
    BranchingMechanism mech = quadratic_mechanism(1.0, 1.0);
    const auto model = make_backbone_model(mech, brownian(1, 0.5), 1.0);
    const auto mu = InitialMeasure::dirac(point1(0.0), 1.0);
    DeltaOptions opt;
    opt.horizon = 1.0;
    opt.times = {0.5, 1.0};
    opt.n = 30.0;
    opt.n_sub = 10.0;
    opt.epsilon = 0.1;
    opt.dt = 1e-2;
    const std::vector<Domain> ladder{Domain::interval(-1, 1), Domain::interval(-2, 2), Domain::interval(-4, 4)};
    const auto f = [](const Point& x) { return std::exp(-x[0] * x[0]); };
    const auto h = [](const Point& x) { return 1.0 / (1.0 + x[0] * x[0]); };
    const auto rep = global_limit_probe(model, mu, ladder, f, h, opt, 3, 40);
    CHECK(rep.pass());
    CHECK(rep.violations == 0);

    // A huge outer domain contains every path, so the last two rungs agree exactly.
    const std::vector<Domain> big{Domain::interval(-50, 50), Domain::interval(-100, 100)};
    const auto stable = global_limit_probe(model, mu, big, f, h, opt, 3, 10);
    CHECK(stable.stabilized == 10);

    // f supported in D₂ \ D₁ sees nothing in D₁.
    const auto ring = [](const Point& x) { return std::abs(x[0]) >= 1.0 && std::abs(x[0]) < 2.0 ? 1.0 : 0.0; };
    for (std::uint64_t r = 0; r < 10; ++r)
    {
        DeltaOptions o = opt;
        o.domain = ladder[0];
        const auto inner = assemble_delta(model, mu, o, 4, r);
        CHECK(inner.states[1].integrate(ring) == 0.0);
    }
    CHECK_THROWS_AS(global_limit_probe(model, mu, {ladder[1], ladder[0]}, f, h, opt, 3, 1), ConfigError);
}
