#include <doctest.h>

#include "bbone/motion.hpp"

#include <cmath>
#include <vector>

using namespace bbone;

namespace
{
    // w(x) = 1 + 0.3 cos x solves a w'' + b w' = ψ(x, w) for the mechanism below (a = 1/2, b = 0).
    double w_exact(double x) { return 1.0 + 0.3 * std::cos(x); }
    double lw_exact(double x) { return -0.5 * 0.3 * std::cos(x); }

    BranchingMechanism matched_mechanism()
    {
        auto alpha = SpatialField::make(
            [](const Point& x) {
                const double w = w_exact(x[0]);
                return (w * w - lw_exact(x[0])) / w;
            },
            0.0, 3.0);
        return BranchingMechanism{alpha, SpatialField::constant(1.0), LevyMeasure::none()};
    }

    SpatialField w_field()
    {
        return SpatialField::make([](const Point& x) { return w_exact(x[0]); }, 0.7, 1.3);
    }

    GridFunction w_grid(double lo, double hi, std::size_t n)
    {
        std::vector<double> xs(n);
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i)
        {
            xs[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
            v[i] = w_exact(xs[i]);
        }
        return GridFunction::space_only(xs, v);
    }

    // Crank–Nicolson for u_t = a u_xx on (-1,1), u(±1) = 0, u(x,0) = 1; returns u(0,t).
    double cn_survival(double a, double t, int nx, int nt)
    {
        const double h = 2.0 / (nx - 1);
        const double k = t / nt;
        const double r = a * k / (h * h);
        std::vector<double> u(static_cast<std::size_t>(nx), 1.0);
        u.front() = 0.0;
        u.back() = 0.0;
        const int m = nx - 2;
        std::vector<double> c(static_cast<std::size_t>(m));
        std::vector<double> d(static_cast<std::size_t>(m));
        for (int step = 0; step < nt; ++step)
        {
            std::vector<double> rhs(static_cast<std::size_t>(m));
            for (int i = 1; i <= m; ++i)
            {
                rhs[static_cast<std::size_t>(i - 1)] =
                    u[static_cast<std::size_t>(i)] +
                    0.5 * r * (u[static_cast<std::size_t>(i - 1)] - 2 * u[static_cast<std::size_t>(i)] +
                               u[static_cast<std::size_t>(i + 1)]);
            }
            // Thomas algorithm for (1 + r) u_i − r/2 (u_{i−1} + u_{i+1}) = rhs_i.
            const double diag = 1.0 + r;
            const double off = -0.5 * r;
            c[0] = off / diag;
            d[0] = rhs[0] / diag;
            for (int i = 1; i < m; ++i)
            {
                const auto ii = static_cast<std::size_t>(i);
                const double den = diag - off * c[ii - 1];
                c[ii] = off / den;
                d[ii] = (rhs[ii] - off * d[ii - 1]) / den;
            }
            std::vector<double> x(static_cast<std::size_t>(m));
            x[static_cast<std::size_t>(m - 1)] = d[static_cast<std::size_t>(m - 1)];
            for (int i = m - 2; i >= 0; --i)
            {
                const auto ii = static_cast<std::size_t>(i);
                x[ii] = d[ii] - c[ii] * x[ii + 1];
            }
            for (int i = 1; i <= m; ++i)
            {
                u[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i - 1)];
            }
        }
        return u[static_cast<std::size_t>(nx / 2)];
    }
}

TEST_CASE("simulate_path: Brownian increments have mean 0 and variance dt")
{
    const auto spec = brownian(1, 0.5);
    Stream rng(1, Tag::Motion, 0);
    const double dt = 1e-3;
    const auto path = simulate_path(spec, point1(0.0), 100.0, dt, rng);
    REQUIRE(path.points.size() == 100001);
    const double n = 100000.0;
    double s = 0.0;
    double s2 = 0.0;
    for (std::size_t k = 1; k < path.points.size(); ++k)
    {
        const double d = path.points[k][0] - path.points[k - 1][0];
        s += d;
        s2 += d * d;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::abs(mean) <= 4.0 * std::sqrt(dt / n));
    CHECK(std::abs(var - dt) <= 4.0 * dt * std::sqrt(2.0 / n));
}

TEST_CASE("simulate_path: exit point lies outside the interval")
{
    const auto D = Domain::interval(-1.0, 1.0);
    Stream rng(2, Tag::Motion, 0);
    for (int i = 0; i < 50; ++i)
    {
        const auto path = simulate_path(brownian(1, 0.5), point1(0.0), 100.0, 1e-3, rng, D);
        REQUIRE(path.exited);
        CHECK(std::abs(path.end()[0]) >= 1.0);
        for (std::size_t k = 0; k + 1 < path.points.size(); ++k)
        {
            CHECK(std::abs(path.points[k][0]) < 1.0);
        }
    }
}

TEST_CASE("simulate_path: mean exit time from (-1,1) is 1 - x^2")
{
    const auto D = Domain::interval(-1.0, 1.0);
    Stream rng(3, Tag::Motion, 0);
    const int n = 2000;
    double s = 0.0;
    double s2 = 0.0;
    for (int i = 0; i < n; ++i)
    {
        const auto path = simulate_path(brownian(1, 0.5), point1(0.0), 50.0, 1e-4, rng, D, false);
        REQUIRE(path.exited);
        s += path.exit_time;
        s2 += path.exit_time * path.exit_time;
    }
    const double mean = s / n;
    const double se = std::sqrt((s2 / n - mean * mean) / n);
    CHECK(std::abs(mean - 1.0) <= 3.0 * se);
}

TEST_CASE("simulate_path: enlarging the domain never shortens the exit time under shared noise")
{
    const auto D1 = Domain::interval(-0.5, 0.7);
    const auto D2 = Domain::interval(-1.0, 1.0);
    for (std::uint64_t r = 0; r < 200; ++r)
    {
        Stream a(4, Tag::Motion, r);
        Stream b(4, Tag::Motion, r);
        const auto p1 = simulate_path(brownian(1, 0.5), point1(0.1), 5.0, 1e-3, a, D1, false);
        const auto p2 = simulate_path(brownian(1, 0.5), point1(0.1), 5.0, 1e-3, b, D2, false);
        CHECK(p1.exit_time <= p2.exit_time);
    }
}

TEST_CASE("feynman_kac: trivial and closed-form cases")
{
    const auto spec = brownian(1, 0.5);
    Stream rng(5, Tag::Motion, 0);
    auto zero = [](const Point&) { return 0.0; };
    auto one = [](const Point&) { return 1.0; };
    const auto e1 = feynman_kac(spec, point1(0.0), 1.0, zero, one, Domain::whole_space(), 100, 1e-2, rng);
    CHECK(e1.mean == 1.0);
    CHECK(e1.se == 0.0);
    const double c = 0.7;
    const auto e2 =
        feynman_kac(spec, point1(0.0), 1.0, [c](const Point&) { return c; }, one, Domain::whole_space(), 100, 1e-2, rng);
    CHECK(e2.mean == doctest::Approx(std::exp(-c)).epsilon(1e-12));
    CHECK_THROWS_AS(feynman_kac(spec, point1(0.0), 1.0, zero, one, Domain::whole_space(), 0, 1e-2, rng),
                    std::domain_error);
}

TEST_CASE("feynman_kac: quadratic potential matches the Cameron-Martin formula")
{
    // E exp(−∫₀¹ B_s² ds) = cosh(√2)^{-1/2} for standard Brownian motion.
    const double oracle = 1.0 / std::sqrt(std::cosh(std::sqrt(2.0)));
    Stream rng(6, Tag::Motion, 0);
    const auto e = feynman_kac(
        brownian(1, 0.5), point1(0.0), 1.0, [](const Point& x) { return x[0] * x[0]; },
        [](const Point&) { return 1.0; }, Domain::whole_space(), 20000, 1e-3, rng);
    CHECK(std::abs(e.mean - oracle) <= 3.0 * e.se + 1e-3);
}

TEST_CASE("feynman_kac: survival in (-1,1) matches a Crank-Nicolson reference")
{
    const double oracle = cn_survival(0.5, 1.0, 801, 20000);
    Stream rng(7, Tag::Motion, 0);
    const auto e = feynman_kac(
        brownian(1, 0.5), point1(0.0), 1.0, [](const Point&) { return 0.0; }, [](const Point&) { return 1.0; },
        Domain::interval(-1.0, 1.0), 4000, 1e-4, rng, StopRule::Killed);
    CHECK(std::abs(e.mean - oracle) <= 3.0 * e.se);
}

TEST_CASE("w_transform: drift corrections")
{
    const auto spec = brownian(1, 0.5);
    const auto same = w_transform(spec, GridFunction::space_only({-1.0, 0.0, 1.0}, {2.0, 2.0, 2.0}),
                                  quadratic_mechanism(1.0, 1.0));
    CHECK(same.drift(point1(0.3))[0] == 0.0);
    std::vector<double> xs;
    std::vector<double> v;
    for (int i = 0; i <= 400; ++i)
    {
        xs.push_back(-2.0 + 0.01 * i);
        v.push_back(std::exp(xs.back()));
    }
    const auto tr = w_transform(spec, GridFunction::space_only(xs, v), quadratic_mechanism(1.0, 1.0));
    for (double x : {-1.5, -0.2, 0.0, 0.77, 1.9})
    {
        CHECK(tr.drift(point1(x))[0] == doctest::Approx(1.0).epsilon(1e-3));
    }
    CHECK_THROWS_AS(w_transform(spec, GridFunction::space_only({-1.0, 0.0, 1.0}, {1.0, 0.0, 1.0}),
                                quadratic_mechanism(1.0, 1.0)),
                    AssumptionError);
}

TEST_CASE("w_transform: change of measure agrees with the drift transform")
{
    const auto spec = brownian(1, 0.5);
    const auto mech = matched_mechanism();
    const auto wf = w_field();
    const auto tr = w_transform(spec, w_grid(-8.0, 8.0, 1601), mech);
    const double t = 1.0;
    const double dt = 1e-3;
    const int n = 20000;
    const double x0 = 0.4;
    const auto D = Domain::interval(-1.0, 1.5);

    struct Stats
    {
        double s[3] = {0, 0, 0};
        double s2[3] = {0, 0, 0};
    } direct, weighted;

    Stream r1(8, Tag::Motion, 1);
    Stream r2(8, Tag::Motion, 2);
    for (int i = 0; i < n; ++i)
    {
        const auto p = simulate_path(spec, point1(x0), t, dt, r1);
        double integral = 0.0;
        double occ = 0.0;
        bool exited = false;
        for (std::size_t k = 1; k < p.points.size(); ++k)
        {
            const double ya = p.points[k - 1][0];
            const double yb = p.points[k][0];
            const double ca = psi(mech, p.points[k - 1], wf(p.points[k - 1])) / wf(p.points[k - 1]);
            const double cb = psi(mech, p.points[k], wf(p.points[k])) / wf(p.points[k]);
            integral += 0.5 * (ca + cb) * dt;
            occ += (ya > 0.0 ? 0.5 : 0.0) * dt + (yb > 0.0 ? 0.5 : 0.0) * dt;
            exited = exited || !D.contains(p.points[k], 1);
        }
        const double density = wf(p.end()) / wf(point1(x0)) * std::exp(-integral);
        const double g[3] = {p.end()[0], occ, exited ? 1.0 : 0.0};
        for (int j = 0; j < 3; ++j)
        {
            weighted.s[j] += g[j] * density;
            weighted.s2[j] += g[j] * density * g[j] * density;
        }

        const auto q = simulate_path(tr, point1(x0), t, dt, r2);
        double occ2 = 0.0;
        bool exited2 = false;
        for (std::size_t k = 1; k < q.points.size(); ++k)
        {
            occ2 += (q.points[k - 1][0] > 0.0 ? 0.5 : 0.0) * dt + (q.points[k][0] > 0.0 ? 0.5 : 0.0) * dt;
            exited2 = exited2 || !D.contains(q.points[k], 1);
        }
        const double g2[3] = {q.end()[0], occ2, exited2 ? 1.0 : 0.0};
        for (int j = 0; j < 3; ++j)
        {
            direct.s[j] += g2[j];
            direct.s2[j] += g2[j] * g2[j];
        }
    }
    for (int j = 0; j < 3; ++j)
    {
        const double ma = weighted.s[j] / n;
        const double mb = direct.s[j] / n;
        const double va = (weighted.s2[j] / n - ma * ma) / n;
        const double vb = (direct.s2[j] / n - mb * mb) / n;
        CHECK(std::abs(ma - mb) <= 3.0 * std::sqrt(va + vb));
    }
}

TEST_CASE("martingale_check: trivial and spatial cases")
{
    const auto spec = brownian(1, 0.5);
    Stream rng(9, Tag::Motion, 0);
    const auto quad = martingale_check(spec, quadratic_mechanism(1.0, 1.0), SpatialField::constant(1.0),
                                       point1(0.0), 1.0, Domain::whole_space(), 100, 1e-2, rng);
    CHECK(quad.mean == doctest::Approx(1.0).epsilon(1e-14));
    const auto at0 = martingale_check(spec, matched_mechanism(), w_field(), point1(0.2), 0.0,
                                      Domain::interval(-1.0, 1.0), 10, 1e-2, rng);
    CHECK(at0.mean == w_exact(0.2));
    const auto sp = martingale_check(spec, matched_mechanism(), w_field(), point1(0.2), 1.0,
                                     Domain::interval(-1.0, 1.0), 20000, 1e-3, rng);
    CHECK(std::abs(sp.mean - w_exact(0.2)) <= 3.0 * sp.se + 2e-3);
}

TEST_CASE("diffusion spec: ellipticity and square root")
{
    Matrix a{};
    a[0][0] = 2.0;
    a[0][1] = a[1][0] = 0.5;
    a[1][1] = 1.0;
    const auto spec = make_diffusion(
        2, [a](const Point&) { return a; }, [](const Point&) { return Point{}; }, Domain::whole_space(), 0.5);
    CHECK_NOTHROW(check_ellipticity(spec, {Point{}}));
    const Matrix s = spec.sigma(Point{});
    for (std::size_t i = 0; i < 2; ++i)
    {
        for (std::size_t j = 0; j < 2; ++j)
        {
            double ss = 0.0;
            for (std::size_t k = 0; k < 2; ++k)
            {
                ss += s[i][k] * s[j][k];
            }
            CHECK(ss == doctest::Approx(2.0 * a[i][j]).epsilon(1e-12));
        }
    }
    const auto bad = make_diffusion(
        2, [a](const Point&) { return a; }, [](const Point&) { return Point{}; }, Domain::whole_space(), 1.5);
    CHECK_THROWS_AS(check_ellipticity(bad, {Point{}}), ConfigError);
}
