#include "bbone/motion.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bbone
{
    namespace
    {
        struct Accumulator
        {
            double n = 0.0;
            double mean = 0.0;
            double m2 = 0.0;

            void add(double v)
            {
                n += 1.0;
                const double d = v - mean;
                mean += d / n;
                m2 += d * (v - mean);
            }

            Estimate result() const
            {
                Estimate e;
                e.mean = mean;
                e.n = static_cast<std::size_t>(n);
                e.se = n > 1.0 ? std::sqrt(m2 / (n - 1.0) / n) : 0.0;
                return e;
            }
        };

        bool finite_point(const Point& x, int dim)
        {
            for (int i = 0; i < dim; ++i)
            {
                if (!std::isfinite(x[static_cast<std::size_t>(i)]))
                {
                    return false;
                }
            }
            return true;
        }
    }

    Domain Domain::interval(double l, double r)
    {
        if (!(r > l))
        {
            throw ConfigError("Domain::interval: need r > l");
        }
        Domain d;
        d.whole = false;
        d.lo = Point{l, -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
        d.hi = Point{r, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
        return d;
    }

    Domain Domain::box(const Point& lo, const Point& hi)
    {
        for (std::size_t i = 0; i < kMaxDim; ++i)
        {
            if (!(hi[i] > lo[i]))
            {
                throw ConfigError("Domain::box: need hi > lo in every coordinate");
            }
        }
        Domain d;
        d.whole = false;
        d.lo = lo;
        d.hi = hi;
        return d;
    }

    bool Domain::contains(const Point& x, int dim) const
    {
        if (whole)
        {
            return true;
        }
        for (int i = 0; i < dim; ++i)
        {
            const auto k = static_cast<std::size_t>(i);
            if (!(x[k] > lo[k] && x[k] < hi[k]))
            {
                return false;
            }
        }
        return true;
    }

    bool Domain::inside(const Domain& other, int dim) const
    {
        if (other.whole)
        {
            return true;
        }
        if (whole)
        {
            return false;
        }
        for (int i = 0; i < dim; ++i)
        {
            const auto k = static_cast<std::size_t>(i);
            if (lo[k] < other.lo[k] || hi[k] > other.hi[k])
            {
                return false;
            }
        }
        return true;
    }

    namespace
    {
        // Cyclic Jacobi eigen-decomposition of a symmetric dim×dim block: m = V diag(vals) Vᵀ.
        void eigen_sym(const Matrix& m, int dim, Point& vals, Matrix& v)
        {
            const auto d = static_cast<std::size_t>(dim);
            Matrix a = m;
            v = Matrix{};
            for (std::size_t i = 0; i < d; ++i)
            {
                v[i][i] = 1.0;
            }
            for (int sweep = 0; sweep < 100; ++sweep)
            {
                double off = 0.0;
                for (std::size_t p = 0; p < d; ++p)
                {
                    for (std::size_t q = p + 1; q < d; ++q)
                    {
                        off += a[p][q] * a[p][q];
                    }
                }
                if (off < 1e-30)
                {
                    break;
                }
                for (std::size_t p = 0; p < d; ++p)
                {
                    for (std::size_t q = p + 1; q < d; ++q)
                    {
                        if (std::abs(a[p][q]) < 1e-300)
                        {
                            continue;
                        }
                        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                        const double t =
                            (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                        const double c = 1.0 / std::sqrt(t * t + 1.0);
                        const double s = t * c;
                        for (std::size_t k = 0; k < d; ++k)
                        {
                            const double akp = a[k][p];
                            const double akq = a[k][q];
                            a[k][p] = c * akp - s * akq;
                            a[k][q] = s * akp + c * akq;
                        }
                        for (std::size_t k = 0; k < d; ++k)
                        {
                            const double apk = a[p][k];
                            const double aqk = a[q][k];
                            a[p][k] = c * apk - s * aqk;
                            a[q][k] = s * apk + c * aqk;
                        }
                        for (std::size_t k = 0; k < d; ++k)
                        {
                            const double vkp = v[k][p];
                            const double vkq = v[k][q];
                            v[k][p] = c * vkp - s * vkq;
                            v[k][q] = s * vkp + c * vkq;
                        }
                    }
                }
            }
            vals = Point{};
            for (std::size_t i = 0; i < d; ++i)
            {
                vals[i] = a[i][i];
            }
        }
    }

    Matrix symmetric_sqrt(const Matrix& m, int dim)
    {
        const auto d = static_cast<std::size_t>(dim);
        Point vals{};
        Matrix v{};
        eigen_sym(m, dim, vals, v);
        for (std::size_t i = 0; i < d; ++i)
        {
            if (vals[i] < -1e-12)
            {
                throw ConfigError("diffusion matrix is not positive semi-definite");
            }
        }
        Matrix out{};
        for (std::size_t i = 0; i < d; ++i)
        {
            for (std::size_t j = 0; j < d; ++j)
            {
                double s = 0.0;
                for (std::size_t k = 0; k < d; ++k)
                {
                    s += v[i][k] * std::sqrt(std::max(vals[k], 0.0)) * v[j][k];
                }
                out[i][j] = s;
            }
        }
        return out;
    }

    Matrix DiffusionSpec::sigma(const Point& x) const
    {
        if (constant_coefficients)
        {
            return sigma_const;
        }
        Matrix two_a = a(x);
        for (auto& row : two_a)
        {
            for (auto& e : row)
            {
                e *= 2.0;
            }
        }
        return symmetric_sqrt(two_a, dim);
    }

    double DiffusionSpec::a11_const() const
    {
        if (!constant_coefficients)
        {
            throw std::logic_error("a11_const on a spatially varying diffusion");
        }
        return a(Point{})[0][0];
    }

    double DiffusionSpec::b1_const() const
    {
        if (!constant_coefficients)
        {
            throw std::logic_error("b1_const on a spatially varying diffusion");
        }
        return b_const[0];
    }

    void DiffusionSpec::finalize()
    {
        if (dim < 1 || dim > static_cast<int>(kMaxDim))
        {
            throw ConfigError("DiffusionSpec: dimension must be 1, 2 or 3");
        }
        if (constant_coefficients)
        {
            Matrix two_a = a(Point{});
            for (auto& row : two_a)
            {
                for (auto& e : row)
                {
                    e *= 2.0;
                }
            }
            sigma_const = symmetric_sqrt(two_a, dim);
            b_const = b(Point{});
        }
    }

    DiffusionSpec brownian(int dim, double a_scalar, double b_scalar, Domain domain)
    {
        if (!(a_scalar > 0.0))
        {
            throw ConfigError("motion.a must be > 0");
        }
        DiffusionSpec s;
        s.dim = dim;
        Matrix am{};
        Point bp{};
        for (int i = 0; i < dim; ++i)
        {
            am[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = a_scalar;
            bp[static_cast<std::size_t>(i)] = b_scalar;
        }
        s.a = [am](const Point&) { return am; };
        s.b = [bp](const Point&) { return bp; };
        s.constant_coefficients = true;
        s.domain = domain;
        s.gamma = a_scalar;
        s.finalize();
        return s;
    }

    DiffusionSpec make_diffusion(int dim, std::function<Matrix(const Point&)> a, std::function<Point(const Point&)> b,
                                 Domain domain, double gamma)
    {
        DiffusionSpec s;
        s.dim = dim;
        s.a = std::move(a);
        s.b = std::move(b);
        s.constant_coefficients = false;
        s.domain = domain;
        s.gamma = gamma;
        s.finalize();
        return s;
    }

    void check_ellipticity(const DiffusionSpec& spec, const std::vector<Point>& samples)
    {
        const auto d = static_cast<std::size_t>(spec.dim);
        for (const auto& x : samples)
        {
            const Matrix m = spec.a(x);
            for (std::size_t i = 0; i < d; ++i)
            {
                for (std::size_t j = 0; j < d; ++j)
                {
                    if (std::abs(m[i][j] - m[j][i]) > 1e-12 * (1.0 + std::abs(m[i][j])))
                    {
                        throw ConfigError("motion.a is not symmetric");
                    }
                }
            }
            Point vals{};
            Matrix v{};
            eigen_sym(m, spec.dim, vals, v);
            const double lmin = *std::min_element(vals.begin(), vals.begin() + spec.dim);
            if (lmin < spec.gamma - 1e-12)
            {
                std::ostringstream os;
                os << "uniform ellipticity fails: smallest eigenvalue of a(x) is " << lmin << " < gamma = "
                   << spec.gamma;
                throw ConfigError(os.str());
            }
        }
    }

    Point em_step(const DiffusionSpec& spec, const Point& x, double h, Stream& rng)
    {
        const auto d = static_cast<std::size_t>(spec.dim);
        const double sq = std::sqrt(h);
        Point z{};
        for (std::size_t i = 0; i < d; ++i)
        {
            z[i] = rng.normal();
        }
        Point out = x;
        if (spec.constant_coefficients)
        {
            for (std::size_t i = 0; i < d; ++i)
            {
                double noise = 0.0;
                for (std::size_t k = 0; k < d; ++k)
                {
                    noise += spec.sigma_const[i][k] * z[k];
                }
                out[i] += spec.b_const[i] * h + sq * noise;
            }
            return out;
        }
        const Point bx = spec.b(x);
        const Matrix s = spec.sigma(x);
        for (std::size_t i = 0; i < d; ++i)
        {
            double noise = 0.0;
            for (std::size_t k = 0; k < d; ++k)
            {
                noise += s[i][k] * z[k];
            }
            out[i] += bx[i] * h + sq * noise;
        }
        if (!finite_point(out, spec.dim))
        {
            throw NumericalError("em_step: non-finite state");
        }
        return out;
    }

    StoppedPath simulate_path(const DiffusionSpec& spec, const Point& x0, double horizon, double dt, Stream& rng,
                              const Domain& D, bool record)
    {
        if (!(dt > 0.0))
        {
            throw std::domain_error("simulate_path: dt must be > 0");
        }
        if (!spec.domain.contains(x0, spec.dim))
        {
            throw std::domain_error("simulate_path: x0 outside E");
        }
        StoppedPath path;
        path.dt = dt;
        path.times.push_back(0.0);
        path.points.push_back(x0);
        if (!D.contains(x0, spec.dim))
        {
            path.exited = true;
            path.exit_time = 0.0;
            path.alive = false;
            return path;
        }
        Point x = x0;
        double t = 0.0;
        const auto steps = static_cast<long>(std::ceil(horizon / dt - 1e-9));
        for (long k = 0; k < steps; ++k)
        {
            const double h = std::min(dt, horizon - t);
            try
            {
                x = em_step(spec, x, h, rng);
            }
            catch (const NumericalError&)
            {
                std::ostringstream os;
                os << "simulate_path: numerical blow-up at step " << k;
                throw NumericalError(os.str());
            }
            t = (k + 1 == steps) ? horizon : t + h;
            if (record)
            {
                path.times.push_back(t);
                path.points.push_back(x);
            }
            const bool out_d = !D.contains(x, spec.dim);
            const bool out_e = !spec.domain.contains(x, spec.dim);
            if (out_d || out_e)
            {
                if (!record)
                {
                    path.times.push_back(t);
                    path.points.push_back(x);
                }
                path.exited = true;
                path.exit_time = t;
                path.alive = false;
                return path;
            }
        }
        if (!record)
        {
            path.times.push_back(t);
            path.points.push_back(x);
        }
        return path;
    }

    Estimate feynman_kac(const DiffusionSpec& spec, const Point& x, double t,
                         const std::function<double(const Point&)>& rate,
                         const std::function<double(const Point&)>& payoff, const Domain& D, std::size_t n_samples,
                         double dt, Stream& rng, StopRule rule)
    {
        if (n_samples == 0)
        {
            throw std::domain_error("feynman_kac: n_samples must be > 0");
        }
        Accumulator acc;
        const auto steps = static_cast<long>(std::ceil(t / dt - 1e-9));
        for (std::size_t s = 0; s < n_samples; ++s)
        {
            Point y = x;
            double integral = 0.0;
            double r_prev = rate(y);
            bool exited = !D.contains(y, spec.dim);
            double time = 0.0;
            for (long k = 0; k < steps && !exited; ++k)
            {
                const double h = std::min(dt, t - time);
                y = em_step(spec, y, h, rng);
                time += h;
                if (!D.contains(y, spec.dim))
                {
                    exited = true;
                    // Rate is only charged while inside; use the left endpoint for the exit step.
                    integral += r_prev * h;
                    break;
                }
                const double r = rate(y);
                integral += 0.5 * (r_prev + r) * h;
                r_prev = r;
            }
            double value = 0.0;
            if (!(exited && rule == StopRule::Killed))
            {
                value = std::exp(-integral) * payoff(y);
            }
            acc.add(value);
        }
        return acc.result();
    }

    DiffusionSpec w_transform(const DiffusionSpec& spec, const GridFunction& w, const BranchingMechanism& mech,
                              double w_floor)
    {
        const double wmin = w.min_value();
        if (!(wmin > w_floor))
        {
            std::ostringstream os;
            os << "w_transform: w falls to " << wmin << " (floor " << w_floor << ")";
            throw AssumptionError(os.str());
        }
        (void)mech;
        if (w.max_value() - wmin <= 1e-14 * w.max_value())
        {
            return w_transform(spec, SpatialField::constant(wmin));
        }
        if (spec.dim != 1)
        {
            throw ConfigError("w_transform: a spatially varying w grid is only supported in d = 1");
        }
        GridFunction wg = w;
        const std::size_t j = w.nt() - 1;
        DiffusionSpec out = spec;
        auto base_b = spec.b;
        auto base_a = spec.a;
        out.b = [wg, j, base_b, base_a](const Point& x) {
            Point b = base_b(x);
            b[0] += 2.0 * base_a(x)[0][0] * wg.derivative(x[0], j) / wg.interp(x[0], j);
            return b;
        };
        out.constant_coefficients = false;
        out.finalize();
        return out;
    }

    DiffusionSpec w_transform(const DiffusionSpec& spec, const SpatialField& w_const)
    {
        if (!w_const.is_constant())
        {
            throw std::invalid_argument("w_transform: use the grid overload for spatially varying w");
        }
        if (!(w_const.constant_value() > 0.0))
        {
            throw AssumptionError("w_transform: w must be > 0");
        }
        return spec;
    }

    Estimate martingale_check(const DiffusionSpec& spec, const BranchingMechanism& mech, const SpatialField& w,
                              const Point& x, double t, const Domain& D, std::size_t n_samples, double dt, Stream& rng)
    {
        if (t <= 0.0)
        {
            Estimate e;
            e.mean = w(x);
            e.n = n_samples;
            return e;
        }
        auto chi = [&](const Point& y) {
            const double wy = w(y);
            return psi(mech, y, wy) / wy;
        };
        auto payoff = [&](const Point& y) { return w(y); };
        return feynman_kac(spec, x, t, chi, payoff, D, n_samples, dt, rng, StopRule::Stopped);
    }
}
