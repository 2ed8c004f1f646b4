#include "bbone/fixedpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

namespace bbone
{
    namespace
    {
        constexpr double kInf = std::numeric_limits<double>::infinity();

        // ψ(x_i, ·) with the Lévy measure resolved once per node.
        struct NodeMech
        {
            double alpha = 0.0;
            double beta = 0.0;
            std::vector<WeightedAtom> atoms;

            double psi(double lam) const
            {
                if (lam < 0.0)
                {
                    if (lam < -1e-12 * std::max(1.0, std::abs(lam)))
                    {
                        throw std::domain_error("psi: lambda < 0");
                    }
                    lam = 0.0;
                }
                double v = -alpha * lam + beta * lam * lam;
                for (const auto& a : atoms)
                {
                    const double s = lam * a.z;
                    v += a.weight * (std::expm1(-s) + s);
                }
                return v;
            }

            double psi_prime(double lam) const
            {
                lam = std::max(lam, 0.0);
                double v = -alpha + 2.0 * beta * lam;
                for (const auto& a : atoms)
                {
                    v += a.weight * a.z * -std::expm1(-lam * a.z);
                }
                return v;
            }
        };

        std::vector<NodeMech> resolve(const BranchingMechanism& mech, const std::vector<double>& xs)
        {
            std::vector<NodeMech> out(xs.size());
            for (std::size_t i = 0; i < xs.size(); ++i)
            {
                const Point x = point1(xs[i]);
                out[i].alpha = mech.alpha(x);
                out[i].beta = mech.beta(x);
                out[i].atoms = mech.pi.at(x);
            }
            return out;
        }

        struct Component
        {
            std::vector<double> init;
            bool absorbed = false;
            double bl = 0.0;
            double br = 0.0;
            double lo = 0.0;
            std::vector<double> hi;
        };

        using ForceFn = std::function<double(std::size_t c, std::size_t i, const double* v)>;

        // Triangular system u_c' = L u_c + F_c(u_0, …, u_c) on a shared grid.
        struct System
        {
            std::vector<Component> comps;
            ForceFn F;
            ForceFn dF;
            std::function<double(const StepKernel&)> defect;
        };

        using Trajectory = std::vector<std::vector<std::vector<double>>>;

        struct MarchResult
        {
            Trajectory values;
            SolveReport report;
        };

        bool is_free(bool bounded, std::size_t i, std::size_t n) { return !bounded || (i > 0 && i + 1 < n); }

        void apply_boundary(const Component& c, bool bounded, std::vector<double>& u)
        {
            if (!bounded)
            {
                return;
            }
            u.front() = c.absorbed ? c.bl : 0.0;
            u.back() = c.absorbed ? c.br : 0.0;
        }

        double clamp_value(const Component& c, std::size_t i, double y, bool& clamped, std::size_t& counter)
        {
            clamped = false;
            if (y < c.lo)
            {
                if (y < c.lo - 1e-12)
                {
                    ++counter;
                }
                clamped = true;
                return c.lo;
            }
            if (!c.hi.empty() && y > c.hi[i])
            {
                if (y > c.hi[i] + 1e-12)
                {
                    ++counter;
                }
                clamped = true;
                return c.hi[i];
            }
            return y;
        }

        MarchResult march(KernelFactory& kf, double T, const SolverConfig& cfg, const System& sys)
        {
            const auto& xs = kf.xs();
            const std::size_t n = xs.size();
            const std::size_t m = sys.comps.size();
            const bool bounded = kf.bounded();
            const std::size_t nt = cfg.nt;
            const double Delta = T / static_cast<double>(nt - 1);
            const int kmax = cfg.max_refinement;
            const std::uint64_t total = std::uint64_t{1} << kmax;

            MarchResult out;
            out.report.kernel_mode = kf.mode_name();
            out.values.assign(m, std::vector<std::vector<double>>(nt));
            std::vector<std::vector<double>> u(m);
            for (std::size_t c = 0; c < m; ++c)
            {
                u[c] = sys.comps[c].init;
                apply_boundary(sys.comps[c], bounded, u[c]);
                out.values[c][0] = u[c];
            }

            std::vector<double> vals(m);
            std::vector<std::vector<double>> tmp(m, std::vector<double>(n));
            std::vector<std::vector<double>> A(m);
            std::map<double, double> defects;
            std::vector<double> history;
            double max_abs = 1.0;

            for (std::size_t j = 1; j < nt; ++j)
            {
                std::uint64_t pos = 0;
                while (pos < total)
                {
                    double L = 0.0;
                    for (std::size_t i = 0; i < n; ++i)
                    {
                        if (!is_free(bounded, i, n))
                        {
                            continue;
                        }
                        for (std::size_t c = 0; c < m; ++c)
                        {
                            vals[c] = u[c][i];
                        }
                        for (std::size_t c = 0; c < m; ++c)
                        {
                            L = std::max(L, std::abs(sys.dF(c, i, vals.data())));
                        }
                    }
                    int k = 0;
                    while (Delta * std::ldexp(1.0, -k) * L * 0.5 > cfg.step_control)
                    {
                        ++k;
                        if (k > kmax)
                        {
                            throw NumericalError("solver: stiffness exceeds the refinement limit (sup|dF| = " +
                                                 std::to_string(L) + ")");
                        }
                    }
                    if (pos > 0)
                    {
                        k = std::max(k, kmax - std::countr_zero(pos));
                    }
                    const double delta = Delta * std::ldexp(1.0, -k);
                    const StepKernel& K = kf.get(delta);
                    if (sys.defect)
                    {
                        auto it = defects.find(delta);
                        if (it == defects.end())
                        {
                            it = defects.emplace(delta, sys.defect(K)).first;
                        }
                        out.report.w_defect += it->second;
                    }

                    for (std::size_t i = 0; i < n; ++i)
                    {
                        const bool free = is_free(bounded, i, n);
                        for (std::size_t c = 0; c < m; ++c)
                        {
                            vals[c] = u[c][i];
                        }
                        for (std::size_t c = 0; c < m; ++c)
                        {
                            tmp[c][i] = u[c][i] + (free ? 0.5 * delta * sys.F(c, i, vals.data()) : 0.0);
                        }
                    }
                    for (std::size_t c = 0; c < m; ++c)
                    {
                        K.apply(tmp[c], A[c]);
                        if (bounded && sys.comps[c].absorbed)
                        {
                            for (std::size_t i = 1; i + 1 < n; ++i)
                            {
                                A[c][i] += K.flux_l[i] * sys.comps[c].bl + K.flux_r[i] * sys.comps[c].br;
                            }
                        }
                    }

                    for (std::size_t i = 0; i < n; ++i)
                    {
                        if (!is_free(bounded, i, n))
                        {
                            continue;
                        }
                        for (std::size_t c = 0; c < m; ++c)
                        {
                            vals[c] = u[c][i];
                        }
                        for (std::size_t c = 0; c < m; ++c)
                        {
                            const Component& comp = sys.comps[c];
                            double x = vals[c];
                            bool done = false;
                            bool clamped = false;
                            history.clear();
                            for (std::size_t it = 1; it <= cfg.max_iterations; ++it)
                            {
                                vals[c] = x;
                                double y = A[c][i] + 0.5 * delta * sys.F(c, i, vals.data());
                                y = (1.0 - cfg.damping) * x + cfg.damping * y;
                                y = clamp_value(comp, i, y, clamped, out.report.clamp_count);
                                if (!std::isfinite(y))
                                {
                                    throw NumericalError("solver: non-finite iterate");
                                }
                                const double r = std::abs(y - x);
                                history.push_back(r);
                                x = y;
                                if (r <= cfg.tolerance * std::max(1.0, std::abs(y)))
                                {
                                    out.report.picard_residual = std::max(out.report.picard_residual, r);
                                    out.report.max_picard_iterations = std::max(out.report.max_picard_iterations, it);
                                    done = true;
                                    break;
                                }
                            }
                            if (!done)
                            {
                                std::ostringstream msg;
                                msg << "solver: Picard iteration did not converge; residual history:";
                                for (std::size_t q = history.size() > 8 ? history.size() - 8 : 0; q < history.size(); ++q)
                                {
                                    msg << ' ' << history[q];
                                }
                                throw NumericalError(msg.str());
                            }
                            if (clamped)
                            {
                                ++out.report.clamp_at_convergence;
                            }
                            vals[c] = x;
                            max_abs = std::max(max_abs, std::abs(x));
                        }
                        for (std::size_t c = 0; c < m; ++c)
                        {
                            u[c][i] = vals[c];
                        }
                    }
                    for (std::size_t c = 0; c < m; ++c)
                    {
                        apply_boundary(sys.comps[c], bounded, u[c]);
                    }
                    pos += std::uint64_t{1} << (kmax - k);
                    ++out.report.substeps;
                }
                for (std::size_t c = 0; c < m; ++c)
                {
                    out.values[c][j] = u[c];
                }
            }
            const double steps = static_cast<double>(out.report.substeps);
            out.report.tolerance = steps * (cfg.tolerance + 4e-16) * max_abs + out.report.w_defect;
            return out;
        }

        struct GlobalResult
        {
            Trajectory values;
            std::size_t iterations = 0;
            bool converged = false;
        };

        // Whole-horizon Picard iteration of the integral equations with the trapezoid rule in s.
        GlobalResult global_picard(KernelFactory& kf, double T, const SolverConfig& cfg, const System& sys, Trajectory start)
        {
            const auto& xs = kf.xs();
            const std::size_t n = xs.size();
            const std::size_t m = sys.comps.size();
            const bool bounded = kf.bounded();
            const std::size_t nt = cfg.global_nt;
            const double Delta = T / static_cast<double>(nt - 1);

            std::vector<const StepKernel*> K(nt, nullptr);
            for (std::size_t j = 1; j < nt; ++j)
            {
                K[j] = &kf.get(Delta * static_cast<double>(j));
            }
            Trajectory lin(m, std::vector<std::vector<double>>(nt));
            for (std::size_t c = 0; c < m; ++c)
            {
                std::vector<double> g = sys.comps[c].init;
                apply_boundary(sys.comps[c], bounded, g);
                lin[c][0] = g;
                for (std::size_t j = 1; j < nt; ++j)
                {
                    K[j]->apply(g, lin[c][j]);
                    if (bounded)
                    {
                        for (std::size_t i = 1; i + 1 < n; ++i)
                        {
                            if (sys.comps[c].absorbed)
                            {
                                lin[c][j][i] += K[j]->flux_l[i] * sys.comps[c].bl + K[j]->flux_r[i] * sys.comps[c].br;
                            }
                        }
                        apply_boundary(sys.comps[c], bounded, lin[c][j]);
                    }
                }
            }

            GlobalResult res;
            res.values = std::move(start);
            Trajectory G(m, std::vector<std::vector<double>>(nt, std::vector<double>(n, 0.0)));
            std::vector<double> vals(m);
            std::vector<double> buf;
            std::size_t dummy = 0;
            for (std::size_t iter = 1; iter <= cfg.global_max_iterations; ++iter)
            {
                for (std::size_t j = 0; j < nt; ++j)
                {
                    for (std::size_t i = 0; i < n; ++i)
                    {
                        if (!is_free(bounded, i, n))
                        {
                            continue;
                        }
                        for (std::size_t c = 0; c < m; ++c)
                        {
                            vals[c] = res.values[c][j][i];
                        }
                        for (std::size_t c = 0; c < m; ++c)
                        {
                            G[c][j][i] = sys.F(c, i, vals.data());
                        }
                    }
                }
                Trajectory next = lin;
                for (std::size_t c = 0; c < m; ++c)
                {
                    for (std::size_t j = 1; j < nt; ++j)
                    {
                        auto& row = next[c][j];
                        for (std::size_t i = 0; i < n; ++i)
                        {
                            if (is_free(bounded, i, n))
                            {
                                row[i] += 0.5 * Delta * G[c][j][i];
                            }
                        }
                        for (std::size_t q = 1; q <= j; ++q)
                        {
                            const double weight = q == j ? 0.5 * Delta : Delta;
                            K[q]->apply(G[c][j - q], buf);
                            for (std::size_t i = 0; i < n; ++i)
                            {
                                if (is_free(bounded, i, n))
                                {
                                    row[i] += weight * buf[i];
                                }
                            }
                        }
                        for (std::size_t i = 0; i < n; ++i)
                        {
                            bool clamped = false;
                            row[i] = clamp_value(sys.comps[c], i, row[i], clamped, dummy);
                        }
                    }
                }
                double change = 0.0;
                for (std::size_t c = 0; c < m; ++c)
                {
                    for (std::size_t j = 0; j < nt; ++j)
                    {
                        change = std::max(change, sup_distance(next[c][j], res.values[c][j]));
                    }
                }
                res.values = std::move(next);
                res.iterations = iter;
                if (!std::isfinite(change))
                {
                    break;
                }
                if (change < cfg.global_tolerance)
                {
                    res.converged = true;
                    break;
                }
            }
            return res;
        }

        bool grid_matches(const std::vector<double>& xs, const Domain& D)
        {
            const double h = xs[1] - xs[0];
            return std::abs(xs.front() - D.lo[0]) <= 1e-9 * h && std::abs(xs.back() - D.hi[0]) <= 1e-9 * h;
        }

        void check_space_only(const GridFunction& g, const char* name)
        {
            if (g.nt() != 1 || g.values.size() != 1 || g.values[0].size() != g.xs.size())
            {
                throw ConfigError(std::string(name) + " must be an x-only grid function");
            }
            for (double v : g.values[0])
            {
                if (!std::isfinite(v))
                {
                    throw ConfigError(std::string(name) + " has non-finite values");
                }
            }
        }

        void check_nonnegative(const GridFunction& g, const char* name)
        {
            for (double v : g.values[0])
            {
                if (v < 0.0)
                {
                    throw ConfigError(std::string(name) + " must be non-negative");
                }
            }
        }

        void check_same_grid(const GridFunction& a, const GridFunction& b)
        {
            if (a.xs.size() != b.xs.size() || sup_distance(a.xs, b.xs) > 1e-12 * std::max(1.0, std::abs(a.xs.back())))
            {
                throw ConfigError("grid functions must share the same space grid");
            }
        }

        KernelFactory make_factory(const DiffusionSpec& spec, const std::vector<double>& xs, bool bounded,
                                   const SolverConfig& cfg)
        {
            return KernelFactory(spec, xs, bounded, cfg.kernel, cfg.mc_samples, cfg.mc_dt, cfg.seed);
        }

        GridFunction to_grid(const std::vector<double>& xs, double T, std::size_t nt, std::vector<std::vector<double>> v)
        {
            GridFunction g;
            g.xs = xs;
            g.ts.resize(nt);
            for (std::size_t j = 0; j < nt; ++j)
            {
                g.ts[j] = T * static_cast<double>(j) / static_cast<double>(nt - 1);
            }
            g.values = std::move(v);
            return g;
        }

        // One-step defect of w under the unconditioned scheme with boundary value w.
        std::function<double(const StepKernel&)> w_defect(const std::vector<NodeMech>& nodes, const std::vector<double>& w,
                                                          bool bounded)
        {
            return [&nodes, &w, bounded](const StepKernel& K) {
                const std::size_t n = w.size();
                const double d = K.s;
                std::vector<double> tmp(n);
                for (std::size_t i = 0; i < n; ++i)
                {
                    tmp[i] = w[i] - (is_free(bounded, i, n) ? 0.5 * d * nodes[i].psi(w[i]) : 0.0);
                }
                std::vector<double> out;
                K.apply(tmp, out);
                double sup = 0.0;
                for (std::size_t i = 0; i < n; ++i)
                {
                    if (!is_free(bounded, i, n))
                    {
                        continue;
                    }
                    double v = out[i] - 0.5 * d * nodes[i].psi(w[i]);
                    if (bounded)
                    {
                        v += K.flux_l[i] * w.front() + K.flux_r[i] * w.back();
                    }
                    sup = std::max(sup, std::abs(v - w[i]));
                }
                return sup;
            };
        }

        struct Prepared
        {
            std::vector<double> xs;
            bool bounded = false;
            std::vector<NodeMech> nodes;
        };

        Prepared prepare(const BranchingMechanism& mech, const DiffusionSpec& spec, const Domain& D, const GridFunction& f,
                         double T, const SolverConfig& cfg)
        {
            cfg.validate();
            if (!(T > 0.0))
            {
                throw ConfigError("solver: T must be positive");
            }
            if (spec.dim != 1)
            {
                throw ConfigError("solver: the grid solver supports d = 1 only");
            }
            check_space_only(f, "f");
            Prepared p;
            p.xs = f.xs;
            p.bounded = !D.whole;
            if (p.bounded && !grid_matches(p.xs, D))
            {
                throw ConfigError("solver: grid must span the domain exactly");
            }
            p.nodes = resolve(mech, p.xs);
            return p;
        }

        Component u_component(const std::vector<double>& init)
        {
            Component c;
            c.init = init;
            return c;
        }

        // Builds the triangular systems shared by the marching solver and the global iteration.
        System system_u(const Prepared& p, const std::vector<double>& f, ExitVariant variant)
        {
            System s;
            Component c = u_component(f);
            if (p.bounded && variant == ExitVariant::Absorbed)
            {
                c.absorbed = true;
                c.bl = f.front();
                c.br = f.back();
            }
            s.comps = {c};
            const auto* nodes = &p.nodes;
            s.F = [nodes](std::size_t, std::size_t i, const double* v) { return -(*nodes)[i].psi(v[0]); };
            s.dF = [nodes](std::size_t, std::size_t i, const double* v) { return (*nodes)[i].psi_prime(v[0]); };
            return s;
        }

        System system_u_star(const Prepared& p, const std::vector<double>& w, const std::vector<double>& f)
        {
            System s;
            Component star = u_component(f);
            std::vector<double> fw(f.size());
            for (std::size_t i = 0; i < f.size(); ++i)
            {
                fw[i] = f[i] + w[i];
            }
            Component full = u_component(fw);
            full.absorbed = true;
            full.bl = w.front();
            full.br = w.back();
            s.comps = {star, full};
            const auto* nodes = &p.nodes;
            const auto* wp = &w;
            s.F = [nodes, wp](std::size_t c, std::size_t i, const double* v) {
                const auto& nm = (*nodes)[i];
                const double wi = (*wp)[i];
                return c == 0 ? -(nm.psi(v[0] + wi) - nm.psi(wi)) : -nm.psi(v[1]);
            };
            s.dF = [nodes, wp](std::size_t c, std::size_t i, const double* v) {
                const auto& nm = (*nodes)[i];
                return c == 0 ? nm.psi_prime(v[0] + (*wp)[i]) : nm.psi_prime(v[1]);
            };
            s.defect = w_defect(p.nodes, w, p.bounded);
            return s;
        }

        // Components (u*_f, y) with y = w e^{−v}.
        System system_v(const Prepared& p, const std::vector<double>& w, const std::vector<double>& f,
                        const std::vector<double>& h)
        {
            System s;
            Component star = u_component(f);
            std::vector<double> y0(f.size());
            for (std::size_t i = 0; i < f.size(); ++i)
            {
                y0[i] = w[i] * std::exp(-h[i]);
            }
            Component y = u_component(y0);
            y.hi = w;
            s.comps = {star, y};
            const auto* nodes = &p.nodes;
            const auto* wp = &w;
            s.F = [nodes, wp](std::size_t c, std::size_t i, const double* v) {
                const auto& nm = (*nodes)[i];
                const double wi = (*wp)[i];
                if (c == 0)
                {
                    return -(nm.psi(v[0] + wi) - nm.psi(wi));
                }
                return nm.psi(v[0] - v[1] + wi) - nm.psi(v[0] + wi);
            };
            s.dF = [nodes, wp](std::size_t c, std::size_t i, const double* v) {
                const auto& nm = (*nodes)[i];
                const double wi = (*wp)[i];
                return c == 0 ? nm.psi_prime(v[0] + wi) : nm.psi_prime(v[0] - v[1] + wi);
            };
            s.defect = w_defect(p.nodes, w, p.bounded);
            return s;
        }

        std::vector<std::vector<double>> linear_start(KernelFactory& kf, const Component& c, const SolverConfig& cfg,
                                                      double T)
        {
            const std::size_t nt = cfg.global_nt;
            const double Delta = T / static_cast<double>(nt - 1);
            std::vector<std::vector<double>> out(nt);
            std::vector<double> g = c.init;
            apply_boundary(c, kf.bounded(), g);
            out[0] = g;
            for (std::size_t j = 1; j < nt; ++j)
            {
                const StepKernel& K = kf.get(Delta * static_cast<double>(j));
                K.apply(g, out[j]);
                if (kf.bounded())
                {
                    for (std::size_t i = 1; i + 1 < g.size(); ++i)
                    {
                        if (c.absorbed)
                        {
                            out[j][i] += K.flux_l[i] * c.bl + K.flux_r[i] * c.br;
                        }
                    }
                    apply_boundary(c, true, out[j]);
                }
            }
            return out;
        }

        std::vector<std::vector<double>> constant_start(const std::vector<double>& v, std::size_t nt)
        {
            return std::vector<std::vector<double>>(nt, v);
        }

        double relative_change(const std::vector<double>& a, const std::vector<double>& b)
        {
            double r = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i)
            {
                r = std::max(r, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1e-300));
            }
            return r;
        }
    }

    void SolverConfig::validate() const
    {
        if (!(tolerance > 0.0) || max_iterations < 1)
        {
            throw ConfigError("SolverConfig: tolerance > 0 and max_iterations >= 1 required");
        }
        if (!(damping > 0.0 && damping <= 1.0))
        {
            throw ConfigError("SolverConfig: damping must lie in (0, 1]");
        }
        if (quadrature != "trapezoid")
        {
            throw ConfigError("SolverConfig: only the trapezoid rule is supported");
        }
        if (nt < 2 || global_nt < 2)
        {
            throw ConfigError("SolverConfig: need at least 2 time points");
        }
        if (!(step_control > 0.0 && step_control < 1.0) || max_refinement < 0 || max_refinement > 60)
        {
            throw ConfigError("SolverConfig: step_control in (0,1) and max_refinement in [0,60] required");
        }
        if (!(global_tolerance > 0.0) || global_max_iterations < 1)
        {
            throw ConfigError("SolverConfig: global tolerance > 0 and iterations >= 1 required");
        }
    }

    GridFunction constant_grid(const std::vector<double>& xs, double c)
    {
        return GridFunction::space_only(xs, std::vector<double>(xs.size(), c));
    }

    GridFunction sample_grid(const std::vector<double>& xs, const std::function<double(double)>& fn)
    {
        std::vector<double> v(xs.size());
        std::transform(xs.begin(), xs.end(), v.begin(), fn);
        return GridFunction::space_only(xs, v);
    }

    GridFunction resample(const GridFunction& g, const std::vector<double>& xs)
    {
        check_space_only(g, "resample input");
        return sample_grid(xs, [&g](double x) { return g.interp(x, 0); });
    }

    Solution solve_u(const BranchingMechanism& mech, const DiffusionSpec& spec, const GridFunction& f, double T,
                     const SolverConfig& config)
    {
        const Prepared p = prepare(mech, spec, spec.domain, f, T, config);
        check_nonnegative(f, "f");
        auto kf = make_factory(spec, p.xs, p.bounded, config);
        const System sys = system_u(p, f.values[0], ExitVariant::Killed);
        auto res = march(kf, T, config, sys);
        return Solution{to_grid(p.xs, T, config.nt, std::move(res.values[0])), res.report};
    }

    Solution solve_u_exit(const BranchingMechanism& mech, const DiffusionSpec& spec, const Domain& D, const GridFunction& f,
                          double T, const SolverConfig& config, ExitVariant variant)
    {
        if (D.whole)
        {
            throw ConfigError("solve_u_exit: D must be a bounded interval");
        }
        const Prepared p = prepare(mech, spec, D, f, T, config);
        check_nonnegative(f, "f");
        auto kf = make_factory(spec, p.xs, true, config);
        const System sys = system_u(p, f.values[0], variant);
        auto res = march(kf, T, config, sys);
        return Solution{to_grid(p.xs, T, config.nt, std::move(res.values[0])), res.report};
    }

    void WSolution::require_bounded() const
    {
        if (!diag.w_bounded)
        {
            throw AssumptionError("w is not bounded away from 0 and infinity: " + diag.message);
        }
    }

    WSolution solve_w(const BranchingMechanism& mech, const DiffusionSpec& spec, const std::vector<double>& xs,
                      const SolverConfig& config, const WLadder& ladder)
    {
        config.validate();
        if (ladder.theta.empty() || ladder.T.empty() || !(ladder.tolerance > 0.0) || !(ladder.dt > 0.0))
        {
            throw ConfigError("solve_w: empty ladder or non-positive tolerance");
        }
        const bool flat = mech.is_constant() && spec.constant_coefficients && spec.domain.whole;
        const std::vector<double> grid = flat ? uniform_nodes(-1.0, 1.0, 3) : xs;
        std::vector<double> thetas = ladder.theta;
        std::vector<double> Ts = ladder.T;
        std::sort(thetas.begin(), thetas.end());
        std::sort(Ts.begin(), Ts.end());
        for (double t : Ts)
        {
            if (std::abs(std::round(t / ladder.dt) * ladder.dt - t) > 1e-9 * t)
            {
                throw ConfigError("solve_w: T ladder must be multiples of the ladder step");
            }
        }

        WSolution out;
        auto& d = out.diag;
        std::vector<double> limit;
        while (true)
        {
            const double Tmax = Ts.back();
            SolverConfig cfg = config;
            cfg.nt = static_cast<std::size_t>(std::llround(Tmax / ladder.dt)) + 1;
            // values[θ index][T index]
            std::vector<std::vector<std::vector<double>>> vals;
            std::vector<std::vector<double>> theta_limits(Ts.size());
            std::size_t used = 0;
            bool theta_ok = false;
            while (true)
            {
                if (used == thetas.size())
                {
                    if (thetas.back() * 10.0 > ladder.theta_cap)
                    {
                        break;
                    }
                    thetas.push_back(thetas.back() * 10.0);
                    d.theta_extended = true;
                }
                const auto sol = solve_u(mech, spec, constant_grid(grid, thetas[used]), Tmax, cfg);
                std::vector<std::vector<double>> at_T;
                for (double t : Ts)
                {
                    at_T.push_back(sol.value.values[static_cast<std::size_t>(std::llround(t / ladder.dt))]);
                }
                vals.push_back(std::move(at_T));
                ++used;
                if (used >= 2)
                {
                    double change = 0.0;
                    for (std::size_t k = 0; k < Ts.size(); ++k)
                    {
                        change = std::max(change, relative_change(vals[used - 1][k], vals[used - 2][k]));
                    }
                    d.last_theta_change = change;
                    if (change < ladder.tolerance && used >= ladder.theta.size())
                    {
                        theta_ok = true;
                        break;
                    }
                }
            }
            for (std::size_t k = 0; k < Ts.size(); ++k)
            {
                theta_limits[k] = vals.back()[k];
            }
            double tchange = 0.0;
            if (Ts.size() >= 2)
            {
                tchange = relative_change(theta_limits[Ts.size() - 1], theta_limits[Ts.size() - 2]);
            }
            d.last_T_change = tchange;
            limit = theta_limits.back();
            d.theta_used.assign(thetas.begin(), thetas.begin() + static_cast<std::ptrdiff_t>(used));
            d.T_used = Ts;
            if (!theta_ok)
            {
                // u_θ(T) grows without bound in θ when ∫^∞ 1/ψ = ∞; take T → ∞ first for each θ instead.
                d.grey_fallback = true;
                auto at = [&](double theta, double Tk) {
                    SolverConfig c = config;
                    c.nt = static_cast<std::size_t>(std::llround(Tk / ladder.dt)) + 1;
                    return solve_u(mech, spec, constant_grid(grid, theta), Tk, c).value.values.back();
                };
                std::vector<double> prev_limit;
                d.converged = true;
                d.T_used.clear();
                d.theta_used.assign(ladder.theta.begin(), ladder.theta.end());
                std::sort(d.theta_used.begin(), d.theta_used.end());
                for (double theta : d.theta_used)
                {
                    double Tk = Ts.front();
                    std::vector<double> prev = at(theta, Tk);
                    bool ok = false;
                    while (Tk * 2.0 <= ladder.T_cap)
                    {
                        Tk *= 2.0;
                        auto cur = at(theta, Tk);
                        d.last_T_change = relative_change(cur, prev);
                        prev = std::move(cur);
                        if (d.last_T_change < ladder.tolerance)
                        {
                            ok = true;
                            break;
                        }
                    }
                    d.T_used.push_back(Tk);
                    d.T_extended = d.T_extended || Tk > ladder.T.back();
                    if (!ok)
                    {
                        d.converged = false;
                        d.message = "T limit at fixed theta did not converge";
                    }
                    if (!prev_limit.empty())
                    {
                        d.last_theta_change = relative_change(prev, prev_limit);
                    }
                    prev_limit = std::move(prev);
                }
                if (d.converged && !(d.last_theta_change < ladder.tolerance))
                {
                    d.converged = false;
                    d.message = "T-then-theta limits disagree across theta";
                }
                limit = prev_limit;
                break;
            }
            if (tchange < ladder.tolerance)
            {
                d.converged = true;
                break;
            }
            if (Ts.back() * 2.0 > ladder.T_cap)
            {
                d.converged = false;
                d.message = "T ladder did not converge";
                break;
            }
            Ts.push_back(Ts.back() * 2.0);
            d.T_extended = true;
        }

        std::vector<double> w(xs.size());
        if (flat)
        {
            std::fill(w.begin(), w.end(), limit[1]);
            d.root = largest_root(mech);
            d.root_gap = std::abs(limit[1] - d.root);
            std::fill(w.begin(), w.end(), d.root);
            if (d.root == 0.0)
            {
                d.converged = true;
                d.message = "w = 0: the mechanism is not supercritical";
            }
        }
        else
        {
            w = limit;
        }
        out.w = GridFunction::space_only(xs, w);
        d.w_min = *std::min_element(w.begin(), w.end());
        d.w_max = *std::max_element(w.begin(), w.end());
        const std::string limit_note = d.message.empty() ? "" : d.message + "; ";
        if (!(d.w_min > ladder.floor))
        {
            d.w_bounded = false;
            d.message = limit_note + "w -> 0 (min " + std::to_string(d.w_min) + ")";
        }
        else if (!(d.w_max < ladder.ceiling))
        {
            d.w_bounded = false;
            d.message = limit_note + "w -> infinity (max " + std::to_string(d.w_max) + ")";
        }
        else
        {
            d.w_bounded = d.converged;
        }
        return out;
    }

    Solution solve_u_star(const BranchingMechanism& mech, const DiffusionSpec& spec, const Domain& D, const GridFunction& w,
                          const GridFunction& f, double T, const SolverConfig& config)
    {
        const Prepared p = prepare(mech, spec, D, f, T, config);
        check_nonnegative(f, "f");
        check_space_only(w, "w");
        check_same_grid(f, w);
        auto kf = make_factory(spec, p.xs, p.bounded, config);
        const System sys = system_u_star(p, w.values[0], f.values[0]);
        auto res = march(kf, T, config, sys);
        double residual = 0.0;
        for (std::size_t j = 0; j < config.nt; ++j)
        {
            for (std::size_t i = 0; i < p.xs.size(); ++i)
            {
                residual = std::max(residual, std::abs(res.values[0][j][i] - (res.values[1][j][i] - w.values[0][i])));
            }
        }
        res.report.identity_residual = residual;
        res.report.identity_tolerance = 2.0 * res.report.tolerance;
        if (residual > res.report.identity_tolerance)
        {
            throw ConsistencyError("solve_u_star: conditioned identity residual " + std::to_string(residual) +
                                   " exceeds " + std::to_string(res.report.identity_tolerance));
        }
        return Solution{to_grid(p.xs, T, config.nt, std::move(res.values[0])), res.report};
    }

    VSolution solve_v(const BranchingMechanism& mech, const DiffusionSpec& spec, const Domain& D, const GridFunction& w,
                      const GridFunction& f, const GridFunction& h, double T, const SolverConfig& config)
    {
        const Prepared p = prepare(mech, spec, D, f, T, config);
        check_nonnegative(f, "f");
        check_space_only(h, "h");
        check_nonnegative(h, "h");
        check_space_only(w, "w");
        check_same_grid(f, w);
        check_same_grid(f, h);
        for (double v : w.values[0])
        {
            if (!(v > 0.0))
            {
                throw AssumptionError("solve_v: w must be positive on the grid");
            }
        }
        auto kf = make_factory(spec, p.xs, p.bounded, config);
        const System sys = system_v(p, w.values[0], f.values[0], h.values[0]);
        auto res = march(kf, T, config, sys);
        auto y = std::move(res.values[1]);
        for (auto& row : y)
        {
            for (std::size_t i = 0; i < row.size(); ++i)
            {
                row[i] /= w.values[0][i];
            }
        }
        res.report.suspect = res.report.clamp_at_convergence > 0;
        VSolution out;
        out.exp_neg_v = to_grid(p.xs, T, config.nt, std::move(y));
        out.u_star = to_grid(p.xs, T, config.nt, std::move(res.values[0]));
        out.report = res.report;
        return out;
    }

    double evaluate_H(const BranchingMechanism& mech, const SpatialField& w, double u_star_val, const Point& x, double lam)
    {
        if (u_star_val < 0.0)
        {
            throw std::domain_error("evaluate_H: u* must be non-negative");
        }
        const double wx = w(x);
        const double b = mech.beta(x);
        double v = backbone_rate(mech, w, x) * lam + b * lam * lam;
        for (const auto& a : mech.pi.at(x))
        {
            const double s = lam * a.z;
            v += a.weight * (std::expm1(-s) + s) * std::exp(-(wx + u_star_val) * a.z);
        }
        if (!std::isfinite(v))
        {
            throw ConfigError("evaluate_H: non-finite value");
        }
        return v;
    }

    double h_identity_residual(const BranchingMechanism& mech, const SpatialField& w, const std::vector<double>& xs,
                               const std::vector<double>& Ws, const std::vector<double>& u_stars)
    {
        double sup = 0.0;
        for (double xv : xs)
        {
            const Point x = point1(xv);
            const double wx = w(x);
            const double psi_w = psi(mech, x, wx);
            for (double W : Ws)
            {
                const double y = wx * std::exp(-W);
                for (double us : u_stars)
                {
                    const double lhs = evaluate_H(mech, w, us, x, -y) - phi(mech, w, x, us) * y - psi_w * std::exp(-W);
                    const double rhs = psi(mech, x, us - y + wx) - psi(mech, x, us + wx);
                    const double scale = std::max({1.0, std::abs(lhs), std::abs(rhs)});
                    sup = std::max(sup, std::abs(lhs - rhs) / scale);
                }
            }
        }
        return sup;
    }

    void PoissonizationReport::require() const
    {
        if (!pass)
        {
            std::ostringstream msg;
            msg << "Poissonization identity fails: |lhs-rhs| = " << lhs_rhs << ", |lhs-u| = " << lhs_third
                << ", |rhs-u| = " << rhs_third << ", tolerance " << tolerance;
            throw ConsistencyError(msg.str());
        }
    }

    PoissonizationReport check_poissonization(const BranchingMechanism& mech, const DiffusionSpec& spec, const Domain& D,
                                              const GridFunction& w, const GridFunction& f, const GridFunction& h, double T,
                                              const SolverConfig& config)
    {
        const Prepared p = prepare(mech, spec, D, f, T, config);
        check_nonnegative(f, "f");
        check_space_only(h, "h");
        check_nonnegative(h, "h");
        check_space_only(w, "w");
        check_same_grid(f, w);
        check_same_grid(f, h);
        const auto& wv = w.values[0];
        const auto& fv = f.values[0];
        const auto& hv = h.values[0];
        const std::size_t n = p.xs.size();
        std::vector<double> g(n);
        for (std::size_t i = 0; i < n; ++i)
        {
            g[i] = fv[i] + wv[i] * -std::expm1(-hv[i]);
        }
        const System left = system_v(p, wv, fv, hv);
        const System right = system_v(p, wv, g, std::vector<double>(n, 0.0));
        const System third = system_u(p, g, ExitVariant::Absorbed);

        // One system: (u*_f, y_{f,h}, u*_g, y_{g,0}, ũ_g with boundary value w).
        System sys;
        sys.comps = {left.comps[0], left.comps[1], right.comps[0], right.comps[1], third.comps[0]};
        sys.comps[4].absorbed = true;
        sys.comps[4].bl = wv.front();
        sys.comps[4].br = wv.back();
        sys.F = [&](std::size_t c, std::size_t i, const double* v) {
            if (c < 2)
            {
                return left.F(c, i, v);
            }
            if (c < 4)
            {
                return right.F(c - 2, i, v + 2);
            }
            return third.F(0, i, v + 4);
        };
        sys.dF = [&](std::size_t c, std::size_t i, const double* v) {
            if (c < 2)
            {
                return left.dF(c, i, v);
            }
            if (c < 4)
            {
                return right.dF(c - 2, i, v + 2);
            }
            return third.dF(0, i, v + 4);
        };
        sys.defect = w_defect(p.nodes, wv, p.bounded);
        auto kf = make_factory(spec, p.xs, p.bounded, config);
        auto res = march(kf, T, config, sys);

        const std::size_t nt = config.nt;
        std::vector<std::vector<double>> lhs(nt, std::vector<double>(n));
        std::vector<std::vector<double>> rhs(nt, std::vector<double>(n));
        PoissonizationReport rep;
        for (std::size_t j = 0; j < nt; ++j)
        {
            for (std::size_t i = 0; i < n; ++i)
            {
                lhs[j][i] = res.values[0][j][i] + wv[i] - res.values[1][j][i];
                rhs[j][i] = res.values[2][j][i] + wv[i] - res.values[3][j][i];
                const double u = res.values[4][j][i];
                rep.lhs_rhs = std::max(rep.lhs_rhs, std::abs(lhs[j][i] - rhs[j][i]));
                rep.lhs_third = std::max(rep.lhs_third, std::abs(lhs[j][i] - u));
                rep.rhs_third = std::max(rep.rhs_third, std::abs(rhs[j][i] - u));
            }
        }
        rep.lhs = to_grid(p.xs, T, nt, std::move(lhs));
        rep.rhs = to_grid(p.xs, T, nt, std::move(rhs));
        rep.third = to_grid(p.xs, T, nt, std::move(res.values[4]));
        rep.report = res.report;
        rep.tolerance = 3.0 * res.report.tolerance;
        rep.pass = std::max({rep.lhs_rhs, rep.lhs_third, rep.rhs_third}) <= rep.tolerance;
        return rep;
    }

    std::string to_string(Equation e)
    {
        switch (e)
        {
        case Equation::U:
            return "u";
        case Equation::UExitKilled:
            return "u_exit_killed";
        case Equation::UExitAbsorbed:
            return "u_exit_absorbed";
        case Equation::UStar:
            return "u_star";
        case Equation::V:
            return "v";
        }
        return "unknown";
    }

    UniquenessReport uniqueness_probe(Equation eq, const Problem& pr, const SolverConfig& config)
    {
        const bool exit_eq = eq == Equation::UExitKilled || eq == Equation::UExitAbsorbed;
        const Domain D = eq == Equation::U ? pr.spec.domain : pr.D;
        if (exit_eq && D.whole)
        {
            throw ConfigError("uniqueness_probe: exit equations need a bounded domain");
        }
        const Prepared p = prepare(pr.mech, pr.spec, D, pr.f, pr.T, config);
        auto kf = make_factory(pr.spec, p.xs, p.bounded, config);
        const std::size_t nt = config.global_nt;
        const std::size_t n = p.xs.size();
        System sys;
        Trajectory a;
        Trajectory b;
        switch (eq)
        {
        case Equation::U:
        case Equation::UExitKilled:
        case Equation::UExitAbsorbed:
            sys = system_u(p, pr.f.values[0], eq == Equation::UExitAbsorbed ? ExitVariant::Absorbed : ExitVariant::Killed);
            a = {constant_start(std::vector<double>(n, 0.0), nt)};
            b = {linear_start(kf, sys.comps[0], config, pr.T)};
            break;
        case Equation::UStar:
        {
            check_same_grid(pr.f, pr.w);
            sys = system_u_star(p, pr.w.values[0], pr.f.values[0]);
            sys.comps.resize(1);
            a = {constant_start(std::vector<double>(n, 0.0), nt)};
            b = {linear_start(kf, sys.comps[0], config, pr.T)};
            break;
        }
        case Equation::V:
        {
            check_same_grid(pr.f, pr.w);
            check_same_grid(pr.f, pr.h);
            sys = system_v(p, pr.w.values[0], pr.f.values[0], pr.h.values[0]);
            const auto ustar = linear_start(kf, sys.comps[0], config, pr.T);
            std::vector<double> low(n);
            for (std::size_t i = 0; i < n; ++i)
            {
                low[i] = pr.w.values[0][i] * std::exp(-pr.h.values[0][i]);
            }
            a = {ustar, constant_start(low, nt)};
            b = {ustar, constant_start(pr.w.values[0], nt)};
            break;
        }
        }
        const auto ra = global_picard(kf, pr.T, config, sys, a);
        const auto rb = global_picard(kf, pr.T, config, sys, b);
        UniquenessReport rep;
        rep.equation = to_string(eq);
        rep.iterations_a = ra.iterations;
        rep.iterations_b = rb.iterations;
        rep.converged = ra.converged && rb.converged;
        rep.tolerance = 2.0 * config.global_tolerance;
        const std::size_t last = sys.comps.size() - 1;
        for (std::size_t j = 0; j < nt; ++j)
        {
            rep.gap = std::max(rep.gap, sup_distance(ra.values[last][j], rb.values[last][j]));
        }
        rep.pass = rep.converged && rep.gap < rep.tolerance;
        return rep;
    }

    UniquenessReport uniqueness_probe_w(const BranchingMechanism& mech, const DiffusionSpec& spec,
                                        const std::vector<double>& xs, const SolverConfig& config, const WLadder& a,
                                        const WLadder& b)
    {
        const auto wa = solve_w(mech, spec, xs, config, a);
        const auto wb = solve_w(mech, spec, xs, config, b);
        UniquenessReport rep;
        rep.equation = "w";
        rep.iterations_a = wa.diag.theta_used.size();
        rep.iterations_b = wb.diag.theta_used.size();
        rep.converged = wa.diag.converged && wb.diag.converged;
        rep.gap = sup_distance(wa.w.values[0], wb.w.values[0]);
        rep.tolerance = 2.0 * std::max(a.tolerance, b.tolerance) * std::max(1.0, wa.diag.w_max);
        rep.pass = rep.converged && rep.gap < rep.tolerance;
        return rep;
    }
}
