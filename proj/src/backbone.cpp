#include "bbone/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace bbone
{
    namespace
    {
        constexpr std::uint64_t kEventSalt[3] = {0x2545f4914f6cdd1dULL, 0x9fb21c651e98df25ULL, 0xc13fa9a902a6328fULL};

        std::uint64_t event_key(ImmigrationKind kind, std::uint64_t node_key, std::uint64_t index)
        {
            return hash_combine(hash_combine(node_key, kEventSalt[static_cast<int>(kind)]), index);
        }

        // m(x) = ∫ y e^{−w(x)y} π(x, dy), and the tilted atoms it normalizes.
        std::vector<WeightedAtom> tilted_atoms(const BackboneModel& model, const Point& x, double& total)
        {
            const double wx = model.w(x);
            auto atoms = model.mech.pi.at(x);
            total = 0.0;
            for (auto& a : atoms)
            {
                a.weight *= a.z * std::exp(-wx * a.z);
                total += a.weight;
            }
            return atoms;
        }

        BranchingRule make_rule(const BranchingMechanism& mech, const SpatialField& w, const std::vector<Point>& samples,
                                double margin)
        {
            if (mech.is_constant() && w.is_constant())
            {
                const Point x{};
                return BranchingRule::constant(backbone_rate(mech, w, x), offspring_pmf(mech, w, x));
            }
            double sup = 0.0;
            for (const auto& x : samples)
            {
                sup = std::max(sup, backbone_rate(mech, w, x));
            }
            BranchingRule r;
            r.rate = [mech, w](const Point& x) { return backbone_rate(mech, w, x); };
            r.offspring = [mech, w](const Point& x, Stream& rng) { return offspring_pmf(mech, w, x).sample(rng); };
            r.rate_bound = sup * margin;
            return r;
        }

        double jump_bound(const BranchingMechanism& mech, const SpatialField& w, const std::vector<Point>& samples,
                          double margin)
        {
            if (mech.pi.empty())
            {
                return 0.0;
            }
            if (mech.is_constant() && w.is_constant())
            {
                const double wx = w.constant_value();
                return mech.pi.integrate(Point{}, [wx](double z) { return z * std::exp(-wx * z); });
            }
            if (samples.empty())
            {
                // Declared bounds only: atoms with bounded weights against the smallest w.
                if (mech.pi.kind() != LevyMeasure::Kind::Atoms)
                {
                    throw ConfigError("make_backbone_model: spatial density Levy measures need a w grid");
                }
                double b = 0.0;
                for (const auto& a : mech.pi.atom_list())
                {
                    b += a.c.upper() * a.z * std::exp(-w.lower() * a.z);
                }
                return b;
            }
            double sup = 0.0;
            for (const auto& x : samples)
            {
                const double wx = w(x);
                sup = std::max(sup, mech.pi.integrate(x, [wx](double z) { return z * std::exp(-wx * z); }));
            }
            return sup * margin;
        }

        BackboneModel build(const BranchingMechanism& mech, const DiffusionSpec& motion, SpatialField w,
                            DiffusionSpec backbone_motion, const std::vector<Point>& samples, double margin)
        {
            BackboneModel m;
            m.mech = mech;
            m.w = std::move(w);
            m.mech_star = conditioned_mechanism(mech, m.w);
            m.motion = motion;
            m.backbone_motion = std::move(backbone_motion);
            m.backbone_rule = make_rule(mech, m.w, samples, margin);
            if (mech.beta.is_constant())
            {
                m.beta_bound = mech.beta.constant_value();
            }
            else if (std::isfinite(mech.beta.upper()))
            {
                m.beta_bound = mech.beta.upper();
            }
            else
            {
                double sup = 0.0;
                for (const auto& x : samples)
                {
                    sup = std::max(sup, mech.beta(x));
                }
                if (samples.empty())
                {
                    throw ConfigError("make_backbone_model: beta needs a finite declared upper bound");
                }
                m.beta_bound = sup * margin;
            }
            m.jump_rate_bound = jump_bound(mech, m.w, samples, margin);
            return m;
        }

        void check_horizon(const BackboneTree& tree, double T)
        {
            if (!(T >= 0.0) || T > tree.horizon)
            {
                throw ConfigError("immigration: T must lie in [0, tree horizon]");
            }
        }

        // Poisson times on (b, e] at rate rate(z(r)) ≤ bound; a negative rate stands for the constant rate bound.
        template <class Rate>
        std::vector<double> thinned_times(double b, double e, double bound, Rate&& rate, const BackboneTree& tree, std::size_t i,
                                          Stream& rng)
        {
            std::vector<double> out;
            if (!(bound > 0.0))
            {
                return out;
            }
            double r = b;
            while (true)
            {
                r += rng.exponential(bound);
                if (r > e)
                {
                    break;
                }
                const double q = rate(tree.position(i, r));
                if (q < 0.0)
                {
                    out.push_back(r);
                    continue;
                }
                if (q > bound * (1.0 + 1e-12))
                {
                    throw ConsistencyError("immigration: rate exceeds its thinning bound");
                }
                if (rng.uniform() * bound < q)
                {
                    out.push_back(r);
                }
            }
            return out;
        }
    }

    BackboneModel make_backbone_model(const BranchingMechanism& mech, const DiffusionSpec& motion, const GridFunction& w,
                                      double margin)
    {
        if (w.nx() < 2)
        {
            throw ConfigError("make_backbone_model: w grid needs at least two nodes");
        }
        std::vector<Point> samples;
        for (std::size_t i = 0; i < w.nx(); ++i)
        {
            samples.push_back(point1(w.xs[i]));
            if (i + 1 < w.nx())
            {
                samples.push_back(point1(0.5 * (w.xs[i] + w.xs[i + 1])));
            }
        }
        validate(mech, samples);
        const GridFunction last = GridFunction::space_only(w.xs, w.last());
        return build(mech, motion, as_field(last), w_transform(motion, last, mech), samples, margin);
    }

    BackboneModel make_backbone_model(const BranchingMechanism& mech, const DiffusionSpec& motion, double w_const)
    {
        if (!(w_const > 0.0) || !std::isfinite(w_const))
        {
            throw AssumptionError("make_backbone_model: w must be positive and finite");
        }
        const auto w = SpatialField::constant(w_const);
        return build(mech, motion, w, w_transform(motion, w), {}, 1.0);
    }

    BackboneInit BackboneInit::poisson(InitialMeasure mu)
    {
        BackboneInit b;
        b.poissonized = true;
        b.mu = std::move(mu);
        return b;
    }

    BackboneInit BackboneInit::fixed(AtomicMeasure particles)
    {
        BackboneInit b;
        b.poissonized = false;
        b.particles = std::move(particles);
        return b;
    }

    BackboneTree sample_backbone(const BackboneModel& model, const BackboneInit& init, double T, const Domain& D, double dt,
                                 const Stream& rng, bool* censored)
    {
        AtomicMeasure nu = init.particles;
        if (init.poissonized)
        {
            Stream s = rng.child(static_cast<std::uint64_t>(Tag::Init));
            const SpatialField& w = model.w;
            nu = poisson_field(init.mu, 1.0, s, [&w](const Point& x) { return w(x); }, w.upper());
        }
        MbpOptions opt;
        opt.horizon = T;
        opt.dt = dt;
        opt.domain = D;
        opt.record_tree = true;
        auto res = simulate_mbp(model.backbone_motion, model.backbone_rule, nu, opt, rng);
        if (censored != nullptr)
        {
            *censored = res.censored;
        }
        return std::move(res.tree);
    }

    std::vector<ImmigrationEvent> immigrate_continuum(const BackboneTree& tree, const BackboneModel& model, double T,
                                                      double epsilon, const Stream& rng)
    {
        if (!(epsilon > 0.0) || epsilon > kEpsilonMax)
        {
            throw std::domain_error("immigrate_continuum: epsilon must lie in (0, 1]");
        }
        check_horizon(tree, T);
        std::vector<ImmigrationEvent> out;
        const double bound = 2.0 * model.beta_bound / epsilon;
        const bool constant = model.mech.beta.is_constant();
        const auto& beta = model.mech.beta;
        for (std::size_t i = 0; i < tree.nodes.size(); ++i)
        {
            const auto& n = tree.nodes[i];
            Stream s = rng.child(n.key);
            const auto times = thinned_times(
                n.birth, n.end_time(T), bound,
                [&](const Point& x) { return constant ? -1.0 : 2.0 * beta(x) / epsilon; }, tree, i, s);
            for (std::size_t k = 0; k < times.size(); ++k)
            {
                out.push_back({ImmigrationKind::Continuum, i, times[k], tree.position(i, times[k]), epsilon,
                               event_key(ImmigrationKind::Continuum, n.key, k)});
            }
        }
        return out;
    }

    std::vector<ImmigrationEvent> immigrate_discontinuous(const BackboneTree& tree, const BackboneModel& model, double T,
                                                          const Stream& rng)
    {
        check_horizon(tree, T);
        std::vector<ImmigrationEvent> out;
        if (model.mech.pi.empty() || !(model.jump_rate_bound > 0.0))
        {
            return out;
        }
        const bool constant = model.mech.is_constant() && model.w.is_constant();
        for (std::size_t i = 0; i < tree.nodes.size(); ++i)
        {
            const auto& n = tree.nodes[i];
            Stream s = rng.child(n.key);
            const auto times = thinned_times(
                n.birth, n.end_time(T), model.jump_rate_bound,
                [&](const Point& x) {
                    if (constant)
                    {
                        return -1.0;
                    }
                    double m = 0.0;
                    tilted_atoms(model, x, m);
                    return m;
                },
                tree, i, s);
            for (std::size_t k = 0; k < times.size(); ++k)
            {
                const Point x = tree.position(i, times[k]);
                double m = 0.0;
                const auto atoms = tilted_atoms(model, x, m);
                double u = s.uniform() * m;
                std::size_t j = 0;
                while (j + 1 < atoms.size() && u >= atoms[j].weight)
                {
                    u -= atoms[j].weight;
                    ++j;
                }
                out.push_back({ImmigrationKind::Discontinuous, i, times[k], x, atoms[j].z,
                               event_key(ImmigrationKind::Discontinuous, n.key, k)});
            }
        }
        return out;
    }

    std::vector<ImmigrationEvent> immigrate_branchpoint(BackboneTree& tree, const BackboneModel& model, double T,
                                                        const Stream& rng)
    {
        check_horizon(tree, T);
        std::vector<ImmigrationEvent> out;
        for (std::size_t i = 0; i < tree.nodes.size(); ++i)
        {
            auto& n = tree.nodes[i];
            if (!(n.death <= T) || n.exit_time <= n.death)
            {
                continue;
            }
            const Point x = n.path.points.back();
            Stream s = rng.child(n.key);
            const double y = branch_mass_law(model.mech, model.w, x, n.offspring).sample(s);
            n.branch_mass = y;
            n.has_branch_mass = true;
            if (y > 0.0)
            {
                out.push_back({ImmigrationKind::BranchPoint, i, n.death, x, y, event_key(ImmigrationKind::BranchPoint, n.key, 0)});
            }
        }
        return out;
    }

    bool evolve_immigrants(const BackboneModel& model, const BranchingRule& star_rule, const std::vector<ImmigrationEvent>& events,
                           const std::vector<double>& times, const SubprocessOptions& opt, const Stream& rng,
                           std::vector<WeightedMeasure>& out)
    {
        out.assign(times.size(), WeightedMeasure{});
        for (auto& m : out)
        {
            m.weight = 1.0 / opt.n_sub;
        }
        if (times.empty())
        {
            return false;
        }
        const double T = times.back();
        bool censored = false;
        for (const auto& e : events)
        {
            if (e.time >= T)
            {
                continue;
            }
            const Stream s = rng.child(e.key);
            Stream init = s.child(static_cast<std::uint64_t>(Tag::Init));
            AtomicMeasure nu;
            nu.points.assign(init.poisson(opt.n_sub * e.mass), e.x);
            if (nu.empty())
            {
                continue;
            }
            MbpOptions mo;
            mo.horizon = T - e.time;
            mo.dt = opt.dt;
            mo.domain = opt.domain;
            mo.population_cap = opt.population_cap;
            std::vector<std::size_t> slot;
            for (std::size_t k = 0; k < times.size(); ++k)
            {
                if (times[k] > e.time)
                {
                    mo.snapshot_times.push_back(times[k] - e.time);
                    slot.push_back(k);
                }
            }
            const auto res = simulate_mbp(model.motion, star_rule, nu, mo, s);
            censored = censored || res.censored;
            for (std::size_t k = 0; k < slot.size(); ++k)
            {
                auto& pts = out[slot[k]].points;
                pts.insert(pts.end(), res.snapshots[k].points.begin(), res.snapshots[k].points.end());
            }
        }
        return censored;
    }

    double DecoratedState::integrate(const std::function<double(const Point&)>& f) const
    {
        return x_star.integrate(f) + continuum.integrate(f) + discontinuous.integrate(f) + branchpoint.integrate(f);
    }

    double DecoratedState::mass() const
    {
        return x_star.mass() + continuum.mass() + discontinuous.mass() + branchpoint.mass();
    }

    DecoratedRun assemble_delta(const BackboneModel& model, const InitialMeasure& mu, const DeltaOptions& opt,
                                std::uint64_t seed, std::uint64_t replication)
    {
        if (opt.times.empty() || !std::is_sorted(opt.times.begin(), opt.times.end()) || opt.times.front() < 0.0 ||
            opt.times.back() > opt.horizon)
        {
            throw ConfigError("assemble_delta: times must be sorted within [0, horizon]");
        }
        const double T = opt.horizon;
        DecoratedRun run;

        MbpOptions xo;
        xo.horizon = T;
        xo.dt = opt.dt;
        xo.domain = opt.domain;
        xo.snapshot_times = opt.times;
        xo.population_cap = opt.population_cap;
        auto xs = superprocess_approx(model.mech_star, model.motion, mu, opt.n, xo, Stream(seed, Tag::Particle, replication));
        run.censored = xs.censored;

        bool bb_censored = false;
        run.tree = sample_backbone(model, BackboneInit::poisson(mu), T, opt.domain, opt.dt,
                                   Stream(seed, Tag::Backbone, replication), &bb_censored);
        run.censored = run.censored || bb_censored;

        const auto cont = immigrate_continuum(run.tree, model, T, opt.epsilon, Stream(seed, Tag::Continuum, replication));
        const auto disc = immigrate_discontinuous(run.tree, model, T, Stream(seed, Tag::Discontinuous, replication));
        const auto bp = immigrate_branchpoint(run.tree, model, T, Stream(seed, Tag::BranchPoint, replication));
        run.continuum_events = cont.size();
        run.discontinuous_events = disc.size();
        run.branchpoint_events = bp.size();

        const BranchingRule star = superprocess_rule(model.mech_star, opt.n_sub);
        SubprocessOptions so;
        so.n_sub = opt.n_sub;
        so.dt = opt.dt;
        so.domain = opt.domain;
        so.population_cap = opt.population_cap;
        const Stream sub(seed, Tag::Subprocess, replication);
        std::vector<WeightedMeasure> ic;
        std::vector<WeightedMeasure> id;
        std::vector<WeightedMeasure> ib;
        run.censored = evolve_immigrants(model, star, cont, opt.times, so, sub, ic) || run.censored;
        run.censored = evolve_immigrants(model, star, disc, opt.times, so, sub, id) || run.censored;
        run.censored = evolve_immigrants(model, star, bp, opt.times, so, sub, ib) || run.censored;

        for (std::size_t k = 0; k < opt.times.size(); ++k)
        {
            DecoratedState st;
            st.t = opt.times[k];
            st.x_star = std::move(xs.snapshots[k]);
            st.continuum = std::move(ic[k]);
            st.discontinuous = std::move(id[k]);
            st.branchpoint = std::move(ib[k]);
            st.backbone = run.tree.population(st.t);
            run.states.push_back(std::move(st));
        }
        if (!opt.keep_tree)
        {
            run.tree.nodes.clear();
        }
        return run;
    }

    MonotonicityReport global_limit_probe(const BackboneModel& model, const InitialMeasure& mu, const std::vector<Domain>& ladder,
                                          const std::function<double(const Point&)>& f,
                                          const std::function<double(const Point&)>& h, const DeltaOptions& opt,
                                          std::uint64_t seed, std::size_t replications)
    {
        if (ladder.empty())
        {
            throw ConfigError("global_limit_probe: empty domain ladder");
        }
        const int dim = model.motion.dim;
        for (std::size_t j = 0; j < ladder.size(); ++j)
        {
            if (ladder[j].whole)
            {
                throw ConfigError("global_limit_probe: ladder domains must be bounded so all runs share the step grid");
            }
            if (j > 0 && !ladder[j - 1].inside(ladder[j], dim))
            {
                throw ConfigError("global_limit_probe: domains must be nested");
            }
        }
        MonotonicityReport rep;
        rep.replications = replications;
        for (std::size_t r = 0; r < replications; ++r)
        {
            std::vector<std::vector<double>> zf;
            std::vector<std::vector<double>> df;
            for (const auto& D : ladder)
            {
                DeltaOptions o = opt;
                o.domain = D;
                const auto run = assemble_delta(model, mu, o, seed, r);
                std::vector<double> z;
                std::vector<double> d;
                for (const auto& st : run.states)
                {
                    z.push_back(st.backbone.integrate(h));
                    d.push_back(st.integrate(f));
                }
                zf.push_back(std::move(z));
                df.push_back(std::move(d));
            }
            bool violated = false;
            for (std::size_t j = 1; j < ladder.size(); ++j)
            {
                for (std::size_t k = 0; k < opt.times.size(); ++k)
                {
                    for (const auto* v : {&zf, &df})
                    {
                        const double lo = (*v)[j - 1][k];
                        const double hi = (*v)[j][k];
                        // Sums over nested multisets in different orders may differ by rounding.
                        const double gap = lo - hi;
                        if (gap > 1e-12 * std::max(1.0, std::abs(lo)))
                        {
                            violated = true;
                            rep.worst = std::max(rep.worst, gap);
                        }
                    }
                }
            }
            rep.violations += violated ? 1 : 0;
            const std::size_t last = ladder.size() - 1;
            if (last > 0 && zf[last] == zf[last - 1] && df[last] == df[last - 1])
            {
                ++rep.stabilized;
            }
        }
        return rep;
    }
}
