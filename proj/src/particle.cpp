#include "bbone/particle.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace bbone
{
    namespace
    {
        constexpr std::uint64_t kRootSalt = 0x5bd1e9955bd1e995ULL;
        constexpr std::uint64_t kMotionSalt = 0x9e3779b97f4a7c15ULL;

        std::uint64_t child_key(std::uint64_t parent, std::uint64_t index) { return hash_combine(parent, index); }

        struct Pending
        {
            double birth;
            Point x;
            std::uint64_t key;
            std::int64_t parent;
            std::uint32_t index;
        };

        // Moves one particle along its own motion stream.
        class Mover
        {
        public:
            Mover(const DiffusionSpec& spec, const MbpOptions& opt, double birth, Stream rng, StoppedPath* path)
                : spec_(spec), opt_(opt), birth_(birth), rng_(rng), path_(path),
                  exact_(spec.constant_coefficients && opt.domain.whole && path == nullptr)
            {
            }

            // Advances from t to s; returns false if the particle left D on the way (t, x then hold the exit).
            bool advance(double& t, Point& x, double s)
            {
                if (s <= t)
                {
                    return true;
                }
                if (exact_)
                {
                    x = em_step(spec_, x, s - t, rng_);
                    t = s;
                    return true;
                }
                while (t < s)
                {
                    const double grid = birth_ + opt_.dt * static_cast<double>(steps_ + 1);
                    const double next = std::min(grid, s);
                    x = em_step(spec_, x, next - t, rng_);
                    t = next;
                    if (next == grid)
                    {
                        ++steps_;
                    }
                    if (path_ != nullptr)
                    {
                        path_->times.push_back(t);
                        path_->points.push_back(x);
                    }
                    if (!opt_.domain.whole && !opt_.domain.contains(x, spec_.dim))
                    {
                        return false;
                    }
                }
                return true;
            }

        private:
            const DiffusionSpec& spec_;
            const MbpOptions& opt_;
            double birth_;
            Stream rng_;
            StoppedPath* path_;
            bool exact_;
            std::uint64_t steps_ = 0;
        };

        void check_options(const MbpOptions& opt)
        {
            if (!(opt.horizon >= 0.0) || !(opt.dt > 0.0))
            {
                throw ConfigError("simulate_mbp: horizon >= 0 and dt > 0 required");
            }
            for (double t : opt.snapshot_times)
            {
                if (t < 0.0 || t > opt.horizon)
                {
                    throw ConfigError("simulate_mbp: snapshot times must lie in [0, horizon]");
                }
            }
            if (!std::is_sorted(opt.snapshot_times.begin(), opt.snapshot_times.end()))
            {
                throw ConfigError("simulate_mbp: snapshot times must be sorted");
            }
        }
    }

    double WeightedMeasure::integrate(const std::function<double(const Point&)>& f) const
    {
        double s = 0.0;
        for (const auto& x : points)
        {
            s += f(x);
        }
        return weight * s;
    }

    InitialMeasure InitialMeasure::dirac(const Point& x, double mass)
    {
        InitialMeasure mu;
        mu.atoms.push_back({x, mass});
        return mu;
    }

    bool InitialMeasure::is_zero() const
    {
        for (const auto& a : atoms)
        {
            if (a.mass > 0.0)
            {
                return false;
            }
        }
        return !density || density_hi <= density_lo;
    }

    double InitialMeasure::integrate(const std::function<double(const Point&)>& f) const
    {
        double s = 0.0;
        for (const auto& a : atoms)
        {
            s += a.mass * f(a.x);
        }
        if (density && density_hi > density_lo)
        {
            s += boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
                [&](double y) { return density(y) * f(point1(y)); }, density_lo, density_hi, 8, 1e-12);
        }
        return s;
    }

    AtomicMeasure poisson_field(const InitialMeasure& mu, double scale, Stream& rng,
                                const std::function<double(const Point&)>& g, double g_bound)
    {
        AtomicMeasure out;
        for (const auto& a : mu.atoms)
        {
            if (a.mass < 0.0)
            {
                throw ConfigError("poisson_field: negative atom mass");
            }
            const double gx = g ? g(a.x) : 1.0;
            const auto k = rng.poisson(scale * gx * a.mass);
            out.points.insert(out.points.end(), k, a.x);
        }
        if (mu.density && mu.density_hi > mu.density_lo)
        {
            const double width = mu.density_hi - mu.density_lo;
            const double bound = mu.density_bound * (g ? g_bound : 1.0);
            const auto k = rng.poisson(scale * bound * width);
            for (std::uint64_t i = 0; i < k; ++i)
            {
                const double y = mu.density_lo + width * rng.uniform();
                const double u = rng.uniform();
                const Point x = point1(y);
                const double val = mu.density(y) * (g ? g(x) : 1.0);
                if (val > bound * (1.0 + 1e-12))
                {
                    throw ConfigError("poisson_field: density exceeds its declared bound");
                }
                if (u * bound < val)
                {
                    out.points.push_back(x);
                }
            }
        }
        return out;
    }

    double TreeNode::end_time(double horizon) const { return std::min({death, exit_time, horizon}); }

    std::string BackboneTree::label_string(std::size_t i) const
    {
        std::ostringstream os;
        os << '(';
        const auto& l = nodes.at(i).label;
        for (std::size_t k = 0; k < l.size(); ++k)
        {
            os << (k ? "," : "") << l[k];
        }
        os << ')';
        return os.str();
    }

    Point BackboneTree::position(std::size_t i, double r) const
    {
        const auto& p = nodes.at(i).path;
        if (p.times.empty())
        {
            throw std::logic_error("BackboneTree::position: node has no recorded path");
        }
        if (r <= p.times.front())
        {
            return p.points.front();
        }
        if (r >= p.times.back())
        {
            return p.points.back();
        }
        const auto it = std::upper_bound(p.times.begin(), p.times.end(), r);
        const auto k = static_cast<std::size_t>(it - p.times.begin());
        const double t0 = p.times[k - 1];
        const double t1 = p.times[k];
        const double s = (r - t0) / (t1 - t0);
        Point out{};
        for (std::size_t d = 0; d < kMaxDim; ++d)
        {
            out[d] = (1.0 - s) * p.points[k - 1][d] + s * p.points[k][d];
        }
        return out;
    }

    bool BackboneTree::alive_at(std::size_t i, double t) const
    {
        const auto& n = nodes.at(i);
        return n.birth <= t && t < n.death && !(n.exit_time <= t) && t <= horizon;
    }

    AtomicMeasure BackboneTree::population(double t) const
    {
        AtomicMeasure m;
        for (std::size_t i = 0; i < nodes.size(); ++i)
        {
            if (alive_at(i, t))
            {
                m.points.push_back(position(i, t));
            }
        }
        return m;
    }

    std::size_t BackboneTree::count(double t) const
    {
        std::size_t c = 0;
        for (std::size_t i = 0; i < nodes.size(); ++i)
        {
            c += alive_at(i, t) ? 1 : 0;
        }
        return c;
    }

    bool BackboneTree::check_consistency(std::string* why) const
    {
        auto fail = [&](std::size_t i, const std::string& msg) {
            if (why != nullptr)
            {
                *why = "node " + label_string(i) + ": " + msg;
            }
            return false;
        };
        std::set<std::vector<std::uint32_t>> seen;
        std::vector<int> children(nodes.size(), 0);
        for (std::size_t i = 0; i < nodes.size(); ++i)
        {
            const auto& n = nodes[i];
            if (n.label.empty() || !seen.insert(n.label).second)
            {
                return fail(i, "empty or duplicate label");
            }
            if (!(n.death >= n.birth))
            {
                return fail(i, "death before birth");
            }
            const double end = n.end_time(horizon);
            if (n.path.times.empty() || n.path.times.front() != n.birth ||
                std::abs(n.path.times.back() - end) > 1e-12 * std::max(1.0, end))
            {
                return fail(i, "trajectory does not cover [b, end]");
            }
            if (n.parent < 0)
            {
                if (n.label.size() != 1)
                {
                    return fail(i, "root label of length != 1");
                }
                continue;
            }
            const auto pi = static_cast<std::size_t>(n.parent);
            if (pi >= i)
            {
                return fail(i, "parent recorded after child");
            }
            const auto& p = nodes[pi];
            if (n.label.size() != p.label.size() + 1 || !std::equal(p.label.begin(), p.label.end(), n.label.begin()))
            {
                return fail(i, "label is not parent label plus index");
            }
            ++children[pi];
            if (n.label.back() < 1 || static_cast<int>(n.label.back()) > p.offspring)
            {
                return fail(i, "child index outside 1..N of parent");
            }
            if (n.birth != p.death)
            {
                return fail(i, "birth differs from parent death");
            }
            if (n.path.points.front() != p.path.points.back())
            {
                return fail(i, "birth location differs from parent death location");
            }
        }
        for (std::size_t i = 0; i < nodes.size(); ++i)
        {
            const auto& n = nodes[i];
            const bool branched = std::isfinite(n.death) && n.death < horizon;
            if (branched && children[i] != n.offspring)
            {
                return fail(i, "offspring count differs from recorded children");
            }
            if (!branched && children[i] != 0)
            {
                return fail(i, "children of a node that did not branch");
            }
        }
        return true;
    }

    BranchingRule BranchingRule::constant(double rate, OffspringLaw law)
    {
        if (!(rate >= 0.0) || !std::isfinite(rate))
        {
            throw ConfigError("BranchingRule: rate must be finite and >= 0");
        }
        BranchingRule r;
        r.rate = [rate](const Point&) { return rate; };
        r.offspring = [law = std::move(law)](const Point&, Stream& rng) { return law.sample(rng); };
        r.rate_bound = rate;
        r.constant_rate = true;
        return r;
    }

    MbpResult simulate_mbp(const DiffusionSpec& motion, const BranchingRule& rule, const AtomicMeasure& nu,
                           const MbpOptions& opt, const Stream& rng)
    {
        check_options(opt);
        if (!rule.constant_rate && !(rule.rate_bound >= 0.0 && std::isfinite(rule.rate_bound)))
        {
            throw ConfigError("simulate_mbp: thinning needs a finite rate bound");
        }
        MbpResult out;
        out.tree.horizon = opt.horizon;
        out.tree.domain = opt.domain;
        out.snapshots.assign(opt.snapshot_times.size(), WeightedMeasure{});
        const auto& snaps = opt.snapshot_times;
        const double T = opt.horizon;

        std::vector<Pending> stack;
        for (std::size_t k = nu.points.size(); k-- > 0;)
        {
            stack.push_back({0.0, nu.points[k], child_key(kRootSalt, k + 1), -1, static_cast<std::uint32_t>(k + 1)});
        }
        while (!stack.empty())
        {
            const Pending p = stack.back();
            stack.pop_back();
            if (++out.nodes > opt.node_cap)
            {
                out.censored = true;
                return out;
            }
            Stream brng = rng.child(p.key);
            TreeNode* rec = nullptr;
            std::int64_t self = -1;
            if (opt.record_tree)
            {
                self = static_cast<std::int64_t>(out.tree.nodes.size());
                TreeNode n;
                if (p.parent >= 0)
                {
                    n.label = out.tree.nodes[static_cast<std::size_t>(p.parent)].label;
                }
                n.label.push_back(p.index);
                n.parent = p.parent;
                n.key = p.key;
                n.birth = p.birth;
                n.path.dt = opt.dt;
                n.path.times.push_back(p.birth);
                n.path.points.push_back(p.x);
                out.tree.nodes.push_back(std::move(n));
                rec = &out.tree.nodes.back();
            }
            Mover mover(motion, opt, p.birth, rng.child(p.key ^ kMotionSalt), rec ? &rec->path : nullptr);

            double t = p.birth;
            Point x = p.x;
            auto next_event = [&](double from) {
                return rule.rate_bound > 0.0 ? from + brng.exponential(rule.rate_bound)
                                             : std::numeric_limits<double>::infinity();
            };
            // Without a recorded path or a domain, a childless death never needs its location.
            const bool lazy = rule.constant_rate && rec == nullptr && opt.domain.whole;
            double event = next_event(t);
            auto si = static_cast<std::size_t>(std::lower_bound(snaps.begin(), snaps.end(), t) - snaps.begin());
            bool exited = false;
            while (true)
            {
                const double stop = std::min(event, T);
                while (si < snaps.size() && snaps[si] < event && snaps[si] <= T)
                {
                    if (!mover.advance(t, x, snaps[si]))
                    {
                        exited = true;
                        break;
                    }
                    auto& m = out.snapshots[si].points;
                    m.push_back(x);
                    if (m.size() > opt.population_cap)
                    {
                        out.censored = true;
                        return out;
                    }
                    ++si;
                }
                if (exited)
                {
                    break;
                }
                if (event >= T)
                {
                    // Alive at the horizon: only a recorded or domain-stopped path needs moving.
                    if (rec != nullptr || !opt.domain.whole)
                    {
                        exited = !mover.advance(t, x, T);
                    }
                    break;
                }
                if (lazy)
                {
                    const int N = rule.offspring(x, brng);
                    ++out.branch_events;
                    if (N > 0)
                    {
                        mover.advance(t, x, stop);
                    }
                    for (int k = N; k >= 1; --k)
                    {
                        stack.push_back({stop, x, child_key(p.key, static_cast<std::uint64_t>(k)), -1, static_cast<std::uint32_t>(k)});
                    }
                    break;
                }
                if (!mover.advance(t, x, stop))
                {
                    exited = true;
                    break;
                }
                if (!rule.constant_rate)
                {
                    const double q = rule.rate(x);
                    if (q > rule.rate_bound * (1.0 + 1e-12))
                    {
                        throw ConsistencyError("simulate_mbp: rate exceeds its declared bound");
                    }
                    if (!(brng.uniform() * rule.rate_bound < q))
                    {
                        event = next_event(t);
                        continue;
                    }
                }
                const int N = rule.offspring(x, brng);
                ++out.branch_events;
                if (rec != nullptr)
                {
                    rec = &out.tree.nodes[static_cast<std::size_t>(self)];
                    rec->death = t;
                    rec->offspring = N;
                }
                for (int k = N; k >= 1; --k)
                {
                    stack.push_back({t, x, child_key(p.key, static_cast<std::uint64_t>(k)), self, static_cast<std::uint32_t>(k)});
                }
                break;
            }
            if (exited)
            {
                out.exits.points.push_back(x);
                out.exits.times.push_back(t);
                if (rec != nullptr)
                {
                    rec->exited = true;
                    rec->exit_time = t;
                    rec->path.exit_time = t;
                    rec->path.exited = true;
                    rec->path.alive = false;
                }
            }
        }
        return out;
    }

    BranchingRule superprocess_rule(const BranchingMechanism& mech, double n)
    {
        if (!(n >= 1.0))
        {
            throw ConfigError("superprocess_rule: scaling level must be >= 1");
        }
        if (mech.is_constant())
        {
            const auto law = superprocess_law(mech, n, Point{});
            return BranchingRule::constant(law.rate, law.offspring);
        }
        if (mech.pi.kind() == LevyMeasure::Kind::Density)
        {
            throw ConfigError("superprocess_rule: spatial density Levy measures are not supported");
        }
        double bound = 2.0 * mech.beta.upper() * n + mech.alpha.sup_abs();
        for (const auto& a : mech.pi.atom_list())
        {
            bound += a.c.upper() * a.z;
        }
        if (!std::isfinite(bound))
        {
            throw ConfigError("superprocess_rule: mechanism coefficients need finite declared bounds");
        }
        BranchingRule r;
        r.rate = [mech, n](const Point& x) { return superprocess_law(mech, n, x).rate; };
        r.offspring = [mech, n](const Point& x, Stream& rng) { return superprocess_law(mech, n, x).offspring.sample(rng); };
        r.rate_bound = bound;
        return r;
    }

    MbpResult superprocess_from(const BranchingRule& rule, const DiffusionSpec& motion, const AtomicMeasure& particles,
                                double n, const MbpOptions& opt, const Stream& rng)
    {
        MbpResult res = simulate_mbp(motion, rule, particles, opt, rng);
        for (auto& s : res.snapshots)
        {
            s.weight = 1.0 / n;
        }
        res.exits.weight = 1.0 / n;
        return res;
    }

    MbpResult superprocess_approx(const BranchingMechanism& mech, const DiffusionSpec& motion, const InitialMeasure& mu,
                                  double n, const MbpOptions& opt, const Stream& rng)
    {
        const BranchingRule rule = superprocess_rule(mech, n);
        Stream init = rng.child(static_cast<std::uint64_t>(Tag::Init));
        AtomicMeasure nu = poisson_field(mu, n, init);
        return superprocess_from(rule, motion, nu, n, opt, rng);
    }

    AtomicMeasure exit_measure(const BackboneTree& tree, const Domain& D, double t, int dim)
    {
        if (t > tree.horizon)
        {
            throw std::invalid_argument("exit_measure: t beyond the recorded horizon");
        }
        if (!D.inside(tree.domain, dim) && !tree.domain.whole)
        {
            throw std::invalid_argument("exit_measure: D must lie inside the recording domain");
        }
        AtomicMeasure out;
        std::vector<char> blocked(tree.nodes.size(), 0);
        for (std::size_t i = 0; i < tree.nodes.size(); ++i)
        {
            const auto& n = tree.nodes[i];
            if (n.parent >= 0 && blocked[static_cast<std::size_t>(n.parent)])
            {
                blocked[i] = 1;
                continue;
            }
            if (n.birth > t)
            {
                blocked[i] = 1;
                continue;
            }
            bool left = false;
            if (!D.whole)
            {
                const auto& path = n.path;
                for (std::size_t k = 0; k < path.times.size() && path.times[k] <= t; ++k)
                {
                    if (!D.contains(path.points[k], dim))
                    {
                        out.points.push_back(path.points[k]);
                        out.times.push_back(path.times[k]);
                        left = true;
                        break;
                    }
                }
            }
            if (left)
            {
                blocked[i] = 1;
                continue;
            }
            if (tree.alive_at(i, t))
            {
                out.points.push_back(tree.position(i, t));
                out.times.push_back(t);
                blocked[i] = 1;
            }
        }
        return out;
    }

    Estimate laplace_estimator(const std::vector<double>& pairings)
    {
        if (pairings.size() < 2)
        {
            throw std::invalid_argument("laplace_estimator: at least 2 replications required");
        }
        double mean = 0.0;
        for (double p : pairings)
        {
            mean += std::exp(-p);
        }
        mean /= static_cast<double>(pairings.size());
        double var = 0.0;
        for (double p : pairings)
        {
            const double d = std::exp(-p) - mean;
            var += d * d;
        }
        var /= static_cast<double>(pairings.size() - 1);
        return Estimate{mean, std::sqrt(var / static_cast<double>(pairings.size())), pairings.size()};
    }

    Estimate laplace_estimator(const std::vector<WeightedMeasure>& snapshots, const std::function<double(const Point&)>& f)
    {
        std::vector<double> v;
        v.reserve(snapshots.size());
        for (const auto& s : snapshots)
        {
            v.push_back(s.integrate(f));
        }
        return laplace_estimator(v);
    }

    double extinction_probability_by(double rate, const OffspringLaw& law, double t)
    {
        if (t <= 0.0)
        {
            return 0.0;
        }
        if (!(rate > 0.0))
        {
            return 0.0;
        }
        auto F = [&](double s) {
            double g = 0.0;
            for (std::size_t k = law.p.size(); k-- > 0;)
            {
                g = g * s + law.p[k];
            }
            return rate * (g / law.total() - s);
        };
        const auto steps = static_cast<std::size_t>(std::ceil(t / std::min(1e-2, 0.1 / rate)));
        const double h = t / static_cast<double>(steps);
        double s = 0.0;
        for (std::size_t i = 0; i < steps; ++i)
        {
            const double k1 = F(s);
            const double k2 = F(s + 0.5 * h * k1);
            const double k3 = F(s + 0.5 * h * k2);
            const double k4 = F(s + h * k3);
            s += h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
        }
        return std::clamp(s, 0.0, 1.0);
    }

    CountPath simulate_counts(double rate, const OffspringLaw& law, std::uint64_t initial, const std::vector<double>& horizons,
                              std::uint64_t stop_count, Stream& rng)
    {
        if (!std::is_sorted(horizons.begin(), horizons.end()))
        {
            throw ConfigError("simulate_counts: horizons must be sorted");
        }
        CountPath out;
        out.extinct_by.assign(horizons.size(), 0.0);
        std::uint64_t N = initial;
        double t = 0.0;
        std::size_t h = 0;
        while (h < horizons.size())
        {
            if (N == 0)
            {
                for (; h < horizons.size(); ++h)
                {
                    out.extinct_by[h] = 1.0;
                }
                break;
            }
            if (N >= stop_count)
            {
                out.stopped_early = true;
                out.stop_time = t;
                for (; h < horizons.size(); ++h)
                {
                    const double p = extinction_probability_by(rate, law, horizons[h] - t);
                    out.extinct_by[h] = std::pow(p, static_cast<double>(N));
                }
                break;
            }
            if (!(rate > 0.0))
            {
                break;
            }
            t += rng.exponential(rate * static_cast<double>(N));
            while (h < horizons.size() && horizons[h] < t)
            {
                ++h;
            }
            if (h == horizons.size())
            {
                break;
            }
            const int k = law.sample(rng);
            N = N - 1 + static_cast<std::uint64_t>(k);
            ++out.events;
        }
        out.final_count = N;
        return out;
    }
}
