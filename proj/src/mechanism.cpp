#include "bbone/mechanism.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace bbone
{
    namespace
    {
        // 1 − e^{-a}(1+a), accurate for small a.
        double one_minus_exp_poly(double a)
        {
            if (a < 1e-3)
            {
                return a * a * (0.5 - a / 3.0 + a * a / 8.0);
            }
            return -std::expm1(-a) - a * std::exp(-a);
        }

        double log_poisson_pmf(double lam, int k)
        {
            return -lam + k * std::log(lam) - std::lgamma(k + 1.0);
        }

        double poisson_pmf(double lam, int k)
        {
            if (lam <= 0.0)
            {
                return k == 0 ? 1.0 : 0.0;
            }
            return std::exp(log_poisson_pmf(lam, k));
        }

        void require_nonneg(double lam, const char* who)
        {
            if (!(lam >= 0.0))
            {
                std::ostringstream os;
                os << who << ": negative argument λ=" << lam << " rejected";
                throw std::domain_error(os.str());
            }
        }

        double checked(double v, const char* who)
        {
            if (!std::isfinite(v))
            {
                throw ConfigError(std::string(who) + ": non-finite result (unbounded coefficients?)");
            }
            return v;
        }

        double positive_w(const SpatialField& w, const Point& x)
        {
            const double wx = w(x);
            if (!(wx > 0.0))
            {
                throw AssumptionError("w(x) must be strictly positive");
            }
            return wx;
        }
    }

    SpatialField SpatialField::constant(double c)
    {
        SpatialField f;
        f.fn_ = nullptr;
        f.lower_ = c;
        f.upper_ = c;
        f.constant_ = true;
        f.value_ = c;
        return f;
    }

    SpatialField SpatialField::make(std::function<double(const Point&)> fn, double lower, double upper)
    {
        if (lower > upper)
        {
            throw ConfigError("SpatialField: lower bound exceeds upper bound");
        }
        SpatialField f;
        f.fn_ = std::move(fn);
        f.lower_ = lower;
        f.upper_ = upper;
        f.constant_ = false;
        f.value_ = 0.0;
        return f;
    }

    double SpatialField::operator()(const Point& x) const
    {
        if (constant_)
        {
            return value_;
        }
        const double v = fn_(x);
        if (!std::isfinite(v))
        {
            throw ConfigError("SpatialField: non-finite value");
        }
        const double slack = 1e-9 * std::max(1.0, std::max(std::abs(lower_), std::abs(upper_)));
        if (v < lower_ - slack || v > upper_ + slack)
        {
            std::ostringstream os;
            os << "SpatialField: value " << v << " outside declared bounds [" << lower_ << ", " << upper_ << "]";
            throw ConfigError(os.str());
        }
        return v;
    }

    double SpatialField::sup_abs() const
    {
        if (constant_)
        {
            return std::abs(value_);
        }
        return std::max(std::abs(lower_), std::abs(upper_));
    }

    LevyMeasure LevyMeasure::none() { return LevyMeasure{}; }

    LevyMeasure LevyMeasure::atoms(std::vector<Atom> atoms)
    {
        for (const auto& a : atoms)
        {
            if (!(a.z > 0.0) || !std::isfinite(a.z))
            {
                throw ConfigError("pi.atoms: atom sizes must be finite and > 0");
            }
            if (a.c.lower() < 0.0)
            {
                throw ConfigError("pi.atoms: atom weights must be >= 0");
            }
        }
        LevyMeasure m;
        m.kind_ = atoms.empty() ? Kind::Empty : Kind::Atoms;
        m.atoms_ = std::move(atoms);
        return m;
    }

    LevyMeasure LevyMeasure::density(std::function<double(const Point&, double)> kernel, std::vector<double> nodes,
                                     std::vector<double> weights, double tail_certificate)
    {
        if (nodes.size() != weights.size() || nodes.empty())
        {
            throw ConfigError("pi.density: nodes and weights must be non-empty and of equal length");
        }
        for (std::size_t i = 0; i < nodes.size(); ++i)
        {
            if (!(nodes[i] > 0.0) || weights[i] < 0.0)
            {
                throw ConfigError("pi.density: nodes must be > 0 and weights >= 0");
            }
        }
        LevyMeasure m;
        m.kind_ = Kind::Density;
        m.kernel_ = std::move(kernel);
        m.nodes_ = std::move(nodes);
        m.weights_ = std::move(weights);
        m.tail_ = tail_certificate;
        return m;
    }

    bool LevyMeasure::empty() const
    {
        if (kind_ == Kind::Empty)
        {
            return true;
        }
        if (kind_ == Kind::Atoms)
        {
            return std::all_of(atoms_.begin(), atoms_.end(),
                               [](const Atom& a) { return a.c.is_constant() && a.c.constant_value() == 0.0; });
        }
        return false;
    }

    bool LevyMeasure::is_constant() const
    {
        if (kind_ == Kind::Density)
        {
            return false;
        }
        const bool atoms_const =
            std::all_of(atoms_.begin(), atoms_.end(), [](const Atom& a) { return a.c.is_constant(); });
        const bool tilts_const =
            std::all_of(tilts_.begin(), tilts_.end(), [](const SpatialField& t) { return t.is_constant(); });
        return atoms_const && tilts_const;
    }

    LevyMeasure LevyMeasure::tilted(const SpatialField& t) const
    {
        LevyMeasure m = *this;
        m.tilts_.push_back(t);
        return m;
    }

    std::vector<WeightedAtom> LevyMeasure::at(const Point& x) const
    {
        std::vector<WeightedAtom> out;
        if (kind_ == Kind::Atoms)
        {
            out.reserve(atoms_.size());
            for (const auto& a : atoms_)
            {
                const double c = a.c(x);
                if (c < 0.0)
                {
                    throw ConfigError("pi.atoms: negative weight at x");
                }
                if (c > 0.0)
                {
                    out.push_back({a.z, c});
                }
            }
        }
        else if (kind_ == Kind::Density)
        {
            out.reserve(nodes_.size());
            for (std::size_t j = 0; j < nodes_.size(); ++j)
            {
                const double k = kernel_(x, nodes_[j]);
                if (!(k >= 0.0) || !std::isfinite(k))
                {
                    throw ConfigError("pi.density: kernel must be finite and >= 0");
                }
                if (k > 0.0)
                {
                    out.push_back({nodes_[j], k * weights_[j]});
                }
            }
        }
        if (!tilts_.empty())
        {
            double t = 0.0;
            for (const auto& f : tilts_)
            {
                t += f(x);
            }
            for (auto& a : out)
            {
                a.weight *= std::exp(-t * a.z);
            }
        }
        return out;
    }

    BranchingMechanism quadratic_mechanism(double alpha, double beta)
    {
        return BranchingMechanism{SpatialField::constant(alpha), SpatialField::constant(beta), LevyMeasure::none()};
    }

    void validate(const BranchingMechanism& mech, const std::vector<Point>& samples)
    {
        if (mech.beta.lower() < 0.0)
        {
            throw ConfigError("beta: declared lower bound must be >= 0");
        }
        for (const auto& x : samples)
        {
            mech.alpha(x);
            if (mech.beta(x) < 0.0)
            {
                throw ConfigError("beta: negative value");
            }
            const double m = mech.pi.integrate(x, [](double z) { return std::min(z, z * z); });
            if (!std::isfinite(m))
            {
                throw ConfigError("pi: integral of min(z, z^2) is not finite");
            }
        }
    }

    double psi(const BranchingMechanism& mech, const Point& x, double lam)
    {
        require_nonneg(lam, "psi");
        const double jump = mech.pi.integrate(x, [lam](double z) { return std::expm1(-lam * z) + lam * z; });
        return checked(-mech.alpha(x) * lam + mech.beta(x) * lam * lam + jump, "psi");
    }

    double psi_prime(const BranchingMechanism& mech, const Point& x, double lam)
    {
        require_nonneg(lam, "psi_prime");
        const double jump = mech.pi.integrate(x, [lam](double z) { return -std::expm1(-lam * z) * z; });
        return checked(-mech.alpha(x) + 2.0 * mech.beta(x) * lam + jump, "psi_prime");
    }

    BranchingMechanism conditioned_mechanism(const BranchingMechanism& mech, const SpatialField& w)
    {
        if (!(w.lower() > 0.0) || !std::isfinite(w.upper()))
        {
            throw AssumptionError("conditioned_mechanism: w must have declared bounds in (0, inf)");
        }
        BranchingMechanism star;
        star.beta = mech.beta;
        star.pi = mech.pi.tilted(w);
        auto alpha_star = [mech, w](const Point& x) {
            const double wx = w(x);
            const double jump = mech.pi.integrate(x, [wx](double z) { return -std::expm1(-wx * z) * z; });
            return mech.alpha(x) - 2.0 * mech.beta(x) * wx - jump;
        };
        if (mech.is_constant() && w.is_constant())
        {
            star.alpha = SpatialField::constant(alpha_star(Point{}));
        }
        else
        {
            // α* = α − 2βw − ∫(1 − e^{−wz})z π(dz), bounded termwise.
            double jump_hi = 0.0;
            if (mech.pi.kind() == LevyMeasure::Kind::Atoms)
            {
                for (const auto& a : mech.pi.atom_list())
                {
                    jump_hi += a.c.upper() * a.z * -std::expm1(-w.upper() * a.z);
                }
            }
            else if (!mech.pi.empty())
            {
                jump_hi = std::numeric_limits<double>::infinity();
            }
            const double lo = mech.alpha.lower() - 2.0 * mech.beta.upper() * w.upper() - jump_hi;
            const double hi = mech.alpha.upper() - 2.0 * std::max(0.0, mech.beta.lower()) * w.lower();
            star.alpha = SpatialField::make(alpha_star, lo, hi);
        }
        return star;
    }

    double conditioned_identity_residual(const BranchingMechanism& mech, const SpatialField& w,
                                         const std::vector<Point>& xs, const std::vector<double>& lams_over_w)
    {
        const auto star = conditioned_mechanism(mech, w);
        double worst = 0.0;
        for (const auto& x : xs)
        {
            const double wx = w(x);
            for (double r : lams_over_w)
            {
                const double lam = r * wx;
                const double lhs = psi(star, x, lam);
                const double rhs = psi(mech, x, lam + wx) - psi(mech, x, wx);
                worst = std::max(worst, std::abs(lhs - rhs));
            }
        }
        return worst;
    }

    double phi(const BranchingMechanism& mech, const SpatialField& w, const Point& x, double lam)
    {
        require_nonneg(lam, "phi");
        const double wx = w(x);
        const double jump =
            mech.pi.integrate(x, [lam, wx](double z) { return -std::expm1(-lam * z) * z * std::exp(-wx * z); });
        return checked(2.0 * mech.beta(x) * lam + jump, "phi");
    }

    double backbone_rate(const BranchingMechanism& mech, const SpatialField& w, const Point& x)
    {
        const double wx = positive_w(w, x);
        const double jump = mech.pi.integrate(x, [wx](double z) { return one_minus_exp_poly(wx * z); });
        const double q = mech.beta(x) * wx + jump / wx;
        const double dpsi = psi_prime(mech, x, wx);
        const double ratio = psi(mech, x, wx) / wx;
        const double q_def = dpsi - ratio;
        const double scale = std::max({1.0, std::abs(dpsi), std::abs(ratio)});
        if (std::abs(q - q_def) > 1e-10 * scale)
        {
            std::ostringstream os;
            os << "backbone_rate: alternate form " << q << " disagrees with psi'(w) - psi(w)/w = " << q_def;
            throw ConsistencyError(os.str());
        }
        if (q < -1e-12)
        {
            throw ConsistencyError("backbone_rate: negative rate");
        }
        return std::max(q, 0.0);
    }

    double poisson_tail_bound(double lam, int k)
    {
        if (lam <= 0.0)
        {
            return 0.0;
        }
        if (lam >= k + 2.0)
        {
            return 1.0;
        }
        return poisson_pmf(lam, k + 1) / (1.0 - lam / (k + 2.0));
    }

    double OffspringLaw::total() const { return std::accumulate(p.begin(), p.end(), 0.0); }

    double OffspringLaw::mean() const
    {
        double m = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k)
        {
            m += static_cast<double>(k) * p[k];
        }
        return m;
    }

    void OffspringLaw::finalize()
    {
        cdf_.resize(p.size());
        std::partial_sum(p.begin(), p.end(), cdf_.begin());
    }

    int OffspringLaw::sample(Stream& rng) const
    {
        if (cdf_.size() != p.size())
        {
            throw std::logic_error("OffspringLaw::sample called before finalize()");
        }
        const double u = rng.uniform() * cdf_.back();
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        if (it == cdf_.end())
        {
            --it;
        }
        // upper_bound never lands on a zero-mass entry: its cdf equals its predecessor's.
        return static_cast<int>(it - cdf_.begin());
    }

    OffspringLaw offspring_pmf(const BranchingMechanism& mech, const SpatialField& w, const Point& x, int n_max)
    {
        if (n_max < 2)
        {
            throw std::domain_error("offspring_pmf: N_max must be >= 2");
        }
        const double wx = positive_w(w, x);
        const double q = backbone_rate(mech, w, x);
        if (!(q > 0.0))
        {
            throw std::domain_error("offspring_pmf: backbone rate must be > 0");
        }
        const double norm = wx * q;
        const auto atoms = mech.pi.at(x);
        OffspringLaw law;
        law.p.assign(static_cast<std::size_t>(n_max) + 1, 0.0);
        for (int n = 2; n <= n_max; ++n)
        {
            double term = n == 2 ? mech.beta(x) * wx * wx : 0.0;
            for (const auto& a : atoms)
            {
                term += a.weight * poisson_pmf(wx * a.z, n);
            }
            law.p[static_cast<std::size_t>(n)] = term / norm;
        }
        auto tail_at = [&](int k) {
            double t = 0.0;
            for (const auto& a : atoms)
            {
                t += a.weight * poisson_tail_bound(wx * a.z, k);
            }
            return t / norm;
        };
        law.tail_bound = tail_at(n_max);
        if (law.tail_bound > kTailTarget)
        {
            int k = n_max;
            while (tail_at(k) > kTailTarget && k < 100000)
            {
                k *= 2;
            }
            std::ostringstream os;
            os << "offspring_pmf: tail bound " << law.tail_bound << " exceeds " << kTailTarget << " at N_max=" << n_max;
            throw TruncationError(os.str(), k);
        }
        law.finalize();
        return law;
    }

    double BranchMassLaw::sample(Stream& rng) const
    {
        double u = rng.uniform();
        for (std::size_t i = 0; i + 1 < probs.size(); ++i)
        {
            if (u < probs[i])
            {
                return values[i];
            }
            u -= probs[i];
        }
        return values.back();
    }

    double BranchMassLaw::mean() const
    {
        double m = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i)
        {
            m += values[i] * probs[i];
        }
        return m;
    }

    BranchMassLaw branch_mass_law(const BranchingMechanism& mech, const SpatialField& w, const Point& x, int n)
    {
        if (n < 2)
        {
            throw std::domain_error("branch_mass_law: n must be >= 2");
        }
        const double wx = positive_w(w, x);
        BranchMassLaw law;
        const double quad = n == 2 ? mech.beta(x) * wx * wx : 0.0;
        if (quad > 0.0)
        {
            law.values.push_back(0.0);
            law.probs.push_back(quad);
        }
        for (const auto& a : mech.pi.at(x))
        {
            const double m = a.weight * poisson_pmf(wx * a.z, n);
            if (m > 0.0)
            {
                law.values.push_back(a.z);
                law.probs.push_back(m);
            }
        }
        const double total = std::accumulate(law.probs.begin(), law.probs.end(), 0.0);
        if (!(total > 0.0))
        {
            throw std::domain_error("branch_mass_law: p_n(x) = 0");
        }
        for (auto& p : law.probs)
        {
            p /= total;
        }
        return law;
    }

    double branch_mass_sampler(const BranchingMechanism& mech, const SpatialField& w, const Point& x, int n,
                               Stream& rng)
    {
        return branch_mass_law(mech, w, x, n).sample(rng);
    }

    ParticleLaw particle_law(const BranchingMechanism& mech, double n, const Point& x)
    {
        if (!(n >= 1.0))
        {
            throw std::domain_error("particle_law: scaling level must be >= 1");
        }
        const double b = mech.beta(x);
        const auto atoms = mech.pi.at(x);
        ParticleLaw law;
        law.rate = 2.0 * b * n;
        int k_max = 2;
        for (const auto& a : atoms)
        {
            const double lam = n * a.z;
            law.rate += a.weight * a.z * (-std::expm1(-lam));
            k_max = std::max(k_max, static_cast<int>(std::ceil(lam + 12.0 * std::sqrt(lam) + 25.0)));
        }
        if (!(law.rate > 0.0))
        {
            law.rate = 0.0;
            law.offspring.p = {0.0, 1.0};
            law.offspring.finalize();
            return law;
        }
        auto tail_at = [&](int k) {
            double t = 0.0;
            for (const auto& a : atoms)
            {
                t += a.weight * poisson_tail_bound(n * a.z, k);
            }
            return t / (n * law.rate);
        };
        while (tail_at(k_max) > kTailTarget)
        {
            k_max *= 2;
        }
        std::vector<double> c(static_cast<std::size_t>(k_max) + 1, 0.0);
        c[0] = b * n;
        c[2] = b * n;
        for (const auto& a : atoms)
        {
            const double lam = n * a.z;
            c[0] += a.weight * (std::expm1(-lam) + lam) / n;
            for (int k = 2; k <= k_max; ++k)
            {
                c[static_cast<std::size_t>(k)] += a.weight * poisson_pmf(lam, k) / n;
            }
        }
        law.offspring.p.resize(c.size());
        for (std::size_t k = 0; k < c.size(); ++k)
        {
            if (c[k] < -1e-12 * law.rate)
            {
                throw ConsistencyError("particle_law: negative coefficient in generator expansion");
            }
            law.offspring.p[k] = std::max(c[k], 0.0) / law.rate;
        }
        law.offspring.tail_bound = tail_at(k_max);
        law.offspring.finalize();
        return law;
    }

    double particle_generator(const BranchingMechanism& mech, double n, const Point& x, double s)
    {
        const double lam = n * (1.0 - s);
        return (psi(mech, x, lam) + mech.alpha(x) * lam) / n;
    }

    ParticleLaw superprocess_law(const BranchingMechanism& mech, double n, const Point& x)
    {
        ParticleLaw base = particle_law(mech, n, x);
        const double a = mech.alpha(x);
        if (a == 0.0)
        {
            return base;
        }
        ParticleLaw law;
        law.rate = base.rate + std::abs(a);
        law.offspring.p = base.offspring.p;
        if (law.offspring.p.size() < 3)
        {
            law.offspring.p.resize(3, 0.0);
        }
        for (auto& p : law.offspring.p)
        {
            p *= base.rate / law.rate;
        }
        law.offspring.p[a > 0.0 ? 2 : 0] += std::abs(a) / law.rate;
        law.offspring.tail_bound = base.offspring.tail_bound * base.rate / law.rate;
        law.offspring.finalize();
        return law;
    }

    double largest_root(const BranchingMechanism& mech, double tol)
    {
        if (!mech.is_constant())
        {
            throw std::domain_error("largest_root: mechanism must be non-spatial");
        }
        const Point x{};
        if (psi_prime(mech, x, 0.0) >= 0.0)
        {
            return 0.0;
        }
        double hi = 1.0;
        while (psi(mech, x, hi) <= 0.0)
        {
            hi *= 2.0;
            if (hi > 1e15)
            {
                throw AssumptionError("largest_root: psi stays non-positive; w is infinite");
            }
        }
        double lo = 0.0;
        for (int i = 0; i < 400 && hi - lo > tol * std::max(1.0, hi); ++i)
        {
            const double mid = 0.5 * (lo + hi);
            if (psi(mech, x, mid) <= 0.0)
            {
                lo = mid;
            }
            else
            {
                hi = mid;
            }
        }
        return 0.5 * (lo + hi);
    }
}
