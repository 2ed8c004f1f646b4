#pragma once

#include "bbone/rng.hpp"
#include "bbone/types.hpp"

#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace bbone
{
    // x -> real with declared bounds. Constant fields are flagged so simulators can
    // take exact shortcuts.
    class SpatialField
    {
    public:
        SpatialField() = default;

        static SpatialField constant(double c);
        static SpatialField make(std::function<double(const Point&)> fn,
                                 double lower = -std::numeric_limits<double>::infinity(),
                                 double upper = std::numeric_limits<double>::infinity());

        double operator()(const Point& x) const;

        double lower() const { return lower_; }
        double upper() const { return upper_; }
        bool is_constant() const { return constant_; }
        double constant_value() const { return value_; }
        double sup_abs() const;

    private:
        std::function<double(const Point&)> fn_;
        double lower_ = 0.0;
        double upper_ = 0.0;
        bool constant_ = true;
        double value_ = 0.0;
    };

    struct Atom
    {
        double z;
        SpatialField c;
    };

    // π(x, ·) evaluated at a point: a finite list of (size, weight).
    struct WeightedAtom
    {
        double z;
        double weight;
    };

    class LevyMeasure
    {
    public:
        enum class Kind
        {
            Empty,
            Atoms,
            Density
        };

        static LevyMeasure none();
        static LevyMeasure atoms(std::vector<Atom> atoms);
        // Density kernel k(x, z) integrated with the given quadrature nodes and weights.
        // tail_certificate bounds the neglected part of ∫(z∧z²)π.
        static LevyMeasure density(std::function<double(const Point&, double)> kernel,
                                   std::vector<double> nodes, std::vector<double> weights,
                                   double tail_certificate = 0.0);

        Kind kind() const { return kind_; }
        bool empty() const;
        bool is_constant() const;

        // Returns the measure e^{-t(x)z} π(x,dz); tilts compose multiplicatively.
        LevyMeasure tilted(const SpatialField& t) const;

        std::vector<WeightedAtom> at(const Point& x) const;

        // ∫ g(z) π(x,dz)
        template <class G>
        double integrate(const Point& x, G&& g) const
        {
            double s = 0.0;
            for (const auto& a : at(x))
            {
                s += a.weight * g(a.z);
            }
            return s;
        }

        double tail_certificate() const { return tail_; }
        const std::vector<Atom>& atom_list() const { return atoms_; }

    private:
        Kind kind_ = Kind::Empty;
        std::vector<Atom> atoms_;
        std::function<double(const Point&, double)> kernel_;
        std::vector<double> nodes_;
        std::vector<double> weights_;
        double tail_ = 0.0;
        std::vector<SpatialField> tilts_;
    };

    struct BranchingMechanism
    {
        SpatialField alpha;
        SpatialField beta;
        LevyMeasure pi;

        bool is_constant() const { return alpha.is_constant() && beta.is_constant() && pi.is_constant(); }
    };

    BranchingMechanism quadratic_mechanism(double alpha, double beta);

    // Checks the standing assumptions at the given sample points (β ≥ 0, atom sizes > 0,
    // weights ≥ 0, finite ∫(z∧z²)π). Throws ConfigError.
    void validate(const BranchingMechanism& mech, const std::vector<Point>& samples);

    double psi(const BranchingMechanism& mech, const Point& x, double lam);
    double psi_prime(const BranchingMechanism& mech, const Point& x, double lam);

    // ψ*(x,λ) = ψ(x,λ+w(x)) − ψ(x,w(x)) as (α*, β, e^{-wz}π).
    BranchingMechanism conditioned_mechanism(const BranchingMechanism& mech, const SpatialField& w);

    // Largest |ψ*(x,λ) − (ψ(x,λ+w) − ψ(x,w))| over the sample grid.
    double conditioned_identity_residual(const BranchingMechanism& mech, const SpatialField& w,
                                         const std::vector<Point>& xs, const std::vector<double>& lams_over_w);

    // φ(x,λ) = 2βλ + ∫(1 − e^{-λz}) z e^{-w(x)z} π(x,dz)
    double phi(const BranchingMechanism& mech, const SpatialField& w, const Point& x, double lam);

    double backbone_rate(const BranchingMechanism& mech, const SpatialField& w, const Point& x);

    // Discrete law on {0, 1, ..., N}. p[k] is the probability of k offspring.
    struct OffspringLaw
    {
        std::vector<double> p;
        double tail_bound = 0.0;

        double total() const;
        double mean() const;
        // Draws from the law renormalized over the retained support.
        int sample(Stream& rng) const;
        void finalize();

    private:
        std::vector<double> cdf_;
    };

    inline constexpr int kDefaultNmax = 64;
    inline constexpr double kTailTarget = 1e-8;

    OffspringLaw offspring_pmf(const BranchingMechanism& mech, const SpatialField& w, const Point& x,
                               int n_max = kDefaultNmax);

    // Branch-point mass law η_n(x,·): Y = 0 with the quadratic weight, else an atom of π
    // weighted by y^n e^{-wy}.
    struct BranchMassLaw
    {
        std::vector<double> values;
        std::vector<double> probs;

        double sample(Stream& rng) const;
        double mean() const;
    };

    BranchMassLaw branch_mass_law(const BranchingMechanism& mech, const SpatialField& w, const Point& x, int n);
    double branch_mass_sampler(const BranchingMechanism& mech, const SpatialField& w, const Point& x, int n,
                               Stream& rng);

    // Rate and offspring pmf whose generator equals F_n(x,s) = n^{-1}[ψ(x,n(1−s)) + α(x)n(1−s)].
    struct ParticleLaw
    {
        double rate = 0.0;
        OffspringLaw offspring;
    };

    ParticleLaw particle_law(const BranchingMechanism& mech, double n, const Point& x);
    double particle_generator(const BranchingMechanism& mech, double n, const Point& x, double s);

    // particle_law with the linear term restored: α > 0 adds binary splitting at rate α,
    // α < 0 adds death at rate |α|. The rescaled system then has Laplace exponent
    // dynamics −ψ(u) − α⁺u²/n.
    ParticleLaw superprocess_law(const BranchingMechanism& mech, double n, const Point& x);

    // Largest root of λ ↦ ψ(λ) on (0,∞) for a non-spatial mechanism; 0 if none.
    double largest_root(const BranchingMechanism& mech, double tol = 1e-14);

    double poisson_tail_bound(double lam, int k);
}
