#pragma once

#include "bbone/grid.hpp"
#include "bbone/mechanism.hpp"
#include "bbone/rng.hpp"
#include "bbone/types.hpp"

#include <functional>
#include <limits>
#include <vector>

namespace bbone
{
    using Matrix = std::array<std::array<double, kMaxDim>, kMaxDim>;

    // Whole space or an open box (an open interval when d = 1).
    struct Domain
    {
        bool whole = true;
        Point lo{};
        Point hi{};

        static Domain whole_space() { return Domain{}; }
        static Domain interval(double l, double r);
        static Domain box(const Point& lo, const Point& hi);

        bool contains(const Point& x, int dim) const;
        // True if this domain is a subset of `other` (in the first dim coordinates).
        bool inside(const Domain& other, int dim) const;
    };

    struct DiffusionSpec
    {
        int dim = 1;
        std::function<Matrix(const Point&)> a;
        std::function<Point(const Point&)> b;
        bool constant_coefficients = false;
        Domain domain;
        double gamma = 0.0;
        double holder_constant = 0.0;
        double holder_exponent = 1.0;

        Matrix diffusion(const Point& x) const { return a(x); }
        Point drift(const Point& x) const { return b(x); }
        // Symmetric positive square root of 2a(x).
        Matrix sigma(const Point& x) const;

        double a11_const() const;
        double b1_const() const;

        // Precomputes σ for constant-coefficient specs; factories call it.
        void finalize();

        Matrix sigma_const{};
        Point b_const{};
    };

    // Constant coefficients a = a_scalar·I, b = b_scalar·e (every coordinate).
    DiffusionSpec brownian(int dim, double a_scalar, double b_scalar = 0.0, Domain domain = Domain::whole_space());
    DiffusionSpec make_diffusion(int dim, std::function<Matrix(const Point&)> a, std::function<Point(const Point&)> b,
                                 Domain domain, double gamma);

    // Uniform ellipticity spot check u·a(x)u ≥ γ|u|² at the given points. Throws ConfigError.
    void check_ellipticity(const DiffusionSpec& spec, const std::vector<Point>& samples);

    Matrix symmetric_sqrt(const Matrix& m, int dim);

    // One Euler–Maruyama step of size h.
    Point em_step(const DiffusionSpec& spec, const Point& x, double h, Stream& rng);

    struct StoppedPath
    {
        double dt = 0.0;
        std::vector<double> times;
        std::vector<Point> points;
        double exit_time = std::numeric_limits<double>::infinity();
        bool exited = false;
        bool alive = true;

        const Point& end() const { return points.back(); }
    };

    // Euler–Maruyama path on [0, horizon]; stops at the first grid point outside D.
    StoppedPath simulate_path(const DiffusionSpec& spec, const Point& x0, double horizon, double dt, Stream& rng,
                              const Domain& D = Domain::whole_space(), bool record = true);

    enum class StopRule
    {
        // payoff evaluated at ξ_{t∧τ}
        Stopped,
        // payoff times 1{t < τ}
        Killed
    };

    Estimate feynman_kac(const DiffusionSpec& spec, const Point& x, double t, const std::function<double(const Point&)>& rate,
                         const std::function<double(const Point&)>& payoff, const Domain& D, std::size_t n_samples,
                         double dt, Stream& rng, StopRule rule = StopRule::Stopped);

    // Backbone motion: same a, drift b + 2a∇w/w. w must stay above `w_floor` on its grid.
    DiffusionSpec w_transform(const DiffusionSpec& spec, const GridFunction& w, const BranchingMechanism& mech,
                              double w_floor = 1e-8);
    DiffusionSpec w_transform(const DiffusionSpec& spec, const SpatialField& w_const);

    // Mean of w(ξ_{t∧τ}) exp(−∫ψ(ξ,w)/w ds); should equal w(x).
    Estimate martingale_check(const DiffusionSpec& spec, const BranchingMechanism& mech, const SpatialField& w,
                              const Point& x, double t, const Domain& D, std::size_t n_samples, double dt, Stream& rng);
}
