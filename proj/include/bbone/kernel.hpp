#pragma once

#include "bbone/motion.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace bbone
{
    enum class KernelMode
    {
        Auto,
        Analytic,
        MonteCarlo
    };

    // Transition operator of ξ over a time s acting on the natural cubic spline through node values
    // (constant beyond the ends of an unbounded grid). For a bounded grid the operator is the one of
    // ξ killed at the grid ends, and flux_l/flux_r hold the probabilities of exiting through each end
    // by time s. Row i is rows[i]·v[first[i]..] + rows_m[i]·M[first_m[i]..] with M the spline
    // second derivatives.
    struct StepKernel
    {
        double s = 0.0;
        double h = 0.0;
        bool bounded = false;
        std::vector<std::size_t> first;
        std::vector<std::vector<double>> rows;
        std::vector<std::size_t> first_m;
        std::vector<std::vector<double>> rows_m;
        std::vector<double> flux_l;
        std::vector<double> flux_r;

        std::size_t size() const { return rows.size(); }
        void apply(const std::vector<double>& v, std::vector<double>& out) const;
        double row_sum(std::size_t i) const;
    };

    class KernelFactory
    {
    public:
        // `bounded`: the grid ends are the ends of an interval domain.
        KernelFactory(const DiffusionSpec& spec, std::vector<double> xs, bool bounded, KernelMode mode,
                      std::size_t mc_samples = 4000, double mc_dt = 1e-3, std::uint64_t seed = 1);

        const StepKernel& get(double s);
        const std::vector<double>& xs() const { return xs_; }
        bool bounded() const { return bounded_; }
        KernelMode mode() const { return mode_; }
        std::string mode_name() const;

    private:
        StepKernel build_analytic(double s) const;
        StepKernel build_monte_carlo(double s) const;
        // Euler path to time s with bridge-corrected exit detection; returns (end, exit side −1/0/+1).
        std::pair<double, int> bridged_path(double x0, double s, double dt, Stream& rng) const;

        DiffusionSpec spec_;
        std::vector<double> xs_;
        bool bounded_;
        KernelMode mode_;
        std::size_t mc_samples_;
        double mc_dt_;
        std::uint64_t seed_;
        std::map<double, StepKernel> cache_;
    };

    std::vector<double> uniform_nodes(double lo, double hi, std::size_t n);
    std::vector<double> natural_spline_curvature(const std::vector<double>& v, double h);
}
