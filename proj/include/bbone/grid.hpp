#pragma once

#include "bbone/mechanism.hpp"

#include <string>
#include <vector>

namespace bbone
{
    // Values on a uniform space grid (1-d) times a uniform time grid.
    // values[j][i] is the value at (xs[i], ts[j]).
    struct GridFunction
    {
        std::vector<double> xs;
        std::vector<double> ts;
        std::vector<std::vector<double>> values;

        static GridFunction uniform(double x_lo, double x_hi, std::size_t nx, double t_max, std::size_t nt);
        static GridFunction space_only(const std::vector<double>& xs, const std::vector<double>& v);

        std::size_t nx() const { return xs.size(); }
        std::size_t nt() const { return ts.size(); }
        double dx() const { return xs.size() > 1 ? xs[1] - xs[0] : 0.0; }

        const std::vector<double>& at_time_index(std::size_t j) const { return values[j]; }
        const std::vector<double>& last() const { return values.back(); }

        // Linear interpolation in x at time index j; clamped to the end values off-grid.
        double interp(double x, std::size_t j) const;
        // Central-difference derivative in x, linearly interpolated; one-sided at the ends.
        double derivative(double x, std::size_t j) const;

        double min_value() const;
        double max_value() const;
    };

    // x-only field from the grid at time index j, with bounds set to the grid extrema.
    SpatialField as_field(const GridFunction& g, std::size_t j);
    SpatialField as_field(const GridFunction& g);

    double sup_distance(const std::vector<double>& a, const std::vector<double>& b);
}
