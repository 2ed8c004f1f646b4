#include "bbone/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bbone
{
    GridFunction GridFunction::uniform(double x_lo, double x_hi, std::size_t nx, double t_max, std::size_t nt)
    {
        if (nx < 2 || nt < 1 || !(x_hi > x_lo))
        {
            throw ConfigError("GridFunction: need nx >= 2, nt >= 1 and x_hi > x_lo");
        }
        GridFunction g;
        g.xs.resize(nx);
        for (std::size_t i = 0; i < nx; ++i)
        {
            g.xs[i] = x_lo + (x_hi - x_lo) * static_cast<double>(i) / static_cast<double>(nx - 1);
        }
        g.ts.resize(nt);
        for (std::size_t j = 0; j < nt; ++j)
        {
            g.ts[j] = nt == 1 ? 0.0 : t_max * static_cast<double>(j) / static_cast<double>(nt - 1);
        }
        g.values.assign(nt, std::vector<double>(nx, 0.0));
        return g;
    }

    GridFunction GridFunction::space_only(const std::vector<double>& xs, const std::vector<double>& v)
    {
        if (xs.size() != v.size() || xs.size() < 2)
        {
            throw ConfigError("GridFunction::space_only: size mismatch");
        }
        GridFunction g;
        g.xs = xs;
        g.ts = {0.0};
        g.values = {v};
        return g;
    }

    double GridFunction::interp(double x, std::size_t j) const
    {
        const auto& v = values.at(j);
        if (x <= xs.front())
        {
            return v.front();
        }
        if (x >= xs.back())
        {
            return v.back();
        }
        const double h = dx();
        const auto i = std::min(static_cast<std::size_t>((x - xs.front()) / h), xs.size() - 2);
        const double r = (x - xs[i]) / h;
        return (1.0 - r) * v[i] + r * v[i + 1];
    }

    double GridFunction::derivative(double x, std::size_t j) const
    {
        const auto& v = values.at(j);
        const std::size_t n = xs.size();
        const double h = dx();
        auto d = [&](std::size_t i) {
            if (i == 0)
            {
                return (v[1] - v[0]) / h;
            }
            if (i == n - 1)
            {
                return (v[n - 1] - v[n - 2]) / h;
            }
            return (v[i + 1] - v[i - 1]) / (2.0 * h);
        };
        if (x <= xs.front())
        {
            return d(0);
        }
        if (x >= xs.back())
        {
            return d(n - 1);
        }
        const auto i = std::min(static_cast<std::size_t>((x - xs.front()) / h), n - 2);
        const double r = (x - xs[i]) / h;
        return (1.0 - r) * d(i) + r * d(i + 1);
    }

    double GridFunction::min_value() const
    {
        double m = values.at(0).at(0);
        for (const auto& row : values)
        {
            m = std::min(m, *std::min_element(row.begin(), row.end()));
        }
        return m;
    }

    double GridFunction::max_value() const
    {
        double m = values.at(0).at(0);
        for (const auto& row : values)
        {
            m = std::max(m, *std::max_element(row.begin(), row.end()));
        }
        return m;
    }

    SpatialField as_field(const GridFunction& g, std::size_t j)
    {
        const auto& row = g.values.at(j);
        const double lo = *std::min_element(row.begin(), row.end());
        const double hi = *std::max_element(row.begin(), row.end());
        if (hi - lo <= 1e-14 * std::max(1.0, std::abs(hi)))
        {
            return SpatialField::constant(0.5 * (lo + hi));
        }
        GridFunction slice;
        slice.xs = g.xs;
        slice.ts = {g.ts.at(j)};
        slice.values = {row};
        return SpatialField::make([slice](const Point& x) { return slice.interp(x[0], 0); }, lo, hi);
    }

    SpatialField as_field(const GridFunction& g) { return as_field(g, g.nt() - 1); }

    double sup_distance(const std::vector<double>& a, const std::vector<double>& b)
    {
        if (a.size() != b.size())
        {
            throw std::invalid_argument("sup_distance: size mismatch");
        }
        double m = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
        {
            m = std::max(m, std::abs(a[i] - b[i]));
        }
        return m;
    }
}
