#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace bbone
{
    inline constexpr std::size_t kMaxDim = 3;

    // Locations in E ⊂ R^d, d ≤ 3. Unused trailing coordinates stay 0.
    using Point = std::array<double, kMaxDim>;

    inline Point point1(double x) { return Point{x, 0.0, 0.0}; }

    struct ConfigError : std::runtime_error
    {
        using std::runtime_error::runtime_error;
    };

    // w not bounded away from 0 and infinity.
    struct AssumptionError : std::runtime_error
    {
        using std::runtime_error::runtime_error;
    };

    struct NumericalError : std::runtime_error
    {
        using std::runtime_error::runtime_error;
    };

    struct TruncationError : std::runtime_error
    {
        TruncationError(const std::string& what, int suggested)
            : std::runtime_error(what), suggested_nmax(suggested) {}
        int suggested_nmax;
    };

    struct ConsistencyError : std::logic_error
    {
        using std::logic_error::logic_error;
    };

    // Monte Carlo estimate with its standard error.
    struct Estimate
    {
        double mean = 0.0;
        double se = 0.0;
        std::size_t n = 0;
    };
}
