#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

namespace bbone
{
    inline constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept
    {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    inline constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept
    {
        return splitmix64(a ^ (splitmix64(b) + 0x632be59bd9b4e019ULL + (a << 6) + (a >> 2)));
    }

    // Module tags for stream derivation. Values are part of the reproducibility contract.
    enum class Tag : std::uint64_t
    {
        Motion = 1,
        Particle = 2,
        Backbone = 3,
        Continuum = 4,
        Discontinuous = 5,
        BranchPoint = 6,
        Subprocess = 7,
        Solver = 8,
        Stats = 9,
        Init = 10,
    };

    // Counter-based stream: the k-th output is a pure function of (key, k), so
    // streams keyed by (seed, tag, replication, ...) are independent of scheduling.
    class Stream
    {
    public:
        using result_type = std::uint64_t;

        Stream() = default;
        explicit Stream(std::uint64_t key) : key_(splitmix64(key)) {}
        Stream(std::uint64_t seed, Tag tag, std::uint64_t replication, std::uint64_t sub = 0)
            : key_(hash_combine(hash_combine(hash_combine(seed, static_cast<std::uint64_t>(tag)), replication), sub))
        {
        }

        static constexpr result_type min() { return 0; }
        static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

        result_type operator()() noexcept { return splitmix64(key_ + 0xd1b54a32d192ed03ULL * (++counter_)); }

        // Independent substream keyed by id; does not advance this stream.
        Stream child(std::uint64_t id) const noexcept
        {
            Stream s;
            s.key_ = hash_combine(key_, id);
            return s;
        }

        std::uint64_t key() const noexcept { return key_; }
        std::uint64_t counter() const noexcept { return counter_; }

        // Uniform on (0,1), never exactly 0 or 1.
        double uniform() noexcept { return ((*this)() >> 11) * 0x1.0p-53 + 0x1.0p-54; }

        double exponential(double rate) noexcept { return -std::log(uniform()) / rate; }

        // Marsaglia polar method without caching, so every call consumes a fixed pattern.
        double normal() noexcept
        {
            for (;;)
            {
                const double u = 2.0 * uniform() - 1.0;
                const double v = 2.0 * uniform() - 1.0;
                const double s = u * u + v * v;
                if (s > 0.0 && s < 1.0)
                {
                    return u * std::sqrt(-2.0 * std::log(s) / s);
                }
            }
        }

        std::uint64_t poisson(double mean)
        {
            if (mean <= 0.0)
            {
                return 0;
            }
            std::poisson_distribution<std::uint64_t> d(mean);
            return d(*this);
        }

        bool bernoulli(double p) noexcept { return uniform() < p; }

        std::size_t index(std::size_t n) noexcept { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

    private:
        std::uint64_t key_ = 0x853c49e6748fea9bULL;
        std::uint64_t counter_ = 0;
    };
}
