#include "bbone/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bbone
{
    namespace
    {
        constexpr double kBand = 9.0;
        constexpr double kInvSqrt2 = 0.70710678118654752440;
        constexpr double kInvSqrt2Pi = 0.39894228040143267794;

        double density(double y, double mu, double sigma)
        {
            const double z = (y - mu) / sigma;
            return kInvSqrt2Pi / sigma * std::exp(-0.5 * z * z);
        }

        // Gaussian mass of [a, b], accurate in both tails.
        double mass(double a, double b, double mu, double sigma)
        {
            const double za = (a - mu) / sigma;
            const double zb = (b - mu) / sigma;
            if (za >= 0.0)
            {
                return 0.5 * (std::erfc(za * kInvSqrt2) - std::erfc(zb * kInvSqrt2));
            }
            return 0.5 * (std::erfc(-zb * kInvSqrt2) - std::erfc(-za * kInvSqrt2));
        }

        double lower_tail(double b, double mu, double sigma) { return 0.5 * std::erfc(-(b - mu) / sigma * kInvSqrt2); }
        double upper_tail(double a, double mu, double sigma) { return 0.5 * std::erfc((a - mu) / sigma * kInvSqrt2); }

        // Moments ∫_cell N(y; μ, σ²) t^p dy, t = (y − x_k)/h, p = 0..3. The recursion for truncated
        // normal moments cancels badly when σ ≫ h, so wide Gaussians use Gauss–Legendre on the cell.
        void cell_moments(double xk, double h, double mu, double sigma, double T[4])
        {
            T[0] = mass(xk, xk + h, mu, sigma);
            if (sigma > 3.0 * h)
            {
                static constexpr double nodes[5] = {-0.9061798459386640, -0.5384693101056831, 0.0, 0.5384693101056831,
                                                    0.9061798459386640};
                static constexpr double weights[5] = {0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
                                                      0.4786286704993665, 0.2369268850561891};
                T[1] = T[2] = T[3] = 0.0;
                for (int q = 0; q < 5; ++q)
                {
                    const double t = 0.5 * (nodes[q] + 1.0);
                    const double g = 0.5 * h * weights[q] * density(xk + t * h, mu, sigma);
                    T[1] += g * t;
                    T[2] += g * t * t;
                    T[3] += g * t * t * t;
                }
                return;
            }
            const double m = mu - xk;
            const double s2 = sigma * sigma;
            const double n0 = density(xk, mu, sigma);
            const double nh = density(xk + h, mu, sigma);
            double Z[4];
            Z[0] = T[0];
            Z[1] = m * Z[0] + s2 * (n0 - nh);
            Z[2] = m * Z[1] + s2 * Z[0] - s2 * h * nh;
            Z[3] = m * Z[2] + 2.0 * s2 * Z[1] - s2 * h * h * nh;
            double hp = h;
            for (int p = 1; p < 4; ++p)
            {
                T[p] = std::clamp(Z[p] / hp, 0.0, T[0]);
                hp *= h;
            }
        }

        // Adds weight·N(μ, σ²) integrated against the natural cubic spline through the nodes:
        // `va` collects the weights of the node values, `vm` those of the spline second derivatives.
        void deposit_gaussian(const std::vector<double>& xs, double mu, double sigma, double weight, std::vector<double>& va,
                              std::vector<double>& vm)
        {
            const std::size_t n = xs.size();
            const double h = xs[1] - xs[0];
            const double lo = mu - kBand * sigma;
            const double hi = mu + kBand * sigma;
            if (hi < xs.front() || lo > xs.back())
            {
                return;
            }
            const auto k0 = static_cast<std::size_t>(std::max(0.0, std::floor((lo - xs.front()) / h)));
            const auto k1 = std::min(n - 2, static_cast<std::size_t>(std::max(0.0, std::floor((hi - xs.front()) / h))));
            const double c = h * h / 6.0;
            double T[4];
            for (std::size_t k = k0; k <= k1; ++k)
            {
                cell_moments(xs[k], h, mu, sigma, T);
                if (T[0] == 0.0)
                {
                    continue;
                }
                va[k] += weight * (T[0] - T[1]);
                va[k + 1] += weight * T[1];
                vm[k] += weight * c * (-2.0 * T[1] + 3.0 * T[2] - T[3]);
                vm[k + 1] += weight * c * (T[3] - T[1]);
            }
        }

        // ∫_l^r e^{−κ(y−l)} N(y; μ, σ²) dy
        double exp_moment(double l, double r, double kappa, double mu, double sigma)
        {
            const double shifted = mu - kappa * sigma * sigma;
            return std::exp(-kappa * (mu - l) + 0.5 * kappa * kappa * sigma * sigma) * mass(l, r, shifted, sigma);
        }

        // ∫_l^r y N(y; μ, σ²) dy
        double linear_moment(double l, double r, double mu, double sigma)
        {
            return mu * mass(l, r, mu, sigma) + sigma * sigma * (density(l, mu, sigma) - density(r, mu, sigma));
        }

        void compress(const std::vector<double>& dense, std::size_t& first, std::vector<double>& row)
        {
            std::size_t a = 0;
            while (a < dense.size() && dense[a] == 0.0)
            {
                ++a;
            }
            std::size_t b = dense.size();
            while (b > a && dense[b - 1] == 0.0)
            {
                --b;
            }
            first = a;
            row.assign(dense.begin() + static_cast<std::ptrdiff_t>(a), dense.begin() + static_cast<std::ptrdiff_t>(b));
        }
    }

    std::vector<double> uniform_nodes(double lo, double hi, std::size_t n)
    {
        if (n < 2 || !(hi > lo))
        {
            throw ConfigError("uniform_nodes: need n >= 2 and hi > lo");
        }
        std::vector<double> xs(n);
        for (std::size_t i = 0; i < n; ++i)
        {
            xs[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
        }
        xs.back() = hi;
        return xs;
    }

    namespace
    {
        void banded_multiply_add(const std::vector<std::size_t>& first, const std::vector<std::vector<double>>& rows,
                                 const std::vector<double>& v, std::vector<double>& out)
        {
            for (std::size_t i = 0; i < rows.size(); ++i)
            {
                const auto& r = rows[i];
                const double* src = v.data() + first[i];
                double acc = 0.0;
                for (std::size_t k = 0; k < r.size(); ++k)
                {
                    acc += r[k] * src[k];
                }
                out[i] += acc;
            }
        }
    }

    std::vector<double> natural_spline_curvature(const std::vector<double>& v, double h)
    {
        const std::size_t n = v.size();
        std::vector<double> M(n, 0.0);
        if (n < 3)
        {
            return M;
        }
        // M_{k−1} + 4M_k + M_{k+1} = 6(v_{k+1} − 2v_k + v_{k−1})/h², M_0 = M_{n−1} = 0.
        const std::size_t m = n - 2;
        std::vector<double> c(m);
        std::vector<double> d(m);
        const double scale = 6.0 / (h * h);
        for (std::size_t k = 0; k < m; ++k)
        {
            const double rhs = scale * (v[k + 2] - 2.0 * v[k + 1] + v[k]);
            const double den = k == 0 ? 4.0 : 4.0 - c[k - 1];
            c[k] = 1.0 / den;
            d[k] = (rhs - (k == 0 ? 0.0 : d[k - 1])) / den;
        }
        M[m] = d[m - 1];
        for (std::size_t k = m - 1; k-- > 0;)
        {
            M[k + 1] = d[k] - c[k] * M[k + 2];
        }
        return M;
    }

    void StepKernel::apply(const std::vector<double>& v, std::vector<double>& out) const
    {
        out.assign(rows.size(), 0.0);
        banded_multiply_add(first, rows, v, out);
        if (!rows_m.empty())
        {
            banded_multiply_add(first_m, rows_m, natural_spline_curvature(v, h), out);
        }
    }

    double StepKernel::row_sum(std::size_t i) const
    {
        double acc = 0.0;
        for (double v : rows.at(i))
        {
            acc += v;
        }
        return acc;
    }

    KernelFactory::KernelFactory(const DiffusionSpec& spec, std::vector<double> xs, bool bounded, KernelMode mode,
                                 std::size_t mc_samples, double mc_dt, std::uint64_t seed)
        : spec_(spec), xs_(std::move(xs)), bounded_(bounded), mode_(mode), mc_samples_(mc_samples), mc_dt_(mc_dt),
          seed_(seed)
    {
        if (spec_.dim != 1)
        {
            throw ConfigError("KernelFactory: the grid solver supports d = 1 only");
        }
        if (xs_.size() < 3)
        {
            throw ConfigError("KernelFactory: need at least 3 grid nodes");
        }
        const double h = xs_[1] - xs_[0];
        for (std::size_t i = 1; i < xs_.size(); ++i)
        {
            if (std::abs(xs_[i] - xs_[i - 1] - h) > 1e-9 * h)
            {
                throw ConfigError("KernelFactory: grid must be uniform");
            }
        }
        if (mode_ == KernelMode::Auto)
        {
            mode_ = spec_.constant_coefficients ? KernelMode::Analytic : KernelMode::MonteCarlo;
        }
        if (mode_ == KernelMode::Analytic && !spec_.constant_coefficients)
        {
            throw ConfigError("KernelFactory: analytic kernels need constant coefficients");
        }
        if (mode_ == KernelMode::MonteCarlo && (mc_samples_ == 0 || !(mc_dt_ > 0.0)))
        {
            throw ConfigError("KernelFactory: Monte Carlo mode needs samples > 0 and dt > 0");
        }
    }

    std::string KernelFactory::mode_name() const
    {
        return mode_ == KernelMode::Analytic ? "analytic" : "monte_carlo";
    }

    const StepKernel& KernelFactory::get(double s)
    {
        if (!(s > 0.0))
        {
            throw std::domain_error("KernelFactory::get: s must be positive");
        }
        auto it = cache_.find(s);
        if (it != cache_.end())
        {
            return it->second;
        }
        StepKernel k = mode_ == KernelMode::Analytic ? build_analytic(s) : build_monte_carlo(s);
        return cache_.emplace(s, std::move(k)).first->second;
    }

    StepKernel KernelFactory::build_analytic(double s) const
    {
        const double a = spec_.a11_const();
        const double b = spec_.b1_const();
        const std::size_t n = xs_.size();
        const double sigma = std::sqrt(2.0 * a * s);
        StepKernel K;
        K.s = s;
        K.bounded = bounded_;
        K.h = xs_[1] - xs_[0];
        K.first.assign(n, 0);
        K.rows.assign(n, {});
        K.first_m.assign(n, 0);
        K.rows_m.assign(n, {});
        std::vector<double> dense(n);
        std::vector<double> dense_m(n);

        if (!bounded_)
        {
            for (std::size_t i = 0; i < n; ++i)
            {
                std::fill(dense.begin(), dense.end(), 0.0);
                std::fill(dense_m.begin(), dense_m.end(), 0.0);
                const double mu = xs_[i] + b * s;
                deposit_gaussian(xs_, mu, sigma, 1.0, dense, dense_m);
                dense.front() += lower_tail(xs_.front(), mu, sigma);
                dense.back() += upper_tail(xs_.back(), mu, sigma);
                compress(dense, K.first[i], K.rows[i]);
                compress(dense_m, K.first_m[i], K.rows_m[i]);
            }
            return K;
        }

        // Killed at l, r: method of images for the driftless density, then the Girsanov factor
        // e^{c(y−x) − b²s/(4a)}, c = b/(2a), absorbed into each image by completing the square.
        const double l = xs_.front();
        const double r = xs_.back();
        const double W = r - l;
        const double c = b / (2.0 * a);
        const double kappa = b / a;
        const bool linear_scale = std::abs(kappa) * W < 1e-8;
        const int kmax = 1 + static_cast<int>(std::ceil((kBand * sigma + std::abs(c) * sigma * sigma + W) / (2.0 * W)));
        K.flux_l.assign(n, 0.0);
        K.flux_r.assign(n, 0.0);
        for (std::size_t i = 1; i + 1 < n; ++i)
        {
            std::fill(dense.begin(), dense.end(), 0.0);
            std::fill(dense_m.begin(), dense_m.end(), 0.0);
            const double x = xs_[i];
            double m0 = 0.0;
            double ms = 0.0;
            for (int k = -kmax; k <= kmax; ++k)
            {
                const double shift = 2.0 * k * W;
                const double means[2] = {x + shift, 2.0 * l - x + shift};
                const double signs[2] = {1.0, -1.0};
                for (int e = 0; e < 2; ++e)
                {
                    const double mu = means[e] + c * sigma * sigma;
                    if (mu + kBand * sigma < l || mu - kBand * sigma > r)
                    {
                        continue;
                    }
                    const double weight = signs[e] * std::exp(c * (means[e] - x));
                    deposit_gaussian(xs_, mu, sigma, weight, dense, dense_m);
                    m0 += weight * mass(l, r, mu, sigma);
                    ms += weight * (linear_scale ? linear_moment(l, r, mu, sigma) - l * mass(l, r, mu, sigma)
                                                 : exp_moment(l, r, kappa, mu, sigma));
                }
            }
            compress(dense, K.first[i], K.rows[i]);
            compress(dense_m, K.first_m[i], K.rows_m[i]);
            m0 = std::clamp(m0, 0.0, 1.0);
            // Harmonic function for the left exit: h_l(y) = (S(r) − S(y)) / (S(r) − S(l)), with
            // S(y) = y − l (no drift) or S(y) = (1 − e^{−κ(y−l)}) / κ.
            double hl_x;
            double int_hl;
            if (linear_scale)
            {
                hl_x = (r - x) / W;
                int_hl = ((r - l) * m0 - ms) / W;
            }
            else
            {
                const double sr = (1.0 - std::exp(-kappa * W)) / kappa;
                const double sx = (1.0 - std::exp(-kappa * (x - l))) / kappa;
                hl_x = (sr - sx) / sr;
                const double int_s = (m0 - ms) / kappa;
                int_hl = (sr * m0 - int_s) / sr;
            }
            const double fl = std::clamp(hl_x - int_hl, 0.0, 1.0 - m0);
            K.flux_l[i] = fl;
            K.flux_r[i] = std::max(0.0, 1.0 - m0 - fl);
        }
        return K;
    }

    std::pair<double, int> KernelFactory::bridged_path(double x0, double s, double dt, Stream& rng) const
    {
        const double l = xs_.front();
        const double r = xs_.back();
        const auto steps = static_cast<std::size_t>(std::ceil(s / dt - 1e-9));
        const double h = s / static_cast<double>(steps);
        Point x = point1(x0);
        for (std::size_t k = 0; k < steps; ++k)
        {
            const double var = 2.0 * spec_.diffusion(x)[0][0] * h;
            const Point y = em_step(spec_, x, h, rng);
            if (bounded_)
            {
                if (y[0] <= l)
                {
                    return {y[0], -1};
                }
                if (y[0] >= r)
                {
                    return {y[0], 1};
                }
                // Brownian-bridge probability of an undetected crossing within the step.
                const double pl = std::exp(-2.0 * (x[0] - l) * (y[0] - l) / var);
                const double pr = std::exp(-2.0 * (r - x[0]) * (r - y[0]) / var);
                const double u = rng.uniform();
                if (u < pl)
                {
                    return {l, -1};
                }
                if (u < pl + pr)
                {
                    return {r, 1};
                }
            }
            x = y;
        }
        return {x[0], 0};
    }

    StepKernel KernelFactory::build_monte_carlo(double s) const
    {
        const std::size_t n = xs_.size();
        const double h = xs_[1] - xs_[0];
        const double dt = std::min(mc_dt_, s);
        StepKernel K;
        K.s = s;
        K.bounded = bounded_;
        K.h = h;
        K.first.assign(n, 0);
        K.rows.assign(n, {});
        K.first_m.assign(n, 0);
        K.rows_m.assign(n, {});
        if (bounded_)
        {
            K.flux_l.assign(n, 0.0);
            K.flux_r.assign(n, 0.0);
        }
        const auto level = static_cast<std::uint64_t>(std::llround(std::log2(s) * 1024.0));
        std::vector<double> dense(n);
        std::vector<double> dense_m(n);
        const double c = h * h / 6.0;
        const double inc = 1.0 / static_cast<double>(mc_samples_);
        const std::size_t lo_i = bounded_ ? 1 : 0;
        const std::size_t hi_i = bounded_ ? n - 1 : n;
        for (std::size_t i = lo_i; i < hi_i; ++i)
        {
            std::fill(dense.begin(), dense.end(), 0.0);
            std::fill(dense_m.begin(), dense_m.end(), 0.0);
            Stream rng(seed_, Tag::Solver, level, i);
            for (std::size_t m = 0; m < mc_samples_; ++m)
            {
                const auto [y, exit_side] = bridged_path(xs_[i], s, dt, rng);
                if (exit_side != 0)
                {
                    (exit_side < 0 ? K.flux_l[i] : K.flux_r[i]) += inc;
                    continue;
                }
                if (y <= xs_.front())
                {
                    dense.front() += inc;
                }
                else if (y >= xs_.back())
                {
                    dense.back() += inc;
                }
                else
                {
                    const auto k = std::min(static_cast<std::size_t>((y - xs_.front()) / h), n - 2);
                    const double t = (y - xs_[k]) / h;
                    dense[k] += inc * (1.0 - t);
                    dense[k + 1] += inc * t;
                    dense_m[k] += inc * c * ((1.0 - t) * (1.0 - t) * (1.0 - t) - (1.0 - t));
                    dense_m[k + 1] += inc * c * (t * t * t - t);
                }
            }
            compress(dense, K.first[i], K.rows[i]);
            compress(dense_m, K.first_m[i], K.rows_m[i]);
        }
        return K;
    }
}
