#include "bbone/stats.hpp"

#include <json.hpp>

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace bbone
{
    namespace
    {
        constexpr double kInf = std::numeric_limits<double>::infinity();

        double variance(const std::vector<double>& v, double mean)
        {
            double s = 0.0;
            for (double x : v)
            {
                s += (x - mean) * (x - mean);
            }
            return s / static_cast<double>(v.size() - 1);
        }

        std::vector<double> laplace_values(const std::vector<double>& pairings)
        {
            std::vector<double> out;
            out.reserve(pairings.size());
            for (double p : pairings)
            {
                if (!(p >= 0.0))
                {
                    throw ConfigError("laplace functional: pairings must be nonnegative");
                }
                out.push_back(std::exp(-p));
            }
            return out;
        }

        void require_constant(const BackboneModel& model, const char* who)
        {
            if (!model.mech.is_constant() || !model.w.is_constant())
            {
                throw ConfigError(std::string(who) + ": needs a non-spatial mechanism and constant w");
            }
        }

        double alpha_plus(const BranchingMechanism& mech) { return std::max(mech.alpha(Point{}), 0.0); }

        // Right-hand side of the level-n exponent equation.
        double level_rhs(const BranchingMechanism& mech, double n, double u)
        {
            const double split = std::isfinite(n) ? alpha_plus(mech) * u * u / n : 0.0;
            return -psi(mech, Point{}, u) - split;
        }

        double level_start(double n, double theta) { return std::isfinite(n) ? -n * std::expm1(-theta / n) : theta; }

        // Hazard of continuum plus discontinuous immigration at subprocess exponent u: the exact φ when
        // ε = 0, else the ε-mass surrogate.
        double immigration_hazard(const BackboneModel& model, double epsilon, double u)
        {
            const Point x{};
            const double b = model.mech.beta(x);
            double g = epsilon > 0.0 ? 2.0 * b * (-std::expm1(-epsilon * u)) / epsilon : 2.0 * b * u;
            const double wx = model.w(x);
            g += model.mech.pi.integrate(x, [&](double z) { return z * std::exp(-wx * z) * (-std::expm1(-z * u)); });
            return g;
        }

        // Σ_u ∫_{b_u}^{min(end_u, t)} rate(z_u(s), t − s) ds by the trapezoid rule.
        double tree_integral(const BackboneTree& tree, const std::function<double(const Point&, double)>& rate, double t, double ds)
        {
            if (!(ds > 0.0))
            {
                throw ConfigError("tree integral: ds must be > 0");
            }
            double total = 0.0;
            for (std::size_t i = 0; i < tree.nodes.size(); ++i)
            {
                const auto& n = tree.nodes[i];
                const double a = n.birth;
                const double b = std::min(n.end_time(tree.horizon), t);
                if (!(b > a))
                {
                    continue;
                }
                const auto m = static_cast<std::size_t>(std::ceil((b - a) / ds));
                const double h = (b - a) / static_cast<double>(m);
                double s = 0.0;
                for (std::size_t k = 0; k <= m; ++k)
                {
                    const double r = k == m ? b : a + h * static_cast<double>(k);
                    const double v = rate(tree.position(i, r), t - r);
                    s += (k == 0 || k == m) ? 0.5 * v : v;
                }
                total += s * h;
            }
            return total;
        }

        // Tabulates the level-n_sub subprocess exponent on [0, t] with RK4 at m steps.
        std::vector<double> exponent_table(const BranchingMechanism& mech, double n, double theta, double t, std::size_t m)
        {
            std::vector<double> u(m + 1);
            u[0] = level_start(n, theta);
            const double h = t / static_cast<double>(m);
            for (std::size_t k = 0; k < m; ++k)
            {
                const double y = u[k];
                const double k1 = level_rhs(mech, n, y);
                const double k2 = level_rhs(mech, n, y + 0.5 * h * k1);
                const double k3 = level_rhs(mech, n, y + 0.5 * h * k2);
                const double k4 = level_rhs(mech, n, y + h * k3);
                u[k + 1] = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0;
            }
            return u;
        }

        double table_at(const std::vector<double>& u, double t, double r)
        {
            if (t <= 0.0)
            {
                return u[0];
            }
            const double pos = std::clamp(r / t, 0.0, 1.0) * static_cast<double>(u.size() - 1);
            const auto k = std::min(static_cast<std::size_t>(pos), u.size() - 2);
            const double s = pos - static_cast<double>(k);
            return (1.0 - s) * u[k] + s * u[k + 1];
        }

        nlohmann::json to_json(const FunctionalTestReport& r)
        {
            return {{"id", r.id},
                    {"a", {{"mean", r.a.mean}, {"se", r.a.se}, {"n", r.a.n}}},
                    {"b", {{"mean", r.b.mean}, {"se", r.b.se}, {"n", r.b.n}}},
                    {"residual", r.residual()},
                    {"combined_se", r.combined_se},
                    {"z", r.z},
                    {"threshold", r.threshold},
                    {"bias", {{"epsilon", r.bias.epsilon}, {"n", r.bias.n}, {"dt", r.bias.dt}, {"horizon", r.bias.horizon}, {"solver", r.bias.solver}}},
                    {"tolerance", r.tolerance()},
                    {"pass", r.pass},
                    {"inconclusive", r.inconclusive},
                    {"note", r.note}};
        }

        std::string num(double v)
        {
            std::ostringstream os;
            os << std::setprecision(17) << v;
            return os.str();
        }
    }

    Estimate mean_estimate(const std::vector<double>& values)
    {
        Estimate e;
        e.n = values.size();
        if (values.empty())
        {
            throw ConfigError("mean_estimate: no replications");
        }
        double m = 0.0;
        for (double v : values)
        {
            m += v;
        }
        e.mean = m / static_cast<double>(values.size());
        e.se = values.size() > 1 ? std::sqrt(variance(values, e.mean) / static_cast<double>(values.size())) : 0.0;
        return e;
    }

    FunctionalTestReport compare(std::string id, const Estimate& a, const Estimate& b, double se, const BiasBudget& bias,
                                 double threshold)
    {
        FunctionalTestReport r;
        r.id = std::move(id);
        r.a = a;
        r.b = b;
        r.combined_se = se;
        r.threshold = threshold;
        r.bias = bias;
        const double d = r.residual();
        // Averaging identical values in floating point may not reproduce them exactly.
        const double rounding = 64.0 * std::numeric_limits<double>::epsilon() * (std::abs(a.mean) + std::abs(b.mean));
        if (se == 0.0)
        {
            if (std::abs(d) > bias.total() + rounding)
            {
                std::ostringstream os;
                os << r.id << ": deterministic mismatch " << a.mean << " vs " << b.mean;
                throw ConsistencyError(os.str());
            }
            r.z = 0.0;
            r.pass = true;
            return r;
        }
        r.z = d / se;
        r.pass = std::abs(d) <= r.tolerance() + rounding;
        return r;
    }

    FunctionalTestReport equivalence_test(std::string id, const std::vector<double>& pairings_a, const std::vector<double>& pairings_b,
                                          const BiasBudget& bias, double threshold)
    {
        const Estimate a = mean_estimate(laplace_values(pairings_a));
        const Estimate b = mean_estimate(laplace_values(pairings_b));
        return compare(std::move(id), a, b, std::hypot(a.se, b.se), bias, threshold);
    }

    FunctionalTestReport equivalence_test(std::string id, const std::vector<double>& pairings_a, double oracle,
                                          const BiasBudget& bias, double threshold)
    {
        const Estimate a = mean_estimate(laplace_values(pairings_a));
        Estimate b;
        b.mean = oracle;
        return compare(std::move(id), a, b, a.se, bias, threshold);
    }

    PoissonFieldReport poisson_field_test(std::string id, const std::vector<JointSample>& samples, double oracle,
                                          const BiasBudget& bias, double threshold)
    {
        std::vector<double> joint;
        std::vector<double> cond;
        std::vector<double> diff;
        for (const auto& s : samples)
        {
            if (!(s.f_delta >= 0.0 && s.h_z >= 0.0 && s.wh_delta >= 0.0))
            {
                throw ConfigError("poisson_field_test: pairings must be nonnegative");
            }
            joint.push_back(std::exp(-s.h_z - s.f_delta));
            cond.push_back(std::exp(-s.f_delta - s.wh_delta));
            diff.push_back(joint.back() - cond.back());
        }
        PoissonFieldReport r;
        Estimate o;
        o.mean = oracle;
        const Estimate j = mean_estimate(joint);
        r.joint = compare(id + "/joint", j, o, j.se, bias, threshold);
        // The conditional form shares Δ_t with the joint one, so only the Poisson noise of Z_t given Δ_t remains.
        r.conditional = compare(id + "/conditional", j, mean_estimate(cond), mean_estimate(diff).se, {}, threshold);
        return r;
    }

    ExtinctionReport extinction_test(std::string id, const std::vector<CountPath>& paths, const std::vector<double>& horizons,
                                     double oracle, const BiasBudget& bias, double threshold, double stab_factor)
    {
        if (paths.empty() || horizons.empty())
        {
            throw ConfigError("extinction_test: needs replications and a horizon ladder");
        }
        ExtinctionReport r;
        r.horizons = horizons;
        const std::size_t K = horizons.size();
        std::vector<std::vector<double>> cols(K);
        for (const auto& p : paths)
        {
            if (p.extinct_by.size() != K)
            {
                throw ConfigError("extinction_test: paths do not match the horizon ladder");
            }
            for (std::size_t k = 0; k < K; ++k)
            {
                cols[k].push_back(p.extinct_by[k]);
            }
        }
        for (const auto& c : cols)
        {
            r.by_horizon.push_back(mean_estimate(c));
        }
        const Estimate& last = r.by_horizon.back();
        Estimate o;
        o.mean = oracle;
        r.report = compare(std::move(id), last, o, last.se, bias, threshold);
        if (K > 1)
        {
            r.last_increment = last.mean - r.by_horizon[K - 2].mean;
            r.stabilizing = r.last_increment <= stab_factor * std::max(last.se, 1e-12);
        }
        else
        {
            r.stabilizing = false;
        }
        if (!r.stabilizing)
        {
            r.report.inconclusive = true;
            r.report.note = "horizon ladder not stabilizing";
        }
        return r;
    }

    double conditional_tree_formula(const BackboneTree& tree, const BackboneModel& model,
                          const std::function<double(const Point&, double)>& u_star, double t, double ds)
    {
        const auto rate = [&](const Point& x, double r) { return phi(model.mech, model.w, x, u_star(x, r)); };
        return std::exp(-tree_integral(tree, rate, t, ds));
    }

    double conditional_tree_construction(const BackboneTree& tree, const BackboneModel& model, double theta, double t,
                               const DecoratedLevels& levels, double ds)
    {
        require_constant(model, "conditional_tree_construction");
        const auto m = static_cast<std::size_t>(std::max(2000.0, std::ceil(t * 2000.0)));
        const auto u = exponent_table(model.mech_star, levels.n_sub, theta, t, m);
        const auto rate = [&](const Point&, double r) { return immigration_hazard(model, levels.epsilon, table_at(u, t, r)); };
        return std::exp(-tree_integral(tree, rate, t, ds));
    }

    FunctionalTestReport conditional_tree_test(std::string id, const std::vector<double>& conditional_values, double formula,
                                                 const BiasBudget& bias, double threshold)
    {
        const Estimate a = mean_estimate(conditional_values);
        Estimate b;
        b.mean = formula;
        return compare(std::move(id), a, b, a.se, bias, threshold);
    }

    ChiSquareResult chi_square_test(const std::vector<double>& counts, const std::vector<double>& probs, double min_expected)
    {
        if (counts.size() != probs.size() || counts.empty())
        {
            throw ConfigError("chi_square_test: counts and probabilities must have the same nonzero length");
        }
        double total = 0.0;
        double ptotal = 0.0;
        for (std::size_t k = 0; k < counts.size(); ++k)
        {
            total += counts[k];
            ptotal += probs[k];
        }
        ChiSquareResult r;
        if (!(total > 0.0) || !(ptotal > 0.0))
        {
            return r;
        }
        double oc = 0.0;
        double ec = 0.0;
        std::vector<std::pair<double, double>> cells;
        for (std::size_t k = 0; k < counts.size(); ++k)
        {
            oc += counts[k];
            ec += probs[k] / ptotal * total;
            if (ec >= min_expected)
            {
                cells.emplace_back(oc, ec);
                oc = ec = 0.0;
            }
        }
        if (ec > 0.0 || oc > 0.0)
        {
            if (cells.empty() || ec >= min_expected)
            {
                cells.emplace_back(oc, ec);
            }
            else
            {
                cells.back().first += oc;
                cells.back().second += ec;
            }
        }
        for (const auto& [o, e] : cells)
        {
            if (e > 0.0)
            {
                r.statistic += (o - e) * (o - e) / e;
            }
            else if (o > 0.0)
            {
                r.statistic = kInf;
            }
        }
        r.cells = cells.size();
        r.dof = static_cast<int>(cells.size()) - 1;
        if (r.dof < 1)
        {
            r.p_value = 1.0;
            return r;
        }
        r.p_value = std::isfinite(r.statistic) ? boost::math::gamma_q(0.5 * r.dof, 0.5 * r.statistic) : 0.0;
        return r;
    }

    double level_n_exponent(const BranchingMechanism& mech, double n, double theta, double t)
    {
        if (!mech.is_constant())
        {
            throw ConfigError("level_n_exponent: needs a non-spatial mechanism");
        }
        const auto m = static_cast<std::size_t>(std::max(2000.0, std::ceil(t * 2000.0)));
        return exponent_table(mech, n, theta, t, m).back();
    }

    double decorated_laplace(const BackboneModel& model, double x0, double theta_f, double theta_h, double t,
                             const DecoratedLevels& levels)
    {
        require_constant(model, "decorated_laplace");
        const Point x{};
        const double w = model.w.constant_value();
        const double ux = level_n_exponent(model.mech_star, levels.n, theta_f, t);
        const double q = model.backbone_rule.rate_bound;
        const auto pmf = offspring_pmf(model.mech, model.w, x);
        std::vector<BranchMassLaw> eta(pmf.p.size());
        for (std::size_t k = 2; k < pmf.p.size(); ++k)
        {
            if (pmf.p[k] > 0.0)
            {
                eta[k] = branch_mass_law(model.mech, model.w, x, static_cast<int>(k));
            }
        }
        // State (u_sub, H): the subprocess exponent at age s and one backbone particle's functional with s to go.
        auto rhs = [&](double u, double H, double& du, double& dH) {
            du = level_rhs(model.mech_star, levels.n_sub, u);
            double gen = 0.0;
            double Hk = H * H;
            for (std::size_t k = 2; k < pmf.p.size(); ++k, Hk *= H)
            {
                if (pmf.p[k] == 0.0)
                {
                    continue;
                }
                double B = 0.0;
                for (std::size_t j = 0; j < eta[k].values.size(); ++j)
                {
                    B += eta[k].probs[j] * std::exp(-eta[k].values[j] * u);
                }
                gen += pmf.p[k] * B * Hk;
            }
            dH = -immigration_hazard(model, levels.epsilon, u) * H + q * (gen - H);
        };
        const auto m = static_cast<std::size_t>(std::max(4000.0, std::ceil(t * 4000.0)));
        const double h = t / static_cast<double>(m);
        double u = level_start(levels.n_sub, theta_f);
        double H = std::exp(-theta_h);
        for (std::size_t k = 0; k < m; ++k)
        {
            double a1, b1, a2, b2, a3, b3, a4, b4;
            rhs(u, H, a1, b1);
            rhs(u + 0.5 * h * a1, H + 0.5 * h * b1, a2, b2);
            rhs(u + 0.5 * h * a2, H + 0.5 * h * b2, a3, b3);
            rhs(u + h * a3, H + h * b3, a4, b4);
            u += h * (a1 + 2 * a2 + 2 * a3 + a4) / 6.0;
            H += h * (b1 + 2 * b2 + 2 * b3 + b4) / 6.0;
        }
        return std::exp(-x0 * ux - w * x0 * (1.0 - H));
    }

    BiasBudget decorated_bias(const BackboneModel& model, double x0, double theta_f, double theta_h, double t,
                              const DecoratedLevels& levels)
    {
        DecoratedLevels no_eps = levels;
        no_eps.epsilon = 0.0;
        const double at = decorated_laplace(model, x0, theta_f, theta_h, t, levels);
        const double mid = decorated_laplace(model, x0, theta_f, theta_h, t, no_eps);
        const double exact = decorated_laplace(model, x0, theta_f, theta_h, t, DecoratedLevels{});
        BiasBudget b;
        b.epsilon = std::abs(at - mid);
        b.n = std::abs(mid - exact);
        return b;
    }

    std::string report_json(const std::vector<FunctionalTestReport>& reports, const std::string& scenario_hash)
    {
        nlohmann::json j;
        j["scenario_hash"] = scenario_hash;
        j["reports"] = nlohmann::json::array();
        bool all = true;
        for (const auto& r : reports)
        {
            j["reports"].push_back(to_json(r));
            all = all && r.pass;
        }
        j["pass"] = all;
        return j.dump(2) + "\n";
    }

    std::string report_csv(const std::vector<FunctionalTestReport>& reports, const std::string& scenario_hash)
    {
        std::ostringstream os;
        os << "scenario_hash,test,A,B,SE,z,tolerance,pass\n";
        for (const auto& r : reports)
        {
            os << scenario_hash << ',' << r.id << ',' << num(r.a.mean) << ',' << num(r.b.mean) << ',' << num(r.combined_se) << ','
               << num(r.z) << ',' << num(r.tolerance()) << ',' << (r.pass ? 1 : 0) << '\n';
        }
        return os.str();
    }

    std::string report_long_csv(const std::vector<FunctionalTestReport>& reports, const std::string& scenario_hash)
    {
        std::ostringstream os;
        os << "scenario_hash,test,quantity,value\n";
        for (const auto& r : reports)
        {
            const std::pair<const char*, double> rows[] = {
                {"A", r.a.mean},           {"A_se", r.a.se},         {"B", r.b.mean},
                {"B_se", r.b.se},          {"combined_se", r.combined_se}, {"z", r.z},
                {"bias_epsilon", r.bias.epsilon}, {"bias_n", r.bias.n}, {"bias_dt", r.bias.dt},
                {"bias_horizon", r.bias.horizon}, {"bias_solver", r.bias.solver}, {"tolerance", r.tolerance()}, {"pass", r.pass ? 1.0 : 0.0}};
            for (const auto& [q, v] : rows)
            {
                os << scenario_hash << ',' << r.id << ',' << q << ',' << num(v) << '\n';
            }
        }
        return os.str();
    }

    std::vector<FunctionalTestReport> reports_from_json(const std::string& text, std::string& scenario_hash)
    {
        std::vector<FunctionalTestReport> out;
        // Non-finite values are written as null.
        auto real = [](const nlohmann::json& v) {
            return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
        };
        try
        {
            const auto j = nlohmann::json::parse(text);
            scenario_hash = j.at("scenario_hash").get<std::string>();
            for (const auto& r : j.at("reports"))
            {
                FunctionalTestReport f;
                f.id = r.at("id").get<std::string>();
                for (auto [side, est] : {std::pair{"a", &f.a}, std::pair{"b", &f.b}})
                {
                    est->mean = real(r.at(side).at("mean"));
                    est->se = real(r.at(side).at("se"));
                    est->n = r.at(side).at("n").get<std::size_t>();
                }
                f.combined_se = real(r.at("combined_se"));
                f.z = real(r.at("z"));
                f.threshold = real(r.at("threshold"));
                const auto& b = r.at("bias");
                f.bias.epsilon = real(b.at("epsilon"));
                f.bias.n = real(b.at("n"));
                f.bias.dt = real(b.at("dt"));
                f.bias.horizon = real(b.at("horizon"));
                f.bias.solver = b.value("solver", 0.0);
                f.pass = r.at("pass").get<bool>();
                f.inconclusive = r.value("inconclusive", false);
                f.note = r.value("note", std::string());
                out.push_back(std::move(f));
            }
        }
        catch (const nlohmann::json::exception& e)
        {
            throw ConfigError(std::string("report JSON: ") + e.what());
        }
        return out;
    }
}
