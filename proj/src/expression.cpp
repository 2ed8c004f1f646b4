#include "bbone/expression.hpp"

#include "bbone/types.hpp"

#include <charconv>
#include <cmath>
#include <memory>
#include <numbers>
#include <sstream>
#include <vector>

namespace bbone
{
    namespace
    {
        using Fn = std::function<double(double)>;

        class Parser
        {
        public:
            explicit Parser(const std::string& s) : s_(s) {}

            Fn parse()
            {
                Fn f = expr();
                skip();
                if (pos_ != s_.size())
                {
                    fail("unexpected character");
                }
                return f;
            }

        private:
            [[noreturn]] void fail(const std::string& what) const
            {
                std::ostringstream os;
                os << "expression '" << s_ << "': " << what << " at column " << pos_ + 1;
                throw ConfigError(os.str());
            }

            void skip()
            {
                while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_])))
                {
                    ++pos_;
                }
            }

            bool eat(char c)
            {
                skip();
                if (pos_ < s_.size() && s_[pos_] == c)
                {
                    ++pos_;
                    return true;
                }
                return false;
            }

            Fn expr()
            {
                Fn lhs = term();
                for (;;)
                {
                    if (eat('+'))
                    {
                        lhs = [a = lhs, b = term()](double x) { return a(x) + b(x); };
                    }
                    else if (eat('-'))
                    {
                        lhs = [a = lhs, b = term()](double x) { return a(x) - b(x); };
                    }
                    else
                    {
                        return lhs;
                    }
                }
            }

            Fn term()
            {
                Fn lhs = unary();
                for (;;)
                {
                    if (eat('*'))
                    {
                        lhs = [a = lhs, b = unary()](double x) { return a(x) * b(x); };
                    }
                    else if (eat('/'))
                    {
                        lhs = [a = lhs, b = unary()](double x) { return a(x) / b(x); };
                    }
                    else
                    {
                        return lhs;
                    }
                }
            }

            Fn unary()
            {
                if (eat('-'))
                {
                    return [a = unary()](double x) { return -a(x); };
                }
                if (eat('+'))
                {
                    return unary();
                }
                return power();
            }

            Fn power()
            {
                Fn base = primary();
                if (eat('^'))
                {
                    return [a = base, b = unary()](double x) { return std::pow(a(x), b(x)); };
                }
                return base;
            }

            Fn primary()
            {
                skip();
                if (pos_ >= s_.size())
                {
                    fail("unexpected end");
                }
                if (eat('('))
                {
                    Fn inner = expr();
                    if (!eat(')'))
                    {
                        fail("missing ')'");
                    }
                    return inner;
                }
                const char c = s_[pos_];
                if (std::isdigit(static_cast<unsigned char>(c)) || c == '.')
                {
                    double v = 0.0;
                    const auto [end, ec] = std::from_chars(s_.data() + pos_, s_.data() + s_.size(), v);
                    if (ec != std::errc())
                    {
                        fail("bad number");
                    }
                    pos_ = static_cast<std::size_t>(end - s_.data());
                    return [v](double) { return v; };
                }
                if (std::isalpha(static_cast<unsigned char>(c)))
                {
                    const std::size_t start = pos_;
                    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_'))
                    {
                        ++pos_;
                    }
                    const std::string name = s_.substr(start, pos_ - start);
                    if (name == "x")
                    {
                        return [](double x) { return x; };
                    }
                    if (name == "pi")
                    {
                        return [](double) { return std::numbers::pi; };
                    }
                    return call(name);
                }
                fail("unexpected character");
            }

            Fn call(const std::string& name)
            {
                if (!eat('('))
                {
                    fail("unknown name '" + name + "'");
                }
                std::vector<Fn> args{expr()};
                while (eat(','))
                {
                    args.push_back(expr());
                }
                if (!eat(')'))
                {
                    fail("missing ')'");
                }
                using U = double (*)(double);
                const std::pair<const char*, U> unary_fns[] = {
                    {"exp", [](double v) { return std::exp(v); }},   {"log", [](double v) { return std::log(v); }},
                    {"sqrt", [](double v) { return std::sqrt(v); }}, {"abs", [](double v) { return std::abs(v); }},
                    {"sin", [](double v) { return std::sin(v); }},   {"cos", [](double v) { return std::cos(v); }},
                    {"tanh", [](double v) { return std::tanh(v); }}};
                for (const auto& [n, f] : unary_fns)
                {
                    if (name == n)
                    {
                        if (args.size() != 1)
                        {
                            fail(name + " takes one argument");
                        }
                        return [f, a = args[0]](double x) { return f(a(x)); };
                    }
                }
                if (name == "min" || name == "max")
                {
                    if (args.size() != 2)
                    {
                        fail(name + " takes two arguments");
                    }
                    const bool is_min = name == "min";
                    return [is_min, a = args[0], b = args[1]](double x) {
                        return is_min ? std::min(a(x), b(x)) : std::max(a(x), b(x));
                    };
                }
                fail("unknown function '" + name + "'");
            }

            const std::string& s_;
            std::size_t pos_ = 0;
        };
    }

    std::function<double(double)> parse_expression(const std::string& text)
    {
        return Parser(text).parse();
    }
}
