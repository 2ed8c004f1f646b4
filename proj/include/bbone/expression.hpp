#pragma once

#include <functional>
#include <string>

namespace bbone
{
    // Real-valued expression in the variable x: numbers, x, pi, + − * / ^, parentheses and
    // exp, log, sqrt, abs, sin, cos, tanh, min, max. Numbers use the C locale. Throws ConfigError
    // with the offending column.
    std::function<double(double)> parse_expression(const std::string& text);
}
