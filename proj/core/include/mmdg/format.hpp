#pragma once

#include <string>
#include <vector>

namespace mmdg {

/// Shortest decimal text that parses back to the same double ("%.17g" fallback).
std::string format_double(double v);
double parse_double(const std::string& text);

std::vector<std::string> split(const std::string& text, char sep);
std::string trim(const std::string& text);

}  // namespace mmdg
