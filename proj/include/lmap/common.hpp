#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lmap {

using Vec = std::vector<double>;

// Rejected input: non-finite values, out-of-range codes, dim mismatches.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed dataset / checkpoint / config text.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training divergence or any other non-finite numeric state.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void log_warning(std::string_view message);
void log_info(std::string_view message);
void set_log_quiet(bool quiet);

bool all_finite(std::span<const double> values);

// Shortest decimal text that parses back to the identical double.
std::string format_double(double value);
double parse_double(std::string_view text);

}  // namespace lmap
