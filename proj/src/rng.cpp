#include "lmap/rng.hpp"

#include <charconv>
#include <cmath>
#include <iostream>
#include <limits>

#include "lmap/common.hpp"

namespace lmap {

namespace {
bool g_quiet = false;
}

void set_log_quiet(bool quiet) { g_quiet = quiet; }

void log_warning(std::string_view message) {
  if (!g_quiet) std::cerr << "warning: " << message << '\n';
}

void log_info(std::string_view message) {
  if (!g_quiet) std::cerr << message << '\n';
}

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string format_double(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (first != last && *first == '+') ++first;
  auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ParseError("not a number: '" + std::string(text) + "'");
  }
  return value;
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed, uint64_t stream)
    : engine_(mix_seed(seed, stream)), seed_(seed), stream_(stream) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= std::numeric_limits<double>::min()) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * M_PI * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

int Rng::uniform_int(int n) {
  if (n <= 1) return 0;
  const uint64_t bound = static_cast<uint64_t>(n);
  const uint64_t limit = std::numeric_limits<uint64_t>::max() -
                         std::numeric_limits<uint64_t>::max() % bound;
  uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<int>(x % bound);
}

}  // namespace lmap
