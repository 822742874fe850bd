#include "lmap/nn.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace lmap {

int ParamSet::add(std::string name, int rows, int cols) {
  ParamBlock b{std::move(name), rows, cols, values_.size()};
  values_.resize(values_.size() + b.size(), 0.0);
  blocks_.push_back(std::move(b));
  return static_cast<int>(blocks_.size()) - 1;
}

int ParamSet::find(std::string_view name) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out = *this;
  out.set_zero();
  return out;
}

void ParamSet::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

void ParamSet::fill_normal(int id, Rng& rng, double stddev) {
  auto v = vec(id);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = stddev * rng.normal();
}

Adam::Adam(std::size_t size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::vector<double>& params, const std::vector<double>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

void write_blocks(std::ostream& out, const ParamSet& params) {
  for (const auto& b : params.blocks()) {
    out << b.name << ' ' << b.rows << ' ' << b.cols << '\n';
    const double* p = params.values().data() + b.offset;
    for (int r = 0; r < b.rows; ++r) {
      for (int c = 0; c < b.cols; ++c) {
        if (c) out << ' ';
        out << format_double(p[static_cast<std::size_t>(r) * b.cols + c]);
      }
      out << '\n';
    }
  }
}

void read_blocks(std::istream& in, ParamSet& params, const std::string& source) {
  for (const auto& b : params.blocks()) {
    std::string name;
    int rows = 0, cols = 0;
    if (!(in >> name >> rows >> cols)) {
      throw ParseError(source + ": truncated before block '" + b.name + "'");
    }
    if (name != b.name || rows != b.rows || cols != b.cols) {
      throw ParseError(source + ": expected block '" + b.name + "' " + std::to_string(b.rows) +
                       "x" + std::to_string(b.cols) + ", got '" + name + "' " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
    double* p = params.values().data() + b.offset;
    for (std::size_t i = 0; i < b.size(); ++i) {
      std::string tok;
      if (!(in >> tok)) throw ParseError(source + ": truncated inside block '" + b.name + "'");
      p[i] = parse_double(tok);
    }
  }
}

void write_named_vector(std::ostream& out, std::string_view name, std::span<const double> v) {
  out << name << ' ' << v.size();
  for (double x : v) out << ' ' << format_double(x);
  out << '\n';
}

Vec read_named_vector(std::istream& in, std::string_view name, const std::string& source) {
  std::string got;
  std::size_t size = 0;
  if (!(in >> got >> size) || got != name) {
    throw ParseError(source + ": expected vector '" + std::string(name) + "'");
  }
  Vec v(size);
  for (auto& x : v) {
    std::string tok;
    if (!(in >> tok)) throw ParseError(source + ": truncated vector '" + std::string(name) + "'");
    x = parse_double(tok);
  }
  return v;
}

}  // namespace lmap
