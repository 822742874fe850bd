#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "lmap/common.hpp"
#include "lmap/rng.hpp"

namespace lmap {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecX = Eigen::VectorXd;
using VecMapX = Eigen::Map<VecX>;
using ConstVecMapX = Eigen::Map<const VecX>;

struct ParamBlock {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Named parameter blocks over one flat buffer. Gradients use a ParamSet of
// identical layout, so optimizers and finite-difference checks can treat
// every model uniformly.
class ParamSet {
 public:
  int add(std::string name, int rows, int cols);

  MatMap mat(int id) { return MatMap(values_.data() + blocks_[id].offset, blocks_[id].rows, blocks_[id].cols); }
  ConstMatMap mat(int id) const {
    return ConstMatMap(values_.data() + blocks_[id].offset, blocks_[id].rows, blocks_[id].cols);
  }
  VecMapX vec(int id) { return VecMapX(values_.data() + blocks_[id].offset, blocks_[id].size()); }
  ConstVecMapX vec(int id) const {
    return ConstVecMapX(values_.data() + blocks_[id].offset, blocks_[id].size());
  }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  int find(std::string_view name) const;  // -1 if absent

  ParamSet zeros_like() const;
  void set_zero();
  void fill_normal(int id, Rng& rng, double stddev);

  bool operator==(const ParamSet& other) const {
    return values_ == other.values_ && blocks_.size() == other.blocks_.size();
  }

 private:
  std::vector<ParamBlock> blocks_;
  std::vector<double> values_;
};

class Adam {
 public:
  explicit Adam(std::size_t size, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(std::vector<double>& params, const std::vector<double>& grads);
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

// Checkpoint blocks: `<name> <rows> <cols>` followed by row lines.
void write_blocks(std::ostream& out, const ParamSet& params);
void read_blocks(std::istream& in, ParamSet& params, const std::string& source);
void write_named_vector(std::ostream& out, std::string_view name, std::span<const double> v);
Vec read_named_vector(std::istream& in, std::string_view name, const std::string& source);

inline VecX to_eigen(std::span<const double> v) {
  return ConstVecMapX(v.data(), static_cast<Eigen::Index>(v.size()));
}
inline Vec to_vec(const VecX& v) { return Vec(v.data(), v.data() + v.size()); }

}  // namespace lmap
