#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace lmap {

// SplitMix64 finalizer, used to derive independent stream seeds.
uint64_t mix_seed(uint64_t seed, uint64_t stream);

// Seeded generator with platform-stable conversions. The engine is the
// standard 64-bit Mersenne twister, whose output sequence is fixed by the
// standard; uniform/normal conversions are implemented here because the
// std distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0);

  uint64_t next_u64() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  int uniform_int(int n);  // [0, n)

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(uniform_int(static_cast<int>(i)))]);
    }
  }

  // Independent child stream; does not advance this generator.
  Rng split(uint64_t stream) const { return Rng(seed_, mix_seed(stream_, stream + 1)); }

  uint64_t seed() const { return seed_; }

 private:
  std::mt19937_64 engine_;
  uint64_t seed_;
  uint64_t stream_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace lmap
