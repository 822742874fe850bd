#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lmap/codec.hpp"
#include "lmap/envs.hpp"
#include "lmap/plan_graph.hpp"
#include "lmap/prior.hpp"

namespace lmap {

// Flat `key=value` configuration. Every key must be one of the known
// defaults, so a typo fails loudly instead of being ignored.
class Config {
 public:
  static Config defaults();

  // `key=value` lines; '#' starts a comment, blank lines are skipped.
  void merge_file(const std::filesystem::path& path);
  // Only the `config.<key>=value` lines of a report; everything else is skipped.
  void merge_report(const std::filesystem::path& path);
  void set(const std::string& assignment);  // "key=value"
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  int get_int(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;  // comma separated

  // Sorted `key=value` lines.
  std::string dump() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct RunConfig {
  std::string env = "currency";
  EnvSettings env_settings;
  std::string policy = "random";
  double rho = 0.3;
  int data_episodes = 300;
  uint64_t data_seed = 1;

  int L = 3;
  int horizon = 9;
  double gamma = 0.99;

  CodecTrainConfig codec;
  std::string prior_kind = "neural";
  NeuralPriorConfig prior;
  double tabular_smoothing = 1.0;

  MctsConfig mcts;

  std::vector<uint64_t> seeds{0, 1, 2};
  int episodes = 20;
  int threads = 1;
  int anchor_episodes = 1000;

  int depth() const { return horizon / L; }
};

// Validates cross-field invariants (horizon % L == 0, ...). Throws ConfigError.
RunConfig resolve(const Config& cfg);

}  // namespace lmap
