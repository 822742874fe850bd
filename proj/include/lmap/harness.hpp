#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmap/codec.hpp"
#include "lmap/config.hpp"
#include "lmap/envs.hpp"
#include "lmap/mcts.hpp"
#include "lmap/prior.hpp"
#include "lmap/trajectory.hpp"

namespace lmap {

// SHA-1 over "blob <size>\0<content>", hex encoded.
std::string git_blob_hash(std::string_view content);
std::string model_hash(const CodecParams& codec);
std::string model_hash(const PriorModel& prior);

struct TrainedModels {
  CodecParams codec;
  std::unique_ptr<PriorModel> prior;
  CodecTrainReport codec_report;
  PriorTrainReport prior_report;  // empty for the tabular prior
  uint64_t seed = 0;

  std::vector<std::string> hashes() const;
};

// Behavior corpus for the configured env and policy.
Dataset generate_dataset(const RunConfig& rc);

std::unique_ptr<PriorModel> train_prior(const Dataset& data, const CodecParams& codec,
                                        const RunConfig& rc, uint64_t seed,
                                        PriorTrainReport* report = nullptr);
TrainedModels train_models(const Dataset& data, const RunConfig& rc, uint64_t seed);

struct Anchors {
  double random = 0.0;
  double reference = 0.0;
};

// Mean undiscounted return of the uniform-random and greedy policies over
// `rc.anchor_episodes` seeded rollouts. Memoized per env configuration.
Anchors compute_anchors(const RunConfig& rc);
double normalized_score(double ret, const Anchors& a);

struct EpisodeResult {
  double ret = 0.0;
  std::vector<double> latency_ms;   // wall clock around plan(), cache build included
  std::vector<double> search_ms;    // iterations only
  std::vector<double> prebuild_ms;  // cache build only
  std::vector<DecisionStats> decisions;
};

// Closed-loop polling control: plan, execute the first primitive action, repeat.
EpisodeResult run_episode(Env& env, const TrainedModels& models, const RunConfig& rc,
                          uint64_t episode_seed);

uint64_t episode_seed(uint64_t model_seed, int episode);

struct LatencySummary {
  double mean = 0.0;
  double p50 = 0.0;
  double p90 = 0.0;
};

LatencySummary summarize_latency(std::vector<double> ms);

struct EvalReport {
  std::vector<double> returns;     // seed-major
  std::vector<uint64_t> seeds;     // model seed per return
  double mean = 0.0;
  double stderr_mean = 0.0;
  double normalized = 0.0;
  double normalized_stderr = 0.0;
  Anchors anchors;
  LatencySummary latency;   // inclusive
  LatencySummary search;    // exclusive of cache build
  LatencySummary prebuild;
  int decisions = 0;
  int threads = 1;
  std::string config;
  std::vector<std::string> hashes;
  std::vector<DecisionStats> decision_log;  // every decision, in episode order

  // Deterministic fields only (no timings).
  std::string numbers() const;
  // numbers() plus latency lines, hashes and the embedded config.
  std::string text() const;
};

// Every model is evaluated for rc.episodes episodes, spread over rc.threads
// workers. Results are independent of the worker count.
EvalReport evaluate(std::span<const TrainedModels* const> models, const RunConfig& rc,
                    const Anchors& anchors, std::string config_echo = {});

// Dataset, per-seed training and evaluation in one call.
EvalReport run_pipeline(const RunConfig& rc, const std::string& config_echo = {});

// ---- benchmark ----

struct BenchRow {
  std::string variant;  // "prebuilt" | "vanilla"
  int iterations = 0;
  double mean = 0.0;
  double stderr_mean = 0.0;
  double latency_ms = 0.0;
  double search_ms = 0.0;
  double prebuild_ms = 0.0;
  bool cache_dominates = false;  // cache build took longer than the search itself
};

struct BenchResult {
  std::vector<BenchRow> rows;  // budget-major, prebuilt first
  std::vector<double> gaps;    // prebuilt - vanilla per budget
  bool better_at_smallest = false;
  bool gap_non_increasing = false;
  std::string csv() const;
};

MctsConfig vanilla_variant(MctsConfig m);
BenchResult bench_preconstruct(const RunConfig& rc, std::span<const int> budgets);

// ---- ablation ----

struct AblationRow {
  std::string axis;
  std::string setting;
  double mean_score = 0.0;
  double stderr_score = 0.0;
  double mean_return = 0.0;
};

struct AblationCheck {
  std::string axis;
  std::string better, worse;
  double diff = 0.0;  // better - worse
  double se = 0.0;
  bool inverted = false;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<AblationCheck> checks;
  int inversions_within_se = 0;
  int inversions_beyond_se = 0;
  bool pass = false;  // at most one inversion, and only within one standard error
  std::string csv() const;
};

// Variant `setting` of `axis` applied to a copy of `base`.
Config ablation_variant(const Config& base, const std::string& axis, const std::string& setting);
std::vector<std::string> ablation_settings(const Config& base, const std::string& axis);
AblationResult ablate(const Config& base, std::span<const std::string> axes);

// ---- heatmap ----

// Code sequences of every episode under the canonical segmentation.
std::vector<std::vector<int>> episode_code_sequences(const Dataset& data, const CodecParams& codec);

struct Heatmap {
  std::vector<int> codes;            // top-F by frequency as z_t, most frequent first
  std::vector<Vec> matrix;           // row-stochastic over `codes`
  std::vector<bool> uniform_row;     // no observed successor inside the top-F
  std::vector<long> from_hist;       // z_t counts over all K codes
  std::vector<long> to_hist;         // z_{t+1} counts over all K codes
  long transitions = 0;

  double median_row_support() const;  // distinct successors, flagged rows excluded
  double median_row_max() const;
  std::string csv() const;       // matrix with a trailing uniform-row flag
  std::string hist_csv() const;  // code, from_count, to_count
};

Heatmap build_heatmap(std::span<const std::vector<int>> sequences, int K, int F);

// ---- oracle comparison ----

struct OracleOptions {
  int instances = 100;
  int iterations = 100;
  int K_max = 8;
  int H_max = 3;
  int outcomes_max = 3;
  double gap = 0.2;
  int N = 16;
  int H_fixed = 0;  // > 0 forces every instance to this depth
  double gamma_macro = 0.99 * 0.99 * 0.99;
  MctsConfig base;
  uint64_t seed = 0;
};

struct OracleReport {
  int instances = 0;
  int agree = 0;
  double rate = 0.0;
  double mean_value_gap = 0.0;  // V*(best) - V*(chosen)
  double max_value_gap = 0.0;
};

MctsConfig oracle_mcts_config(const OracleOptions& o, int K);
OracleReport oracle_compare(const OracleOptions& o);

// ---- CLI commands ----

struct CommandContext {
  Config config;
  std::string out;  // output file, or file prefix for multi-file commands
  std::optional<uint64_t> seed;
  bool check = false;
};

// Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 acceptance check failed.
int run_command(const std::string& name, const CommandContext& ctx);
std::vector<std::string> command_names();

}  // namespace lmap
