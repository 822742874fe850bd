#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lmap/common.hpp"
#include "lmap/prior.hpp"
#include "lmap/rng.hpp"

namespace lmap {

// Opaque planning state. The codec-backed model stores a decoded raw state
// in `features`; the tabular oracle MDP stores a node index in `key`.
struct LatentState {
  Vec features;
  int64_t key = -1;
};

struct MacroEval {
  double value = 0.0;  // decoded R of the position-1 token, normalized units
  Vec macro;           // de-normalized, clamped
};

struct OutcomeEval {
  LatentState next;
  double reward = 0.0;      // reward credited on the edge
  double value_hint = 0.0;  // leaf estimate of the outcome state
};

// Everything the planner needs from the learned (or oracle) models.
class SearchModel {
 public:
  virtual ~SearchModel() = default;
  virtual int codebook_size() const = 0;
  virtual int max_depth() const = 0;  // macro steps below the root
  virtual Vec macro_logits(const LatentState& s) const = 0;
  virtual Vec successor_logits(const LatentState& s, int code) const = 0;
  virtual MacroEval eval_macro(const LatentState& s, int code) const = 0;
  virtual OutcomeEval eval_outcome(const LatentState& s, int code, int next_code) const = 0;
};

// Codec + prior. Edge reward telescopes the decoded return-to-go,
// R(s, z) - gamma_macro * R(s', z'), so that a path's discounted sum plus the
// discounted leaf hint recovers the chain of decoded returns.
class CodecSearchModel : public SearchModel {
 public:
  CodecSearchModel(const CodecParams& codec, const PriorModel& prior, int depth, double gamma_macro);

  int codebook_size() const override { return codec_.shape.codebook_size; }
  int max_depth() const override { return depth_; }
  Vec macro_logits(const LatentState& s) const override;
  Vec successor_logits(const LatentState& s, int code) const override;
  MacroEval eval_macro(const LatentState& s, int code) const override;
  OutcomeEval eval_outcome(const LatentState& s, int code, int next_code) const override;

 private:
  const CodecParams& codec_;
  const PriorModel& prior_;
  int depth_;
  double gamma_macro_;
};

enum class Selection { kUct, kPuct };

// Descent rule for an existing outcome of an edge.
enum class OutcomeChoice {
  kCount,  // proportional to multiplicity + visits
  kModel,  // proportional to the successor model probability
};

struct MctsConfig {
  int iterations = 100;
  double c = 1.0;
  double alpha = 0.1;
  double epsilon = 1.0;
  bool widening = true;  // false: a fresh outcome is drawn on every descent
  Selection selection = Selection::kUct;
  OutcomeChoice outcome_choice = OutcomeChoice::kCount;
  double gamma_macro = 0.99 * 0.99 * 0.99;

  // Pre-construction.
  bool preconstruct = true;
  int M = 16;
  int N = 4;
  int B = 4;
  double lambda = 0.5;
  int prebuild_depth = -1;  // extra cached levels below the root; -1 = up to the depth cap
  int node_budget = 256;    // a level is pre-built only if it fits entirely
  int expand_B = -1;        // B used at leaves during search; -1 = B

  SampleConfig sampling;
  bool final_max_n = false;
  uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct PlanOutcome {
  int code = 0;
  int child = -1;
  int multiplicity = 0;
  int visits = 0;
  double reward = 0.0;
  double prob = 0.0;  // successor model probability
};

struct PlanEdge {
  int code = 0;
  double Q = 0.0;
  int N = 0;
  double prior_p = 0.0;
  double value_hint = 0.0;
  Vec macro;
  Vec successor_probs;
  std::vector<PlanOutcome> outcomes;
  int raw_samples = 0;

  int find_outcome(int code) const;
};

struct PlanNode {
  int id = 0;
  int parent = -1;
  int depth = 0;
  LatentState state;
  double value_hint = 0.0;
  bool expanded = false;
  int visits = 0;
  std::vector<PlanEdge> edges;  // ranked by value_hint, best first
  Vec macro_probs;              // cached p(z | s), empty until needed
};

struct RootCandidate {
  int code = 0;
  double value = 0.0;
  bool kept = false;
};

class PlanTree {
 public:
  std::vector<PlanNode> nodes;
  std::vector<RootCandidate> root_candidates;  // distinct sampled codes at the root
  int k = 0;
  int M = 0, N = 0, B = 0;
  double lambda = 1.0;

  PlanNode& root() { return nodes.front(); }
  const PlanNode& root() const { return nodes.front(); }
  // `NODE id depth R | EDGE z Q N | OUT z' mult child` lines.
  std::string dump() const;
};

int top_k_count(int M, double lambda);

// Samples `samples` macro codes at `node`, keeps the `keep` best distinct
// codes by decoded value (all distinct when keep <= 0), and draws
// `successors` outcome codes per kept edge, merging duplicates.
void expand_node(PlanTree& tree, int node, const SearchModel& model, int samples, int keep,
                 int successors, const MctsConfig& cfg, Rng& rng);

PlanTree build_root(const LatentState& s0, const SearchModel& model, const MctsConfig& cfg, Rng& rng);

// B-sample expansion of an unexpanded node; warns and does nothing otherwise.
void expand_cached(PlanTree& tree, int node, const SearchModel& model, const MctsConfig& cfg, Rng& rng);

// Level-by-level expansion of outcome nodes below the root within the
// configured depth and node budget. Returns the number of levels built.
int preconstruct(PlanTree& tree, const SearchModel& model, const MctsConfig& cfg, Rng& rng);

// Draws one successor code for `edge` and attaches it (new node or merged
// multiplicity). Returns the outcome index.
int sample_outcome(PlanTree& tree, int node, int edge, const SearchModel& model,
                   const MctsConfig& cfg, Rng& rng, bool* created);

}  // namespace lmap
