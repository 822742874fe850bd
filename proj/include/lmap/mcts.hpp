#pragma once

#include <algorithm>
#include <functional>
#include <span>
#include <vector>

#include "lmap/plan_graph.hpp"

namespace lmap {

double uct_score(double Q, int N_s, int N_sz, double c);
double puct_score(double Q, double prior_p, int N_s, int N_sz, double c);
// children < epsilon * N_sz^alpha, with 0^0 = 1.
bool should_widen(int children, int N_sz, double alpha, double epsilon);

struct PathStep {
  int node = 0;
  int edge = 0;
  double reward = 0.0;
};

// Walks leaf -> root with G = reward + gamma_macro * G, updating running means.
void backprop(PlanTree& tree, std::span<const PathStep> path, double leaf_value, double gamma_macro);

// Picks the edge to descend at `node` under the configured rule.
int select_edge(const PlanNode& node, const MctsConfig& cfg);

struct RootEdgeStat {
  int code = 0;
  double Q = 0.0;
  int N = 0;
  double value_hint = 0.0;
};

struct DecisionStats {
  int code = -1;
  Vec action;  // first primitive action of the chosen macro
  Vec macro;
  std::vector<RootEdgeStat> root_edges;
  double plan_ms = 0.0;      // search iterations only
  double prebuild_ms = 0.0;  // tree construction before the first iteration
  int iterations = 0;
  int nodes = 0;
  bool fallback = false;

  bool operator==(const DecisionStats& o) const {
    return code == o.code && action == o.action && macro == o.macro && iterations == o.iterations &&
           nodes == o.nodes && fallback == o.fallback && root_edges.size() == o.root_edges.size() &&
           std::equal(root_edges.begin(), root_edges.end(), o.root_edges.begin(),
                      [](const RootEdgeStat& a, const RootEdgeStat& b) {
                        return a.code == b.code && a.Q == b.Q && a.N == b.N && a.value_hint == b.value_hint;
                      });
  }
};

struct PlanHooks {
  // Called after every completed iteration (1-based count).
  std::function<void(const PlanTree&, int)> after_iteration;
  PlanTree* tree_out = nullptr;
};

// One polling-control decision. `action_dim` is l; the returned action is
// the first l components of the chosen edge's macro.
DecisionStats plan(const LatentState& s0, const SearchModel& model, const MctsConfig& cfg,
                   int action_dim, const PlanHooks& hooks = {});

// Explicit finite latent MDP used as the planning oracle substrate.
struct TabularLatentMdp {
  struct Outcome {
    int code = 0;
    double prob = 0.0;
    double reward = 0.0;
    int child = -1;
  };
  struct Node {
    int depth = 0;
    std::vector<std::vector<Outcome>> edges;  // indexed by code; empty at depth H
  };
  int K = 0;
  int H = 0;
  std::vector<Node> nodes;  // nodes[0] is the root
};

class TabularMdpModel : public SearchModel {
 public:
  explicit TabularMdpModel(const TabularLatentMdp& mdp) : mdp_(mdp) {}
  int codebook_size() const override { return mdp_.K; }
  int max_depth() const override { return mdp_.H; }
  Vec macro_logits(const LatentState& s) const override;
  Vec successor_logits(const LatentState& s, int code) const override;
  MacroEval eval_macro(const LatentState& s, int code) const override;
  OutcomeEval eval_outcome(const LatentState& s, int code, int next_code) const override;
  static LatentState root_state() { return {{}, 0}; }

 private:
  const TabularLatentMdp::Node& node(const LatentState& s) const;
  const TabularLatentMdp& mdp_;
};

struct ExpectimaxResult {
  Vec root_values;  // per code
  int best = 0;     // lowest code among the maxima
  double value = 0.0;
};

// Throws InputError if the MDP has more than 10^6 outcome entries.
ExpectimaxResult expectimax_exact(const TabularLatentMdp& mdp, double gamma_macro);

}  // namespace lmap
