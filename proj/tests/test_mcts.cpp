#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "lmap/envs.hpp"
#include "lmap/mcts.hpp"

namespace lmap {
namespace {

TEST(Uct, Examples) {
  EXPECT_NEAR(uct_score(0.5, 10, 2, 1.0), 1.5730, 1e-4);
  EXPECT_NEAR(uct_score(0.5, 10, 2, 1.0), 0.5 + std::sqrt(std::log(10.0) / 2.0), 1e-15);
  EXPECT_EQ(uct_score(-5.0, 10, 0, 1.0), std::numeric_limits<double>::infinity());
  EXPECT_EQ(uct_score(0.25, 50, 7, 0.0), 0.25);
}

TEST(Uct, ZeroCoefficientSelectsMaxQ) {
  PlanNode n;
  for (double q : {0.1, 0.7, 0.3}) {
    PlanEdge e;
    e.Q = q;
    e.N = 5;
    n.edges.push_back(e);
  }
  MctsConfig c;
  c.c = 0.0;
  EXPECT_EQ(select_edge(n, c), 1);
  n.edges[2].N = 0;
  c.c = 1.0;
  EXPECT_EQ(select_edge(n, c), 2);
}

TEST(Puct, Examples) {
  EXPECT_EQ(puct_score(0.3, 0.0, 9, 2, 1.0), 0.3);
  EXPECT_NEAR(puct_score(0.0, 1.0, 4, 0, 1.0), 2.0, 1e-15);
  EXPECT_GT(puct_score(0.2, 0.6, 10, 3, 1.0), puct_score(0.2, 0.4, 10, 3, 1.0));
}

TEST(Widen, Examples) {
  EXPECT_TRUE(should_widen(0, 1, 0.1, 1.0));
  EXPECT_FALSE(should_widen(2, 1024, 0.1, 1.0));
  EXPECT_TRUE(should_widen(1, 1024, 0.1, 1.0));
  EXPECT_FALSE(should_widen(0, 0, 0.1, 1.0));
  EXPECT_TRUE(should_widen(0, 0, 0.0, 1.0));  // 0^0 = 1
}

TEST(Widen, AlphaOneIsVanilla) {
  for (int n = 0; n < 50; ++n) {
    for (int ch = 0; ch < 60; ++ch) EXPECT_EQ(should_widen(ch, n, 1.0, 1.0), ch < n) << ch << " " << n;
  }
}

PlanTree two_level_tree() {
  PlanTree t;
  t.nodes.resize(3);
  for (int i = 0; i < 3; ++i) {
    t.nodes[i].id = i;
    t.nodes[i].edges.resize(2);
  }
  return t;
}

TEST(Backprop, Examples) {
  PlanTree t = two_level_tree();
  const PathStep one[] = {{0, 0, 0.0}};
  backprop(t, one, 1.0, 1.0);
  EXPECT_EQ(t.nodes[0].edges[0].Q, 1.0);
  EXPECT_EQ(t.nodes[0].edges[0].N, 1);
  backprop(t, one, 0.0, 1.0);
  EXPECT_EQ(t.nodes[0].edges[0].Q, 0.5);
  EXPECT_EQ(t.nodes[0].edges[0].N, 2);
  EXPECT_EQ(t.nodes[0].visits, 2);

  PlanTree u = two_level_tree();
  const PathStep two[] = {{0, 1, 0.1}, {1, 0, 0.2}};
  backprop(u, two, 1.0, 0.97);
  EXPECT_NEAR(u.nodes[0].edges[1].Q, 0.1 + 0.97 * (0.2 + 0.97 * 1.0), 1e-15);  // 1.2349
  EXPECT_NEAR(u.nodes[1].edges[0].Q, 0.2 + 0.97, 1e-15);
}

TEST(Backprop, QStaysWithinBackedUpRange) {
  PlanTree t = two_level_tree();
  std::vector<double> lo(6, INFINITY), hi(6, -INFINITY);
  Rng rng(3);
  for (int it = 0; it < 2000; ++it) {
    std::vector<PathStep> path;
    const int len = 1 + static_cast<int>(rng.uniform_int(3));
    for (int d = 0; d < len; ++d) {
      path.push_back({d, static_cast<int>(rng.uniform_int(2)), rng.normal()});
    }
    const double leaf = 3.0 * rng.normal();
    backprop(t, path, leaf, 0.9);
    double G = leaf;
    for (int d = len - 1; d >= 0; --d) {
      G = path[d].reward + 0.9 * G;
      const int k = path[d].node * 2 + path[d].edge;
      lo[k] = std::min(lo[k], G);
      hi[k] = std::max(hi[k], G);
    }
    for (int k = 0; k < 6; ++k) {
      const PlanEdge& e = t.nodes[k / 2].edges[k % 2];
      if (e.N == 0) continue;
      EXPECT_GE(e.Q, lo[k] - 1e-12);
      EXPECT_LE(e.Q, hi[k] + 1e-12);
    }
  }
}

TabularLatentMdp depth_one_mdp() {
  TabularLatentMdp m;
  m.K = 2;
  m.H = 1;
  m.nodes.push_back({0, {{{0, 1.0, 1.0, 1}}, {{0, 1.0, 0.5, 2}}}});
  m.nodes.push_back({1, {}});
  m.nodes.push_back({1, {}});
  return m;
}

TEST(Expectimax, DepthOne) {
  const ExpectimaxResult r = expectimax_exact(depth_one_mdp(), 0.97);
  EXPECT_EQ(r.best, 0);
  EXPECT_EQ(r.value, 1.0);
  EXPECT_EQ(r.root_values[1], 0.5);
}

TEST(Expectimax, DepthTwoHalfGamma) {
  TabularLatentMdp m;
  m.K = 1;
  m.H = 2;
  m.nodes.push_back({0, {{{0, 0.5, 0.0, 1}, {1, 0.5, 0.0, 2}}}});
  m.nodes.push_back({1, {{{0, 1.0, 0.0, 3}}}});
  m.nodes.push_back({1, {{{0, 1.0, 1.0, 4}}}});
  m.nodes.push_back({2, {}});
  m.nodes.push_back({2, {}});
  const double g = 0.97;
  const ExpectimaxResult r = expectimax_exact(m, g);
  EXPECT_NEAR(r.root_values[0], 0.5 * g, 1e-15);
  EXPECT_NEAR(r.value, 0.5 * g, 1e-15);
}

TEST(Expectimax, TiesGoToLowestCode) {
  TabularLatentMdp m = depth_one_mdp();
  m.nodes[0].edges[1][0].reward = 1.0;
  EXPECT_EQ(expectimax_exact(m, 0.9).best, 0);
}

TEST(Expectimax, RejectsOversizedMdp) {
  TabularLatentMdp m;
  m.K = 1;
  m.H = 1;
  m.nodes.push_back({0, {std::vector<TabularLatentMdp::Outcome>(1000001, {0, 1e-6, 0.0, 1})}});
  m.nodes.push_back({1, {}});
  EXPECT_THROW(expectimax_exact(m, 0.9), InputError);
}

// Value of a fixed deterministic policy (one code per internal node).
double policy_value(const TabularLatentMdp& m, const std::vector<int>& choice, int node, double g) {
  const auto& n = m.nodes[node];
  if (n.edges.empty()) return 0.0;
  double v = 0.0;
  for (const auto& o : n.edges[choice[node]]) v += o.prob * (o.reward + g * policy_value(m, choice, o.child, g));
  return v;
}

TEST(Expectimax, DominatesEveryEnumeratedPolicy) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const TabularLatentMdp m = gen_tabular_latent_mdp(seed, 2, 2, 2, 0.0, 0.9);
    std::vector<int> internal;
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
      if (!m.nodes[i].edges.empty()) internal.push_back(static_cast<int>(i));
    }
    ASSERT_LE(internal.size(), 16u);
    const ExpectimaxResult r = expectimax_exact(m, 0.9);
    double best = -INFINITY;
    std::vector<int> choice(m.nodes.size(), 0);
    for (uint32_t mask = 0; mask < (1u << internal.size()); ++mask) {
      for (std::size_t j = 0; j < internal.size(); ++j) choice[internal[j]] = (mask >> j) & 1u;
      const double v = policy_value(m, choice, 0, 0.9);
      EXPECT_LE(v, r.value + 1e-12);
      best = std::max(best, v);
    }
    EXPECT_NEAR(best, r.value, 1e-12);
  }
}

MctsConfig tabular_cfg(int K) {
  MctsConfig c;
  c.gamma_macro = 0.97;
  c.lambda = 1.0;
  c.M = 8 * K;
  c.B = 8 * K;
  c.N = 4;
  c.node_budget = 1 << 20;
  c.iterations = 100;
  return c;
}

TEST(Plan, VisitCountConservation) {
  const TabularLatentMdp m = gen_tabular_latent_mdp(5, 4, 3, 2, 0.2, 0.97);
  const TabularMdpModel model(m);
  for (bool pre : {true, false}) {
    MctsConfig c = tabular_cfg(4);
    c.preconstruct = pre;
    int calls = 0;
    PlanHooks hooks;
    hooks.after_iteration = [&](const PlanTree& t, int done) {
      ++calls;
      EXPECT_EQ(done, calls);
      int sum = 0;
      for (const auto& e : t.root().edges) sum += e.N;
      EXPECT_EQ(sum, done);
      EXPECT_EQ(t.root().visits, done);
    };
    plan(TabularMdpModel::root_state(), model, c, 0, hooks);
    EXPECT_EQ(calls, c.iterations);
  }
}

TEST(Plan, UnvisitedSiblingsComeFirst) {
  const TabularLatentMdp m = gen_tabular_latent_mdp(6, 6, 3, 2, 0.2, 0.97);
  const TabularMdpModel model(m);
  MctsConfig c = tabular_cfg(6);
  c.iterations = 300;
  PlanHooks hooks;
  hooks.after_iteration = [&](const PlanTree& t, int) {
    for (const auto& n : t.nodes) {
      const bool any_zero = std::any_of(n.edges.begin(), n.edges.end(), [](const PlanEdge& e) { return e.N == 0; });
      if (!any_zero) continue;
      for (const auto& e : n.edges) ASSERT_LE(e.N, 1) << "node " << n.id;
    }
  };
  plan(TabularMdpModel::root_state(), model, c, 0, hooks);
}

// Codes as a continuous-looking model so outcomes keep appearing.
class WideModel : public SearchModel {
 public:
  int codebook_size() const override { return 64; }
  int max_depth() const override { return 3; }
  Vec macro_logits(const LatentState&) const override { return Vec(64, 0.0); }
  Vec successor_logits(const LatentState&, int) const override { return Vec(64, 0.0); }
  MacroEval eval_macro(const LatentState&, int code) const override {
    return {std::cos(0.37 * code), {0.01 * code, 0.5, -0.5}};
  }
  OutcomeEval eval_outcome(const LatentState& s, int code, int next) const override {
    OutcomeEval ev;
    ev.next.key = s.key + 1;
    ev.reward = 0.05 * std::sin(code + 0.3 * next);
    ev.value_hint = std::cos(0.11 * next);
    return ev;
  }
};

TEST(Plan, WideningLawHolds) {
  const WideModel model;
  MctsConfig c;
  c.alpha = 0.1;
  c.epsilon = 1.0;
  c.N = 1;
  c.M = 16;
  c.B = 4;
  c.iterations = 1500;
  PlanHooks hooks;
  hooks.after_iteration = [&](const PlanTree& t, int) {
    for (const auto& n : t.nodes) {
      for (const auto& e : n.edges) {
        const double cap = std::max(1.0, std::ceil(c.epsilon * std::pow(static_cast<double>(e.N), c.alpha)));
        ASSERT_LE(static_cast<double>(e.outcomes.size()), cap);
      }
    }
  };
  plan({{}, 0}, model, c, 1, hooks);
}

TEST(Plan, WideningOffGrowsEveryDescent) {
  const WideModel model;
  MctsConfig c;
  c.widening = false;
  c.N = 1;
  c.M = 4;
  c.lambda = 1.0;
  c.iterations = 200;
  PlanTree tree;
  PlanHooks hooks;
  hooks.tree_out = &tree;
  plan({{}, 0}, model, c, 1, hooks);
  std::size_t most = 0;
  for (const auto& e : tree.root().edges) most = std::max(most, e.outcomes.size());
  EXPECT_GT(most, 10u);
}

TEST(Plan, PollingActionIsMacroPrefix) {
  const WideModel model;
  MctsConfig c;
  c.iterations = 50;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    c.seed = seed;
    const DecisionStats d = plan({{}, 0}, model, c, 1);
    const MacroEval me = model.eval_macro({{}, 0}, d.code);
    EXPECT_EQ(d.macro, me.macro);
    ASSERT_EQ(d.action.size(), 1u);
    EXPECT_EQ(d.action[0], d.macro[0]);
    const DecisionStats d2 = plan({{}, 0}, model, c, 2);
    EXPECT_EQ(d2.action, Vec(d.macro.begin(), d.macro.begin() + 2));
  }
}

TEST(Plan, FinalEdgeHasBestQ) {
  const TabularLatentMdp m = gen_tabular_latent_mdp(8, 5, 2, 2, 0.2, 0.97);
  const TabularMdpModel model(m);
  MctsConfig c = tabular_cfg(5);
  const DecisionStats d = plan(TabularMdpModel::root_state(), model, c, 0);
  const RootEdgeStat* chosen = nullptr;
  for (const auto& e : d.root_edges) {
    if (e.code == d.code) chosen = &e;
  }
  ASSERT_NE(chosen, nullptr);
  for (const auto& e : d.root_edges) {
    if (e.N >= 1) {
      EXPECT_GE(chosen->Q, e.Q);
    }
  }
  EXPECT_FALSE(d.fallback);
}

TEST(Plan, DeterministicForFixedSeed) {
  const TabularLatentMdp m = gen_tabular_latent_mdp(9, 6, 3, 3, 0.2, 0.97);
  const TabularMdpModel model(m);
  for (Selection sel : {Selection::kUct, Selection::kPuct}) {
    MctsConfig c = tabular_cfg(6);
    c.selection = sel;
    c.seed = 42;
    PlanTree ta, tb;
    PlanHooks ha, hb;
    ha.tree_out = &ta;
    hb.tree_out = &tb;
    const DecisionStats a = plan(TabularMdpModel::root_state(), model, c, 0, ha);
    const DecisionStats b = plan(TabularMdpModel::root_state(), model, c, 0, hb);
    EXPECT_TRUE(a == b);
    EXPECT_EQ(ta.dump(), tb.dump());
  }
}

TEST(Plan, DeterministicOneStepInstancesAreSolved) {
  int agree = 0;
  for (uint64_t seed = 0; seed < 30; ++seed) {
    const int K = 2 + static_cast<int>(seed % 7);
    const TabularLatentMdp m = gen_tabular_latent_mdp(seed, K, 1, 1, 0.2, 0.97);
    const TabularMdpModel model(m);
    MctsConfig c = tabular_cfg(K);
    c.M = 200;
    c.seed = seed;
    agree += plan(TabularMdpModel::root_state(), model, c, 0).code == expectimax_exact(m, 0.97).best;
  }
  EXPECT_EQ(agree, 30);
}

TEST(Plan, ParallelExpansionMinimalChain) {
  const WideModel model;
  MctsConfig c;
  c.M = 1;
  c.N = 1;
  c.B = 1;
  c.lambda = 1.0;
  c.preconstruct = false;
  c.iterations = 1;
  PlanTree tree;
  PlanHooks hooks;
  hooks.tree_out = &tree;
  plan({{}, 0}, model, c, 1, hooks);
  ASSERT_EQ(tree.root().edges.size(), 1u);
  EXPECT_EQ(tree.root().edges[0].N, 1);
}

TEST(Plan, InvalidConfigRejected) {
  const WideModel model;
  MctsConfig c;
  c.iterations = 0;
  EXPECT_THROW(plan({{}, 0}, model, c, 1), ConfigError);
  c.iterations = 10;
  c.alpha = 1.5;
  EXPECT_THROW(plan({{}, 0}, model, c, 1), ConfigError);
}

}  // namespace
}  // namespace lmap
