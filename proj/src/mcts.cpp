#include "lmap/mcts.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace lmap {

double uct_score(double Q, int N_s, int N_sz, double c) {
  if (N_sz <= 0) return std::numeric_limits<double>::infinity();
  if (N_s <= 1) return Q;
  return Q + c * std::sqrt(std::log(static_cast<double>(N_s)) / N_sz);
}

double puct_score(double Q, double prior_p, int N_s, int N_sz, double c) {
  return Q + c * prior_p * std::sqrt(static_cast<double>(N_s)) / (1.0 + N_sz);
}

bool should_widen(int children, int N_sz, double alpha, double epsilon) {
  // std::pow(0, 0) is 1.
  const double cap = epsilon * std::pow(static_cast<double>(N_sz), alpha);
  return static_cast<double>(children) < cap;
}

void backprop(PlanTree& tree, std::span<const PathStep> path, double leaf_value, double gamma_macro) {
  double G = leaf_value;
  for (std::size_t i = path.size(); i-- > 0;) {
    const PathStep& st = path[i];
    G = st.reward + gamma_macro * G;
    PlanEdge& e = tree.nodes[st.node].edges[st.edge];
    ++e.N;
    e.Q += (G - e.Q) / e.N;
    ++tree.nodes[st.node].visits;
  }
}

int select_edge(const PlanNode& node, const MctsConfig& cfg) {
  int total = 0;
  for (const auto& e : node.edges) total += e.N;
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  if (cfg.selection == Selection::kUct) {
    // Unvisited first, in value-hint order; edges are stored best hint first.
    for (std::size_t i = 0; i < node.edges.size(); ++i) {
      if (node.edges[i].N == 0) return static_cast<int>(i);
    }
  }
  for (std::size_t i = 0; i < node.edges.size(); ++i) {
    const PlanEdge& e = node.edges[i];
    const double s = cfg.selection == Selection::kUct ? uct_score(e.Q, total, e.N, cfg.c)
                                                      : puct_score(e.Q, e.prior_p, total, e.N, cfg.c);
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(i);
    }
  }
  return best;
}

namespace {

int choose_outcome(const PlanEdge& e, const MctsConfig& cfg, Rng& rng) {
  double total = 0.0;
  auto weight = [&](const PlanOutcome& o) {
    return cfg.outcome_choice == OutcomeChoice::kCount ? static_cast<double>(o.multiplicity + o.visits) : o.prob;
  };
  for (const auto& o : e.outcomes) total += weight(o);
  if (!(total > 0.0)) return 0;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < e.outcomes.size(); ++i) {
    const double w = weight(e.outcomes[i]);
    if (u < w) return static_cast<int>(i);
    u -= w;
  }
  return static_cast<int>(e.outcomes.size()) - 1;
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

DecisionStats plan(const LatentState& s0, const SearchModel& model, const MctsConfig& cfg,
                   int action_dim, const PlanHooks& hooks) {
  cfg.validate();
  Rng rng(cfg.seed, 0x706c616eULL);
  DecisionStats out;
  const auto t0 = std::chrono::steady_clock::now();
  const int expand_b = cfg.expand_B > 0 ? cfg.expand_B : cfg.B;
  PlanTree tree;
  if (cfg.preconstruct) {
    tree = build_root(s0, model, cfg, rng);
    preconstruct(tree, model, cfg, rng);
  } else {
    // Fresh root, expanded like any leaf so every iteration starts at an edge.
    tree.M = cfg.M;
    tree.N = cfg.N;
    tree.B = expand_b;
    tree.lambda = 1.0;
    PlanNode root;
    root.state = s0;
    tree.nodes.push_back(std::move(root));
    expand_node(tree, 0, model, expand_b, 0, cfg.N, cfg, rng);
    tree.k = static_cast<int>(tree.root().edges.size());
  }
  out.prebuild_ms = ms_since(t0);

  const auto t1 = std::chrono::steady_clock::now();
  std::vector<PathStep> path;
  const int cap = model.max_depth();
  for (int it = 0; it < cfg.iterations; ++it) {
    path.clear();
    int node = 0;
    double leaf = 0.0;
    while (true) {
      if (tree.nodes[node].depth >= cap) {
        leaf = tree.nodes[node].value_hint;
        break;
      }
      if (!tree.nodes[node].expanded) {
        expand_node(tree, node, model, expand_b, 0, cfg.N, cfg, rng);
        leaf = tree.nodes[node].value_hint;
        break;
      }
      if (tree.nodes[node].edges.empty()) {
        leaf = tree.nodes[node].value_hint;
        break;
      }
      const int ei = select_edge(tree.nodes[node], cfg);
      const PlanEdge& e = tree.nodes[node].edges[ei];
      const bool widen = !cfg.widening || e.outcomes.empty() ||
                         should_widen(static_cast<int>(e.outcomes.size()), e.N, cfg.alpha, cfg.epsilon);
      bool created = false;
      const int oi = widen ? sample_outcome(tree, node, ei, model, cfg, rng, &created)
                           : choose_outcome(e, cfg, rng);
      PlanOutcome& o = tree.nodes[node].edges[ei].outcomes[oi];
      ++o.visits;
      path.push_back({node, ei, o.reward});
      node = o.child;
      if (created) {
        leaf = tree.nodes[node].value_hint;
        break;
      }
    }
    ++tree.nodes[node].visits;
    backprop(tree, path, leaf, cfg.gamma_macro);
    if (hooks.after_iteration) hooks.after_iteration(tree, it + 1);
  }
  out.plan_ms = ms_since(t1);
  out.iterations = cfg.iterations;
  out.nodes = static_cast<int>(tree.nodes.size());

  const auto& edges = tree.root().edges;
  int best = -1;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const PlanEdge& e = edges[i];
    out.root_edges.push_back({e.code, e.Q, e.N, e.value_hint});
    if (e.N < 1) continue;
    if (best < 0) {
      best = static_cast<int>(i);
      continue;
    }
    const PlanEdge& b = edges[best];
    const bool better = cfg.final_max_n
                            ? (e.N > b.N || (e.N == b.N && (e.Q > b.Q || (e.Q == b.Q && e.code < b.code))))
                            : (e.Q > b.Q || (e.Q == b.Q && (e.N > b.N || (e.N == b.N && e.code < b.code))));
    if (better) best = static_cast<int>(i);
  }
  if (best < 0) {
    log_warning("plan: no visited root edge, falling back to the best value hint");
    out.fallback = true;
    best = 0;
  }
  if (!edges.empty()) {
    out.code = edges[best].code;
    out.macro = edges[best].macro;
    const std::size_t l = std::min(out.macro.size(), static_cast<std::size_t>(std::max(action_dim, 0)));
    out.action.assign(out.macro.begin(), out.macro.begin() + static_cast<std::ptrdiff_t>(l));
  }
  if (hooks.tree_out) *hooks.tree_out = std::move(tree);
  return out;
}

// ---- tabular oracle substrate ----

const TabularLatentMdp::Node& TabularMdpModel::node(const LatentState& s) const {
  if (s.key < 0 || s.key >= static_cast<int64_t>(mdp_.nodes.size())) throw InputError("tabular mdp: bad node key");
  return mdp_.nodes[static_cast<std::size_t>(s.key)];
}

Vec TabularMdpModel::macro_logits(const LatentState&) const {
  return Vec(static_cast<std::size_t>(mdp_.K), 0.0);
}

Vec TabularMdpModel::successor_logits(const LatentState& s, int code) const {
  const auto& n = node(s);
  Vec lg(static_cast<std::size_t>(mdp_.K), -690.0);
  if (code < 0 || code >= static_cast<int>(n.edges.size())) return lg;
  for (const auto& o : n.edges[code]) lg[o.code] = std::log(o.prob);
  return lg;
}

MacroEval TabularMdpModel::eval_macro(const LatentState& s, int code) const {
  const auto& n = node(s);
  MacroEval m;
  if (code < 0 || code >= static_cast<int>(n.edges.size())) return m;
  for (const auto& o : n.edges[code]) m.value += o.prob * o.reward;
  return m;
}

OutcomeEval TabularMdpModel::eval_outcome(const LatentState& s, int code, int next_code) const {
  const auto& n = node(s);
  if (code < 0 || code >= static_cast<int>(n.edges.size())) throw InputError("tabular mdp: bad code");
  for (const auto& o : n.edges[code]) {
    if (o.code == next_code) {
      OutcomeEval ev;
      ev.next.key = o.child;
      ev.reward = o.reward;
      ev.value_hint = 0.0;
      return ev;
    }
  }
  throw InputError("tabular mdp: successor code " + std::to_string(next_code) + " has zero probability");
}

ExpectimaxResult expectimax_exact(const TabularLatentMdp& mdp, double gamma_macro) {
  std::size_t entries = 0;
  for (const auto& n : mdp.nodes) {
    for (const auto& e : n.edges) entries += e.size();
  }
  if (entries > 1000000) throw InputError("expectimax: MDP too large to enumerate");
  if (mdp.nodes.empty()) throw InputError("expectimax: empty MDP");
  Vec value(mdp.nodes.size(), 0.0);
  // Children always have larger indices, so a reverse sweep is a post-order.
  for (std::size_t i = mdp.nodes.size(); i-- > 0;) {
    const auto& n = mdp.nodes[i];
    double best = 0.0;
    bool any = false;
    for (const auto& e : n.edges) {
      double q = 0.0;
      for (const auto& o : e) q += o.prob * (o.reward + gamma_macro * value[o.child]);
      if (!any || q > best) best = q;
      any = true;
    }
    value[i] = any ? best : 0.0;
  }
  ExpectimaxResult r;
  const auto& root = mdp.nodes[0];
  r.root_values.assign(root.edges.size(), 0.0);
  for (std::size_t z = 0; z < root.edges.size(); ++z) {
    for (const auto& o : root.edges[z]) r.root_values[z] += o.prob * (o.reward + gamma_macro * value[o.child]);
  }
  for (std::size_t z = 1; z < r.root_values.size(); ++z) {
    if (r.root_values[z] > r.root_values[r.best]) r.best = static_cast<int>(z);
  }
  r.value = value[0];
  return r;
}

}  // namespace lmap
