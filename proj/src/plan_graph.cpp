#include "lmap/plan_graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lmap {

CodecSearchModel::CodecSearchModel(const CodecParams& codec, const PriorModel& prior, int depth,
                                   double gamma_macro)
    : codec_(codec), prior_(prior), depth_(depth), gamma_macro_(gamma_macro) {
  if (prior.codebook_size() != codec.shape.codebook_size) {
    throw InputError("prior codebook size " + std::to_string(prior.codebook_size()) +
                     " does not match codec K=" + std::to_string(codec.shape.codebook_size));
  }
  if (prior.state_dim() != codec.shape.dims.n) throw InputError("prior/codec state width mismatch");
  if (depth < 1) throw InputError("planning depth must be >= 1");
}

Vec CodecSearchModel::macro_logits(const LatentState& s) const { return prior_.logits(s.features, {}); }

Vec CodecSearchModel::successor_logits(const LatentState& s, int code) const {
  const int prefix[1] = {code};
  return prior_.logits(s.features, prefix);
}

MacroEval CodecSearchModel::eval_macro(const LatentState& s, int code) const {
  const VecX sn = to_eigen(codec_.norm.apply_state(s.features));
  const FirstDecode first = decode_first(sn, code, codec_);
  return {first.token[0], macro_from_token(first.token, codec_)};
}

OutcomeEval CodecSearchModel::eval_outcome(const LatentState& s, int code, int next_code) const {
  const int n = codec_.shape.dims.n;
  const VecX sn = to_eigen(codec_.norm.apply_state(s.features));
  const FirstDecode first = decode_first(sn, code, codec_);
  const VecX second = decode_second(sn, first, next_code, codec_);
  OutcomeEval out;
  out.next.features = codec_.norm.invert_state(std::span<const double>(second.data() + 1, n));
  out.value_hint = second[0];
  out.reward = first.token[0] - gamma_macro_ * second[0];
  return out;
}

void MctsConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
  if (!(c >= 0.0)) throw ConfigError("c must be >= 0");
  if (!(gamma_macro > 0.0 && gamma_macro <= 1.0)) throw ConfigError("gamma_macro must lie in (0, 1]");
  if (M < 1 || N < 1 || B < 1) throw ConfigError("M, N, B must be >= 1");
  if (!(lambda > 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in (0, 1]");
  if (!(sampling.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (node_budget < 1) throw ConfigError("node_budget must be >= 1");
}

int PlanEdge::find_outcome(int c) const {
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].code == c) return static_cast<int>(i);
  }
  return -1;
}

std::string PlanTree::dump() const {
  std::ostringstream out;
  for (const auto& n : nodes) {
    out << "NODE " << n.id << ' ' << n.depth << ' ' << format_double(n.value_hint) << '\n';
    for (const auto& e : n.edges) {
      out << "EDGE " << e.code << ' ' << format_double(e.Q) << ' ' << e.N << '\n';
      for (const auto& o : e.outcomes) {
        out << "OUT " << o.code << ' ' << o.multiplicity << ' ' << o.child << '\n';
      }
    }
  }
  return out.str();
}

int top_k_count(int M, double lambda) {
  if (M < 1) throw InputError("M must be >= 1");
  if (!(lambda > 0.0 && lambda <= 1.0)) throw InputError("lambda must lie in (0, 1]");
  // Guard against 0.5 * 16 landing a hair above an integer.
  const double raw = lambda * M;
  const double rounded = std::round(raw);
  const int k = std::abs(raw - rounded) < 1e-9 ? static_cast<int>(rounded)
                                                : static_cast<int>(std::ceil(raw));
  return std::clamp(k, 1, M);
}

namespace {

int add_node(PlanTree& tree, int parent, int depth, LatentState state, double hint) {
  PlanNode n;
  n.id = static_cast<int>(tree.nodes.size());
  n.parent = parent;
  n.depth = depth;
  n.state = std::move(state);
  n.value_hint = hint;
  tree.nodes.push_back(std::move(n));
  return tree.nodes.back().id;
}

const Vec& macro_probs(PlanTree& tree, int node, const SearchModel& model, const MctsConfig& cfg) {
  PlanNode& n = tree.nodes[node];
  if (n.macro_probs.empty()) n.macro_probs = sample_probabilities(model.macro_logits(n.state), cfg.sampling);
  return n.macro_probs;
}

int draw(const Vec& probs, Rng& rng) {
  double u = rng.uniform();
  int last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last = static_cast<int>(i);
    if (u < probs[i]) return last;
    u -= probs[i];
  }
  return last;
}

void refresh_edge_prior_value(PlanTree& tree, PlanEdge& e, double gamma) {
  double num = 0.0, den = 0.0;
  for (const auto& o : e.outcomes) {
    num += o.multiplicity * (o.reward + gamma * tree.nodes[o.child].value_hint);
    den += o.multiplicity;
  }
  if (den > 0.0 && e.N == 0) e.Q = num / den;
}

}  // namespace

int sample_outcome(PlanTree& tree, int node, int edge, const SearchModel& model,
                   const MctsConfig& cfg, Rng& rng, bool* created) {
  PlanEdge* e = &tree.nodes[node].edges[edge];
  if (e->successor_probs.empty()) {
    e->successor_probs = sample_probabilities(model.successor_logits(tree.nodes[node].state, e->code), cfg.sampling);
  }
  const int z2 = draw(e->successor_probs, rng);
  ++e->raw_samples;
  const int found = e->find_outcome(z2);
  if (found >= 0) {
    ++e->outcomes[found].multiplicity;
    if (created) *created = false;
    return found;
  }
  OutcomeEval ev = model.eval_outcome(tree.nodes[node].state, e->code, z2);
  const int depth = tree.nodes[node].depth + 1;
  const int child = add_node(tree, node, depth, std::move(ev.next), ev.value_hint);
  e = &tree.nodes[node].edges[edge];  // arena may have reallocated
  PlanOutcome o;
  o.code = z2;
  o.child = child;
  o.multiplicity = 1;
  o.reward = ev.reward;
  o.prob = e->successor_probs[z2];
  e->outcomes.push_back(o);
  if (created) *created = true;
  return static_cast<int>(e->outcomes.size()) - 1;
}

void expand_node(PlanTree& tree, int node, const SearchModel& model, int samples, int keep,
                 int successors, const MctsConfig& cfg, Rng& rng) {
  if (tree.nodes[node].depth >= model.max_depth()) return;
  const Vec probs = macro_probs(tree, node, model, cfg);
  if (static_cast<int>(probs.size()) != model.codebook_size()) {
    throw InputError("macro prior width does not match the codebook size");
  }
  // Distinct codes in first-sampled order.
  std::vector<int> distinct;
  for (int i = 0; i < samples; ++i) {
    const int z = draw(probs, rng);
    if (std::find(distinct.begin(), distinct.end(), z) == distinct.end()) distinct.push_back(z);
  }
  std::vector<std::pair<int, MacroEval>> cand;
  cand.reserve(distinct.size());
  for (int z : distinct) cand.emplace_back(z, model.eval_macro(tree.nodes[node].state, z));
  std::stable_sort(cand.begin(), cand.end(),
                   [](const auto& a, const auto& b) { return a.second.value > b.second.value; });
  const std::size_t kept = keep > 0 ? std::min(cand.size(), static_cast<std::size_t>(keep)) : cand.size();
  if (node == 0) {
    tree.root_candidates.clear();
    for (std::size_t i = 0; i < cand.size(); ++i) {
      tree.root_candidates.push_back({cand[i].first, cand[i].second.value, i < kept});
    }
  }
  {
    PlanNode& n = tree.nodes[node];
    n.expanded = true;
    for (std::size_t i = 0; i < kept; ++i) {
      PlanEdge e;
      e.code = cand[i].first;
      e.value_hint = cand[i].second.value;
      e.Q = e.value_hint;
      e.macro = std::move(cand[i].second.macro);
      e.prior_p = probs[e.code];
      n.edges.push_back(std::move(e));
    }
  }
  for (std::size_t i = 0; i < kept; ++i) {
    for (int j = 0; j < successors; ++j) sample_outcome(tree, node, static_cast<int>(i), model, cfg, rng, nullptr);
    refresh_edge_prior_value(tree, tree.nodes[node].edges[i], cfg.gamma_macro);
  }
}

PlanTree build_root(const LatentState& s0, const SearchModel& model, const MctsConfig& cfg, Rng& rng) {
  cfg.validate();
  PlanTree tree;
  tree.M = cfg.M;
  tree.N = cfg.N;
  tree.B = cfg.B;
  tree.lambda = cfg.lambda;
  tree.k = top_k_count(cfg.M, cfg.lambda);
  add_node(tree, -1, 0, s0, 0.0);
  expand_node(tree, 0, model, cfg.M, tree.k, cfg.N, cfg, rng);
  return tree;
}

void expand_cached(PlanTree& tree, int node, const SearchModel& model, const MctsConfig& cfg, Rng& rng) {
  if (tree.nodes[node].expanded) {
    log_warning("expand_cached: node " + std::to_string(node) + " is already expanded");
    return;
  }
  expand_node(tree, node, model, cfg.B, 0, cfg.N, cfg, rng);
}

int preconstruct(PlanTree& tree, const SearchModel& model, const MctsConfig& cfg, Rng& rng) {
  const int cap = model.max_depth();
  const int max_levels = cfg.prebuild_depth < 0 ? cap : std::min(cap, 1 + cfg.prebuild_depth);
  std::vector<int> frontier;
  for (const auto& e : tree.root().edges) {
    for (const auto& o : e.outcomes) frontier.push_back(o.child);
  }
  int levels = 1;
  while (levels < max_levels && !frontier.empty()) {
    const std::size_t projected = tree.nodes.size() + frontier.size() * static_cast<std::size_t>(cfg.B) * cfg.N;
    if (projected > static_cast<std::size_t>(cfg.node_budget)) break;
    std::vector<int> next;
    for (int id : frontier) {
      if (tree.nodes[id].depth >= cap) continue;
      expand_cached(tree, id, model, cfg, rng);
      for (const auto& e : tree.nodes[id].edges) {
        for (const auto& o : e.outcomes) next.push_back(o.child);
      }
    }
    frontier = std::move(next);
    ++levels;
  }
  return levels;
}

}  // namespace lmap
