#include "lmap/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace lmap {

namespace {

double setting(const EnvSettings& s, const std::string& key, double fallback) {
  auto it = s.find(key);
  if (it == s.end()) return fallback;
  try {
    return parse_double(it->second);
  } catch (const ParseError&) {
    throw ConfigError("env setting " + key + "=" + it->second + " is not a number");
  }
}

}  // namespace

// ---- currency ----

double currency_step(CurrencyState& s, double a, const CurrencyParams& p, Rng& rng, bool* done) {
  a = std::clamp(a, 0.0, 1.0);
  const double reward = a * s.inventory * s.price;
  s.inventory *= 1.0 - a;
  s.price += p.theta * (p.mu - s.price) + p.sigma * rng.normal();
  ++s.t;
  if (done) *done = s.t >= p.T || s.inventory < 1e-6;
  return reward;
}

CurrencyEnv::CurrencyEnv(CurrencyParams p) : params_(p) {
  if (p.T < 1) throw ConfigError("currency T must be >= 1");
  if (!(p.sigma >= 0.0)) throw ConfigError("currency sigma must be >= 0");
  if (!(p.i0 >= 0.0 && p.i0 <= 1.0)) throw ConfigError("currency i0 must lie in [0, 1]");
}

Vec CurrencyEnv::observe() const {
  return {static_cast<double>(state_.t) / params_.T, state_.price, state_.inventory};
}

Vec CurrencyEnv::reset(uint64_t seed) {
  rng_ = Rng(seed, 0x637572ULL);
  state_ = {0, params_.x0, params_.i0};
  done_ = false;
  return observe();
}

StepResult CurrencyEnv::step(std::span<const double> action) {
  if (done_) throw InputError("currency: step after done");
  if (action.size() != 1) throw InputError("currency: action width must be 1");
  StepResult r;
  r.reward = currency_step(state_, action[0], params_, rng_, &done_);
  r.done = done_;
  r.state = observe();
  return r;
}

std::string CurrencyEnv::config_string() const {
  std::ostringstream o;
  o << "env=currency theta=" << format_double(params_.theta) << " mu=" << format_double(params_.mu)
    << " sigma=" << format_double(params_.sigma) << " x0=" << format_double(params_.x0)
    << " i0=" << format_double(params_.i0) << " T=" << params_.T;
  return o.str();
}

// ---- chain ----

double chain_tier_sigma(const std::string& tier) {
  if (tier == "det") return 0.0;
  if (tier == "mod") return 0.05;
  if (tier == "high") return 0.1;
  throw ConfigError("unknown chain tier '" + tier + "' (expected det, mod or high)");
}

double chain_step(double& s, double g, double a, const ChainParams& p, Rng& rng) {
  a = std::clamp(a, -1.0, 1.0);
  const double noise = p.sigma > 0.0 ? p.sigma * rng.normal() : 0.0;
  s = std::clamp(s + p.step_size * a + noise, -1.0, 1.0);
  return -std::abs(s - g);
}

NoisyChainEnv::NoisyChainEnv(ChainParams p) : params_(p) {
  if (p.horizon < 1) throw ConfigError("chain horizon must be >= 1");
  if (!(p.sigma >= 0.0)) throw ConfigError("chain sigma must be >= 0");
}

Vec NoisyChainEnv::reset(uint64_t seed) {
  rng_ = Rng(seed, 0x636861ULL);
  s_ = rng_.uniform(-1.0, 1.0);
  g_ = rng_.uniform(-1.0, 1.0);
  t_ = 0;
  done_ = false;
  return {s_, g_};
}

void NoisyChainEnv::set_state(double s, double g) {
  s_ = std::clamp(s, -1.0, 1.0);
  g_ = g;
  t_ = 0;
  done_ = false;
}

StepResult NoisyChainEnv::step(std::span<const double> action) {
  if (done_) throw InputError("chain: step after done");
  if (action.size() != 1) throw InputError("chain: action width must be 1");
  StepResult r;
  r.reward = chain_step(s_, g_, action[0], params_, rng_);
  ++t_;
  done_ = t_ >= params_.horizon;
  r.done = done_;
  r.state = {s_, g_};
  return r;
}

std::string NoisyChainEnv::config_string() const {
  std::ostringstream o;
  o << "env=chain sigma_e=" << format_double(params_.sigma) << " horizon=" << params_.horizon
    << " step=" << format_double(params_.step_size);
  return o.str();
}

std::unique_ptr<Env> make_env(const std::string& name, const EnvSettings& s) {
  if (name == "currency") {
    CurrencyParams p;
    p.theta = setting(s, "theta", p.theta);
    p.mu = setting(s, "mu", p.mu);
    p.sigma = setting(s, "sigma", p.sigma);
    p.x0 = setting(s, "x0", p.x0);
    p.i0 = setting(s, "i0", p.i0);
    p.T = static_cast<int>(setting(s, "T", p.T));
    return std::make_unique<CurrencyEnv>(p);
  }
  if (name == "chain") {
    ChainParams p;
    auto tier = s.find("tier");
    p.sigma = chain_tier_sigma(tier == s.end() ? "det" : tier->second);
    p.sigma = setting(s, "sigma", p.sigma);
    p.horizon = static_cast<int>(setting(s, "horizon", p.horizon));
    return std::make_unique<NoisyChainEnv>(p);
  }
  throw ConfigError("unknown env '" + name + "' (expected currency or chain)");
}

// ---- policies ----

Vec UniformPolicy::act(std::span<const double>, Rng& rng) const {
  Vec a(static_cast<std::size_t>(dim_));
  for (double& v : a) v = rng.uniform(lo_, hi_);
  return a;
}

GreedyPolicy::GreedyPolicy(const Env& env) : env_(env.name()) {
  if (auto* c = dynamic_cast<const CurrencyEnv*>(&env)) currency_ = c->params();
  if (auto* c = dynamic_cast<const NoisyChainEnv*>(&env)) chain_ = c->params();
}

Vec GreedyPolicy::act(std::span<const double> state, Rng&) const {
  if (env_ == "currency") {
    // Sell everything once the price has reverted close to its mean, or at the end.
    const int t = static_cast<int>(std::lround(state[0] * currency_.T));
    const bool last = t >= currency_.T - 1;
    return {(state[1] >= currency_.mu - 0.02 || last) ? 1.0 : 0.0};
  }
  return {std::clamp((state[1] - state[0]) / chain_.step_size, -1.0, 1.0)};
}

NoisyGreedyPolicy::NoisyGreedyPolicy(const Env& env, double rho)
    : greedy_(env), rho_(rho), lo_(env.action_low()), hi_(env.action_high()) {}

Vec NoisyGreedyPolicy::act(std::span<const double> state, Rng& rng) const {
  Vec a = greedy_.act(state, rng);
  for (double& v : a) v = std::clamp(v + rho_ * rng.normal(), lo_, hi_);
  return a;
}

std::unique_ptr<Policy> make_policy(const std::string& kind, const Env& env, double rho) {
  if (kind == "random") return std::make_unique<UniformPolicy>(env.action_dim(), env.action_low(), env.action_high());
  if (kind == "medium") return std::make_unique<NoisyGreedyPolicy>(env, rho);
  if (kind == "greedy") return std::make_unique<GreedyPolicy>(env);
  throw ConfigError("unknown policy '" + kind + "' (expected random, medium or greedy)");
}

std::vector<EpisodeRaw> collect_dataset(Env& env, const Policy& policy, int episodes, uint64_t seed) {
  if (episodes < 1) throw ConfigError("episodes must be >= 1");
  std::vector<EpisodeRaw> out;
  out.reserve(static_cast<std::size_t>(episodes));
  for (int i = 0; i < episodes; ++i) {
    const uint64_t ep_seed = mix_seed(seed, static_cast<uint64_t>(i));
    Rng act_rng(ep_seed, 0x706f6cULL);
    EpisodeRaw ep;
    Vec s = env.reset(ep_seed);
    while (!env.done()) {
      Vec a = policy.act(s, act_rng);
      for (double& v : a) v = std::clamp(v, env.action_low(), env.action_high());
      StepResult r = env.step(a);
      ep.states.push_back(std::move(s));
      ep.actions.push_back(std::move(a));
      ep.rewards.push_back(r.reward);
      s = std::move(r.state);
    }
    ep.terminated = true;
    out.push_back(std::move(ep));
  }
  return out;
}

double rollout_return(Env& env, const Policy& policy, uint64_t seed) {
  Rng act_rng(seed, 0x706f6cULL);
  Vec s = env.reset(seed);
  double total = 0.0;
  while (!env.done()) {
    StepResult r = env.step(policy.act(s, act_rng));
    total += r.reward;
    s = std::move(r.state);
  }
  return total;
}

// ---- tabular latent MDP ----

TabularLatentMdp gen_tabular_latent_mdp(uint64_t seed, int K, int H, int outcomes, double gap,
                                        double gamma_macro) {
  if (K < 2) throw InputError("tabular mdp: K must be >= 2");
  if (H < 1) throw InputError("tabular mdp: H must be >= 1");
  if (outcomes < 1 || outcomes > K) throw InputError("tabular mdp: outcomes must lie in [1, K]");
  if (!(gap >= 0.0 && gap <= 1.0)) throw InputError("tabular mdp: infeasible gap " + format_double(gap));
  const double branch = static_cast<double>(K) * outcomes;
  if (std::pow(branch, H) > 1e6) throw InputError("tabular mdp: (K * outcomes)^H exceeds 10^6");

  Rng rng(seed, 0x6d6470ULL);
  TabularLatentMdp mdp;
  mdp.K = K;
  mdp.H = H;
  mdp.nodes.push_back({0, {}});
  std::vector<int> codes(static_cast<std::size_t>(K));
  for (std::size_t i = 0; i < mdp.nodes.size(); ++i) {
    if (mdp.nodes[i].depth >= H) continue;
    const int depth = mdp.nodes[i].depth;
    std::vector<std::vector<TabularLatentMdp::Outcome>> edges(static_cast<std::size_t>(K));
    for (int z = 0; z < K; ++z) {
      std::iota(codes.begin(), codes.end(), 0);
      rng.shuffle(codes);
      Vec w(static_cast<std::size_t>(outcomes));
      double sum = 0.0;
      for (double& v : w) {
        v = 0.05 + rng.uniform();
        sum += v;
      }
      std::vector<int> picked(codes.begin(), codes.begin() + outcomes);
      std::sort(picked.begin(), picked.end());
      for (int j = 0; j < outcomes; ++j) {
        TabularLatentMdp::Outcome o;
        o.code = picked[j];
        o.prob = w[j] / sum;
        o.reward = rng.uniform();
        o.child = static_cast<int>(mdp.nodes.size());
        mdp.nodes.push_back({depth + 1, {}});
        edges[z].push_back(o);
      }
    }
    mdp.nodes[i].edges = std::move(edges);
  }
  // Raise the leader so it beats the runner-up by `gap`.
  const ExpectimaxResult ex = expectimax_exact(mdp, gamma_macro);
  double second = -1e300;
  for (int z = 0; z < K; ++z) {
    if (z != ex.best) second = std::max(second, ex.root_values[z]);
  }
  const double shift = gap - (ex.root_values[ex.best] - second) + 1e-9;
  if (shift > 0.0) {
    for (auto& o : mdp.nodes[0].edges[ex.best]) o.reward += shift;
  }
  return mdp;
}

}  // namespace lmap
