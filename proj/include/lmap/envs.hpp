#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lmap/mcts.hpp"
#include "lmap/rng.hpp"
#include "lmap/trajectory.hpp"

namespace lmap {

struct StepResult {
  Vec state;
  double reward = 0.0;
  bool done = false;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual int state_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual int horizon() const = 0;
  virtual double action_low() const = 0;
  virtual double action_high() const = 0;
  virtual Vec reset(uint64_t seed) = 0;
  // Clamps the action to the box. Throws InputError after done.
  virtual StepResult step(std::span<const double> action) = 0;
  virtual std::string name() const = 0;
  // `key=value` pairs describing every constant.
  virtual std::string config_string() const = 0;
  virtual std::unique_ptr<Env> clone() const = 0;
  bool done() const { return done_; }

 protected:
  bool done_ = true;
};

// Optimal-liquidation toy: state (t/T, X, I), action = fraction of the
// remaining inventory converted at price X.
struct CurrencyParams {
  double theta = 0.3;
  double mu = 1.0;
  double sigma = 0.02;
  double x0 = 0.6;
  double i0 = 1.0;
  int T = 50;
};

struct CurrencyState {
  int t = 0;
  double price = 1.0;
  double inventory = 1.0;
};

// One transition; `a` is clamped to [0, 1]. Returns the reward.
double currency_step(CurrencyState& s, double a, const CurrencyParams& p, Rng& rng, bool* done);

class CurrencyEnv : public Env {
 public:
  explicit CurrencyEnv(CurrencyParams p = {});
  int state_dim() const override { return 3; }
  int action_dim() const override { return 1; }
  int horizon() const override { return params_.T; }
  double action_low() const override { return 0.0; }
  double action_high() const override { return 1.0; }
  Vec reset(uint64_t seed) override;
  StepResult step(std::span<const double> action) override;
  std::string name() const override { return "currency"; }
  std::string config_string() const override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<CurrencyEnv>(*this); }

  const CurrencyParams& params() const { return params_; }
  const CurrencyState& raw_state() const { return state_; }
  Vec observe() const;

 private:
  CurrencyParams params_;
  CurrencyState state_;
  Rng rng_{0};
};

// 1-d goal reaching with additive noise: state (s, g).
struct ChainParams {
  double sigma = 0.0;
  int horizon = 60;
  double step_size = 0.1;
};

double chain_tier_sigma(const std::string& tier);  // det | mod | high

// s' = clamp(s + step*a + sigma*xi, -1, 1); returns -|s' - g|.
double chain_step(double& s, double g, double a, const ChainParams& p, Rng& rng);

class NoisyChainEnv : public Env {
 public:
  explicit NoisyChainEnv(ChainParams p = {});
  int state_dim() const override { return 2; }
  int action_dim() const override { return 1; }
  int horizon() const override { return params_.horizon; }
  double action_low() const override { return -1.0; }
  double action_high() const override { return 1.0; }
  Vec reset(uint64_t seed) override;
  StepResult step(std::span<const double> action) override;
  std::string name() const override { return "chain"; }
  std::string config_string() const override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<NoisyChainEnv>(*this); }

  // Test hook: place the agent and goal explicitly.
  void set_state(double s, double g);
  const ChainParams& params() const { return params_; }

 private:
  ChainParams params_;
  double s_ = 0.0, g_ = 0.0;
  int t_ = 0;
  Rng rng_{0};
};

using EnvSettings = std::map<std::string, std::string>;

// "currency" or "chain"; `settings` may override any constant
// (theta, mu, sigma, x0, i0, T for currency; tier, sigma, horizon for chain).
std::unique_ptr<Env> make_env(const std::string& name, const EnvSettings& settings = {});

class Policy {
 public:
  virtual ~Policy() = default;
  virtual Vec act(std::span<const double> state, Rng& rng) const = 0;
  virtual std::string name() const = 0;
};

class UniformPolicy : public Policy {
 public:
  UniformPolicy(int dim, double lo, double hi) : dim_(dim), lo_(lo), hi_(hi) {}
  Vec act(std::span<const double> state, Rng& rng) const override;
  std::string name() const override { return "random"; }

 private:
  int dim_;
  double lo_, hi_;
};

// Hand-written near-optimal controller for each env, noise-free.
class GreedyPolicy : public Policy {
 public:
  explicit GreedyPolicy(const Env& env);
  Vec act(std::span<const double> state, Rng& rng) const override;
  std::string name() const override { return "greedy"; }

 private:
  std::string env_;
  CurrencyParams currency_;
  ChainParams chain_;
};

// Greedy action plus Gaussian noise of scale rho, clamped to the box.
class NoisyGreedyPolicy : public Policy {
 public:
  NoisyGreedyPolicy(const Env& env, double rho);
  Vec act(std::span<const double> state, Rng& rng) const override;
  std::string name() const override { return "medium"; }

 private:
  GreedyPolicy greedy_;
  double rho_, lo_, hi_;
};

// "random" | "medium" | "greedy".
std::unique_ptr<Policy> make_policy(const std::string& kind, const Env& env, double rho = 0.3);

// Episode i resets the env with mix_seed(seed, i) and acts from its own stream.
std::vector<EpisodeRaw> collect_dataset(Env& env, const Policy& policy, int episodes, uint64_t seed);

// Undiscounted return of one seeded rollout.
double rollout_return(Env& env, const Policy& policy, uint64_t seed);

// Random rewards in [0, 1], `outcomes` distinct successor codes per edge
// with random probabilities; the best root edge's rewards are shifted so
// its expectimax value leads the runner-up by at least `gap`.
TabularLatentMdp gen_tabular_latent_mdp(uint64_t seed, int K, int H, int outcomes, double gap,
                                        double gamma_macro);

}  // namespace lmap
