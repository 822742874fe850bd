#include "lmap/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace lmap {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Empty values mean "use the environment's built-in constant".
const char* const kEnvKeys[] = {"theta", "mu", "sigma", "x0", "i0", "T", "horizon"};

}  // namespace

Config Config::defaults() {
  Config c;
  auto& v = c.values_;
  v["env"] = "currency";
  v["tier"] = "det";
  for (const char* k : kEnvKeys) v[std::string("env.") + k] = "";
  v["policy"] = "random";
  v["rho"] = "0.3";
  v["data"] = "";
  v["data.episodes"] = "300";
  v["data.seed"] = "1";
  v["data.format"] = "text";
  v["L"] = "3";
  v["horizon"] = "9";
  v["gamma"] = "0.99";

  v["codec"] = "";
  v["codec.K"] = "32";
  v["codec.d"] = "16";
  v["codec.hidden"] = "32";
  v["codec.lr"] = "0.001";
  v["codec.batch"] = "64";
  v["codec.epochs"] = "20";
  v["codec.beta"] = "0.25";
  v["codec.masked"] = "1";
  v["codec.align"] = "l2";

  v["prior"] = "";
  v["prior.kind"] = "neural";
  v["prior.embed"] = "16";
  v["prior.hidden"] = "64";
  v["prior.lr"] = "0.003";
  v["prior.batch"] = "64";
  v["prior.epochs"] = "20";
  v["prior.smoothing"] = "1";

  v["mcts.iterations"] = "100";
  v["mcts.c"] = "1";
  v["mcts.alpha"] = "0.1";
  v["mcts.epsilon"] = "1";
  v["mcts.widening"] = "1";
  v["mcts.selection"] = "uct";
  v["mcts.outcome"] = "model";
  v["mcts.preconstruct"] = "1";
  v["mcts.M"] = "16";
  v["mcts.N"] = "4";
  v["mcts.B"] = "4";
  v["mcts.lambda"] = "0.5";
  v["mcts.prebuild_depth"] = "-1";
  v["mcts.node_budget"] = "256";
  v["mcts.expand_B"] = "-1";
  v["mcts.temperature"] = "1";
  v["mcts.top_k"] = "0";
  v["mcts.final"] = "q";

  v["seeds"] = "0,1,2";
  v["episodes"] = "20";
  v["threads"] = "1";
  v["anchor_episodes"] = "1000";

  v["bench.iterations"] = "10,50,100";
  v["heatmap.F"] = "50";
  v["heatmap.l1"] = "0";
  v["oracle.instances"] = "100";
  v["oracle.iterations"] = "100";
  v["oracle.K_max"] = "8";
  v["oracle.H_max"] = "3";
  v["oracle.outcomes_max"] = "3";
  v["oracle.gap"] = "0.2";
  v["oracle.N"] = "16";
  v["ablate.axes"] = "L,horizon,selection,masked,widening,parallel";
  v["ablate.L"] = "1,3,5";
  v["ablate.horizon"] = "3,9";
  return c;
}

void Config::set(const std::string& key, const std::string& value) {
  if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
}

void Config::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      set(line);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void Config::merge_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open report " + path.string());
  std::string line;
  int found = 0;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.rfind("config.", 0) != 0) continue;
    set(line.substr(7));
    ++found;
  }
  if (found == 0) throw ConfigError(path.string() + " has no embedded config lines");
}

const std::string& Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double Config::get_double(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "inf") return INFINITY;
  try {
    return parse_double(s);
  } catch (const ParseError&) {
    throw ConfigError(key + "=" + s + " is not a number");
  }
}

int Config::get_int(const std::string& key) const {
  const std::string& s = get(key);
  int out = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + "=" + s + " is not an integer");
  return out;
}

uint64_t Config::get_u64(const std::string& key) const {
  const std::string& s = get(key);
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + "=" + s + " is not an unsigned integer");
  return out;
}

bool Config::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw ConfigError(key + "=" + s + " is not a boolean");
}

std::vector<std::string> Config::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string Config::dump() const {
  std::ostringstream out;
  for (const auto& [k, v] : values_) out << k << '=' << v << '\n';
  return out.str();
}

RunConfig resolve(const Config& c) {
  RunConfig r;
  r.env = c.get("env");
  if (r.env != "currency" && r.env != "chain") throw ConfigError("unknown env '" + r.env + "'");
  if (r.env == "chain") {
    r.env_settings["tier"] = c.get("tier");
    chain_tier_sigma(c.get("tier"));
  }
  for (const char* k : kEnvKeys) {
    const std::string& v = c.get(std::string("env.") + k);
    if (!v.empty()) r.env_settings[k] = v;
  }
  r.policy = c.get("policy");
  if (r.policy != "random" && r.policy != "medium" && r.policy != "greedy") {
    throw ConfigError("unknown policy '" + r.policy + "'");
  }
  r.rho = c.get_double("rho");
  r.data_episodes = c.get_int("data.episodes");
  r.data_seed = c.get_u64("data.seed");
  r.L = c.get_int("L");
  r.horizon = c.get_int("horizon");
  r.gamma = c.get_double("gamma");
  if (r.L < 1) throw ConfigError("L must be >= 1");
  if (r.horizon < r.L || r.horizon % r.L != 0) {
    throw ConfigError("horizon " + std::to_string(r.horizon) + " must be a positive multiple of L=" + std::to_string(r.L));
  }
  if (!(r.gamma > 0.0 && r.gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");

  r.codec.codebook_size = c.get_int("codec.K");
  r.codec.latent_dim = c.get_int("codec.d");
  r.codec.hidden = c.get_int("codec.hidden");
  r.codec.lr = c.get_double("codec.lr");
  r.codec.batch_size = c.get_int("codec.batch");
  r.codec.epochs = c.get_int("codec.epochs");
  r.codec.beta = c.get_double("codec.beta");
  r.codec.loss.masked = c.get_bool("codec.masked");
  const std::string& align = c.get("codec.align");
  if (align == "l2") {
    r.codec.loss.align = AlignNorm::kL2;
  } else if (align == "l1") {
    r.codec.loss.align = AlignNorm::kL1;
  } else {
    throw ConfigError("codec.align must be l2 or l1");
  }
  if (r.codec.codebook_size < 2) throw ConfigError("codec.K must be >= 2");
  if (!(r.codec.lr > 0.0)) throw ConfigError("codec.lr must be > 0");
  if (!(r.codec.beta >= 0.0)) throw ConfigError("codec.beta must be >= 0");

  r.prior_kind = c.get("prior.kind");
  if (r.prior_kind != "neural" && r.prior_kind != "tabular") throw ConfigError("prior.kind must be neural or tabular");
  r.prior.embed_dim = c.get_int("prior.embed");
  r.prior.hidden = c.get_int("prior.hidden");
  r.prior.lr = c.get_double("prior.lr");
  r.prior.batch_size = c.get_int("prior.batch");
  r.prior.epochs = c.get_int("prior.epochs");
  r.tabular_smoothing = c.get_double("prior.smoothing");

  MctsConfig& m = r.mcts;
  m.iterations = c.get_int("mcts.iterations");
  m.c = c.get_double("mcts.c");
  m.alpha = c.get_double("mcts.alpha");
  m.epsilon = c.get_double("mcts.epsilon");
  m.widening = c.get_bool("mcts.widening");
  const std::string& sel = c.get("mcts.selection");
  if (sel == "uct") {
    m.selection = Selection::kUct;
  } else if (sel == "puct") {
    m.selection = Selection::kPuct;
  } else {
    throw ConfigError("mcts.selection must be uct or puct");
  }
  const std::string& oc = c.get("mcts.outcome");
  if (oc == "model") {
    m.outcome_choice = OutcomeChoice::kModel;
  } else if (oc == "count") {
    m.outcome_choice = OutcomeChoice::kCount;
  } else {
    throw ConfigError("mcts.outcome must be model or count");
  }
  m.preconstruct = c.get_bool("mcts.preconstruct");
  m.M = c.get_int("mcts.M");
  m.N = c.get_int("mcts.N");
  m.B = c.get_int("mcts.B");
  m.lambda = c.get_double("mcts.lambda");
  m.prebuild_depth = c.get_int("mcts.prebuild_depth");
  m.node_budget = c.get_int("mcts.node_budget");
  m.expand_B = c.get_int("mcts.expand_B");
  m.sampling.temperature = c.get_double("mcts.temperature");
  m.sampling.top_k = c.get_int("mcts.top_k");
  const std::string& fin = c.get("mcts.final");
  if (fin != "q" && fin != "n") throw ConfigError("mcts.final must be q or n");
  m.final_max_n = fin == "n";
  m.gamma_macro = std::pow(r.gamma, r.L);
  m.validate();

  r.seeds.clear();
  for (const auto& s : c.get_list("seeds")) {
    Config one = Config::defaults();
    one.set("data.seed", s);
    r.seeds.push_back(one.get_u64("data.seed"));
  }
  if (r.seeds.empty()) throw ConfigError("seeds must list at least one seed");
  r.episodes = c.get_int("episodes");
  r.threads = c.get_int("threads");
  r.anchor_episodes = c.get_int("anchor_episodes");
  if (r.episodes < 1 || r.threads < 1 || r.anchor_episodes < 1) {
    throw ConfigError("episodes, threads and anchor_episodes must be >= 1");
  }
  return r;
}

}  // namespace lmap
