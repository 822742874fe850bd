#include "lmap/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace lmap {

namespace {

double ms_between(std::chrono::steady_clock::time_point a, std::chrono::steady_clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double stderr_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

std::string join(std::span<const double> v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_double(v[i]);
  }
  return out;
}

std::string config_echo(const Config& c) {
  std::string out;
  for (const auto& [k, v] : c.values()) out += "config." + k + "=" + v + "\n";
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << content;
  if (!out) throw InputError("write failed for " + path.string());
}

void check_models(const TrainedModels& m, const Env& env, const RunConfig& rc) {
  const Dims& d = m.codec.shape.dims;
  if (d.n != env.state_dim() || d.l != env.action_dim() || d.L != rc.L) {
    throw InputError("model/env dim mismatch: codec has n=" + std::to_string(d.n) + " l=" +
                     std::to_string(d.l) + " L=" + std::to_string(d.L) + ", env " + env.name() +
                     " has n=" + std::to_string(env.state_dim()) + " l=" + std::to_string(env.action_dim()) +
                     " and L=" + std::to_string(rc.L));
  }
  if (!m.prior) throw InputError("model set has no prior");
  if (m.prior->codebook_size() != m.codec.shape.codebook_size || m.prior->state_dim() != d.n) {
    throw InputError("prior does not match the codec (codebook size or state width)");
  }
}

std::string decision_digest(std::span<const DecisionStats> log) {
  std::ostringstream ss;
  for (const auto& d : log) {
    ss << d.code << ' ' << d.fallback << ' ' << d.iterations << ' ' << d.nodes;
    for (double a : d.action) ss << ' ' << format_double(a);
    for (const auto& e : d.root_edges) ss << ' ' << e.code << ':' << format_double(e.Q) << ':' << e.N;
    ss << '\n';
  }
  return git_blob_hash(ss.str());
}

}  // namespace

std::string git_blob_hash(std::string_view content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob.append(content);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw NumericError("SHA-1 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string model_hash(const CodecParams& codec) {
  std::ostringstream ss;
  write_codec(codec, ss);
  return git_blob_hash(ss.str());
}

std::string model_hash(const PriorModel& prior) {
  std::ostringstream ss;
  prior.write(ss);
  return git_blob_hash(ss.str());
}

std::vector<std::string> TrainedModels::hashes() const {
  std::vector<std::string> out{model_hash(codec)};
  if (prior) out.push_back(model_hash(*prior));
  return out;
}

// ---- pipeline ----

Dataset generate_dataset(const RunConfig& rc) {
  auto env = make_env(rc.env, rc.env_settings);
  auto policy = make_policy(rc.policy, *env, rc.rho);
  auto episodes = collect_dataset(*env, *policy, rc.data_episodes, rc.data_seed);
  const Dims dims{env->state_dim(), env->action_dim(), rc.L};
  std::string envcfg = env->config_string() + " policy=" + rc.policy;
  if (rc.policy == "medium") envcfg += " rho=" + format_double(rc.rho);
  envcfg += " episodes=" + std::to_string(rc.data_episodes) + " seed=" + std::to_string(rc.data_seed);
  return build_dataset(std::move(episodes), dims, rc.gamma, true, envcfg);
}

std::unique_ptr<PriorModel> train_prior(const Dataset& data, const CodecParams& codec,
                                        const RunConfig& rc, uint64_t seed, PriorTrainReport* report) {
  const auto seqs = encode_code_sequences(data, codec);
  const int n = data.dims.n;
  const int K = codec.shape.codebook_size;
  if (rc.prior_kind == "tabular") {
    return std::make_unique<TabularPrior>(fit_tabular(seqs, n, K, data.norm, rc.tabular_smoothing));
  }
  NeuralPriorConfig pc = rc.prior;
  pc.seed = mix_seed(seed, 0x7072696fULL);
  auto res = train_neural_prior(seqs, n, K, data.norm, pc);
  if (report) *report = res.report;
  return std::make_unique<NeuralPrior>(std::move(res.model));
}

TrainedModels train_models(const Dataset& data, const RunConfig& rc, uint64_t seed) {
  TrainedModels m;
  m.seed = seed;
  CodecTrainConfig cc = rc.codec;
  cc.seed = mix_seed(seed, 0x636f6465ULL);
  auto res = train_codec(data, cc);
  m.codec = std::move(res.params);
  m.codec_report = std::move(res.report);
  m.prior = train_prior(data, m.codec, rc, seed, &m.prior_report);
  return m;
}

Anchors compute_anchors(const RunConfig& rc) {
  static std::mutex mu;
  static std::map<std::string, Anchors> cache;
  auto env = make_env(rc.env, rc.env_settings);
  const std::string key = env->config_string() + " anchor_episodes=" + std::to_string(rc.anchor_episodes);
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
  }
  auto random = make_policy("random", *env);
  auto greedy = make_policy("greedy", *env);
  double r = 0.0, g = 0.0;
  for (int i = 0; i < rc.anchor_episodes; ++i) {
    const uint64_t s = mix_seed(0x616e63686f72ULL, static_cast<uint64_t>(i));
    r += rollout_return(*env, *random, s);
    g += rollout_return(*env, *greedy, s);
  }
  Anchors a{r / rc.anchor_episodes, g / rc.anchor_episodes};
  std::lock_guard<std::mutex> lock(mu);
  cache.emplace(key, a);
  return a;
}

double normalized_score(double ret, const Anchors& a) {
  const double span = a.reference - a.random;
  if (!(std::abs(span) > 1e-12)) throw NumericError("normalization anchors coincide");
  return 100.0 * (ret - a.random) / span;
}

uint64_t episode_seed(uint64_t model_seed, int episode) {
  return mix_seed(mix_seed(0x6576616cULL, model_seed), static_cast<uint64_t>(episode));
}

EpisodeResult run_episode(Env& env, const TrainedModels& models, const RunConfig& rc, uint64_t seed) {
  check_models(models, env, rc);
  CodecSearchModel model(models.codec, *models.prior, rc.depth(), rc.mcts.gamma_macro);
  EpisodeResult res;
  Vec s = env.reset(seed);
  uint64_t t = 0;
  while (!env.done()) {
    MctsConfig m = rc.mcts;
    m.seed = mix_seed(seed, 0x64656300ULL + t);
    const auto t0 = std::chrono::steady_clock::now();
    DecisionStats d = plan(LatentState{s, -1}, model, m, env.action_dim());
    const auto t1 = std::chrono::steady_clock::now();
    res.latency_ms.push_back(ms_between(t0, t1));
    res.search_ms.push_back(d.plan_ms);
    res.prebuild_ms.push_back(d.prebuild_ms);
    StepResult r = env.step(d.action);
    res.ret += r.reward;
    s = std::move(r.state);
    res.decisions.push_back(std::move(d));
    ++t;
  }
  return res;
}

LatencySummary summarize_latency(std::vector<double> ms) {
  LatencySummary out;
  if (ms.empty()) return out;
  out.mean = mean_of(ms);
  std::sort(ms.begin(), ms.end());
  auto pct = [&](double q) {
    const auto i = static_cast<std::size_t>(std::ceil(q * static_cast<double>(ms.size()))) - 1;
    return ms[std::min(i, ms.size() - 1)];
  };
  out.p50 = pct(0.5);
  out.p90 = pct(0.9);
  return out;
}

std::string EvalReport::numbers() const {
  std::ostringstream ss;
  ss << "episodes=" << returns.size() << '\n';
  ss << "returns=" << join(returns) << '\n';
  ss << "mean_return=" << format_double(mean) << '\n';
  ss << "stderr_return=" << format_double(stderr_mean) << '\n';
  ss << "normalized_score=" << format_double(normalized) << '\n';
  ss << "normalized_stderr=" << format_double(normalized_stderr) << '\n';
  ss << "anchor_random=" << format_double(anchors.random) << '\n';
  ss << "anchor_reference=" << format_double(anchors.reference) << '\n';
  ss << "decisions=" << decisions << '\n';
  ss << "decision_digest=" << decision_digest(decision_log) << '\n';
  return ss.str();
}

std::string EvalReport::text() const {
  std::ostringstream ss;
  ss << "report=eval\n" << numbers();
  auto lat = [&](const char* name, const LatencySummary& l) {
    ss << name << "_mean_ms=" << format_double(l.mean) << '\n';
    ss << name << "_p50_ms=" << format_double(l.p50) << '\n';
    ss << name << "_p90_ms=" << format_double(l.p90) << '\n';
  };
  lat("latency", latency);
  lat("search", search);
  lat("prebuild", prebuild);
  ss << "threads=" << threads << '\n';
  for (const auto& h : hashes) ss << "model_hash=" << h << '\n';
  ss << config;
  return ss.str();
}

EvalReport evaluate(std::span<const TrainedModels* const> models, const RunConfig& rc,
                    const Anchors& anchors, std::string config_echo_text) {
  if (models.empty()) throw InputError("evaluate: no models");
  {
    auto probe = make_env(rc.env, rc.env_settings);
    for (const auto* m : models) check_models(*m, *probe, rc);
  }
  struct Task {
    std::size_t model;
    int episode;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < models.size(); ++i) {
    for (int j = 0; j < rc.episodes; ++j) tasks.push_back({i, j});
  }
  std::vector<EpisodeResult> results(tasks.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    auto env = make_env(rc.env, rc.env_settings);
    while (true) {
      const std::size_t k = next.fetch_add(1);
      if (k >= tasks.size()) return;
      try {
        const TrainedModels& m = *models[tasks[k].model];
        results[k] = run_episode(*env, m, rc, episode_seed(m.seed, tasks[k].episode));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
        next = tasks.size();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(rc.threads, static_cast<int>(tasks.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  EvalReport rep;
  rep.anchors = anchors;
  rep.threads = threads;
  rep.config = std::move(config_echo_text);
  std::vector<double> lat, search, pre;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    auto& r = results[k];
    rep.returns.push_back(r.ret);
    rep.seeds.push_back(models[tasks[k].model]->seed);
    lat.insert(lat.end(), r.latency_ms.begin(), r.latency_ms.end());
    search.insert(search.end(), r.search_ms.begin(), r.search_ms.end());
    pre.insert(pre.end(), r.prebuild_ms.begin(), r.prebuild_ms.end());
    for (auto& d : r.decisions) rep.decision_log.push_back(std::move(d));
  }
  rep.decisions = static_cast<int>(rep.decision_log.size());
  rep.mean = mean_of(rep.returns);
  rep.stderr_mean = stderr_of(rep.returns);
  rep.normalized = normalized_score(rep.mean, anchors);
  rep.normalized_stderr = 100.0 * rep.stderr_mean / std::abs(anchors.reference - anchors.random);
  rep.latency = summarize_latency(std::move(lat));
  rep.search = summarize_latency(std::move(search));
  rep.prebuild = summarize_latency(std::move(pre));
  for (const auto* m : models) {
    for (auto& h : m->hashes()) rep.hashes.push_back(std::move(h));
  }
  return rep;
}

EvalReport run_pipeline(const RunConfig& rc, const std::string& echo) {
  const Dataset data = generate_dataset(rc);
  std::vector<TrainedModels> models;
  for (uint64_t s : rc.seeds) models.push_back(train_models(data, rc, s));
  std::vector<const TrainedModels*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  return evaluate(ptrs, rc, compute_anchors(rc), echo);
}

// ---- benchmark ----

MctsConfig vanilla_variant(MctsConfig m) {
  m.preconstruct = false;
  m.lambda = 1.0;
  m.alpha = 1.0;
  return m;
}

std::string BenchResult::csv() const {
  std::ostringstream ss;
  ss << "variant,iterations,mean_return,stderr,latency_ms,search_ms,prebuild_ms,cache_dominates\n";
  for (const auto& r : rows) {
    ss << r.variant << ',' << r.iterations << ',' << format_double(r.mean) << ','
       << format_double(r.stderr_mean) << ',' << format_double(r.latency_ms) << ','
       << format_double(r.search_ms) << ',' << format_double(r.prebuild_ms) << ','
       << (r.cache_dominates ? 1 : 0) << '\n';
  }
  return ss.str();
}

BenchResult bench_preconstruct(const RunConfig& rc, std::span<const int> budgets) {
  if (budgets.empty()) throw ConfigError("bench needs at least one iteration budget");
  const Dataset data = generate_dataset(rc);
  std::vector<TrainedModels> models;
  for (uint64_t s : rc.seeds) models.push_back(train_models(data, rc, s));
  std::vector<const TrainedModels*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  const Anchors unit{0.0, 1.0};

  BenchResult out;
  for (int b : budgets) {
    double means[2] = {0.0, 0.0};
    for (int v = 0; v < 2; ++v) {
      RunConfig r = rc;
      r.mcts.iterations = b;
      if (v == 1) r.mcts = vanilla_variant(r.mcts);
      const EvalReport rep = evaluate(ptrs, r, unit);
      BenchRow row;
      row.variant = v == 0 ? "prebuilt" : "vanilla";
      row.iterations = b;
      row.mean = rep.mean;
      row.stderr_mean = rep.stderr_mean;
      row.latency_ms = rep.latency.mean;
      row.search_ms = rep.search.mean;
      row.prebuild_ms = rep.prebuild.mean;
      row.cache_dominates = rep.prebuild.mean > rep.search.mean;
      means[v] = rep.mean;
      out.rows.push_back(row);
    }
    out.gaps.push_back(means[0] - means[1]);
  }
  out.better_at_smallest = out.gaps.front() >= 0.0;
  out.gap_non_increasing = true;
  for (std::size_t i = 1; i < out.gaps.size(); ++i) {
    if (out.gaps[i] > out.gaps[i - 1]) out.gap_non_increasing = false;
  }
  return out;
}

// ---- ablation ----

std::vector<std::string> ablation_settings(const Config& base, const std::string& axis) {
  if (axis == "L") return base.get_list("ablate.L");
  if (axis == "horizon") return base.get_list("ablate.horizon");
  if (axis == "selection") return {"uct", "puct"};
  if (axis == "masked" || axis == "widening") return {"1", "0"};
  if (axis == "parallel") return {"on", "off"};
  throw ConfigError("unknown ablation axis '" + axis + "'");
}

Config ablation_variant(const Config& base, const std::string& axis, const std::string& setting) {
  Config c = base;
  if (axis == "L") {
    c.set("L", setting);
    const int L = c.get_int("L");
    if (L < 1) throw ConfigError("ablate.L entries must be >= 1");
    // Smallest multiple of L that covers the base horizon.
    const int h = base.get_int("horizon");
    c.set("horizon", std::to_string((h + L - 1) / L * L));
  } else if (axis == "horizon") {
    c.set("horizon", setting);
  } else if (axis == "selection") {
    c.set("mcts.selection", setting);
  } else if (axis == "masked") {
    c.set("codec.masked", setting);
  } else if (axis == "widening") {
    c.set("mcts.widening", setting);
    if (!c.get_bool("mcts.widening")) {
      c.set("mcts.alpha", "1");
      c.set("mcts.epsilon", "inf");
    }
  } else if (axis == "parallel") {
    if (setting == "off") {
      c.set("mcts.expand_B", "1");
    } else if (setting != "on") {
      throw ConfigError("parallel setting must be on or off");
    }
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  return c;
}

std::string AblationResult::csv() const {
  std::ostringstream ss;
  ss << "axis,setting,mean_score,stderr,mean_return\n";
  for (const auto& r : rows) {
    ss << r.axis << ',' << r.setting << ',' << format_double(r.mean_score) << ','
       << format_double(r.stderr_score) << ',' << format_double(r.mean_return) << '\n';
  }
  return ss.str();
}

AblationResult ablate(const Config& base, std::span<const std::string> axes) {
  auto subset_key = [](const Config& c, bool with_codec) {
    std::string key;
    for (const auto& [k, v] : c.values()) {
      const bool data_key = k == "env" || k == "tier" || k.rfind("env.", 0) == 0 || k == "policy" ||
                            k == "rho" || k.rfind("data", 0) == 0 || k == "L" || k == "gamma";
      const bool model_key = k.rfind("codec", 0) == 0 || k.rfind("prior", 0) == 0 || k == "seeds";
      if (data_key || (with_codec && model_key)) key += k + "=" + v + ";";
    }
    return key;
  };
  std::map<std::string, Dataset> datasets;
  std::map<std::string, std::vector<TrainedModels>> model_sets;
  std::map<std::string, EvalReport> evals;

  auto run = [&](const Config& c) -> const EvalReport& {
    const std::string full = c.dump();
    if (auto it = evals.find(full); it != evals.end()) return it->second;
    const RunConfig rc = resolve(c);
    const std::string dkey = subset_key(c, false);
    if (!datasets.count(dkey)) datasets.emplace(dkey, generate_dataset(rc));
    const std::string mkey = subset_key(c, true);
    if (!model_sets.count(mkey)) {
      std::vector<TrainedModels> ms;
      for (uint64_t s : rc.seeds) ms.push_back(train_models(datasets.at(dkey), rc, s));
      model_sets.emplace(mkey, std::move(ms));
    }
    std::vector<const TrainedModels*> ptrs;
    for (const auto& m : model_sets.at(mkey)) ptrs.push_back(&m);
    EvalReport rep = evaluate(ptrs, rc, compute_anchors(rc));
    rep.decision_log.clear();
    return evals.emplace(full, std::move(rep)).first->second;
  };

  AblationResult out;
  std::map<std::pair<std::string, std::string>, const EvalReport*> by_setting;
  for (const auto& axis : axes) {
    for (const auto& setting : ablation_settings(base, axis)) {
      const EvalReport& rep = run(ablation_variant(base, axis, setting));
      out.rows.push_back({axis, setting, rep.normalized, rep.normalized_stderr, rep.mean});
      by_setting[{axis, setting}] = &rep;
    }
  }
  const std::pair<const char*, std::pair<const char*, const char*>> directions[] = {
      {"masked", {"1", "0"}}, {"widening", {"1", "0"}}, {"parallel", {"on", "off"}}, {"L", {"3", "1"}}};
  for (const auto& [axis, pair] : directions) {
    auto a = by_setting.find({axis, pair.first});
    auto b = by_setting.find({axis, pair.second});
    if (a == by_setting.end() || b == by_setting.end()) continue;
    AblationCheck ch;
    ch.axis = axis;
    ch.better = pair.first;
    ch.worse = pair.second;
    ch.diff = a->second->normalized - b->second->normalized;
    ch.se = std::hypot(a->second->normalized_stderr, b->second->normalized_stderr);
    ch.inverted = ch.diff < 0.0;
    if (ch.inverted) {
      if (-ch.diff <= ch.se) {
        ++out.inversions_within_se;
      } else {
        ++out.inversions_beyond_se;
      }
    }
    out.checks.push_back(ch);
  }
  out.pass = out.inversions_beyond_se == 0 && out.inversions_within_se <= 1;
  return out;
}

// ---- heatmap ----

std::vector<std::vector<int>> episode_code_sequences(const Dataset& data, const CodecParams& codec) {
  std::vector<std::vector<int>> out;
  out.reserve(data.episodes.size());
  for (const auto& ep : data.episodes) {
    const auto tokens = segment_episode(ep, data.dims.L, data.gamma, 0);
    const auto chunks = make_chunks(tokens);
    std::vector<int> seq;
    for (const auto& ch : chunks) {
      auto [a, b] = chunk_codes(ch, codec);
      seq.push_back(a);
      seq.push_back(b);
    }
    out.push_back(std::move(seq));
  }
  return out;
}

Heatmap build_heatmap(std::span<const std::vector<int>> sequences, int K, int F) {
  if (K < 1 || F < 1) throw InputError("heatmap: K and F must be >= 1");
  Heatmap h;
  h.from_hist.assign(static_cast<std::size_t>(K), 0);
  h.to_hist.assign(static_cast<std::size_t>(K), 0);
  std::map<std::pair<int, int>, long> counts;
  for (const auto& seq : sequences) {
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      const int a = seq[i], b = seq[i + 1];
      if (a < 0 || a >= K || b < 0 || b >= K) throw InputError("heatmap: code out of range");
      ++h.from_hist[static_cast<std::size_t>(a)];
      ++h.to_hist[static_cast<std::size_t>(b)];
      ++counts[{a, b}];
      ++h.transitions;
    }
  }
  std::vector<int> order;
  for (int z = 0; z < K; ++z) {
    if (h.from_hist[static_cast<std::size_t>(z)] > 0) order.push_back(z);
  }
  if (static_cast<int>(order.size()) < F) {
    log_warning("heatmap: only " + std::to_string(order.size()) + " distinct codes, shrinking F from " +
                std::to_string(F));
    F = static_cast<int>(order.size());
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return h.from_hist[static_cast<std::size_t>(a)] > h.from_hist[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(F));
  h.codes = order;
  std::map<int, std::size_t> col;
  for (std::size_t j = 0; j < order.size(); ++j) col[order[j]] = j;
  for (int a : order) {
    Vec row(order.size(), 0.0);
    double total = 0.0;
    for (int b : order) {
      auto it = counts.find({a, b});
      if (it == counts.end()) continue;
      row[col[b]] = static_cast<double>(it->second);
      total += static_cast<double>(it->second);
    }
    const bool uniform = total == 0.0;
    for (double& v : row) v = uniform ? 1.0 / static_cast<double>(row.size()) : v / total;
    h.matrix.push_back(std::move(row));
    h.uniform_row.push_back(uniform);
  }
  return h;
}

double Heatmap::median_row_support() const {
  std::vector<double> s;
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    if (uniform_row[i]) continue;
    s.push_back(static_cast<double>(std::count_if(matrix[i].begin(), matrix[i].end(), [](double v) { return v > 0.0; })));
  }
  return median_of(std::move(s));
}

double Heatmap::median_row_max() const {
  std::vector<double> s;
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    if (uniform_row[i]) continue;
    s.push_back(*std::max_element(matrix[i].begin(), matrix[i].end()));
  }
  return median_of(std::move(s));
}

std::string Heatmap::csv() const {
  std::ostringstream ss;
  ss << "from";
  for (int z : codes) ss << ',' << z;
  ss << ",uniform\n";
  for (std::size_t i = 0; i < codes.size(); ++i) {
    ss << codes[i];
    for (double v : matrix[i]) ss << ',' << format_double(v);
    ss << ',' << (uniform_row[i] ? 1 : 0) << '\n';
  }
  return ss.str();
}

std::string Heatmap::hist_csv() const {
  std::ostringstream ss;
  ss << "code,from_count,to_count\n";
  for (std::size_t z = 0; z < from_hist.size(); ++z) ss << z << ',' << from_hist[z] << ',' << to_hist[z] << '\n';
  return ss.str();
}

// ---- oracle comparison ----

MctsConfig oracle_mcts_config(const OracleOptions& o, int K) {
  MctsConfig m = o.base;
  m.iterations = o.iterations;
  m.gamma_macro = o.gamma_macro;
  m.preconstruct = true;
  m.lambda = 1.0;
  m.M = 8 * K;
  m.B = 8 * K;
  m.N = o.N;
  m.prebuild_depth = -1;
  m.node_budget = 1 << 20;
  m.expand_B = -1;
  m.sampling = {};
  return m;
}

OracleReport oracle_compare(const OracleOptions& o) {
  if (o.instances < 1 || o.K_max < 2 || o.H_max < 1 || o.outcomes_max < 1) {
    throw ConfigError("oracle: instances >= 1, K_max >= 2, H_max >= 1, outcomes_max >= 1 required");
  }
  OracleReport rep;
  double gap_sum = 0.0;
  for (int i = 0; i < o.instances; ++i) {
    const uint64_t s = mix_seed(o.seed, static_cast<uint64_t>(i));
    Rng r(s, 0x6f72636cULL);
    const int K = 2 + static_cast<int>(r.uniform_int(static_cast<uint64_t>(o.K_max - 1)));
    const int H = o.H_fixed > 0 ? o.H_fixed : 1 + static_cast<int>(r.uniform_int(static_cast<uint64_t>(o.H_max)));
    int outs = std::min(K, 1 + static_cast<int>(r.uniform_int(static_cast<uint64_t>(o.outcomes_max))));
    while (outs > 1 && std::pow(static_cast<double>(K) * outs, H) > 1e6) --outs;
    const auto mdp = gen_tabular_latent_mdp(s, K, H, outs, o.gap, o.gamma_macro);
    const auto ex = expectimax_exact(mdp, o.gamma_macro);
    TabularMdpModel model(mdp);
    MctsConfig m = oracle_mcts_config(o, K);
    m.seed = mix_seed(s, 0x706c616eULL);
    const DecisionStats d = plan(TabularMdpModel::root_state(), model, m, 0);
    ++rep.instances;
    if (d.code == ex.best) ++rep.agree;
    const double gap = ex.value - ex.root_values[static_cast<std::size_t>(d.code)];
    gap_sum += gap;
    rep.max_value_gap = std::max(rep.max_value_gap, gap);
  }
  rep.rate = static_cast<double>(rep.agree) / rep.instances;
  rep.mean_value_gap = gap_sum / rep.instances;
  return rep;
}

// ---- commands ----

namespace {

Dataset load_or_generate(const Config& cfg, const RunConfig& rc) {
  const std::string& path = cfg.get("data");
  if (path.empty()) {
    log_info("no data= given, generating a " + rc.env + " corpus");
    return generate_dataset(rc);
  }
  Dataset d = load_dataset(path);
  // Re-segment with the configured macro length and discount.
  return build_dataset(std::move(d.episodes), Dims{d.dims.n, d.dims.l, rc.L}, rc.gamma, true, d.envcfg);
}

uint64_t first_seed(const CommandContext& ctx, const RunConfig& rc) {
  return ctx.seed ? *ctx.seed : rc.seeds.front();
}

void emit(const CommandContext& ctx, const std::string& default_out, const std::string& text) {
  std::cout << text;
  const std::string path = ctx.out.empty() ? default_out : ctx.out;
  if (!path.empty()) write_file(path, text);
}

int cmd_gen_data(const CommandContext& ctx) {
  Config cfg = ctx.config;
  if (ctx.seed) cfg.set("data.seed", std::to_string(*ctx.seed));
  const RunConfig rc = resolve(cfg);
  const Dataset data = generate_dataset(rc);
  const std::string& fmt = cfg.get("data.format");
  if (fmt != "text" && fmt != "binary") throw ConfigError("data.format must be text or binary");
  const std::string path = ctx.out.empty() ? "data.txt" : ctx.out;
  save_dataset(data, path, fmt == "text" ? FileFormat::kText : FileFormat::kBinary);
  std::size_t steps = 0;
  std::vector<double> rets;
  for (const auto& ep : data.episodes) {
    steps += ep.length();
    double r = 0.0;
    for (double x : ep.rewards) r += x;
    rets.push_back(r);
  }
  std::cout << "report=gen-data\nfile=" << path << "\nepisodes=" << data.episodes.size()
            << "\nsteps=" << steps << "\nchunks=" << data.chunks.size()
            << "\nmean_return=" << format_double(mean_of(rets)) << "\nenvcfg=" << data.envcfg
            << "\nfile_hash=" << git_blob_hash(read_file(path)) << '\n';
  return 0;
}

int cmd_train_codec(const CommandContext& ctx) {
  const RunConfig rc = resolve(ctx.config);
  const Dataset data = load_or_generate(ctx.config, rc);
  CodecTrainConfig cc = rc.codec;
  cc.seed = mix_seed(first_seed(ctx, rc), 0x636f6465ULL);
  auto res = train_codec(data, cc);
  const std::string path = ctx.out.empty() ? "codec.txt" : ctx.out;
  save_codec(res.params, path);
  std::ostringstream ss;
  ss << "report=train-codec\n";
  for (const auto& e : res.report.epochs) {
    ss << "epoch=" << e.epoch << " loss=" << format_double(e.loss) << " recon_mse=" << format_double(e.recon_mse)
       << " codes_used=" << e.codes_used << " dead_reset=" << e.dead_reset << '\n';
  }
  ss << "final_loss=" << format_double(res.report.epochs.empty() ? 0.0 : res.report.epochs.back().loss) << '\n';
  ss << "initial_recon_mse=" << format_double(res.report.initial_recon_mse) << '\n';
  ss << "final_recon_mse=" << format_double(res.report.final_recon_mse) << '\n';
  ss << "model_hash=" << git_blob_hash(read_file(path)) << '\n' << config_echo(ctx.config);
  std::cout << ss.str();
  write_file(path + ".report", ss.str());
  return 0;
}

int cmd_train_prior(const CommandContext& ctx) {
  const RunConfig rc = resolve(ctx.config);
  const std::string& codec_path = ctx.config.get("codec");
  if (codec_path.empty()) throw ConfigError("train-prior needs a codec checkpoint: --set codec=<file>");
  const CodecParams codec = load_codec(codec_path);
  const Dataset data = load_or_generate(ctx.config, rc);
  if (codec.shape.dims != data.dims) throw InputError("codec dims do not match the dataset");
  PriorTrainReport report;
  auto prior = train_prior(data, codec, rc, first_seed(ctx, rc), &report);
  const std::string path = ctx.out.empty() ? "prior.txt" : ctx.out;
  prior->save(path);
  std::ostringstream ss;
  ss << "report=train-prior\nkind=" << rc.prior_kind << '\n';
  for (std::size_t i = 0; i < report.perplexity.size(); ++i) {
    ss << "epoch=" << i + 1 << " perplexity=" << format_double(report.perplexity[i]) << '\n';
  }
  ss << "final_cross_entropy=" << format_double(report.final_cross_entropy) << '\n';
  ss << "uniform_cross_entropy=" << format_double(report.uniform_cross_entropy) << '\n';
  ss << "codec_hash=" << git_blob_hash(read_file(codec_path)) << '\n';
  ss << "model_hash=" << git_blob_hash(read_file(path)) << '\n' << config_echo(ctx.config);
  std::cout << ss.str();
  write_file(path + ".report", ss.str());
  return 0;
}

int cmd_grad_check(const CommandContext& ctx) {
  const RunConfig rc = resolve(ctx.config);
  const Dataset data = load_or_generate(ctx.config, rc);
  if (data.chunks.empty()) throw InputError("grad-check: corpus has no chunks");
  std::vector<uint64_t> seeds = ctx.seed ? std::vector<uint64_t>{*ctx.seed} : rc.seeds;
  bool all = true;
  for (uint64_t s : seeds) {
    const CodecShape shape{data.dims, rc.codec.latent_dim, rc.codec.codebook_size, rc.codec.hidden};
    const CodecParams p = init_codec(shape, rc.codec.beta, data.norm, s);
    Rng rng(s, 0x67726164ULL);
    std::vector<TokenChunk> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(data.chunks[rng.uniform_int(data.chunks.size())]);
    const GradCheckReport r = grad_check(p, batch, rc.codec.loss);
    std::cout << "seed=" << s << " result=" << (r.pass ? "PASS" : "FAIL")
              << " max_rel_error=" << format_double(r.max_rel_error) << " worst_block=" << r.worst_block << '\n';
    for (const auto& b : r.blocks) {
      std::cout << "  block=" << b.name << " max_rel_error=" << format_double(b.max_rel_error)
                << " checked=" << b.checked << " skipped_boundary=" << b.skipped_boundary << '\n';
    }
    all = all && r.pass;
  }
  std::cout << "grad_check=" << (all ? "PASS" : "FAIL") << '\n';
  return all ? 0 : 4;
}

int cmd_eval(const CommandContext& ctx) {
  Config cfg = ctx.config;
  if (ctx.seed) cfg.set("seeds", std::to_string(*ctx.seed));
  const RunConfig rc = resolve(cfg);
  const std::string& codec_path = cfg.get("codec");
  const std::string& prior_path = cfg.get("prior");
  EvalReport rep;
  if (!codec_path.empty() || !prior_path.empty()) {
    if (codec_path.empty() || prior_path.empty()) throw ConfigError("eval with checkpoints needs both codec= and prior=");
    TrainedModels m;
    m.codec = load_codec(codec_path);
    m.prior = load_prior(prior_path);
    m.seed = rc.seeds.front();
    const TrainedModels* ptr = &m;
    rep = evaluate(std::span<const TrainedModels* const>(&ptr, 1), rc, compute_anchors(rc), config_echo(cfg));
    rep.hashes = {git_blob_hash(read_file(codec_path)), git_blob_hash(read_file(prior_path))};
  } else {
    rep = run_pipeline(rc, config_echo(cfg));
  }
  emit(ctx, "", rep.text());
  return 0;
}

int cmd_bench(const CommandContext& ctx) {
  Config cfg = ctx.config;
  if (ctx.seed) cfg.set("seeds", std::to_string(*ctx.seed));
  const RunConfig rc = resolve(cfg);
  std::vector<int> budgets;
  for (const auto& s : cfg.get_list("bench.iterations")) {
    Config probe = Config::defaults();
    probe.set("mcts.iterations", s);
    budgets.push_back(probe.get_int("mcts.iterations"));
  }
  const BenchResult b = bench_preconstruct(rc, budgets);
  std::ostringstream ss;
  ss << b.csv();
  std::ostringstream summary;
  summary << "report=bench-preconstruct\ngaps=" << join(b.gaps) << "\nprebuilt_better_at_smallest="
          << (b.better_at_smallest ? 1 : 0) << "\ngap_non_increasing=" << (b.gap_non_increasing ? 1 : 0) << '\n'
          << config_echo(cfg);
  std::cout << ss.str() << summary.str();
  if (!ctx.out.empty()) {
    write_file(ctx.out, ss.str());
    write_file(ctx.out + ".report", summary.str());
  }
  if (ctx.check && !(b.better_at_smallest && b.gap_non_increasing)) return 4;
  return 0;
}

int cmd_ablate(const CommandContext& ctx) {
  Config cfg = ctx.config;
  if (cfg.get("env") != "chain" || cfg.get("tier") != "high") log_info("ablate: running on chain, tier high");
  cfg.set("env", "chain");
  cfg.set("tier", "high");
  const std::vector<std::string> axes = cfg.get_list("ablate.axes");
  const AblationResult a = ablate(cfg, axes);
  std::ostringstream summary;
  summary << "report=ablate\n";
  for (const auto& c : a.checks) {
    summary << "check axis=" << c.axis << " better=" << c.better << " worse=" << c.worse
            << " diff=" << format_double(c.diff) << " se=" << format_double(c.se)
            << " inverted=" << (c.inverted ? 1 : 0) << '\n';
  }
  summary << "inversions_within_se=" << a.inversions_within_se << "\ninversions_beyond_se=" << a.inversions_beyond_se
          << "\nresult=" << (a.pass ? "PASS" : "FAIL") << '\n' << config_echo(cfg);
  std::cout << a.csv() << summary.str();
  if (!ctx.out.empty()) {
    write_file(ctx.out, a.csv());
    write_file(ctx.out + ".report", summary.str());
  }
  if (ctx.check && !a.pass) return 4;
  return 0;
}

bool row_stochastic(const Heatmap& h) {
  for (const auto& row : h.matrix) {
    double s = 0.0;
    for (double v : row) s += v;
    if (std::abs(s - 1.0) > 1e-6) return false;
  }
  return true;
}

int cmd_heatmap(const CommandContext& ctx) {
  const RunConfig rc = resolve(ctx.config);
  const Dataset data = load_or_generate(ctx.config, rc);
  const uint64_t seed = first_seed(ctx, rc);
  const std::string& codec_path = ctx.config.get("codec");
  CodecParams codec;
  if (codec_path.empty()) {
    CodecTrainConfig cc = rc.codec;
    cc.seed = mix_seed(seed, 0x636f6465ULL);
    codec = train_codec(data, cc).params;
  } else {
    codec = load_codec(codec_path);
  }
  const int F = ctx.config.get_int("heatmap.F");
  const std::string prefix = ctx.out.empty() ? "heatmap" : ctx.out;
  std::ostringstream ss;
  ss << "report=heatmap\n";
  auto one = [&](const CodecParams& c, const std::string& tag) {
    const auto seqs = episode_code_sequences(data, c);
    const Heatmap h = build_heatmap(seqs, c.shape.codebook_size, F);
    write_file(prefix + tag + ".csv", h.csv());
    write_file(prefix + tag + "_hist.csv", h.hist_csv());
    const long flagged = std::count(h.uniform_row.begin(), h.uniform_row.end(), true);
    ss << "variant=" << (tag.empty() ? "l2" : "l1") << " codes=" << h.codes.size() << " transitions=" << h.transitions
       << " flagged_rows=" << flagged << " median_row_support=" << format_double(h.median_row_support())
       << " median_row_max=" << format_double(h.median_row_max())
       << " row_stochastic=" << (row_stochastic(h) ? 1 : 0) << '\n';
    return h;
  };
  const Heatmap base = one(codec, "");
  bool ok = row_stochastic(base);
  if (ctx.config.get_bool("heatmap.l1")) {
    CodecTrainConfig cc = rc.codec;
    cc.seed = mix_seed(seed, 0x636f6465ULL);
    cc.loss.align = AlignNorm::kL1;
    const Heatmap l1 = one(train_codec(data, cc).params, "_l1");
    ok = ok && row_stochastic(l1) && l1.median_row_max() > base.median_row_max();
    ss << "l1_higher_row_max=" << (l1.median_row_max() > base.median_row_max() ? 1 : 0) << '\n';
  }
  ss << config_echo(ctx.config);
  std::cout << ss.str();
  write_file(prefix + ".report", ss.str());
  if (ctx.check && !ok) return 4;
  return 0;
}

int cmd_oracle(const CommandContext& ctx) {
  const RunConfig rc = resolve(ctx.config);
  const Config& c = ctx.config;
  OracleOptions o;
  o.instances = c.get_int("oracle.instances");
  o.iterations = c.get_int("oracle.iterations");
  o.K_max = c.get_int("oracle.K_max");
  o.H_max = c.get_int("oracle.H_max");
  o.outcomes_max = c.get_int("oracle.outcomes_max");
  o.gap = c.get_double("oracle.gap");
  o.N = c.get_int("oracle.N");
  o.gamma_macro = rc.mcts.gamma_macro;
  o.base = rc.mcts;
  o.seed = first_seed(ctx, rc);
  const OracleReport r = oracle_compare(o);
  std::ostringstream ss;
  ss << "report=oracle-compare\ninstances=" << r.instances << "\nagree=" << r.agree
     << "\nagreement=" << format_double(r.rate) << "\nmean_value_gap=" << format_double(r.mean_value_gap)
     << "\nmax_value_gap=" << format_double(r.max_value_gap) << '\n' << config_echo(c);
  emit(ctx, "", ss.str());
  if (ctx.check && r.rate < 0.95) return 4;
  return 0;
}

}  // namespace

std::vector<std::string> command_names() {
  return {"gen-data", "train-codec", "train-prior", "grad-check", "eval",
          "bench-preconstruct", "ablate", "heatmap", "oracle-compare"};
}

int run_command(const std::string& name, const CommandContext& ctx) {
  try {
    if (name == "gen-data") return cmd_gen_data(ctx);
    if (name == "train-codec") return cmd_train_codec(ctx);
    if (name == "train-prior") return cmd_train_prior(ctx);
    if (name == "grad-check") return cmd_grad_check(ctx);
    if (name == "eval") return cmd_eval(ctx);
    if (name == "bench-preconstruct") return cmd_bench(ctx);
    if (name == "ablate") return cmd_ablate(ctx);
    if (name == "heatmap") return cmd_heatmap(ctx);
    if (name == "oracle-compare") return cmd_oracle(ctx);
    throw ConfigError("unknown command '" + name + "'");
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace lmap
