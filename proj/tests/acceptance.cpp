// Acceptance gate: `acceptance <id> [key=value ...]` runs one criterion and
// prints a single PASS/FAIL line. Extra assignments override the criterion's
// config (useful for experiments, never used by ctest).
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "lmap/harness.hpp"

namespace lmap {
namespace {

std::vector<std::string> g_overrides;

Config with_overrides(Config c) {
  for (const auto& kv : g_overrides) c.set(kv);
  return c;
}

Config from_file(const std::string& name) {
  Config c = Config::defaults();
  c.merge_file(std::filesystem::path(LMAP_CONFIG_DIR) / name);
  return c;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

// 1. Finite-difference gradient check of the full codec loss on 10 seeds.
Verdict gradients() {
  const Config c = with_overrides(Config::defaults());
  const RunConfig rc = resolve(c);
  const Dataset data = generate_dataset(rc);
  const CodecShape shape{data.dims, rc.codec.latent_dim, rc.codec.codebook_size, rc.codec.hidden};
  double worst = 0.0;
  int passed = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const CodecParams p = init_codec(shape, rc.codec.beta, data.norm, seed);
    Rng rng(seed, 0x67726164ULL);
    std::vector<TokenChunk> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(data.chunks[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(data.chunks.size())))]);
    const GradCheckReport r = grad_check(p, batch, rc.codec.loss);
    worst = std::max(worst, r.max_rel_error);
    passed += r.pass;
    if (!r.pass) std::cout << "  seed " << seed << " failed in block " << r.worst_block << '\n';
  }
  return {passed == 10, "seeds_passed=" + std::to_string(passed) + "/10 max_rel_error=" + fmt(worst)};
}

// 2. Codes of the masked path do not depend on return-to-go values.
Verdict masked_invariance() {
  Config c = Config::defaults();
  c.set("codec.epochs=3");
  c = with_overrides(c);
  const RunConfig rc = resolve(c);
  const Dataset data = generate_dataset(rc);
  CodecTrainConfig cc = rc.codec;
  const CodecParams trained = train_codec(data, cc).params;
  const CodecShape shape{data.dims, rc.codec.latent_dim, rc.codec.codebook_size, rc.codec.hidden};
  const CodecParams fresh = init_codec(shape, rc.codec.beta, data.norm, 5);
  Rng rng(2024);
  int mismatches = 0, unmasked_changes = 0;
  for (int i = 0; i < 1000; ++i) {
    const TokenChunk& chunk = data.chunks[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(data.chunks.size())))];
    TokenChunk perturbed = chunk;
    perturbed.first.rtg += 10.0 * rng.normal();
    perturbed.second.rtg += 10.0 * rng.normal();
    const CodecParams& p = i % 2 == 0 ? trained : fresh;
    if (chunk_codes(chunk, p, true) != chunk_codes(perturbed, p, true)) ++mismatches;
    if (encode(chunk, false, p).first != encode(perturbed, false, p).first) ++unmasked_changes;
  }
  return {mismatches == 0, "chunks=1000 code_mismatches=" + std::to_string(mismatches) +
                               " unmasked_embedding_changes=" + std::to_string(unmasked_changes)};
}

// 3. Return-to-go recursion, segmentation counts and normalization round trips.
EpisodeRaw random_episode(Rng& rng, int T, int n, int l) {
  EpisodeRaw ep;
  for (int t = 0; t < T; ++t) {
    Vec s(static_cast<std::size_t>(n)), a(static_cast<std::size_t>(l));
    for (auto& v : s) v = rng.normal() * 5.0;
    for (auto& v : a) v = rng.uniform(-1.0, 1.0);
    ep.states.push_back(std::move(s));
    ep.actions.push_back(std::move(a));
    ep.rewards.push_back(rng.normal() * 3.0);
  }
  return ep;
}

Verdict trajectory_suites() {
  const int cases = 10000;
  Rng rng(31337);
  int rtg_bad = 0, seg_bad = 0, norm_bad = 0;
  for (int i = 0; i < cases; ++i) {
    const int T = 1 + rng.uniform_int(100);
    const double g = rng.uniform(0.01, 1.0);
    Vec r(static_cast<std::size_t>(T));
    for (auto& v : r) v = rng.normal() * 10.0;
    const Vec rtg = compute_rtg(r, g);
    for (int t = 0; t < T; ++t) {
      const double next = t + 1 < T ? rtg[t + 1] : 0.0;
      if (!(std::abs(rtg[t] - r[t] - g * next) <= 1e-9)) {
        ++rtg_bad;
        break;
      }
    }
  }
  for (int i = 0; i < cases; ++i) {
    const int T = 1 + rng.uniform_int(100);
    const int L = 1 + rng.uniform_int(T);
    const EpisodeRaw ep = random_episode(rng, T, 2, 1);
    const auto tokens = segment_episode(ep, L, 0.99);
    bool ok = static_cast<int>(tokens.size()) == T / L;
    for (std::size_t k = 0; ok && k < tokens.size(); ++k) {
      ok = tokens[k].state == ep.states[k * L] && static_cast<int>(tokens[k].macro.size()) == L;
    }
    seg_bad += !ok;
  }
  for (int i = 0; i < cases; ++i) {
    const int n = 1 + rng.uniform_int(6);
    const int l = 1 + rng.uniform_int(3);
    const int L = 1 + rng.uniform_int(4);
    NormStats ns;
    for (int j = 0; j < n; ++j) {
      ns.state_mean.push_back(rng.normal() * 10.0);
      ns.state_std.push_back(std::max(kStdFloor, std::exp(rng.normal() * 2.0)));
    }
    for (int j = 0; j < l; ++j) ns.action_scale.push_back(std::exp(rng.normal()));
    ns.rtg_scale = std::max(1.0, std::exp(rng.normal() * 2.0));
    Vec s(static_cast<std::size_t>(n)), m(static_cast<std::size_t>(l * L));
    for (auto& v : s) v = rng.normal() * 20.0;
    for (auto& v : m) v = rng.normal() * 3.0;
    const double R = rng.normal() * 100.0;
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };
    bool ok = rel(ns.invert_rtg(ns.apply_rtg(R)), R) <= 1e-9;
    const Vec s2 = ns.invert_state(ns.apply_state(s));
    const Vec m2 = ns.invert_macro(ns.apply_macro(m));
    for (int j = 0; j < n; ++j) ok = ok && rel(s2[j], s[j]) <= 1e-9;
    for (int j = 0; j < l * L; ++j) ok = ok && rel(m2[j], m[j]) <= 1e-9;
    norm_bad += !ok;
  }
  return {rtg_bad == 0 && seg_bad == 0 && norm_bad == 0,
          "cases=10000x3 rtg_failures=" + std::to_string(rtg_bad) + " segmentation_failures=" +
              std::to_string(seg_bad) + " normalization_failures=" + std::to_string(norm_bad)};
}

// 4. Agreement with exact expectimax on random tabular latent MDPs.
Verdict oracle() {
  const Config c = with_overrides(Config::defaults());
  const RunConfig rc = resolve(c);
  OracleOptions o;
  o.instances = c.get_int("oracle.instances");
  o.K_max = c.get_int("oracle.K_max");
  o.H_max = c.get_int("oracle.H_max");
  o.outcomes_max = c.get_int("oracle.outcomes_max");
  o.gap = c.get_double("oracle.gap");
  o.N = c.get_int("oracle.N");
  o.gamma_macro = rc.mcts.gamma_macro;
  o.base = rc.mcts;
  std::vector<double> rates;
  std::string detail;
  for (int it : {25, 100, 400}) {
    o.iterations = it;
    const OracleReport r = oracle_compare(o);
    rates.push_back(r.rate);
    detail += "agree@" + std::to_string(it) + "=" + std::to_string(r.agree) + "/" + std::to_string(r.instances) + " ";
  }
  const bool pass = rates[1] >= 0.95 && rates[2] >= rates[1] - 0.03;
  return {pass, detail + "(need >=95% at 100, 400 within 3pp)"};
}

// 5. Progressive-widening law audited after every iteration.
Verdict widening_law() {
  Config c = Config::defaults();
  c.set("codec.epochs=2");
  c = with_overrides(c);
  const RunConfig rc = resolve(c);
  const Dataset data = generate_dataset(rc);
  const TrainedModels models = train_models(data, rc, 0);
  const CodecSearchModel model(models.codec, *models.prior, rc.depth(), rc.mcts.gamma_macro);
  const int iterations = 10000;
  auto audit = [&](int N, bool literal, long& checks) {
    MctsConfig m = rc.mcts;
    m.alpha = 0.1;
    m.epsilon = 1.0;
    m.N = N;
    m.iterations = iterations;
    m.seed = 17;
    bool ok = true;
    PlanHooks hooks;
    hooks.after_iteration = [&](const PlanTree& t, int) {
      if (!ok) return;
      for (const auto& node : t.nodes) {
        for (const auto& e : node.edges) {
          const double grown = std::ceil(m.epsilon * std::pow(static_cast<double>(e.N), m.alpha));
          const double cap = literal ? std::max(1.0, grown) : std::max<double>(e.raw_samples > 0 ? N : 1, grown);
          ++checks;
          if (static_cast<double>(e.outcomes.size()) > cap) ok = false;
        }
      }
    };
    plan(LatentState{data.episodes[0].states[0], -1}, model, m, data.dims.l, hooks);
    return ok;
  };
  long checks_literal = 0, checks_cached = 0;
  const bool literal = audit(1, true, checks_literal);
  // With N > 1 the cache holds up to N outcomes per edge before any visit.
  const bool cached = audit(rc.mcts.N, false, checks_cached);
  return {literal && cached, "iterations=10000 alpha=0.1 epsilon=1 edge_checks=" + std::to_string(checks_literal) +
                                 " literal_law=" + (literal ? "ok" : "violated") + " cached_N" +
                                 std::to_string(rc.mcts.N) + "=" + (cached ? "ok" : "violated")};
}

// 6. Pre-built search space against vanilla MCTS on currency-random.
Verdict preconstruct_bench() {
  Config c = from_file("currency.cfg");
  c = with_overrides(c);
  const RunConfig rc = resolve(c);
  const int budgets[] = {10, 50, 100};
  const BenchResult b = bench_preconstruct(rc, budgets);
  std::cout << b.csv();
  std::string detail = "episodes=" + std::to_string(rc.episodes * static_cast<int>(rc.seeds.size())) + " gaps=";
  for (double g : b.gaps) detail += fmt(g) + ",";
  detail.pop_back();
  return {b.better_at_smallest && b.gap_non_increasing,
          detail + " better_at_10=" + (b.better_at_smallest ? "1" : "0") +
              " non_increasing=" + (b.gap_non_increasing ? "1" : "0")};
}

// 7. Ablation directions on chain-high.
Verdict ablation() {
  Config c = from_file("chain_high.cfg");
  c.set("ablate.axes=masked,widening,parallel,L");
  c.set("ablate.L=1,3");
  c = with_overrides(c);
  const AblationResult a = ablate(c, c.get_list("ablate.axes"));
  std::cout << a.csv();
  std::string detail;
  for (const auto& k : a.checks) {
    detail += k.axis + ":" + k.better + "-" + k.worse + "=" + fmt(k.diff, 3) + "(se " + fmt(k.se, 3) + ") ";
  }
  return {a.pass, detail + "inversions_within_se=" + std::to_string(a.inversions_within_se) +
                      " beyond_se=" + std::to_string(a.inversions_beyond_se)};
}

// 8. Heatmap structure: noise spreads transitions; L1 alignment sharpens them.
Heatmap corpus_heatmap(const Config& c, AlignNorm align, bool* stochastic) {
  const RunConfig rc = resolve(c);
  const Dataset data = generate_dataset(rc);
  CodecTrainConfig cc = rc.codec;
  cc.seed = mix_seed(rc.seeds.front(), 0x636f6465ULL);
  cc.loss.align = align;
  const CodecParams codec = train_codec(data, cc).params;
  const Heatmap h = build_heatmap(episode_code_sequences(data, codec), codec.shape.codebook_size,
                                  c.get_int("heatmap.F"));
  for (const auto& row : h.matrix) {
    double s = 0.0;
    for (double v : row) s += v;
    if (std::abs(s - 1.0) > 1e-6) *stochastic = false;
  }
  return h;
}

Verdict heatmaps() {
  Config det = Config::defaults();
  for (const char* kv : {"env=chain", "tier=det", "policy=greedy"}) det.set(kv);
  det = with_overrides(det);
  Config high = det;
  high.set("tier=high");
  bool stochastic = true;
  const Heatmap h_det = corpus_heatmap(det, AlignNorm::kL2, &stochastic);
  const Heatmap h_high = corpus_heatmap(high, AlignNorm::kL2, &stochastic);
  const Heatmap h_l1 = corpus_heatmap(high, AlignNorm::kL1, &stochastic);
  const bool spread = h_high.median_row_support() > h_det.median_row_support();
  const bool sharper = h_l1.median_row_max() > h_high.median_row_max();
  return {stochastic && spread && sharper,
          "row_stochastic=" + std::string(stochastic ? "1" : "0") + " support det=" +
              fmt(h_det.median_row_support()) + " high=" + fmt(h_high.median_row_support()) +
              " row_max l2=" + fmt(h_high.median_row_max()) + " l1=" + fmt(h_l1.median_row_max())};
}

// 9. Two single-thread eval runs give identical report numbers.
std::string without_timings(const std::string& text) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.find("_ms=") == std::string::npos) out += line + '\n';
  }
  return out;
}

Verdict determinism() {
  Config c = Config::defaults();
  c.set("threads=1");
  c = with_overrides(c);
  const auto dir = std::filesystem::temp_directory_path();
  const auto a = dir / "lmap_acceptance_eval_a.txt";
  const auto b = dir / "lmap_acceptance_eval_b.txt";
  if (run_command("eval", {c, a.string(), std::nullopt, false}) != 0) return {false, "first eval failed"};
  if (run_command("eval", {c, b.string(), std::nullopt, false}) != 0) return {false, "second eval failed"};
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string ta = without_timings(slurp(a)), tb = without_timings(slurp(b));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
  const bool same = !ta.empty() && ta == tb;
  return {same, "report_bytes=" + std::to_string(ta.size()) + " identical=" + (same ? "1" : "0")};
}

// 10. Planning beats the random behavior policy on currency by 20%.
Verdict currency_floor() {
  Config c = from_file("currency.cfg");
  c = with_overrides(c);
  const RunConfig rc = resolve(c);
  const EvalReport r = run_pipeline(rc, c.dump());
  const double floor = 1.2 * r.anchors.random;
  return {r.mean >= floor, "mean_return=" + fmt(r.mean) + " (se " + fmt(r.stderr_mean, 2) + ") behavior_mean=" +
                               fmt(r.anchors.random) + " needed>=" + fmt(floor) +
                               " normalized=" + fmt(r.normalized, 3)};
}

}  // namespace
}  // namespace lmap

int main(int argc, char** argv) {
  using namespace lmap;
  if (argc < 2) {
    std::cerr << "usage: acceptance <1-10> [key=value ...]\n";
    return 2;
  }
  const int id = std::atoi(argv[1]);
  for (int i = 2; i < argc; ++i) g_overrides.emplace_back(argv[i]);
  const std::function<Verdict()> criteria[] = {gradients,  masked_invariance,  trajectory_suites, oracle,
                                               widening_law, preconstruct_bench, ablation,         heatmaps,
                                               determinism,  currency_floor};
  const char* names[] = {"gradient check",      "masked-return invariance", "trajectory invariants",
                         "oracle agreement",    "widening law",             "pre-built vs vanilla",
                         "ablation directions", "heatmap properties",       "determinism",
                         "currency floor"};
  if (id < 1 || id > 10) {
    std::cerr << "criterion id must be 1..10\n";
    return 2;
  }
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = criteria[id - 1]();
  } catch (const std::exception& e) {
    v = {false, std::string("error: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("criterion %d (%s): %s %s [%.1fs]\n", id, names[id - 1], v.pass ? "PASS" : "FAIL", v.detail.c_str(), secs);
  std::fflush(stdout);
  return v.pass ? 0 : 1;
}
