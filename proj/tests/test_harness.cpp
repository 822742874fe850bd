#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lmap/harness.hpp"

namespace lmap {
namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("lmap_harness_" + name);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small enough that a whole train + eval round takes well under a second.
Config tiny() {
  Config c = Config::defaults();
  for (const char* kv : {"env=chain", "env.horizon=12", "data.episodes=20", "codec.K=8", "codec.d=4",
                         "codec.hidden=8", "codec.epochs=2", "prior.kind=tabular", "mcts.iterations=8",
                         "mcts.M=4", "mcts.B=2", "mcts.N=2", "episodes=2", "anchor_episodes=20"}) {
    c.set(kv);
  }
  return c;
}

TEST(Config, DefaultsResolve) {
  const RunConfig rc = resolve(Config::defaults());
  EXPECT_EQ(rc.L, 3);
  EXPECT_EQ(rc.horizon, 9);
  EXPECT_EQ(rc.depth(), 3);
  EXPECT_NEAR(rc.mcts.gamma_macro, 0.99 * 0.99 * 0.99, 1e-15);
  EXPECT_EQ(rc.seeds, (std::vector<uint64_t>{0, 1, 2}));
  EXPECT_EQ(rc.episodes, 20);
  EXPECT_EQ(rc.mcts.M, 16);
  EXPECT_EQ(rc.mcts.N, 4);
  EXPECT_EQ(rc.mcts.B, 4);
  EXPECT_EQ(rc.mcts.lambda, 0.5);
}

TEST(Config, Errors) {
  Config c = Config::defaults();
  EXPECT_THROW(c.set("no_such_key=1"), ConfigError);
  EXPECT_THROW(c.set("missing_equals"), ConfigError);
  c.set("horizon=10");
  EXPECT_THROW(resolve(c), ConfigError);
  c.set("horizon=abc");
  EXPECT_THROW(resolve(c), ConfigError);
  Config d = Config::defaults();
  d.set("env=pendulum");
  EXPECT_THROW(resolve(d), ConfigError);
  Config e = Config::defaults();
  e.set("env=chain");
  e.set("tier=extreme");
  EXPECT_THROW(resolve(e), ConfigError);
  Config f = Config::defaults();
  f.set("mcts.alpha=2");
  EXPECT_THROW(resolve(f), ConfigError);
}

TEST(Config, FileAndReportMerge) {
  const auto path = temp_path("cfg.txt");
  {
    std::ofstream out(path);
    out << "# comment\n\nL = 1\nhorizon=4\nmcts.selection=puct\n";
  }
  Config c = Config::defaults();
  c.merge_file(path);
  const RunConfig rc = resolve(c);
  EXPECT_EQ(rc.L, 1);
  EXPECT_EQ(rc.depth(), 4);
  EXPECT_EQ(rc.mcts.selection, Selection::kPuct);

  {
    std::ofstream out(path);
    out << "report=eval\nmean_return=3\nconfig.L=1\nconfig.horizon=5\n";
  }
  Config r = Config::defaults();
  r.merge_report(path);
  EXPECT_EQ(r.get("horizon"), "5");

  {
    std::ofstream out(path);
    out << "report=eval\n";
  }
  EXPECT_THROW(r.merge_report(path), ConfigError);
  {
    std::ofstream out(path);
    out << "bogus.key=3\n";
  }
  EXPECT_THROW(r.merge_file(path), ConfigError);
  std::filesystem::remove(path);
}

TEST(Hash, GitBlobValues) {
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_hash("hello world\n"), "3b18e512dba79e4c8300dd08aeb37f8e728b8dad");
}

TEST(Normalize, AnchorsAndAffineInvariance) {
  const Anchors a{1.0, 3.0};
  EXPECT_EQ(normalized_score(1.0, a), 0.0);
  EXPECT_EQ(normalized_score(3.0, a), 100.0);
  EXPECT_EQ(normalized_score(2.0, a), 50.0);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const double r = rng.normal();
    const double k = std::exp(rng.normal());
    const Anchors scaled{k * a.random, k * a.reference};
    EXPECT_NEAR(normalized_score(k * r, scaled), normalized_score(r, a), 1e-9);
  }
  EXPECT_THROW(normalized_score(1.0, Anchors{2.0, 2.0}), NumericError);
}

TEST(Normalize, RandomPolicyScoresNearZero) {
  Config c = Config::defaults();
  c.set("env=chain");
  const RunConfig rc = resolve(c);
  const Anchors a = compute_anchors(rc);
  EXPECT_LT(a.random, a.reference);
  auto env = make_env(rc.env, rc.env_settings);
  auto pol = make_policy("random", *env);
  std::vector<double> scores;
  for (int i = 0; i < 1000; ++i) {
    scores.push_back(normalized_score(rollout_return(*env, *pol, mix_seed(777, i)), a));
  }
  double mean = 0.0, var = 0.0;
  for (double s : scores) mean += s / scores.size();
  for (double s : scores) var += (s - mean) * (s - mean) / (scores.size() - 1);
  const double se = std::sqrt(var / scores.size());
  EXPECT_LT(std::abs(mean), 4.0 * se + 1e-9);
}

TEST(Latency, Summary) {
  const LatencySummary s = summarize_latency({5, 1, 4, 2, 3, 6, 7, 8, 9, 10});
  EXPECT_EQ(s.mean, 5.5);
  EXPECT_EQ(s.p50, 5.0);
  EXPECT_EQ(s.p90, 9.0);
  EXPECT_EQ(summarize_latency({}).mean, 0.0);
}

TEST(Heatmap, HandCounts) {
  const std::vector<std::vector<int>> seqs{{0, 1, 0, 1, 2}, {2, 2}};
  const Heatmap h = build_heatmap(seqs, 4, 10);  // shrinks to 3 codes
  EXPECT_EQ(h.transitions, 5);
  ASSERT_EQ(h.codes.size(), 3u);
  EXPECT_EQ(h.codes[0], 0);
  EXPECT_EQ(h.from_hist, (std::vector<long>{2, 2, 1, 0}));
  EXPECT_EQ(h.to_hist, (std::vector<long>{1, 2, 2, 0}));
  // Row for code 1: half to 0, half to 2.
  const auto row1 = std::find(h.codes.begin(), h.codes.end(), 1) - h.codes.begin();
  const auto col0 = std::find(h.codes.begin(), h.codes.end(), 0) - h.codes.begin();
  const auto col2 = std::find(h.codes.begin(), h.codes.end(), 2) - h.codes.begin();
  EXPECT_EQ(h.matrix[row1][col0], 0.5);
  EXPECT_EQ(h.matrix[row1][col2], 0.5);
  EXPECT_EQ(h.median_row_support(), 1.0);
  EXPECT_NE(h.csv().find("from,"), std::string::npos);
  const std::string hist = h.hist_csv();
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 5);
}

TEST(Heatmap, RowsWithoutSupportAreUniformAndFlagged) {
  const std::vector<std::vector<int>> seqs{{0, 7}, {0, 7}, {1, 0}};
  const Heatmap h = build_heatmap(seqs, 8, 2);
  ASSERT_EQ(h.codes, (std::vector<int>{0, 1}));
  EXPECT_TRUE(h.uniform_row[0]);
  EXPECT_FALSE(h.uniform_row[1]);
  EXPECT_EQ(h.matrix[0], (Vec{0.5, 0.5}));
  EXPECT_EQ(h.matrix[1], (Vec{1.0, 0.0}));
  EXPECT_EQ(h.median_row_max(), 1.0);
  EXPECT_THROW(build_heatmap(std::vector<std::vector<int>>{{0, 9}}, 8, 2), InputError);
}

TEST(Heatmap, RandomSequencesAreRowStochastic) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 2 + static_cast<int>(rng.uniform_int(40));
    std::vector<std::vector<int>> seqs(1 + rng.uniform_int(10));
    for (auto& s : seqs) {
      s.resize(rng.uniform_int(30));
      for (int& z : s) z = static_cast<int>(rng.uniform_int(K));
    }
    const Heatmap h = build_heatmap(seqs, K, 1 + static_cast<int>(rng.uniform_int(50)));
    long from = 0, to = 0;
    for (long v : h.from_hist) from += v;
    for (long v : h.to_hist) to += v;
    EXPECT_EQ(from, h.transitions);
    EXPECT_EQ(to, h.transitions);
    for (const auto& row : h.matrix) {
      double s = 0.0;
      for (double v : row) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Eval, CountsLatencyAndThreadIndependence) {
  Config c = tiny();
  const RunConfig rc = resolve(c);
  const Dataset data = generate_dataset(rc);
  std::vector<TrainedModels> models;
  for (uint64_t s : rc.seeds) models.push_back(train_models(data, rc, s));
  std::vector<const TrainedModels*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  const Anchors a = compute_anchors(rc);
  const EvalReport one = evaluate(ptrs, rc, a);
  EXPECT_EQ(one.returns.size(), 6u);
  EXPECT_EQ(one.decisions, 6 * 12);
  EXPECT_GT(one.latency.mean, 0.0);
  EXPECT_GE(one.latency.p90, one.latency.p50);
  EXPECT_EQ(one.hashes.size(), 6u);
  for (const auto& h : one.hashes) EXPECT_EQ(h.size(), 40u);

  RunConfig rc2 = rc;
  rc2.threads = 2;
  const EvalReport two = evaluate(ptrs, rc2, a);
  EXPECT_EQ(one.numbers(), two.numbers());
  EXPECT_EQ(one.returns, two.returns);
  ASSERT_EQ(one.decision_log.size(), two.decision_log.size());
  for (std::size_t i = 0; i < one.decision_log.size(); ++i) EXPECT_TRUE(one.decision_log[i] == two.decision_log[i]);
  EXPECT_NE(one.text().find("latency_p90_ms="), std::string::npos);
}

TEST(Eval, PipelineIsReproducible) {
  Config c = tiny();
  c.set("seeds=4");
  const RunConfig rc = resolve(c);
  const EvalReport a = run_pipeline(rc, c.dump());
  const EvalReport b = run_pipeline(rc, c.dump());
  EXPECT_EQ(a.numbers(), b.numbers());
  EXPECT_EQ(a.hashes, b.hashes);
}

TEST(Eval, PolledActionsComeFromChosenMacro) {
  const RunConfig rc = resolve(tiny());
  const Dataset data = generate_dataset(rc);
  const TrainedModels m = train_models(data, rc, 0);
  auto env = make_env(rc.env, rc.env_settings);
  const EpisodeResult r = run_episode(*env, m, rc, episode_seed(0, 0));
  ASSERT_EQ(r.decisions.size(), 12u);
  for (const auto& d : r.decisions) {
    ASSERT_EQ(d.action.size(), 1u);
    ASSERT_EQ(d.macro.size(), 3u);
    EXPECT_EQ(d.action[0], d.macro[0]);
  }
}

TEST(Bench, SchemaAndVanillaMapping) {
  const MctsConfig v = vanilla_variant(MctsConfig{});
  EXPECT_FALSE(v.preconstruct);
  EXPECT_EQ(v.lambda, 1.0);
  EXPECT_EQ(v.alpha, 1.0);
  Config c = tiny();
  c.set("seeds=0");
  const int budgets[] = {2, 4, 6};
  const BenchResult b = bench_preconstruct(resolve(c), budgets);
  ASSERT_EQ(b.rows.size(), 6u);
  EXPECT_EQ(b.gaps.size(), 3u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(b.rows[i].variant, i % 2 == 0 ? "prebuilt" : "vanilla");
    EXPECT_EQ(b.rows[i].iterations, budgets[i / 2]);
  }
  const std::string csv = b.csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
}

TEST(Ablate, FlagMapping) {
  const Config base = Config::defaults();
  const auto w = ablation_variant(base, "widening", "0");
  const RunConfig rw = resolve(w);
  EXPECT_FALSE(rw.mcts.widening);
  EXPECT_EQ(rw.mcts.alpha, 1.0);
  EXPECT_TRUE(std::isinf(rw.mcts.epsilon));
  const RunConfig rp = resolve(ablation_variant(base, "parallel", "off"));
  EXPECT_EQ(rp.mcts.expand_B, 1);
  EXPECT_EQ(rp.mcts.B, 4);
  EXPECT_TRUE(rp.mcts.preconstruct);
  EXPECT_EQ(resolve(ablation_variant(base, "L", "5")).horizon, 10);
  EXPECT_EQ(resolve(ablation_variant(base, "L", "1")).horizon, 9);
  EXPECT_FALSE(resolve(ablation_variant(base, "masked", "0")).codec.loss.masked);
  EXPECT_EQ(resolve(ablation_variant(base, "selection", "puct")).mcts.selection, Selection::kPuct);
  EXPECT_EQ(resolve(ablation_variant(base, "horizon", "3")).depth(), 1);
  const auto axes = base.get_list("ablate.axes");
  EXPECT_EQ(axes.size(), 6u);
  for (const auto& ax : axes) EXPECT_GE(ablation_settings(base, ax).size(), 2u);
  EXPECT_THROW(ablation_settings(base, "colour"), ConfigError);
  EXPECT_THROW(ablation_variant(base, "parallel", "maybe"), ConfigError);
}

TEST(Oracle, SingleStepInstancesAlwaysAgree) {
  OracleOptions o;
  o.instances = 40;
  o.H_fixed = 1;
  const OracleReport r = oracle_compare(o);
  EXPECT_EQ(r.instances, 40);
  EXPECT_EQ(r.agree, 40);
  EXPECT_EQ(r.max_value_gap, 0.0);
  const MctsConfig m = oracle_mcts_config(o, 5);
  EXPECT_EQ(m.M, 40);
  EXPECT_EQ(m.B, 40);
  EXPECT_EQ(m.lambda, 1.0);
  o.K_max = 1;
  EXPECT_THROW(oracle_compare(o), ConfigError);
}

TEST(Cli, ExitCodesAndGenData) {
  EXPECT_EQ(run_command("fly", {Config::defaults(), "", std::nullopt, false}), 2);
  Config bad = tiny();
  bad.set("horizon=10");
  EXPECT_EQ(run_command("eval", {bad, "", std::nullopt, false}), 2);
  EXPECT_EQ(run_command("train-prior", {tiny(), temp_path("p.txt").string(), std::nullopt, false}), 2);

  Config c = tiny();
  c.set("tier=high");
  const auto a = temp_path("a.txt"), b = temp_path("b.txt");
  ASSERT_EQ(run_command("gen-data", {c, a.string(), 9, false}), 0);
  ASSERT_EQ(run_command("gen-data", {c, b.string(), 9, false}), 0);
  const std::string text = slurp(a);
  EXPECT_EQ(git_blob_hash(text), git_blob_hash(slurp(b)));
  std::istringstream lines(text);
  std::string line;
  int eps = 0;
  while (std::getline(lines, line)) eps += line.rfind("EP ", 0) == 0;
  EXPECT_EQ(eps, 20);
  EXPECT_NE(text.find("sigma_e=0.1"), std::string::npos);
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(Cli, TrainAndEvalFromCheckpoints) {
  const auto data = temp_path("d.txt"), codec = temp_path("c.txt"), prior = temp_path("pr.txt");
  Config c = tiny();
  ASSERT_EQ(run_command("gen-data", {c, data.string(), std::nullopt, false}), 0);
  c.set("data", data.string());
  ASSERT_EQ(run_command("train-codec", {c, codec.string(), std::nullopt, false}), 0);
  EXPECT_NE(slurp(codec.string() + ".report").find("final_loss="), std::string::npos);
  c.set("codec", codec.string());
  ASSERT_EQ(run_command("train-prior", {c, prior.string(), std::nullopt, false}), 0);
  c.set("prior", prior.string());
  const auto rep = temp_path("eval.txt");
  ASSERT_EQ(run_command("eval", {c, rep.string(), std::nullopt, false}), 0);
  const std::string text = slurp(rep);
  EXPECT_NE(text.find("model_hash=" + git_blob_hash(slurp(codec))), std::string::npos);
  EXPECT_NE(text.find("config.env=chain"), std::string::npos);

  // Replaying the embedded config reproduces the numbers.
  Config replay = Config::defaults();
  replay.merge_report(rep);
  const auto rep2 = temp_path("eval2.txt");
  ASSERT_EQ(run_command("eval", {replay, rep2.string(), std::nullopt, false}), 0);
  auto numbers = [](const std::string& t) {
    std::istringstream in(t);
    std::string line, out;
    while (std::getline(in, line)) {
      if (line.find("_ms=") == std::string::npos) out += line + '\n';
    }
    return out;
  };
  EXPECT_EQ(numbers(text), numbers(slurp(rep2)));
  for (const auto& p : {data, codec, prior, rep, rep2}) std::filesystem::remove(p);
  std::filesystem::remove(codec.string() + ".report");
  std::filesystem::remove(prior.string() + ".report");
}

}  // namespace
}  // namespace lmap
