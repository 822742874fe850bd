#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lmap/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Latent macro-action planning: data, training, planning and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();

  std::vector<std::string> config_files;
  std::vector<std::string> overrides;
  std::string replay;
  std::string out;
  uint64_t seed = 0;
  int threads = 0;
  bool check = false;
  bool quiet = false;
  app.add_option("--config", config_files, "key=value config file (repeatable, later files win)");
  app.add_option("--replay", replay, "reuse the config embedded in a report");
  app.add_option("--set", overrides, "override one key: --set key=value");
  auto* seed_opt = app.add_option("--seed", seed, "seed override");
  app.add_option("--out", out, "output file or prefix");
  app.add_option("--threads", threads, "evaluation worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--check", check, "exit 4 when the command's acceptance checks fail");
  app.add_flag("--quiet", quiet, "suppress info logging");

  const std::map<std::string, std::string> about = {
      {"gen-data", "collect a behavior corpus"},
      {"train-codec", "train the macro-action codec"},
      {"train-prior", "train the latent prior on codec codes"},
      {"grad-check", "finite-difference check of codec gradients"},
      {"eval", "closed-loop planning evaluation"},
      {"bench-preconstruct", "pre-built tree vs vanilla search over iteration budgets"},
      {"ablate", "ablation matrix"},
      {"heatmap", "code transition heatmaps"},
      {"oracle-compare", "planner vs exact expectimax on tabular latent MDPs"}};
  for (const auto& name : lmap::command_names()) app.add_subcommand(name, about.at(name));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  lmap::set_log_quiet(quiet);

  lmap::CommandContext ctx{lmap::Config::defaults(), out, std::nullopt, check};
  try {
    if (!replay.empty()) ctx.config.merge_report(replay);
    for (const auto& f : config_files) ctx.config.merge_file(f);
    for (const auto& o : overrides) ctx.config.set(o);
    if (threads > 0) ctx.config.set("threads", std::to_string(threads));
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
  if (*seed_opt) ctx.seed = seed;
  return lmap::run_command(app.get_subcommands().front()->get_name(), ctx);
}
