// panelgp command-line tool: simulate panel-count data, fit the GP models or
// the piecewise-constant baseline, evaluate fits, run the bound-parameter
// selection experiment, and benchmark scaling.
//
// Exit codes: 0 success, 1 numerical failure, 2 input error.

#include <CLI11.hpp>

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "panelgp/cli.hpp"

namespace {

struct CommandArgs {
  std::string config_path;
  std::string seed;
  std::string out;
  std::string model;
  std::vector<std::string> overrides;
};

void add_common_options(CLI::App* cmd, CommandArgs& args) {
  cmd->add_option("--config", args.config_path, "Config file (key = value lines)");
  cmd->add_option("--seed", args.seed, "Override the seed");
  cmd->add_option("--out", args.out, "Output directory");
  cmd->add_option("--model", args.model, "Model name (gp4c|gp3|gp4cw|pwc)");
  cmd->add_option("--set", args.overrides, "Override any config key (key=value)")
      ->take_all();
}

panelgp::cli::Config resolve_config(const CommandArgs& args) {
  panelgp::cli::Config config;
  if (!args.config_path.empty()) {
    config = panelgp::cli::Config::from_file(args.config_path);
  }
  for (const std::string& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw panelgp::InputError("--set expects key=value, got '" + kv + "'");
    }
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!args.seed.empty()) config.set("seed", args.seed);
  if (!args.out.empty()) config.set("out", args.out);
  if (!args.model.empty()) config.set("model", args.model);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent intensity inference for panel count data"};
  app.require_subcommand(1);

  CommandArgs simulate_args, fit_args, evaluate_args, select_args, bench_args;
  CLI::App* simulate =
      app.add_subcommand("simulate", "Generate synthetic recurrent/panel data");
  add_common_options(simulate, simulate_args);
  CLI::App* fit = app.add_subcommand("fit", "Fit a model to a training CSV");
  add_common_options(fit, fit_args);
  CLI::App* evaluate =
      app.add_subcommand("evaluate", "Score a fitted model on a test CSV");
  add_common_options(evaluate, evaluate_args);
  CLI::App* select =
      app.add_subcommand("select-b", "Variance-minimizing bound parameter");
  add_common_options(select, select_args);
  CLI::App* bench = app.add_subcommand("bench", "Timed fit sweeps");
  add_common_options(bench, bench_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (simulate->parsed()) {
      panelgp::cli::cmd_simulate(resolve_config(simulate_args));
    } else if (fit->parsed()) {
      panelgp::cli::cmd_fit(resolve_config(fit_args));
    } else if (evaluate->parsed()) {
      panelgp::cli::cmd_evaluate(resolve_config(evaluate_args));
    } else if (select->parsed()) {
      panelgp::cli::cmd_select_b(resolve_config(select_args));
    } else if (bench->parsed()) {
      panelgp::cli::cmd_bench(resolve_config(bench_args));
    }
  } catch (const panelgp::InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
