// qsdlab command-line front end.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qsdlab/errors.hpp"
#include "qsdlab/experiment.hpp"

namespace {

constexpr const char* kFooter = R"(Exit status:
  0  success
  2  invalid config (unknown key, bad value, unsupported model/metric pairing)
  3  runtime failure (resurrection overflow, extinction underflow, ...)
  4  I/O failure (unreadable config, unwritable output directory)

Outputs go to --output-dir, else the config's output_dir, else
$QSDLAB_OUTPUT_DIR, else ./qsdlab_out. Nothing is written when the config
is rejected.)";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fleming-Viot particle systems, killed-chain oracles and Harris checks"};
  app.footer(kFooter);
  app.require_subcommand(1);

  std::string config_path;
  int jobs = 1;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;

  const std::pair<const char*, const char*> commands[] = {
      {"simulate", "run one FV simulation and write its report and snapshots"},
      {"oracle", "compute reference QSDs, decay rates and survival curves"},
      {"harris", "search for a Lyapunov pair and certify the Harris conditions"},
      {"sweep", "run a (gamma, N, seed) grid of simulations and fit convergence rates"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "JSON config file")->required();
    sub->add_option("-j,--jobs", jobs, "sweep points run concurrently")->check(CLI::PositiveNumber);
    sub->add_option("-s,--seed", seed, "master seed, overrides the config");
    sub->add_option("-o,--output-dir", output_dir, "output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const auto mode = qsdlab::parse_mode(app.get_subcommands().front()->get_name());
  try {
    std::ifstream in(config_path);
    if (!in) {
      std::cerr << fmt::format("error: cannot read config {}\n", config_path);
      return 4;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      std::cerr << fmt::format("error: {} is not valid JSON: {}\n", config_path, e.what());
      return 2;
    }
    auto cfg = qsdlab::parse_config(j, mode);
    qsdlab::RunOptions opts;
    opts.jobs = jobs;
    opts.seed = seed;
    if (output_dir) opts.output_dir = *output_dir;
    qsdlab::run_experiment(std::move(cfg), mode, opts, std::cout);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return qsdlab::exit_code_for(e);
  }
}
