#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "app/commands.hpp"

namespace {

std::string key_listing() {
  std::string out = "Config keys (file: key = value, override: --key=value):\n";
  for (const auto& k : app::config_keys()) {
    out += "  " + std::string(k.name) + " = " + std::string(k.default_value);
    out += std::string(k.name.size() + k.default_value.size() < 40 ? 40 - k.name.size() - k.default_value.size() : 1, ' ');
    out += "# " + std::string(k.help) + "\n";
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_pattern("[%l] %v");

  CLI::App cli{"Adversarial multi-task speaker and age-group training harness"};
  cli.require_subcommand(1);
  cli.footer(key_listing());

  std::string config_file;
  std::vector<CLI::App*> commands;
  for (const auto* name : {"gen-data", "train", "eval", "gradcheck"}) {
    auto* sub = cli.add_subcommand(name);
    sub->add_option("-c,--config", config_file, "flat key = value config file")->check(CLI::ExistingFile);
    sub->allow_extras();
    commands.push_back(sub);
  }
  commands[0]->description("generate the synthetic dataset");
  commands[1]->description("train and write logs plus checkpoints");
  commands[2]->description("evaluate a checkpoint on the eval split");
  commands[3]->description("finite-difference check of every primitive and the full objective");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? 0 : app::kExitConfigError;
  }

  const auto* sub = cli.get_subcommands().front();
  try {
    auto cfg = config_file.empty() ? app::RunConfig() : app::RunConfig::from_file(config_file);
    cfg.apply_overrides(sub->remaining());
    return app::run_command(sub->get_name(), cfg, std::cout);
  } catch (const app::ConfigError& e) {
    spdlog::error("{}", e.what());
    return app::kExitConfigError;
  }
}
