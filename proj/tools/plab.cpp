#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "plab/pipeline.hpp"

int main(int argc, char** argv) {
  using namespace plab;
  CLI::App app{"Clean-label poisoning and friendly-noise defense lab"};
  std::string cmd;
  std::string config_path;
  std::string defense;
  bool print_config = false;
  app.add_option("command", cmd, "synth | craft | gen-noise | train | eval | probe")
      ->required()
      ->check(CLI::IsMember(pipeline_commands()));
  app.add_option("-c,--config", config_path, "config file of 'section.key = value' lines");
  app.add_option("--defense", defense, "shorthand for --defense.kind");
  app.add_flag("--print-config", print_config, "print the resolved config and exit");

  // Every config key doubles as a flag; flags win over the file.
  std::map<std::string, std::string> flags;
  for (const auto& k : config_keys()) app.add_option("--" + k.name, flags[k.name], "default " + k.fallback);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_config;
  }

  std::vector<std::pair<std::string, std::string>> overrides;
  if (!defense.empty()) overrides.emplace_back("defense.kind", defense);
  for (const auto& k : config_keys())
    if (app.count("--" + k.name)) overrides.emplace_back(k.name, flags[k.name]);

  ExperimentConfig cfg;
  try {
    cfg = parse_config(config_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_path),
                       overrides);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_config;
  }
  if (print_config) {
    std::cout << cfg.echo();
    return exit_ok;
  }
  return run_command(cmd, cfg);
}
