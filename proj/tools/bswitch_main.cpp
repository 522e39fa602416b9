// bswitch: train, attack and evaluate block-switching defenses.
//
//   bswitch train        --config exp.cfg
//   bswitch build-switch --config exp.cfg out/model_000.bsw out/model_001.bsw ...
//   bswitch attack       --config exp.cfg out/switching.bsw
//   bswitch eval         --config exp.cfg out/switching.bsw out/attack.bsw
//   bswitch sweep        --config exp.cfg [pool files...]
//   bswitch grad-dist    --config exp.cfg out/switching.bsw

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bswitch/experiment.hpp"

namespace fs = std::filesystem;
using bswitch::ExperimentConfig;

namespace {

struct GlobalFlags {
  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::size_t> workers;
  std::vector<std::string> overrides;
  std::map<std::string, std::optional<std::uint64_t>> seeds = {
      {"train", {}}, {"data", {}}, {"attack", {}}, {"eval", {}}, {"channel", {}}};
};

ExperimentConfig resolve(const GlobalFlags& flags) {
  ExperimentConfig config = flags.config_path.empty() ? ExperimentConfig() : ExperimentConfig::load(flags.config_path);
  for (const auto& o : flags.overrides) config.apply_override(o);
  for (const auto& [name, value] : flags.seeds) {
    if (value) config.set("seed." + name, std::to_string(*value));
  }
  if (flags.out) config.set("out", *flags.out);
  if (flags.workers) config.set("workers", std::to_string(*flags.workers));
  return config;
}

void add_global_flags(CLI::App& app, GlobalFlags& flags) {
  app.add_option("--config", flags.config_path, "Experiment configuration file")->check(CLI::ExistingFile);
  app.add_option("--out", flags.out, "Output directory (config key 'out')");
  app.add_option("--workers", flags.workers, "Parallel attack workers (config key 'workers')");
  app.add_option("--set", flags.overrides, "Override a config key: --set key=value (repeatable)")
      ->allow_extra_args(false);
  for (auto& [name, value] : flags.seeds) {
    app.add_option("--seed." + name, value, "Override seed." + name);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-switching adversarial defense experiments"};
  app.require_subcommand(1);
  GlobalFlags flags;
  add_global_flags(app, flags);

  std::vector<fs::path> files;
  fs::path model, archive;

  auto* train = app.add_subcommand("train", "Train the regular model or the phase-1 submodel pool");
  auto* build = app.add_subcommand("build-switch", "Assemble a switching model from submodels and retrain it");
  build->add_option("submodels", files, "Submodel files")->required();
  auto* attack = app.add_subcommand("attack", "Craft adversarial examples against a model");
  attack->add_option("model", model, "Model file")->required();
  auto* eval = app.add_subcommand("eval", "Evaluate an adversarial-example archive against a model");
  eval->add_option("model", model, "Model file")->required();
  eval->add_option("archive", archive, "Archive written by 'attack'")->required();
  auto* sweep = app.add_subcommand("sweep", "CW fooling ratio and accuracy over channel counts");
  sweep->add_option("pool", files, "Submodel files (trained from scratch when omitted)");
  auto* graddist = app.add_subcommand("grad-dist", "Sample input-gradient distributions");
  graddist->add_option("model", model, "Model file")->required();
  for (auto* sub : {train, build, attack, eval, sweep, graddist}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig config = resolve(flags);
    std::vector<fs::path> written;
    if (*train) {
      written = bswitch::cmd_train(config);
    } else if (*build) {
      written.push_back(bswitch::cmd_build_switch(config, files));
    } else if (*attack) {
      written.push_back(bswitch::cmd_attack(config, model));
    } else if (*eval) {
      written.push_back(bswitch::cmd_eval(config, model, archive));
    } else if (*sweep) {
      written.push_back(bswitch::cmd_sweep(config, files));
    } else if (*graddist) {
      written.push_back(bswitch::cmd_graddist(config, model));
    }
    for (const auto& f : written) std::cout << f.string() << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "bswitch: error: " << e.what() << '\n';
    return 1;
  }
}
