#pragma once

// Pipeline stages behind the `bswitch` command-line driver. Every stage
// reads its inputs, never modifies them, and writes its outputs atomically
// into config "out" together with a copy of the resolved configuration.

#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "bswitch/attacks.hpp"
#include "bswitch/config.hpp"
#include "bswitch/data.hpp"
#include "bswitch/eval.hpp"
#include "bswitch/nn.hpp"
#include "bswitch/stochastic.hpp"

namespace bswitch {

/// Train/test split described by the data.* keys: a stratified held-out test
/// set of data.test_size, and (when data.train_size > 0) a stratified
/// training subset of that size from the remainder.
Split load_experiment_data(const ExperimentConfig& config);

struct AttackSet {
  std::vector<Tensor> examples;
  std::vector<int> labels;
  std::vector<int> targets;
  std::vector<std::size_t> test_indices;
};
/// data.attack_size test examples and their random targets (seed.attack).
AttackSet make_attack_set(const Dataset& test, std::size_t n, std::uint64_t seed);

TrainConfig phase1_train_config(const ExperimentConfig& config);
TrainConfig phase2_train_config(const ExperimentConfig& config);
CwConfig cw_config(const ExperimentConfig& config);
AttackConfig attack_config(const ExperimentConfig& config);
Sequential make_preset(const ExperimentConfig& config, std::uint64_t seed);

/// Phase-1 pool: model i is initialised from derive_seed(seed.train, i) and
/// trained with seed derive_seed(seed.train, 1000 + i).
std::vector<Sequential> train_pool(const ExperimentConfig& config, const Dataset& train, std::size_t count);
/// Sweep inputs from the config. The result points into `data`, `pool` and
/// `attacks`, which must outlive it.
SweepSetup sweep_setup(const ExperimentConfig& config, const Split& data, std::span<const Sequential> pool,
                       const AttackSet& attacks);

/// A target model loaded from a container file. Sequential files become SAP
/// targets when config `defense` is "sap".
struct LoadedTarget {
  std::variant<Sequential, SapModel, SwitchingModel> model;
  ModelRef ref() const;
};
LoadedTarget load_target(const ExperimentConfig& config, const std::filesystem::path& model_file);

std::vector<std::filesystem::path> cmd_train(const ExperimentConfig& config);
std::filesystem::path cmd_build_switch(const ExperimentConfig& config,
                                       std::span<const std::filesystem::path> submodel_files);
std::filesystem::path cmd_attack(const ExperimentConfig& config, const std::filesystem::path& model_file);
std::filesystem::path cmd_eval(const ExperimentConfig& config, const std::filesystem::path& model_file,
                               const std::filesystem::path& archive_file);
/// Trains the phase-1 pool itself when `pool_files` is empty.
std::filesystem::path cmd_sweep(const ExperimentConfig& config,
                                std::span<const std::filesystem::path> pool_files);
std::filesystem::path cmd_graddist(const ExperimentConfig& config, const std::filesystem::path& model_file);

}  // namespace bswitch
