#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bswitch/attacks.hpp"
#include "bswitch/container.hpp"
#include "bswitch/data.hpp"
#include "bswitch/stochastic.hpp"

namespace bswitch {

struct EvalReport {
  std::string model_id;
  std::string attack_id;
  double attack_param = 0.0;  // epsilon for FGSM, kappa for CW
  double fooling_ratio = 0.0;
  double mean_l2 = 0.0;
  double test_accuracy = 0.0;
  std::size_t n_examples = 0;
  std::size_t fooled = 0;
  std::size_t eval_samples_per_example = 1;
  std::uint64_t attack_seed = 0;
  std::uint64_t eval_seed = 0;
};

/// Evaluates each adversarial example `samples_per_example` times under fresh
/// draws (stream derive_seed(eval_seed, i) for example i); it counts as fooled
/// when the target wins a strict majority. mean_l2 covers every example.
EvalReport fooling_ratio(ModelRef model, std::span<const AttackResult> results,
                         std::span<const int> targets, std::uint64_t eval_seed,
                         std::size_t samples_per_example = 1);

/// Accuracy with one independent draw per example (one forward call each).
double model_accuracy(ModelRef model, const Dataset& dataset, std::uint64_t seed);

/// Uniformly random class different from each label.
std::vector<int> random_targets(std::span<const int> labels, std::uint64_t seed);

struct GradientHistogram {
  std::size_t pixel = 0;  // flat index into the example
  std::vector<double> samples;
  std::vector<double> bin_edges;  // counts.size() + 1 entries
  std::vector<std::size_t> counts;

  std::size_t distinct_values() const;
  double variance() const;
  std::size_t occupied_bins() const;
};

/// Draws `n_samples` input gradients of the CW objective at delta = 0 (c = 1,
/// kappa = 0), each under a fresh model draw, and histograms the requested
/// pixels into `bins` equal-width bins over their observed range.
std::vector<GradientHistogram> sample_gradient_distribution(ModelRef model, const Tensor& x, int target,
                                                            std::size_t n_samples,
                                                            std::span<const std::size_t> pixels,
                                                            std::uint64_t seed, std::size_t bins = 20);

struct SweepSetup {
  std::span<const Sequential> pool;  // phase-1 submodels
  std::size_t split_index = 0;
  const Dataset* train = nullptr;
  const Dataset* test = nullptr;
  TrainConfig phase2;
  std::span<const Tensor> attack_examples;
  std::span<const int> attack_targets;
  CwConfig cw;
  std::uint64_t upper_seed = 0;
  std::uint64_t selector_seed = 0;
  std::uint64_t attack_seed = 0;
  std::uint64_t eval_seed = 0;
  std::size_t samples_per_example = 1;
  std::size_t workers = 1;
};

struct SweepRow {
  std::size_t channels = 0;
  EvalReport report;
  std::vector<AttackResult> attacks;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<SwitchingModel> models;
};

/// For each k: switching model from the first k submodels, phase-2
/// retraining, CW on the attack set, fooling ratio and test accuracy.
SweepResult channel_sweep(std::span<const std::size_t> channel_counts, const SweepSetup& setup);

// ---- CSV -----------------------------------------------------------------------------

/// Leading "# key=value" lines, one per metadata entry.
std::string csv_comment_block(const Metadata& meta);
/// Header model,attack,epsilon_or_kappa,fooling_ratio,mean_l2,test_accuracy,n,seed.
std::string report_csv(std::span<const EvalReport> reports, const Metadata& meta = {});
/// Header pixel,sample_index,value.
std::string gradient_csv(std::span<const GradientHistogram> histograms, const Metadata& meta = {});
/// Header k,fooling_ratio,mean_l2,test_accuracy,n,seed.
std::string sweep_csv(std::span<const SweepRow> rows, const Metadata& meta = {});

/// Round-trippable decimal rendering of a double.
std::string format_double(double v);

}  // namespace bswitch
