#pragma once

// Stochastic defenses: Block Switching and stochastic activation pruning (SAP).
//
// A SwitchingModel holds k parallel "channels" (the lower parts of k
// independently trained models) feeding one shared upper model. Every forward
// call activates exactly one channel, drawn uniformly at random.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "bswitch/container.hpp"
#include "bswitch/data.hpp"
#include "bswitch/nn.hpp"
#include "bswitch/tensor.hpp"

namespace bswitch {

struct ChannelDraw {
  std::size_t channel_index = 0;
  /// Number of draws the selector had made before this one.
  std::uint64_t draw_counter = 0;
  bool operator==(const ChannelDraw&) const = default;
};

/// Seeded stream of uniform channel draws.
class ChannelSelector {
 public:
  explicit ChannelSelector(std::uint64_t seed) : rng_(seed) {}

  ChannelDraw draw(std::size_t channel_count);
  std::uint64_t draws() const { return counter_; }
  /// Underlying engine, shared with other per-query randomness (SAP).
  Rng& engine() { return rng_; }

 private:
  Rng rng_;
  std::uint64_t counter_ = 0;
};

class SwitchingModel {
 public:
  SwitchingModel(std::vector<Sequential> channels, Sequential upper, std::uint64_t selector_seed);

  std::size_t channel_count() const { return channels_.size(); }
  const std::vector<Sequential>& channels() const { return channels_; }
  const Sequential& channel(std::size_t i) const { return channels_.at(i); }
  const Sequential& upper() const { return upper_; }
  std::uint64_t selector_seed() const { return selector_seed_; }

  std::vector<Sequential>& mutable_channels() { return channels_; }
  Sequential& mutable_upper() { return upper_; }

  /// Deterministic model equal to channel i followed by the upper model.
  Sequential composed(std::size_t i) const;

  bool operator==(const SwitchingModel&) const = default;

 private:
  std::vector<Sequential> channels_;
  Sequential upper_;
  std::uint64_t selector_seed_ = 0;
};

/// Splits every submodel at `split_index`, keeps the lower parts as channels
/// and attaches a freshly initialised copy of the upper architecture.
SwitchingModel build_switching(std::span<const Sequential> submodels, std::size_t split_index,
                               std::uint64_t upper_seed, std::uint64_t selector_seed);

struct SwitchOutput {
  Var logits;
  ChannelDraw draw;
};

/// Evaluates one channel and the upper model. The channel comes from
/// `selector` unless `channel_override` is set, in which case no draw is made.
SwitchOutput forward(const SwitchingModel& model, Tape& tape, Var x, Mode mode,
                     ChannelSelector& selector, Rng* dropout_rng,
                     std::optional<std::size_t> channel_override = std::nullopt);

struct SwitchInference {
  Tensor logits;
  ChannelDraw draw;
};
SwitchInference infer(const SwitchingModel& model, const Tensor& batch, ChannelSelector& selector,
                      std::optional<std::size_t> channel_override = std::nullopt);

// ---- phase-2 training ----------------------------------------------------------

/// Retrains an assembled switching model. Each minibatch draws one channel;
/// the loss flows through that channel and the upper model, and only those
/// parameters (and their momentum buffers) are updated.
class Phase2Trainer {
 public:
  Phase2Trainer(SwitchingModel& model, TrainConfig config);

  struct StepReport {
    std::size_t active_channel = 0;
    double loss = 0.0;
    std::size_t correct = 0;
    /// Filled when requested: gradient of every channel's parameters
    /// (zero tensors for channels that were not active) and of the upper model.
    std::vector<std::vector<LayerParams>> channel_grads;
    std::vector<LayerParams> upper_grads;
  };

  StepReport step(const Tensor& images, std::span<const int> labels, Rng& dropout_rng,
                  bool keep_gradients = false);

  const ChannelSelector& selector() const { return selector_; }

 private:
  SwitchingModel& model_;
  TrainConfig config_;
  ChannelSelector selector_;
  std::vector<std::vector<LayerParams>> channel_velocity_;
  std::vector<LayerParams> upper_velocity_;
};

struct Phase2Result {
  SwitchingModel model;
  std::vector<EpochStats> trace;
  std::vector<std::size_t> active_channels;  // one per step
};

Phase2Result train_phase2(SwitchingModel model, const Dataset& dataset, const TrainConfig& config);

// ---- SAP -----------------------------------------------------------------------

/// A trained model with stochastic activation pruning applied to the output
/// of layer `prune_after`.
struct SapModel {
  Sequential base;
  std::size_t prune_after = 0;
  /// Draws per activation vector; 0 means "equal to the vector width".
  std::size_t sample_count = 0;

  /// Prunes after the dense layer that feeds the final dense layer.
  explicit SapModel(Sequential base, std::size_t sample_count = 0);
  SapModel(Sequential base, std::size_t prune_after, std::size_t sample_count);

  std::size_t width() const { return base.layer_output_shape(prune_after)[0]; }
  std::size_t effective_samples() const { return sample_count == 0 ? width() : sample_count; }
};

/// Multiplicative SAP mask for one activation vector: `samples` indices are
/// drawn i.i.d. with p_j = |a_j| / sum|a|; drawn entries get 1/(1-(1-p_j)^samples),
/// the rest 0. An all-zero vector yields an all-ones mask.
std::vector<double> sap_mask(std::span<const double> activations, std::size_t samples, Rng& rng);

Var sap_forward(const SapModel& model, Tape& tape, Var x, Mode mode, Rng& rng, Rng* dropout_rng);
Tensor sap_infer(const SapModel& model, const Tensor& batch, Rng& rng);

// ---- persistence ---------------------------------------------------------------

Container to_container(const SwitchingModel& model, Metadata meta = {});
SwitchingModel switching_from_container(const Container& c);
void save_switching(const std::filesystem::path& path, const SwitchingModel& model, Metadata meta = {});
SwitchingModel load_switching(const std::filesystem::path& path);

}  // namespace bswitch
