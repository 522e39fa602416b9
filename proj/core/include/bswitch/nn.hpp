#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "bswitch/container.hpp"
#include "bswitch/data.hpp"
#include "bswitch/tensor.hpp"

namespace bswitch {

enum class Activation { kNone, kRelu };

namespace layer {
struct Conv {
  std::size_t out_channels = 0;
  std::size_t kernel_size = 0;
  std::size_t stride = 1;
  Activation activation = Activation::kRelu;
  Padding padding = Padding::kValid;
  bool operator==(const Conv&) const = default;
};
struct MaxPool {
  std::size_t window = 2;
  bool operator==(const MaxPool&) const = default;
};
struct Flatten {
  bool operator==(const Flatten&) const = default;
};
struct Dense {
  std::size_t units = 0;
  Activation activation = Activation::kRelu;
  bool operator==(const Dense&) const = default;
};
struct Dropout {
  double rate = 0.5;
  bool operator==(const Dropout&) const = default;
};
}  // namespace layer

using LayerSpec = std::variant<layer::Conv, layer::MaxPool, layer::Flatten, layer::Dense, layer::Dropout>;

std::string describe(const LayerSpec& spec);
void validate(const LayerSpec& spec);
bool has_parameters(const LayerSpec& spec);

/// Weight and bias of one layer; both empty for parameter-free layers.
/// Conv weights are [k,k,C_in,C_out], dense weights [in,out].
struct LayerParams {
  Tensor weight;
  Tensor bias;
  bool empty() const { return weight.values.empty() && bias.values.empty(); }
  bool operator==(const LayerParams&) const = default;
};

enum class Mode { kTrain, kInfer };

class Sequential {
 public:
  Sequential() = default;
  /// Fresh He-normal weights (std sqrt(2/fan_in)) and zero biases from `init_seed`.
  Sequential(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t init_seed);
  /// Adopts existing parameters; shapes must match the chained layer specs.
  Sequential(Shape input_shape, std::vector<LayerSpec> layers, std::vector<LayerParams> params);

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t layer_count() const { return layers_.size(); }
  const std::vector<LayerParams>& params() const { return params_; }
  std::vector<LayerParams>& mutable_params() { return params_; }
  /// Per-example output shape of layer i (excludes batch axis).
  const Shape& layer_output_shape(std::size_t i) const { return shapes_.at(i + 1); }
  const Shape& output_shape() const { return shapes_.back(); }
  std::size_t parameter_count() const;

  bool same_architecture(const Sequential& other) const {
    return input_shape_ == other.input_shape_ && layers_ == other.layers_;
  }
  bool operator==(const Sequential& other) const {
    return same_architecture(other) && params_ == other.params_;
  }

 private:
  void chain_shapes();

  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<LayerParams> params_;
  std::vector<Shape> shapes_;
};

/// Conv32-Conv32-Pool2-Conv64-Conv64-Pool2-Flatten-Dense200-Dropout0.5-Dense10 on 28x28x1.
Sequential preset_mnist_cnn(std::uint64_t seed);
/// Same topology with Conv64/Conv64/Conv128/Conv128 and Dense256 on 32x32x3.
Sequential preset_cifar_cnn(std::uint64_t seed);
/// Index of the final Dense layer: the lower part keeps the conv stack and
/// first dense block (with its dropout), the upper part is the classifier.
std::size_t default_split_index(const Sequential& model);

// ---- forward ---------------------------------------------------------------

/// Tape handles for one layer's parameters.
struct ParamVars {
  Var weight;
  Var bias;
  bool present = false;
};

/// Places every parameter on `tape`, as tracked variables or as constants.
std::vector<ParamVars> bind_parameters(Tape& tape, const Sequential& model, bool track);

/// Runs layers [first, last) on a batched input [N, ...]. Dropout draws from
/// `rng` in train mode; `rng` may be null in infer mode.
Var forward_layers(const Sequential& model, std::span<const ParamVars> params, Var x, Mode mode,
                   Rng* rng, std::size_t first, std::size_t last);
Var forward(const Sequential& model, std::span<const ParamVars> params, Var x, Mode mode, Rng* rng);
/// Binds parameters as constants; for input gradients and inference.
Var forward(const Sequential& model, Tape& tape, Var x, Mode mode, Rng* rng);
/// Infer-mode logits [N,10] for a batched input.
Tensor infer(const Sequential& model, const Tensor& batch);

/// argmax per row, first index on ties.
std::vector<int> argmax_rows(const Tensor& logits);
int argmax(std::span<const double> row);

// ---- training ----------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 128;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  bool operator==(const EpochStats&) const = default;
};

struct TrainResult {
  Sequential model;
  std::vector<EpochStats> trace;
};

/// v <- momentum*v + grad; param <- param - lr*v.
void sgd_momentum_update(Tensor& param, const Tensor& grad, Tensor& velocity, double learning_rate,
                         double momentum);

/// Minibatch SGD with momentum on cross-entropy; reproducible from config.seed.
TrainResult train_sgd(Sequential model, const Dataset& dataset, const TrainConfig& config);

/// Fraction of examples whose infer-mode argmax equals the label.
double accuracy(const Sequential& model, const Dataset& dataset);

namespace detail {

struct StepOutcome {
  double loss = 0.0;
  std::size_t correct = 0;
};

/// One optimisation step on a minibatch; `dropout_rng` is the shared stream
/// for train-mode dropout.
using StepFn = std::function<StepOutcome(const Tensor& images, std::span<const int> labels,
                                         Rng& dropout_rng)>;

/// Epoch loop shared by regular and switching training: seeded reshuffling,
/// one dropout stream, per-epoch loss/accuracy trace.
std::vector<EpochStats> run_epochs(const Dataset& dataset, const TrainConfig& config,
                                   const StepFn& step);

std::uint64_t dropout_seed(std::uint64_t train_seed);

}  // namespace detail

// ---- split / merge -----------------------------------------------------------

/// Layers [0, split_index) and [split_index, end).
std::pair<Sequential, Sequential> split_model(const Sequential& model, std::size_t split_index);
/// Inverse of split_model.
Sequential merge_models(const Sequential& lower, const Sequential& upper);

// ---- persistence -------------------------------------------------------------

/// JSON text of input shape + layer specs (container "structure").
std::string architecture_json(const Sequential& model);
/// Appends the model's tensors under `prefix` ("layer<i>.weight"/".bias").
void append_tensors(const Sequential& model, const std::string& prefix, std::vector<NamedTensor>& out);
Sequential sequential_from(std::string_view architecture, const Container& c, const std::string& prefix);

Container to_container(const Sequential& model, Metadata meta = {});
Sequential sequential_from_container(const Container& c);
void save_model(const std::filesystem::path& path, const Sequential& model, Metadata meta = {});
Sequential load_model(const std::filesystem::path& path);

}  // namespace bswitch
