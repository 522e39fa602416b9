#include "bswitch/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace bswitch {

namespace {

using json = nlohmann::json;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

const char* activation_name(Activation a) { return a == Activation::kRelu ? "relu" : "none"; }

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "none") return Activation::kNone;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

Var activate(Var x, Activation a) { return a == Activation::kRelu ? relu(x) : x; }

// Per-example output shape of `spec` applied to `in`; throws ShapeError.
Shape chain(const LayerSpec& spec, const Shape& in, std::size_t index) {
  auto fail = [&](const std::string& why) -> Shape {
    throw ShapeError("layer " + std::to_string(index) + " (" + describe(spec) + "): input " +
                     to_string(in) + " " + why);
  };
  return std::visit(
      Overloaded{
          [&](const layer::Conv& c) -> Shape {
            if (in.size() != 3) return fail("is not [H,W,C]");
            const auto h = conv_output_extent(in[0], c.kernel_size, c.stride, c.padding);
            const auto w = conv_output_extent(in[1], c.kernel_size, c.stride, c.padding);
            if (h == 0 || w == 0) return fail("is smaller than the kernel");
            return {h, w, c.out_channels};
          },
          [&](const layer::MaxPool& p) -> Shape {
            if (in.size() != 3) return fail("is not [H,W,C]");
            if (in[0] < p.window || in[1] < p.window) return fail("is smaller than the window");
            return {in[0] / p.window, in[1] / p.window, in[2]};
          },
          [&](const layer::Flatten&) -> Shape { return {numel(in)}; },
          [&](const layer::Dense& d) -> Shape {
            if (in.size() != 1) return fail("is not flat");
            return {d.units};
          },
          [&](const layer::Dropout&) -> Shape { return in; },
      },
      spec);
}

// Weight and bias shapes for a parameterised layer given its input shape.
std::pair<Shape, Shape> param_shapes(const LayerSpec& spec, const Shape& in) {
  if (const auto* c = std::get_if<layer::Conv>(&spec)) {
    return {{c->kernel_size, c->kernel_size, in[2], c->out_channels}, {c->out_channels}};
  }
  if (const auto* d = std::get_if<layer::Dense>(&spec)) {
    return {{in[0], d->units}, {d->units}};
  }
  return {{}, {}};
}

json layer_to_json(const LayerSpec& spec) {
  return std::visit(
      Overloaded{
          [](const layer::Conv& c) {
            return json{{"type", "conv"},
                        {"out_channels", c.out_channels},
                        {"kernel_size", c.kernel_size},
                        {"stride", c.stride},
                        {"activation", activation_name(c.activation)},
                        {"padding", c.padding == Padding::kValid ? "valid" : "same"}};
          },
          [](const layer::MaxPool& p) { return json{{"type", "maxpool"}, {"window", p.window}}; },
          [](const layer::Flatten&) { return json{{"type", "flatten"}}; },
          [](const layer::Dense& d) {
            return json{{"type", "dense"},
                        {"units", d.units},
                        {"activation", activation_name(d.activation)}};
          },
          [](const layer::Dropout& d) { return json{{"type", "dropout"}, {"rate", d.rate}}; },
      },
      spec);
}

LayerSpec layer_from_json(const json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "conv") {
    const auto pad = j.at("padding").get<std::string>();
    if (pad != "valid" && pad != "same") throw std::invalid_argument("unknown padding '" + pad + "'");
    return layer::Conv{j.at("out_channels").get<std::size_t>(), j.at("kernel_size").get<std::size_t>(),
                       j.at("stride").get<std::size_t>(),
                       parse_activation(j.at("activation").get<std::string>()),
                       pad == "valid" ? Padding::kValid : Padding::kSame};
  }
  if (type == "maxpool") return layer::MaxPool{j.at("window").get<std::size_t>()};
  if (type == "flatten") return layer::Flatten{};
  if (type == "dense") {
    return layer::Dense{j.at("units").get<std::size_t>(),
                        parse_activation(j.at("activation").get<std::string>())};
  }
  if (type == "dropout") return layer::Dropout{j.at("rate").get<double>()};
  throw std::invalid_argument("unknown layer type '" + type + "'");
}

}  // namespace

std::string describe(const LayerSpec& spec) {
  std::ostringstream os;
  std::visit(Overloaded{
                 [&](const layer::Conv& c) {
                   os << "Conv" << c.out_channels << '(' << c.kernel_size << 'x' << c.kernel_size
                      << ",s" << c.stride << ')';
                 },
                 [&](const layer::MaxPool& p) { os << "Pool(" << p.window << ')'; },
                 [&](const layer::Flatten&) { os << "Flatten"; },
                 [&](const layer::Dense& d) { os << "Dense" << d.units; },
                 [&](const layer::Dropout& d) { os << "Dropout(" << d.rate << ')'; },
             },
             spec);
  return os.str();
}

void validate(const LayerSpec& spec) {
  std::visit(Overloaded{
                 [&](const layer::Conv& c) {
                   if (c.out_channels == 0 || c.kernel_size == 0 || c.stride == 0) {
                     throw std::invalid_argument(describe(spec) + ": sizes must be positive");
                   }
                 },
                 [&](const layer::MaxPool& p) {
                   if (p.window == 0) throw std::invalid_argument("MaxPool: window must be positive");
                 },
                 [](const layer::Flatten&) {},
                 [&](const layer::Dense& d) {
                   if (d.units == 0) throw std::invalid_argument("Dense: units must be positive");
                 },
                 [&](const layer::Dropout& d) {
                   if (!(d.rate >= 0.0 && d.rate < 1.0)) {
                     throw std::invalid_argument("Dropout: rate must lie in [0, 1)");
                   }
                 },
             },
             spec);
}

bool has_parameters(const LayerSpec& spec) {
  return std::holds_alternative<layer::Conv>(spec) || std::holds_alternative<layer::Dense>(spec);
}

// ---- Sequential ----------------------------------------------------------------

void Sequential::chain_shapes() {
  if (input_shape_.empty() || numel(input_shape_) == 0) {
    throw ShapeError("Sequential: input shape " + to_string(input_shape_) + " is empty");
  }
  shapes_.assign(1, input_shape_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    validate(layers_[i]);
    shapes_.push_back(chain(layers_[i], shapes_.back(), i));
  }
}

Sequential::Sequential(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t init_seed)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  chain_shapes();
  Rng rng(init_seed);
  params_.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (!has_parameters(layers_[i])) continue;
    auto [ws, bs] = param_shapes(layers_[i], shapes_[i]);
    const double fan_in = static_cast<double>(numel(ws) / ws.back());
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
    Tensor w(ws);
    for (double& v : w.values) v = normal(rng);
    params_[i] = LayerParams{std::move(w), Tensor(bs, 0.0)};
  }
}

Sequential::Sequential(Shape input_shape, std::vector<LayerSpec> layers,
                       std::vector<LayerParams> params)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), params_(std::move(params)) {
  chain_shapes();
  if (params_.size() != layers_.size()) {
    throw ShapeError("Sequential: " + std::to_string(params_.size()) + " parameter blocks for " +
                     std::to_string(layers_.size()) + " layers");
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (!has_parameters(layers_[i])) {
      if (!params_[i].empty()) {
        throw ShapeError("Sequential: layer " + std::to_string(i) + " takes no parameters");
      }
      continue;
    }
    auto [ws, bs] = param_shapes(layers_[i], shapes_[i]);
    if (params_[i].weight.shape != ws || params_[i].bias.shape != bs) {
      throw ShapeError("Sequential: layer " + std::to_string(i) + " (" + describe(layers_[i]) +
                       ") expects weight " + to_string(ws) + " bias " + to_string(bs) + ", got " +
                       to_string(params_[i].weight.shape) + " and " + to_string(params_[i].bias.shape));
    }
  }
}

std::size_t Sequential::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.weight.size() + p.bias.size();
  return n;
}

namespace {

std::vector<LayerSpec> cnn_layers(std::size_t c1, std::size_t c2, std::size_t dense) {
  return {
      layer::Conv{c1, 3}, layer::Conv{c1, 3}, layer::MaxPool{2},
      layer::Conv{c2, 3}, layer::Conv{c2, 3}, layer::MaxPool{2},
      layer::Flatten{},   layer::Dense{dense, Activation::kRelu},
      layer::Dropout{0.5}, layer::Dense{10, Activation::kNone},
  };
}

}  // namespace

Sequential preset_mnist_cnn(std::uint64_t seed) {
  return Sequential({28, 28, 1}, cnn_layers(32, 64, 200), seed);
}

Sequential preset_cifar_cnn(std::uint64_t seed) {
  return Sequential({32, 32, 3}, cnn_layers(64, 128, 256), seed);
}

std::size_t default_split_index(const Sequential& model) {
  for (std::size_t i = model.layer_count(); i-- > 0;) {
    if (std::holds_alternative<layer::Dense>(model.layers()[i])) {
      if (i == 0) break;
      return i;
    }
  }
  throw std::invalid_argument("default_split_index: model has no final dense layer to split off");
}

// ---- forward -------------------------------------------------------------------

std::vector<ParamVars> bind_parameters(Tape& tape, const Sequential& model, bool track) {
  std::vector<ParamVars> out(model.layer_count());
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    const auto& p = model.params()[i];
    if (p.empty()) continue;
    out[i].weight = track ? tape.variable(p.weight) : tape.constant(p.weight);
    out[i].bias = track ? tape.variable(p.bias) : tape.constant(p.bias);
    out[i].present = true;
  }
  return out;
}

Var forward_layers(const Sequential& model, std::span<const ParamVars> params, Var x, Mode mode,
                   Rng* rng, std::size_t first, std::size_t last) {
  if (first > last || last > model.layer_count()) {
    throw std::out_of_range("forward_layers: range [" + std::to_string(first) + ", " +
                            std::to_string(last) + ") outside model");
  }
  if (params.size() != model.layer_count()) {
    throw std::invalid_argument("forward_layers: parameter bindings do not match the model");
  }
  const Shape& expected = first == 0 ? model.input_shape() : model.layer_output_shape(first - 1);
  const Shape& got = x.shape();
  if (got.size() != expected.size() + 1 || !std::equal(expected.begin(), expected.end(), got.begin() + 1)) {
    throw ShapeError("forward: input " + to_string(got) + " does not match [N]+" + to_string(expected));
  }
  if (mode == Mode::kTrain && rng == nullptr) {
    throw std::invalid_argument("forward: train mode requires an rng");
  }
  const std::size_t batch = got[0];
  for (std::size_t i = first; i < last; ++i) {
    const ParamVars& p = params[i];
    x = std::visit(
        Overloaded{
            [&](const layer::Conv& c) {
              return activate(add_bias(conv2d(x, p.weight, c.stride, c.padding), p.bias), c.activation);
            },
            [&](const layer::MaxPool& m) { return maxpool2d(x, m.window); },
            [&](const layer::Flatten&) { return reshape(x, {batch, numel(model.layer_output_shape(i))}); },
            [&](const layer::Dense& d) {
              return activate(add_bias(matmul(x, p.weight), p.bias), d.activation);
            },
            [&](const layer::Dropout& d) { return mode == Mode::kTrain ? dropout(x, d.rate, *rng) : x; },
        },
        model.layers()[i]);
  }
  return x;
}

Var forward(const Sequential& model, std::span<const ParamVars> params, Var x, Mode mode, Rng* rng) {
  return forward_layers(model, params, x, mode, rng, 0, model.layer_count());
}

Var forward(const Sequential& model, Tape& tape, Var x, Mode mode, Rng* rng) {
  const auto params = bind_parameters(tape, model, false);
  return forward(model, params, x, mode, rng);
}

Tensor infer(const Sequential& model, const Tensor& batch) {
  Tape tape;
  Var x = tape.constant(batch);
  return forward(model, tape, x, Mode::kInfer, nullptr).value();
}

int argmax(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.shape.size() != 2) throw ShapeError("argmax_rows: expected [N,K], got " + to_string(logits.shape));
  const std::size_t k = logits.shape[1];
  std::vector<int> out(logits.shape[0]);
  for (std::size_t r = 0; r < out.size(); ++r) {
    out[r] = argmax(std::span<const double>(logits.values.data() + r * k, k));
  }
  return out;
}

// ---- training ------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("TrainConfig: momentum must lie in [0, 1)");
  }
}

void sgd_momentum_update(Tensor& param, const Tensor& grad, Tensor& velocity, double learning_rate,
                         double momentum) {
  if (param.shape != grad.shape || param.shape != velocity.shape) {
    throw ShapeError("sgd_momentum_update: param " + to_string(param.shape) + ", grad " +
                     to_string(grad.shape) + ", velocity " + to_string(velocity.shape));
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity.values[i] = momentum * velocity.values[i] + grad.values[i];
    param.values[i] -= learning_rate * velocity.values[i];
  }
}

namespace detail {

std::uint64_t dropout_seed(std::uint64_t train_seed) { return derive_seed(train_seed, 0xd70u); }

std::vector<EpochStats> run_epochs(const Dataset& dataset, const TrainConfig& config,
                                   const StepFn& step) {
  config.validate();
  if (dataset.size() == 0) throw std::invalid_argument("train: empty dataset");
  Rng dropout_rng(dropout_seed(config.seed));
  std::vector<EpochStats> trace;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (const auto& idx : batches(dataset, config.batch_size, config.seed, epoch)) {
      const Tensor images = dataset.gather_images(idx);
      const std::vector<int> labels = dataset.gather_labels(idx);
      const StepOutcome out = step(images, labels, dropout_rng);
      loss_sum += out.loss * static_cast<double>(idx.size());
      correct += out.correct;
    }
    const auto n = static_cast<double>(dataset.size());
    trace.push_back(EpochStats{epoch, loss_sum / n, static_cast<double>(correct) / n});
  }
  return trace;
}

}  // namespace detail

TrainResult train_sgd(Sequential model, const Dataset& dataset, const TrainConfig& config) {
  std::vector<LayerParams> velocity;
  velocity.reserve(model.layer_count());
  for (const auto& p : model.params()) {
    velocity.push_back(LayerParams{Tensor(p.weight.shape, 0.0), Tensor(p.bias.shape, 0.0)});
  }
  auto step = [&](const Tensor& images, std::span<const int> labels, Rng& rng) {
    Tape tape;
    const auto pv = bind_parameters(tape, model, true);
    Var logits = forward(model, pv, tape.constant(images), Mode::kTrain, &rng);
    Var loss = cross_entropy(logits, labels);
    const GradientMap grads = backward(tape, loss);
    auto& params = model.mutable_params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!pv[i].present) continue;
      sgd_momentum_update(params[i].weight, grads.at(pv[i].weight), velocity[i].weight,
                          config.learning_rate, config.momentum);
      sgd_momentum_update(params[i].bias, grads.at(pv[i].bias), velocity[i].bias,
                          config.learning_rate, config.momentum);
    }
    const auto pred = argmax_rows(logits.value());
    std::size_t correct = 0;
    for (std::size_t r = 0; r < pred.size(); ++r) correct += pred[r] == labels[r];
    return detail::StepOutcome{loss.value().item(), correct};
  };
  auto trace = detail::run_epochs(dataset, config, step);
  return TrainResult{std::move(model), std::move(trace)};
}

double accuracy(const Sequential& model, const Dataset& dataset) {
  if (dataset.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  constexpr std::size_t kChunk = 250;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < dataset.size(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(dataset.size(), start + kChunk); ++i) idx.push_back(i);
    const auto pred = argmax_rows(infer(model, dataset.gather_images(idx)));
    for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == dataset.labels[idx[k]];
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

// ---- split / merge -----------------------------------------------------------------

std::pair<Sequential, Sequential> split_model(const Sequential& model, std::size_t split_index) {
  if (split_index == 0 || split_index >= model.layer_count()) {
    throw std::out_of_range("split_model: index " + std::to_string(split_index) + " outside (0, " +
                            std::to_string(model.layer_count()) + ")");
  }
  const auto& L = model.layers();
  const auto& P = model.params();
  const auto cut = static_cast<std::ptrdiff_t>(split_index);
  Sequential lower(model.input_shape(), {L.begin(), L.begin() + cut}, {P.begin(), P.begin() + cut});
  Sequential upper(model.layer_output_shape(split_index - 1), {L.begin() + cut, L.end()},
                   {P.begin() + cut, P.end()});
  return {std::move(lower), std::move(upper)};
}

Sequential merge_models(const Sequential& lower, const Sequential& upper) {
  if (lower.output_shape() != upper.input_shape()) {
    throw ShapeError("merge_models: lower output " + to_string(lower.output_shape()) +
                     " does not feed upper input " + to_string(upper.input_shape()));
  }
  auto layers = lower.layers();
  layers.insert(layers.end(), upper.layers().begin(), upper.layers().end());
  auto params = lower.params();
  params.insert(params.end(), upper.params().begin(), upper.params().end());
  return Sequential(lower.input_shape(), std::move(layers), std::move(params));
}

// ---- persistence ---------------------------------------------------------------------

std::string architecture_json(const Sequential& model) {
  json j;
  j["input_shape"] = model.input_shape();
  j["layers"] = json::array();
  for (const auto& l : model.layers()) j["layers"].push_back(layer_to_json(l));
  return j.dump();
}

void append_tensors(const Sequential& model, const std::string& prefix, std::vector<NamedTensor>& out) {
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    const auto& p = model.params()[i];
    if (p.empty()) continue;
    const std::string base = prefix + "layer" + std::to_string(i);
    out.push_back({base + ".weight", p.weight});
    out.push_back({base + ".bias", p.bias});
  }
}

Sequential sequential_from(std::string_view architecture, const Container& c, const std::string& prefix) {
  try {
    const json j = json::parse(architecture);
    Shape input = j.at("input_shape").get<Shape>();
    std::vector<LayerSpec> layers;
    for (const auto& l : j.at("layers")) layers.push_back(layer_from_json(l));
    std::vector<LayerParams> params(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (!has_parameters(layers[i])) continue;
      const std::string base = prefix + "layer" + std::to_string(i);
      params[i] = LayerParams{c.tensor(base + ".weight"), c.tensor(base + ".bias")};
    }
    return Sequential(std::move(input), std::move(layers), std::move(params));
  } catch (const json::exception& e) {
    throw ContainerError(std::string("model structure: ") + e.what());
  }
}

Container to_container(const Sequential& model, Metadata meta) {
  Container c;
  c.kind = "sequential";
  c.meta = std::move(meta);
  c.structure = architecture_json(model);
  append_tensors(model, "", c.tensors);
  return c;
}

Sequential sequential_from_container(const Container& c) {
  if (c.kind != "sequential") {
    throw ContainerError("expected a sequential model container, found '" + c.kind + "'");
  }
  return sequential_from(c.structure, c, "");
}

void save_model(const std::filesystem::path& path, const Sequential& model, Metadata meta) {
  write_container(path, to_container(model, std::move(meta)));
}

Sequential load_model(const std::filesystem::path& path) {
  return sequential_from_container(read_container(path));
}

}  // namespace bswitch
