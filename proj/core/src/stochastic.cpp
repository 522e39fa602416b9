#include "bswitch/stochastic.hpp"

#include <cmath>
#include <numeric>

#include "json.hpp"

namespace bswitch {

namespace {

using json = nlohmann::json;

std::vector<LayerParams> zeros_like(const Sequential& model) {
  std::vector<LayerParams> out;
  out.reserve(model.layer_count());
  for (const auto& p : model.params()) {
    out.push_back(LayerParams{Tensor(p.weight.shape, 0.0), Tensor(p.bias.shape, 0.0)});
  }
  return out;
}

std::vector<LayerParams> collect_grads(const Sequential& model, std::span<const ParamVars> pv,
                                       const GradientMap& grads) {
  std::vector<LayerParams> out(model.layer_count());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (!pv[i].present) continue;
    out[i] = LayerParams{grads.at(pv[i].weight), grads.at(pv[i].bias)};
  }
  return out;
}

void apply_sgd(Sequential& model, std::span<const ParamVars> pv, const GradientMap& grads,
               std::vector<LayerParams>& velocity, const TrainConfig& config) {
  auto& params = model.mutable_params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!pv[i].present) continue;
    sgd_momentum_update(params[i].weight, grads.at(pv[i].weight), velocity[i].weight,
                        config.learning_rate, config.momentum);
    sgd_momentum_update(params[i].bias, grads.at(pv[i].bias), velocity[i].bias,
                        config.learning_rate, config.momentum);
  }
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < pred.size(); ++r) correct += pred[r] == labels[r];
  return correct;
}

}  // namespace

ChannelDraw ChannelSelector::draw(std::size_t channel_count) {
  if (channel_count == 0) throw std::invalid_argument("ChannelSelector: no channels");
  std::uniform_int_distribution<std::size_t> pick(0, channel_count - 1);
  return ChannelDraw{pick(rng_), counter_++};
}

// ---- SwitchingModel ----------------------------------------------------------------

SwitchingModel::SwitchingModel(std::vector<Sequential> channels, Sequential upper,
                               std::uint64_t selector_seed)
    : channels_(std::move(channels)), upper_(std::move(upper)), selector_seed_(selector_seed) {
  if (channels_.empty()) throw std::invalid_argument("SwitchingModel: needs at least one channel");
  for (std::size_t i = 1; i < channels_.size(); ++i) {
    if (!channels_[i].same_architecture(channels_[0])) {
      throw std::invalid_argument("SwitchingModel: channel " + std::to_string(i) +
                                  " differs in architecture from channel 0");
    }
  }
  if (channels_[0].output_shape() != upper_.input_shape()) {
    throw ShapeError("SwitchingModel: channel output " + to_string(channels_[0].output_shape()) +
                     " does not feed upper input " + to_string(upper_.input_shape()));
  }
}

Sequential SwitchingModel::composed(std::size_t i) const { return merge_models(channels_.at(i), upper_); }

SwitchingModel build_switching(std::span<const Sequential> submodels, std::size_t split_index,
                               std::uint64_t upper_seed, std::uint64_t selector_seed) {
  if (submodels.empty()) throw std::invalid_argument("build_switching: no submodels");
  std::vector<Sequential> channels;
  channels.reserve(submodels.size());
  Sequential upper_template;
  for (std::size_t i = 0; i < submodels.size(); ++i) {
    if (!submodels[i].same_architecture(submodels[0])) {
      throw std::invalid_argument("build_switching: submodel " + std::to_string(i) +
                                  " has a different architecture from submodel 0");
    }
    auto [lower, upper] = split_model(submodels[i], split_index);
    channels.push_back(std::move(lower));
    if (i == 0) upper_template = std::move(upper);
  }
  Sequential upper(upper_template.input_shape(), upper_template.layers(), upper_seed);
  return SwitchingModel(std::move(channels), std::move(upper), selector_seed);
}

SwitchOutput forward(const SwitchingModel& model, Tape& tape, Var x, Mode mode,
                     ChannelSelector& selector, Rng* dropout_rng,
                     std::optional<std::size_t> channel_override) {
  ChannelDraw draw;
  if (channel_override) {
    if (*channel_override >= model.channel_count()) {
      throw std::out_of_range("switching forward: channel override " +
                              std::to_string(*channel_override) + " but only " +
                              std::to_string(model.channel_count()) + " channels");
    }
    draw = ChannelDraw{*channel_override, selector.draws()};
  } else {
    draw = selector.draw(model.channel_count());
  }
  Var h = forward(model.channel(draw.channel_index), tape, x, mode, dropout_rng);
  Var logits = forward(model.upper(), tape, h, mode, dropout_rng);
  return SwitchOutput{logits, draw};
}

SwitchInference infer(const SwitchingModel& model, const Tensor& batch, ChannelSelector& selector,
                      std::optional<std::size_t> channel_override) {
  Tape tape;
  auto out = forward(model, tape, tape.constant(batch), Mode::kInfer, selector, nullptr, channel_override);
  return SwitchInference{out.logits.value(), out.draw};
}

// ---- phase 2 ----------------------------------------------------------------------

Phase2Trainer::Phase2Trainer(SwitchingModel& model, TrainConfig config)
    : model_(model), config_(config), selector_(derive_seed(model.selector_seed(), 2)) {
  config_.validate();
  for (const auto& c : model_.channels()) channel_velocity_.push_back(zeros_like(c));
  upper_velocity_ = zeros_like(model_.upper());
}

Phase2Trainer::StepReport Phase2Trainer::step(const Tensor& images, std::span<const int> labels,
                                              Rng& dropout_rng, bool keep_gradients) {
  const ChannelDraw draw = selector_.draw(model_.channel_count());
  const std::size_t active = draw.channel_index;

  Tape tape;
  // Every channel is placed on the tape as trainable, active or not.
  std::vector<std::vector<ParamVars>> channel_vars;
  channel_vars.reserve(model_.channel_count());
  for (const auto& c : model_.channels()) channel_vars.push_back(bind_parameters(tape, c, true));
  const auto upper_vars = bind_parameters(tape, model_.upper(), true);

  Var h = forward(model_.channel(active), channel_vars[active], tape.constant(images), Mode::kTrain,
                  &dropout_rng);
  Var logits = forward(model_.upper(), upper_vars, h, Mode::kTrain, &dropout_rng);
  Var loss = cross_entropy(logits, labels);
  const GradientMap grads = backward(tape, loss);

  StepReport report;
  report.active_channel = active;
  report.loss = loss.value().item();
  report.correct = count_correct(logits.value(), labels);
  if (keep_gradients) {
    for (std::size_t c = 0; c < model_.channel_count(); ++c) {
      report.channel_grads.push_back(collect_grads(model_.channel(c), channel_vars[c], grads));
    }
    report.upper_grads = collect_grads(model_.upper(), upper_vars, grads);
  }

  apply_sgd(model_.mutable_channels()[active], channel_vars[active], grads, channel_velocity_[active],
            config_);
  apply_sgd(model_.mutable_upper(), upper_vars, grads, upper_velocity_, config_);
  return report;
}

Phase2Result train_phase2(SwitchingModel model, const Dataset& dataset, const TrainConfig& config) {
  Phase2Trainer trainer(model, config);
  std::vector<std::size_t> active;
  auto step = [&](const Tensor& images, std::span<const int> labels, Rng& rng) {
    const auto report = trainer.step(images, labels, rng);
    active.push_back(report.active_channel);
    return detail::StepOutcome{report.loss, report.correct};
  };
  auto trace = detail::run_epochs(dataset, config, step);
  return Phase2Result{std::move(model), std::move(trace), std::move(active)};
}

// ---- SAP ----------------------------------------------------------------------------

namespace {

std::size_t default_prune_layer(const Sequential& base) {
  const std::size_t final_dense = default_split_index(base);
  for (std::size_t i = final_dense; i-- > 0;) {
    if (std::holds_alternative<layer::Dense>(base.layers()[i])) return i;
  }
  throw std::invalid_argument("SapModel: no dense layer below the classifier");
}

}  // namespace

SapModel::SapModel(Sequential base_model, std::size_t samples)
    : SapModel(base_model, default_prune_layer(base_model), samples) {}

SapModel::SapModel(Sequential base_model, std::size_t prune_layer, std::size_t samples)
    : base(std::move(base_model)), prune_after(prune_layer), sample_count(samples) {
  if (prune_after + 1 >= base.layer_count()) {
    throw std::out_of_range("SapModel: prune position must precede the last layer");
  }
  if (base.layer_output_shape(prune_after).size() != 1) {
    throw std::invalid_argument("SapModel: layer " + std::to_string(prune_after) +
                                " does not produce an activation vector");
  }
}

std::vector<double> sap_mask(std::span<const double> activations, std::size_t samples, Rng& rng) {
  std::vector<double> mask(activations.size(), 0.0);
  std::vector<double> weight(activations.size());
  for (std::size_t j = 0; j < activations.size(); ++j) weight[j] = std::abs(activations[j]);
  const double total = std::accumulate(weight.begin(), weight.end(), 0.0);
  if (total == 0.0) {
    std::fill(mask.begin(), mask.end(), 1.0);
    return mask;
  }
  std::discrete_distribution<std::size_t> pick(weight.begin(), weight.end());
  const auto r = static_cast<double>(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t j = pick(rng);
    if (mask[j] != 0.0) continue;
    const double p = weight[j] / total;
    // 1 - (1-p)^r, without cancellation for small p.
    mask[j] = 1.0 / -std::expm1(r * std::log1p(-p));
  }
  return mask;
}

Var sap_forward(const SapModel& model, Tape& tape, Var x, Mode mode, Rng& rng, Rng* dropout_rng) {
  const auto params = bind_parameters(tape, model.base, false);
  const std::size_t cut = model.prune_after + 1;
  Var a = forward_layers(model.base, params, x, mode, dropout_rng, 0, cut);
  const std::size_t width = model.width();
  const std::size_t rows = a.value().size() / width;
  Tensor mask(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = sap_mask(std::span<const double>(a.value().values.data() + r * width, width),
                              model.effective_samples(), rng);
    std::copy(row.begin(), row.end(), mask.values.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  Var pruned = mul(a, tape.constant(std::move(mask)));
  return forward_layers(model.base, params, pruned, mode, dropout_rng, cut, model.base.layer_count());
}

Tensor sap_infer(const SapModel& model, const Tensor& batch, Rng& rng) {
  Tape tape;
  return sap_forward(model, tape, tape.constant(batch), Mode::kInfer, rng, nullptr).value();
}

// ---- persistence ----------------------------------------------------------------------

Container to_container(const SwitchingModel& model, Metadata meta) {
  Container c;
  c.kind = "switching";
  c.meta = std::move(meta);
  json s;
  s["channel_count"] = model.channel_count();
  s["selector_seed"] = model.selector_seed();
  s["channel"] = json::parse(architecture_json(model.channel(0)));
  s["upper"] = json::parse(architecture_json(model.upper()));
  c.structure = s.dump();
  for (std::size_t i = 0; i < model.channel_count(); ++i) {
    append_tensors(model.channel(i), "channel" + std::to_string(i) + ".", c.tensors);
  }
  append_tensors(model.upper(), "upper.", c.tensors);
  return c;
}

SwitchingModel switching_from_container(const Container& c) {
  if (c.kind != "switching") {
    throw ContainerError("expected a switching model container, found '" + c.kind + "'");
  }
  try {
    const json s = json::parse(c.structure);
    const auto k = s.at("channel_count").get<std::size_t>();
    const std::string channel_arch = s.at("channel").dump();
    std::vector<Sequential> channels;
    for (std::size_t i = 0; i < k; ++i) {
      channels.push_back(sequential_from(channel_arch, c, "channel" + std::to_string(i) + "."));
    }
    Sequential upper = sequential_from(s.at("upper").dump(), c, "upper.");
    return SwitchingModel(std::move(channels), std::move(upper), s.at("selector_seed").get<std::uint64_t>());
  } catch (const json::exception& e) {
    throw ContainerError(std::string("switching structure: ") + e.what());
  }
}

void save_switching(const std::filesystem::path& path, const SwitchingModel& model, Metadata meta) {
  write_container(path, to_container(model, std::move(meta)));
}

SwitchingModel load_switching(const std::filesystem::path& path) {
  return switching_from_container(read_container(path));
}

}  // namespace bswitch
