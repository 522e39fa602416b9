#include "bswitch/experiment.hpp"

#include <algorithm>
#include <numeric>

#include "bswitch/container.hpp"
#include "bswitch/eval.hpp"

namespace bswitch {

namespace fs = std::filesystem;

namespace {

fs::path output_dir(const ExperimentConfig& config) {
  fs::path out = config.get("out");
  fs::create_directories(out);
  return out;
}

void echo_config(const ExperimentConfig& config, const fs::path& out, const std::string& command) {
  atomic_write_file(out / (command + ".config"), config.render());
}

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + ": no path configured");
  if (!fs::exists(p)) throw ConfigError(what + ": " + p.string() + " does not exist");
}

Metadata with(Metadata meta, std::initializer_list<std::pair<const std::string, std::string>> extra) {
  for (const auto& [k, v] : extra) meta[k] = v;
  return meta;
}

std::string trace_text(const std::vector<EpochStats>& trace) {
  std::string s;
  for (const auto& e : trace) {
    if (!s.empty()) s += ";";
    s += std::to_string(e.epoch) + ":" + format_double(e.mean_loss) + ":" + format_double(e.train_accuracy);
  }
  return s;
}

std::size_t split_index_for(const ExperimentConfig& config, const Sequential& model) {
  const std::size_t configured = config.get_size("switching.split_index");
  return configured == 0 ? default_split_index(model) : configured;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) return Tensor({0});
  Shape s{items.size()};
  s.insert(s.end(), items[0].shape.begin(), items[0].shape.end());
  Tensor out(s);
  const std::size_t stride = items[0].size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::copy(items[i].values.begin(), items[i].values.end(),
              out.values.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

Tensor ints_tensor(std::span<const int> v) {
  Tensor t({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t.values[i] = v[i];
  return t;
}

}  // namespace

Split load_experiment_data(const ExperimentConfig& config) {
  const std::string& name = config.get("dataset");
  Dataset full;
  if (name == "mnist") {
    const fs::path images = config.get("data.mnist_images");
    const fs::path labels = config.get("data.mnist_labels");
    require_file(images, "data.mnist_images");
    require_file(labels, "data.mnist_labels");
    full = load_mnist_idx(images, labels);
  } else if (name == "cifar10") {
    std::vector<fs::path> files;
    for (const auto& f : config.get_list("data.cifar_files")) {
      require_file(f, "data.cifar_files");
      files.emplace_back(f);
    }
    if (files.empty()) throw ConfigError("data.cifar_files: no files configured");
    full = load_cifar10_bin(files);
  } else {
    throw ConfigError("dataset must be 'mnist' or 'cifar10', got '" + name + "'");
  }
  const std::uint64_t seed = config.get_u64("seed.data");
  Split split = holdout_split(full, config.get_size("data.test_size"), seed);
  const std::size_t train_size = config.get_size("data.train_size");
  if (train_size > 0 && train_size < split.train.size()) {
    split.train = subset(split.train, train_size, derive_seed(seed, 1));
  }
  return split;
}

AttackSet make_attack_set(const Dataset& test, std::size_t n, std::uint64_t seed) {
  AttackSet set;
  set.test_indices = subset_indices(test, n, seed);
  for (std::size_t i : set.test_indices) {
    set.examples.push_back(test.example(i));
    set.labels.push_back(test.labels[i]);
  }
  set.targets = random_targets(set.labels, derive_seed(seed, 1));
  return set;
}

TrainConfig phase1_train_config(const ExperimentConfig& config) {
  TrainConfig tc;
  tc.learning_rate = config.get_double("train.learning_rate");
  tc.momentum = config.get_double("train.momentum");
  tc.batch_size = config.get_size("train.batch_size");
  tc.epochs = config.get_size("train.epochs");
  tc.seed = config.get_u64("seed.train");
  tc.validate();
  return tc;
}

TrainConfig phase2_train_config(const ExperimentConfig& config) {
  TrainConfig tc = phase1_train_config(config);
  tc.epochs = config.get_size("phase2.epochs");
  tc.seed = derive_seed(config.get_u64("seed.train"), 2000);
  return tc;
}

CwConfig cw_config(const ExperimentConfig& config) {
  CwConfig cw;
  cw.kappa = config.get_double("cw.kappa");
  cw.descent_steps = config.get_size("cw.steps");
  cw.step_size = config.get_double("cw.step_size");
  cw.binary_search_steps = config.get_size("cw.bs_steps");
  cw.c_init = config.get_double("cw.c_init");
  cw.c_max = config.get_double("cw.c_max");
  cw.validate();
  return cw;
}

AttackConfig attack_config(const ExperimentConfig& config) {
  const std::string& kind = config.get("attack");
  if (kind == "cw") return cw_config(config);
  if (kind == "fgsm") {
    FgsmConfig f;
    f.epsilon = config.get_double("fgsm.epsilon");
    f.validate();
    return f;
  }
  throw ConfigError("attack must be 'fgsm' or 'cw', got '" + kind + "'");
}

Sequential make_preset(const ExperimentConfig& config, std::uint64_t seed) {
  const std::string& preset = config.get("model.preset");
  if (preset == "mnist_cnn") return preset_mnist_cnn(seed);
  if (preset == "cifar_cnn") return preset_cifar_cnn(seed);
  throw ConfigError("model.preset must be 'mnist_cnn' or 'cifar_cnn', got '" + preset + "'");
}

std::vector<Sequential> train_pool(const ExperimentConfig& config, const Dataset& train, std::size_t count) {
  const std::uint64_t base = config.get_u64("seed.train");
  std::vector<Sequential> pool;
  for (std::size_t i = 0; i < count; ++i) {
    TrainConfig tc = phase1_train_config(config);
    tc.seed = derive_seed(base, 1000 + i);
    pool.push_back(train_sgd(make_preset(config, derive_seed(base, i)), train, tc).model);
  }
  return pool;
}

SweepSetup sweep_setup(const ExperimentConfig& config, const Split& data, std::span<const Sequential> pool,
                       const AttackSet& attacks) {
  if (pool.empty()) throw ConfigError("sweep: empty submodel pool");
  const std::uint64_t channel_seed = config.get_u64("seed.channel");
  SweepSetup setup;
  setup.pool = pool;
  setup.split_index = split_index_for(config, pool[0]);
  setup.train = &data.train;
  setup.test = &data.test;
  setup.phase2 = phase2_train_config(config);
  setup.attack_examples = attacks.examples;
  setup.attack_targets = attacks.targets;
  setup.cw = cw_config(config);
  setup.upper_seed = derive_seed(channel_seed, 1);
  setup.selector_seed = channel_seed;
  setup.attack_seed = config.get_u64("seed.attack");
  setup.eval_seed = config.get_u64("seed.eval");
  setup.samples_per_example = config.get_size("eval.samples_per_example");
  setup.workers = config.get_size("workers");
  return setup;
}

ModelRef LoadedTarget::ref() const {
  return std::visit([](const auto& m) { return ModelRef(m); }, model);
}

LoadedTarget load_target(const ExperimentConfig& config, const fs::path& model_file) {
  require_file(model_file, "model file");
  Container c = read_container(model_file);
  const std::string& defense = config.get("defense");
  if (c.kind == "switching") return LoadedTarget{switching_from_container(c)};
  if (c.kind != "sequential") throw ContainerError(model_file.string() + ": not a model container");
  Sequential base = sequential_from_container(c);
  if (defense == "sap") return LoadedTarget{SapModel(std::move(base), config.get_size("sap.sample_count"))};
  if (defense == "regular") return LoadedTarget{std::move(base)};
  throw ConfigError("defense '" + defense + "' does not apply to a sequential model file");
}

std::vector<fs::path> cmd_train(const ExperimentConfig& config) {
  const fs::path out = output_dir(config);
  const Split data = load_experiment_data(config);
  const std::size_t pool = config.get_size("train.pool_size");
  if (pool == 0) throw ConfigError("train.pool_size must be >= 1");
  const std::uint64_t base = config.get_u64("seed.train");
  std::vector<fs::path> files;
  for (std::size_t i = 0; i < pool; ++i) {
    TrainConfig tc = phase1_train_config(config);
    tc.seed = derive_seed(base, 1000 + i);
    const std::uint64_t init_seed = derive_seed(base, i);
    TrainResult r = train_sgd(make_preset(config, init_seed), data.train, tc);
    const double acc = accuracy(r.model, data.test);
    char name[32];
    std::snprintf(name, sizeof name, "model_%03zu.bsw", i);
    files.push_back(out / name);
    save_model(files.back(), r.model,
               with(config.as_metadata(), {{"role", "submodel"},
                                           {"pool_index", std::to_string(i)},
                                           {"init_seed", std::to_string(init_seed)},
                                           {"train_seed", std::to_string(tc.seed)},
                                           {"trace", trace_text(r.trace)},
                                           {"test_accuracy", format_double(acc)}}));
  }
  echo_config(config, out, "train");
  return files;
}

fs::path cmd_build_switch(const ExperimentConfig& config, std::span<const fs::path> submodel_files) {
  if (submodel_files.empty()) throw ConfigError("build-switch: no submodel files given");
  std::vector<Sequential> submodels;
  std::string sources;
  for (const auto& f : submodel_files) {
    require_file(f, "submodel");
    submodels.push_back(load_model(f));
    sources += (sources.empty() ? "" : ",") + f.filename().string();
  }
  const fs::path out = output_dir(config);
  const Split data = load_experiment_data(config);
  const std::uint64_t channel_seed = config.get_u64("seed.channel");
  SwitchingModel built = build_switching(submodels, split_index_for(config, submodels[0]),
                                         derive_seed(channel_seed, 1), channel_seed);
  Phase2Result trained = train_phase2(std::move(built), data.train, phase2_train_config(config));
  const double acc = model_accuracy(trained.model, data.test, config.get_u64("seed.eval"));
  const fs::path file = out / "switching.bsw";
  save_switching(file, trained.model,
                 with(config.as_metadata(), {{"role", "switching"},
                                             {"sources", sources},
                                             {"trace", trace_text(trained.trace)},
                                             {"test_accuracy", format_double(acc)}}));
  echo_config(config, out, "build-switch");
  return file;
}

fs::path cmd_attack(const ExperimentConfig& config, const fs::path& model_file) {
  const LoadedTarget target = load_target(config, model_file);
  const fs::path out = output_dir(config);
  const Split data = load_experiment_data(config);
  const AttackSet set = make_attack_set(data.test, config.get_size("data.attack_size"), config.get_u64("seed.attack"));
  const AttackConfig attack = attack_config(config);
  const auto results = attack_all(target.ref(), set.examples, set.targets, attack,
                                  config.get_u64("seed.attack"), config.get_size("workers"));

  std::vector<Tensor> adv;
  Tensor l2({results.size()}), c_final({results.size()}), success({results.size()});
  std::string csv = csv_comment_block(config.as_metadata());
  csv += "index,test_index,label,target,l2,c_final,craft_success,queries\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    adv.push_back(results[i].x_adv);
    l2.values[i] = results[i].l2;
    c_final.values[i] = results[i].c_final;
    success.values[i] = results[i].craft_success ? 1.0 : 0.0;
    csv += std::to_string(i) + "," + std::to_string(set.test_indices[i]) + "," +
           std::to_string(set.labels[i]) + "," + std::to_string(set.targets[i]) + "," +
           format_double(results[i].l2) + "," + format_double(results[i].c_final) + "," +
           (results[i].craft_success ? "1" : "0") + "," + std::to_string(results[i].queries) + "\n";
  }
  const bool is_cw = std::holds_alternative<CwConfig>(attack);
  const double param = is_cw ? std::get<CwConfig>(attack).kappa : std::get<FgsmConfig>(attack).epsilon;

  Container archive;
  archive.kind = "adversarial_archive";
  archive.meta = with(config.as_metadata(), {{"model_file", model_file.filename().string()},
                                             {"model_kind", std::string(target.ref().name())},
                                             {"attack", is_cw ? "cw" : "fgsm"},
                                             {"attack_param", format_double(param)}});
  archive.tensors = {{"x_adv", stack(adv)},
                     {"x_clean", stack(set.examples)},
                     {"labels", ints_tensor(set.labels)},
                     {"targets", ints_tensor(set.targets)},
                     {"l2", l2},
                     {"c_final", c_final},
                     {"craft_success", success}};
  const fs::path file = out / "attack.bsw";
  write_container(file, archive);
  atomic_write_file(out / "attack_results.csv", csv);
  echo_config(config, out, "attack");
  return file;
}

fs::path cmd_eval(const ExperimentConfig& config, const fs::path& model_file, const fs::path& archive_file) {
  const LoadedTarget target = load_target(config, model_file);
  require_file(archive_file, "archive");
  const Container archive = read_container(archive_file);
  if (archive.kind != "adversarial_archive") {
    throw ContainerError(archive_file.string() + ": not an adversarial-example archive");
  }
  const fs::path out = output_dir(config);
  const Split data = load_experiment_data(config);

  const Tensor& x_adv = archive.tensor("x_adv");
  const Tensor& l2 = archive.tensor("l2");
  const Tensor& c_final = archive.tensor("c_final");
  const Tensor& success = archive.tensor("craft_success");
  const Tensor& target_t = archive.tensor("targets");
  const std::size_t n = target_t.size();
  const Shape example_shape(x_adv.shape.begin() + 1, x_adv.shape.end());
  const std::size_t stride = numel(example_shape);
  std::vector<AttackResult> results(n);
  std::vector<int> targets(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto first = x_adv.values.begin() + static_cast<std::ptrdiff_t>(i * stride);
    results[i].x_adv = Tensor(example_shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(stride)));
    results[i].l2 = l2.values[i];
    results[i].c_final = c_final.values[i];
    results[i].craft_success = success.values[i] != 0.0;
    targets[i] = static_cast<int>(target_t.values[i]);
  }
  const std::uint64_t eval_seed = config.get_u64("seed.eval");
  EvalReport report = fooling_ratio(target.ref(), results, targets, eval_seed,
                                    config.get_size("eval.samples_per_example"));
  report.attack_id = archive.meta.count("attack") ? archive.meta.at("attack") : "unknown";
  report.attack_param = archive.meta.count("attack_param") ? std::stod(archive.meta.at("attack_param")) : 0.0;
  report.attack_seed = archive.meta.count("config.seed.attack") ? std::stoull(archive.meta.at("config.seed.attack")) : 0;
  report.test_accuracy = model_accuracy(target.ref(), data.test, eval_seed);

  const fs::path file = out / "eval.csv";
  const EvalReport reports[] = {report};
  atomic_write_file(file, report_csv(reports, with(config.as_metadata(),
                                                   {{"model_file", model_file.filename().string()},
                                                    {"archive", archive_file.filename().string()}})));
  echo_config(config, out, "eval");
  return file;
}

fs::path cmd_sweep(const ExperimentConfig& config, std::span<const fs::path> pool_files) {
  const fs::path out = output_dir(config);
  const Split data = load_experiment_data(config);
  const auto counts = config.get_size_list("sweep.channels");
  if (counts.empty()) throw ConfigError("sweep.channels: no channel counts given");
  const std::size_t max_k = *std::max_element(counts.begin(), counts.end());

  std::vector<Sequential> pool;
  if (pool_files.empty()) {
    pool = train_pool(config, data.train, max_k);
  } else {
    for (const auto& f : pool_files) {
      require_file(f, "submodel");
      pool.push_back(load_model(f));
    }
  }
  const AttackSet set = make_attack_set(data.test, config.get_size("data.attack_size"), config.get_u64("seed.attack"));
  const SweepResult result = channel_sweep(counts, sweep_setup(config, data, pool, set));

  const fs::path file = out / "sweep.csv";
  atomic_write_file(file, sweep_csv(result.rows, config.as_metadata()));
  echo_config(config, out, "sweep");
  return file;
}

fs::path cmd_graddist(const ExperimentConfig& config, const fs::path& model_file) {
  const LoadedTarget target = load_target(config, model_file);
  const fs::path out = output_dir(config);
  const Split data = load_experiment_data(config);
  const AttackSet set = make_attack_set(data.test, config.get_size("data.attack_size"), config.get_u64("seed.attack"));
  const std::size_t which = config.get_size("graddist.example");
  if (which >= set.examples.size()) throw ConfigError("graddist.example exceeds data.attack_size");
  const Tensor& x = set.examples[which];

  const std::size_t n_pixels = std::min(config.get_size("graddist.pixels"), x.size());
  std::vector<std::size_t> pixels(x.size());
  std::iota(pixels.begin(), pixels.end(), std::size_t{0});
  Rng rng(derive_seed(config.get_u64("seed.eval"), 77));
  std::shuffle(pixels.begin(), pixels.end(), rng);
  pixels.resize(n_pixels);
  std::sort(pixels.begin(), pixels.end());

  const auto hist = sample_gradient_distribution(target.ref(), x, set.targets[which],
                                                 config.get_size("graddist.samples"), pixels,
                                                 config.get_u64("seed.eval"), config.get_size("graddist.bins"));
  const fs::path file = out / "graddist.csv";
  atomic_write_file(file, gradient_csv(hist, with(config.as_metadata(),
                                                  {{"model_file", model_file.filename().string()},
                                                   {"model_kind", std::string(target.ref().name())},
                                                   {"target", std::to_string(set.targets[which])}})));
  echo_config(config, out, "grad-dist");
  return file;
}

}  // namespace bswitch
