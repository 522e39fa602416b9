#include "bswitch/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace bswitch {

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> table = {
      {"dataset", "mnist"},
      {"data.mnist_images", ""},
      {"data.mnist_labels", ""},
      {"data.cifar_files", ""},
      {"data.test_size", "1000"},
      {"data.train_size", "0"},
      {"data.attack_size", "50"},
      {"model.preset", "mnist_cnn"},
      {"train.learning_rate", "0.01"},
      {"train.momentum", "0.9"},
      {"train.batch_size", "128"},
      {"train.epochs", "5"},
      {"train.pool_size", "1"},
      {"phase2.epochs", "1"},
      {"defense", "regular"},
      {"sap.sample_count", "0"},
      {"switching.split_index", "0"},
      {"attack", "cw"},
      {"fgsm.epsilon", "0.1"},
      {"cw.kappa", "0"},
      {"cw.steps", "100"},
      {"cw.step_size", "0.1"},
      {"cw.bs_steps", "10"},
      {"cw.c_init", "1"},
      {"cw.c_max", "1000"},
      {"eval.samples_per_example", "1"},
      {"graddist.samples", "100"},
      {"graddist.pixels", "50"},
      {"graddist.bins", "20"},
      {"graddist.example", "0"},
      {"sweep.channels", "1,3,5"},
      {"seed.train", "1"},
      {"seed.data", "2"},
      {"seed.attack", "3"},
      {"seed.eval", "4"},
      {"seed.channel", "5"},
      {"workers", "1"},
      {"out", "out"},
  };
  return table;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("config key '" + key + "': '" + text + "' is not a valid number");
  }
  return value;
}

}  // namespace

ExperimentConfig::ExperimentConfig() : values_(defaults()) {}

bool ExperimentConfig::known_key(const std::string& key) { return defaults().count(key) > 0; }

const std::vector<std::string>& ExperimentConfig::keys() {
  static const std::vector<std::string> all = [] {
    std::vector<std::string> k;
    for (const auto& [key, _] : defaults()) k.push_back(key);
    return k;
  }();
  return all;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (!known_key(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
}

void ExperimentConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

ExperimentConfig ExperimentConfig::parse(std::string_view text, std::string_view origin) {
  ExperimentConfig config;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    try {
      config.apply_override(body);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  return parse(read_file(path), path.string());
}

const std::string& ExperimentConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double ExperimentConfig::get_double(const std::string& key) const {
  return parse_number<double>(key, get(key));
}

std::size_t ExperimentConfig::get_size(const std::string& key) const {
  return parse_number<std::size_t>(key, get(key));
}

std::uint64_t ExperimentConfig::get_u64(const std::string& key) const {
  return parse_number<std::uint64_t>(key, get(key));
}

std::vector<std::string> ExperimentConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::size_t> ExperimentConfig::get_size_list(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const auto& item : get_list(key)) out.push_back(parse_number<std::size_t>(key, item));
  return out;
}

std::string ExperimentConfig::render() const {
  std::string out;
  for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
  return out;
}

Metadata ExperimentConfig::as_metadata() const {
  Metadata meta;
  for (const auto& [key, value] : values_) meta["config." + key] = value;
  return meta;
}

}  // namespace bswitch
