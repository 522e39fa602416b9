#pragma once

// Flat-key experiment configuration.
//
//   # comment
//   dataset = mnist
//   train.epochs = 5
//
// Every key has a built-in default; unknown keys are rejected. Later
// assignments (file, then command-line overrides) win.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "bswitch/container.hpp"

namespace bswitch {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ExperimentConfig {
 public:
  /// All keys at their defaults.
  ExperimentConfig();

  static ExperimentConfig parse(std::string_view text, std::string_view origin = "<config>");
  static ExperimentConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  /// Applies "key=value" (throws ConfigError on malformed text or unknown key).
  void apply_override(std::string_view assignment);

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;
  std::vector<std::size_t> get_size_list(const std::string& key) const;

  static bool known_key(const std::string& key);
  static const std::vector<std::string>& keys();

  /// Canonical "key = value" text, sorted by key.
  std::string render() const;
  Metadata as_metadata() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace bswitch
