#pragma once

// "BSW1" container: the on-disk format for models, switching models and
// adversarial-example archives.
//
//   bytes 0..3   "BSW1"
//   bytes 4..11  manifest length L, unsigned 64-bit little-endian
//   next L bytes manifest, UTF-8 JSON:
//                {"kind": ..., "meta": {..}, "structure": {..},
//                 "tensors": [{"name": .., "shape": [..]}, ..]}
//   remainder    tensor payloads in manifest order, each value an IEEE-754
//                binary64 in little-endian byte order
//
// Readers reject trailing bytes and short payloads.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "bswitch/tensor.hpp"

namespace bswitch {

inline constexpr std::string_view kContainerMagic = "BSW1";

/// Flat key/value metadata: resolved configuration, seeds, provenance.
using Metadata = std::map<std::string, std::string>;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  std::string kind;
  Metadata meta;
  /// JSON text describing the object layout (layer specs etc.); "{}" if none.
  std::string structure = "{}";
  std::vector<NamedTensor> tensors;

  const Tensor& tensor(std::string_view name) const;
};

class ContainerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string encode_container(const Container& c);
Container decode_container(std::string_view bytes);

/// Writes via a sibling temporary file and rename, so readers never observe
/// a partial file.
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

void atomic_write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace bswitch
