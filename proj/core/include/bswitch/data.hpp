#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bswitch/tensor.hpp"

namespace bswitch {

inline constexpr int kNumClasses = 10;

/// Raised for malformed IDX / CIFAR files. `what()` names the file and the
/// specific defect ("bad magic", "truncated", "count mismatch", ...).
class DataFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images [N,H,W,C] scaled to [0,1] plus integer labels 0..9.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::string name;

  std::size_t size() const { return labels.size(); }
  Shape example_shape() const;
  /// One image as [H,W,C].
  Tensor example(std::size_t i) const;
  /// Images at `indices` stacked as [B,H,W,C].
  Tensor gather_images(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  Dataset gather(std::span<const std::size_t> indices) const;
  /// Checks shape/label invariants; throws std::invalid_argument.
  void validate() const;
};

Dataset load_mnist_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path);
void write_mnist_idx(const Dataset& dataset, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path);

Dataset load_cifar10_bin(std::span<const std::filesystem::path> paths);
void write_cifar10_bin(const Dataset& dataset, const std::filesystem::path& path);

/// Seeded sample of `n` examples without replacement, stratified by label:
/// each class contributes floor(n/10) (remainder spread over random classes),
/// and classes short of their quota are topped up from the remaining pool.
std::vector<std::size_t> subset_indices(const Dataset& dataset, std::size_t n, std::uint64_t seed);
Dataset subset(const Dataset& dataset, std::size_t n, std::uint64_t seed);

/// Stratified held-out split: `test` is subset(n_test), `train` the rest in
/// original order.
struct Split {
  Dataset train;
  Dataset test;
};
Split holdout_split(const Dataset& dataset, std::size_t n_test, std::uint64_t seed);

/// Minibatch index lists for one epoch; the order is reshuffled per epoch
/// from (seed, epoch). The last batch may be short.
std::vector<std::vector<std::size_t>> batches(const Dataset& dataset, std::size_t batch_size,
                                              std::uint64_t seed, std::size_t epoch);

}  // namespace bswitch
