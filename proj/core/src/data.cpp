#include "bswitch/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iterator>
#include <numeric>

#include "bswitch/rng.hpp"

namespace bswitch {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarPlane = kCifarSide * kCifarSide;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarPlane;

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFormatError(path.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v >> 24));
  b.push_back(static_cast<unsigned char>(v >> 16));
  b.push_back(static_cast<unsigned char>(v >> 8));
  b.push_back(static_cast<unsigned char>(v));
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

}  // namespace

Shape Dataset::example_shape() const {
  if (images.shape.size() != 4) return {};
  return {images.shape[1], images.shape[2], images.shape[3]};
}

Tensor Dataset::example(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("Dataset::example: index " + std::to_string(i));
  const Shape s = example_shape();
  const std::size_t stride = numel(s);
  const auto first = images.values.begin() + static_cast<std::ptrdiff_t>(i * stride);
  return Tensor(s, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(stride)));
}

Tensor Dataset::gather_images(std::span<const std::size_t> indices) const {
  const Shape s = example_shape();
  const std::size_t stride = numel(s);
  Tensor out({indices.size(), s[0], s[1], s[2]});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw std::out_of_range("Dataset::gather: index out of range");
    std::copy_n(images.values.begin() + static_cast<std::ptrdiff_t>(indices[k] * stride), stride,
                out.values.begin() + static_cast<std::ptrdiff_t>(k * stride));
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::gather(std::span<const std::size_t> indices) const {
  return Dataset{gather_images(indices), gather_labels(indices), name};
}

void Dataset::validate() const {
  if (images.shape.size() != 4) throw std::invalid_argument("Dataset: images must be [N,H,W,C]");
  if (images.shape[0] != labels.size()) {
    throw std::invalid_argument("Dataset: " + std::to_string(images.shape[0]) + " images but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l < 0 || l >= kNumClasses) throw std::invalid_argument("Dataset: label out of range");
  }
}

Dataset load_mnist_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path) {
  const auto img = read_bytes(images_path);
  const auto lab = read_bytes(labels_path);
  if (img.size() < 16) throw DataFormatError(images_path.string() + ": truncated header");
  if (lab.size() < 8) throw DataFormatError(labels_path.string() + ": truncated header");
  if (const auto m = read_be32(img, 0); m != kIdxImagesMagic) {
    throw DataFormatError(images_path.string() + ": bad magic 0x" +
                          (std::ostringstream{} << std::hex << m).str() + " (expected 0x803)");
  }
  if (const auto m = read_be32(lab, 0); m != kIdxLabelsMagic) {
    throw DataFormatError(labels_path.string() + ": bad magic 0x" +
                          (std::ostringstream{} << std::hex << m).str() + " (expected 0x801)");
  }
  const std::size_t n = read_be32(img, 4);
  const std::size_t rows = read_be32(img, 8);
  const std::size_t cols = read_be32(img, 12);
  const std::size_t n_labels = read_be32(lab, 4);
  if (n != n_labels) {
    throw DataFormatError("count mismatch: " + std::to_string(n) + " images vs " +
                          std::to_string(n_labels) + " labels");
  }
  if (img.size() < 16 + n * rows * cols) {
    throw DataFormatError(images_path.string() + ": truncated pixel data");
  }
  if (lab.size() < 8 + n) throw DataFormatError(labels_path.string() + ": truncated label data");

  Dataset ds;
  ds.name = "mnist";
  ds.images = Tensor({n, rows, cols, 1});
  for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images.values[i] = img[16 + i] / 255.0;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[8 + i] >= kNumClasses) {
      throw DataFormatError(labels_path.string() + ": label " + std::to_string(lab[8 + i]) +
                            " at index " + std::to_string(i) + " exceeds 9");
    }
    ds.labels[i] = lab[8 + i];
  }
  return ds;
}

void write_mnist_idx(const Dataset& dataset, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  dataset.validate();
  const Shape s = dataset.example_shape();
  if (s[2] != 1) throw std::invalid_argument("write_mnist_idx: expected one channel");
  std::vector<unsigned char> img;
  img.reserve(16 + dataset.images.size());
  put_be32(img, kIdxImagesMagic);
  put_be32(img, static_cast<std::uint32_t>(dataset.size()));
  put_be32(img, static_cast<std::uint32_t>(s[0]));
  put_be32(img, static_cast<std::uint32_t>(s[1]));
  for (double v : dataset.images.values) img.push_back(to_byte(v));
  std::vector<unsigned char> lab;
  put_be32(lab, kIdxLabelsMagic);
  put_be32(lab, static_cast<std::uint32_t>(dataset.size()));
  for (int l : dataset.labels) lab.push_back(static_cast<unsigned char>(l));
  write_bytes(images_path, img);
  write_bytes(labels_path, lab);
}

Dataset load_cifar10_bin(std::span<const std::filesystem::path> paths) {
  std::vector<std::vector<unsigned char>> files;
  std::size_t n = 0;
  for (const auto& p : paths) {
    files.push_back(read_bytes(p));
    if (files.back().size() % kCifarRecord != 0) {
      throw DataFormatError(p.string() + ": truncated record (length " +
                            std::to_string(files.back().size()) + " is not a multiple of 3073)");
    }
    n += files.back().size() / kCifarRecord;
  }
  Dataset ds;
  ds.name = "cifar10";
  ds.images = Tensor({n, kCifarSide, kCifarSide, 3});
  ds.labels.reserve(n);
  std::size_t k = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const auto& bytes = files[f];
    for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord, ++k) {
      if (bytes[off] >= kNumClasses) {
        throw DataFormatError(paths[f].string() + ": label byte " + std::to_string(bytes[off]) +
                              " exceeds 9");
      }
      ds.labels.push_back(bytes[off]);
      double* dst = ds.images.values.data() + k * kCifarPlane * 3;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < kCifarPlane; ++p) {
          dst[p * 3 + c] = bytes[off + 1 + c * kCifarPlane + p] / 255.0;
        }
      }
    }
  }
  return ds;
}

void write_cifar10_bin(const Dataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  if (dataset.example_shape() != Shape{kCifarSide, kCifarSide, 3}) {
    throw std::invalid_argument("write_cifar10_bin: expected [N,32,32,3] images");
  }
  std::vector<unsigned char> bytes;
  bytes.reserve(dataset.size() * kCifarRecord);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    bytes.push_back(static_cast<unsigned char>(dataset.labels[i]));
    const double* src = dataset.images.values.data() + i * kCifarPlane * 3;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < kCifarPlane; ++p) bytes.push_back(to_byte(src[p * 3 + c]));
    }
  }
  write_bytes(path, bytes);
}

std::vector<std::size_t> subset_indices(const Dataset& dataset, std::size_t n, std::uint64_t seed) {
  const std::size_t total = dataset.size();
  if (n < 1 || n > total) {
    throw std::out_of_range("subset: n=" + std::to_string(n) + " outside [1, " +
                            std::to_string(total) + "]");
  }
  Rng rng(seed);
  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < total; ++i) by_class[dataset.labels[i]].push_back(i);
  for (auto& c : by_class) std::shuffle(c.begin(), c.end(), rng);

  std::array<std::size_t, kNumClasses> quota{};
  quota.fill(n / kNumClasses);
  std::array<std::size_t, kNumClasses> order{};
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t r = 0; r < n % kNumClasses; ++r) ++quota[order[r]];

  std::vector<std::size_t> picked;
  std::vector<std::size_t> leftover;
  picked.reserve(n);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const std::size_t take = std::min(quota[c], by_class[c].size());
    picked.insert(picked.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(take));
    leftover.insert(leftover.end(), by_class[c].begin() + static_cast<std::ptrdiff_t>(take), by_class[c].end());
  }
  if (picked.size() < n) {
    std::shuffle(leftover.begin(), leftover.end(), rng);
    picked.insert(picked.end(), leftover.begin(),
                  leftover.begin() + static_cast<std::ptrdiff_t>(n - picked.size()));
  }
  std::shuffle(picked.begin(), picked.end(), rng);
  return picked;
}

Dataset subset(const Dataset& dataset, std::size_t n, std::uint64_t seed) {
  const auto idx = subset_indices(dataset, n, seed);
  return dataset.gather(idx);
}

Split holdout_split(const Dataset& dataset, std::size_t n_test, std::uint64_t seed) {
  if (n_test >= dataset.size()) {
    throw std::out_of_range("holdout_split: test size must leave a nonempty training set");
  }
  const auto test_idx = subset_indices(dataset, n_test, seed);
  std::vector<bool> in_test(dataset.size(), false);
  for (std::size_t i : test_idx) in_test[i] = true;
  std::vector<std::size_t> train_idx;
  train_idx.reserve(dataset.size() - n_test);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (!in_test[i]) train_idx.push_back(i);
  }
  return Split{dataset.gather(train_idx), dataset.gather(test_idx)};
}

std::vector<std::vector<std::size_t>> batches(const Dataset& dataset, std::size_t batch_size,
                                              std::uint64_t seed, std::size_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batches: batch_size must be >= 1");
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace bswitch
