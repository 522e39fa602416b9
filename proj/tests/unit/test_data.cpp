#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "bswitch/container.hpp"
#include "bswitch/data.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bswitch;
using namespace bswitch::testing;
namespace fs = std::filesystem;

namespace {

fs::path fixture_dir() {
  const auto dir = fs::temp_directory_path() / "bswitch_unit_data";
  fs::create_directories(dir);
  return dir;
}

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

// Two 2x3 images: the first all 0 except byte 255 at (row 1, col 2);
// the second all 255 except byte 0 at (row 0, col 0).
void write_idx_fixture(const fs::path& images, const fs::path& labels, std::uint32_t image_magic = 0x803,
                       std::uint32_t label_count = 2) {
  std::string img = be32(image_magic) + be32(2) + be32(2) + be32(3);
  img += std::string("\0\0\0\0\0\xff", 6);
  img += std::string("\0\xff\xff\xff\xff\xff", 6);
  std::string lab = be32(0x801) + be32(label_count) + std::string("\x07\x02", 2);
  atomic_write_file(images, img);
  atomic_write_file(labels, lab);
}

Dataset balanced(std::size_t per_class, std::uint64_t seed) {
  Dataset ds;
  ds.images = random_tensor({per_class * 10, 2, 2, 1}, seed, 0.0, 1.0);
  for (std::size_t i = 0; i < per_class * 10; ++i) ds.labels.push_back(static_cast<int>((i * 7) % 10));
  return ds;
}

}  // namespace

TEST_CASE("hand-built IDX fixture") {
  const auto dir = fixture_dir();
  write_idx_fixture(dir / "img", dir / "lab");
  const Dataset ds = load_mnist_idx(dir / "img", dir / "lab");
  REQUIRE(ds.images.shape == Shape{2, 2, 3, 1});
  CHECK(ds.labels == std::vector<int>{7, 2});
  for (std::size_t i = 0; i < 6; ++i) CHECK(ds.images.values[i] == (i == 5 ? 1.0 : 0.0));
  for (std::size_t i = 6; i < 12; ++i) CHECK(ds.images.values[i] == (i == 6 ? 0.0 : 1.0));
}

TEST_CASE("IDX error paths") {
  const auto dir = fixture_dir();
  SUBCASE("bad magic") {
    write_idx_fixture(dir / "img", dir / "lab", 0x804);
    CHECK_THROWS_WITH_AS(load_mnist_idx(dir / "img", dir / "lab"), doctest::Contains("bad magic 0x804"),
                         DataFormatError);
  }
  SUBCASE("count mismatch") {
    write_idx_fixture(dir / "img", dir / "lab", 0x803, 3);
    CHECK_THROWS_WITH_AS(load_mnist_idx(dir / "img", dir / "lab"), doctest::Contains("count mismatch"),
                         DataFormatError);
  }
  SUBCASE("truncated pixels") {
    write_idx_fixture(dir / "img", dir / "lab");
    const std::string bytes = read_file(dir / "img");
    atomic_write_file(dir / "img", bytes.substr(0, bytes.size() - 1));
    CHECK_THROWS_WITH_AS(load_mnist_idx(dir / "img", dir / "lab"), doctest::Contains("truncated"),
                         DataFormatError);
  }
  SUBCASE("label out of range") {
    write_idx_fixture(dir / "img", dir / "lab");
    std::string bytes = read_file(dir / "lab");
    bytes.back() = 10;
    atomic_write_file(dir / "lab", bytes);
    CHECK_THROWS_AS(load_mnist_idx(dir / "img", dir / "lab"), DataFormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_mnist_idx(dir / "nope", dir / "lab"), DataFormatError);
  }
}

TEST_CASE("IDX write/read round trip") {
  const auto dir = fixture_dir();
  Dataset ds;
  ds.images = Tensor({3, 2, 2, 1});
  for (std::size_t i = 0; i < 12; ++i) ds.images.values[i] = static_cast<double>(i * 20) / 255.0;
  ds.labels = {0, 9, 4};
  write_mnist_idx(ds, dir / "rt_img", dir / "rt_lab");
  const Dataset back = load_mnist_idx(dir / "rt_img", dir / "rt_lab");
  CHECK(back.images == ds.images);
  CHECK(back.labels == ds.labels);
}

TEST_CASE("CIFAR-10 binary fixture") {
  const auto dir = fixture_dir();
  std::string record(3073, '\0');
  record[0] = 6;
  for (std::size_t i = 0; i < 1024; ++i) record[1 + i] = static_cast<char>(0xff);
  atomic_write_file(dir / "batch.bin", record);
  const fs::path files[] = {dir / "batch.bin"};
  const Dataset ds = load_cifar10_bin(files);
  REQUIRE(ds.images.shape == Shape{1, 32, 32, 3});
  CHECK(ds.labels == std::vector<int>{6});
  for (std::size_t p = 0; p < 1024; ++p) {
    CHECK(ds.images.values[p * 3] == 1.0);
    CHECK(ds.images.values[p * 3 + 1] == 0.0);
    CHECK(ds.images.values[p * 3 + 2] == 0.0);
  }

  SUBCASE("round trip") {
    write_cifar10_bin(ds, dir / "rt.bin");
    const fs::path rt[] = {dir / "rt.bin"};
    const Dataset back = load_cifar10_bin(rt);
    CHECK(back.images == ds.images);
    CHECK(back.labels == ds.labels);
  }
  SUBCASE("truncated record") {
    atomic_write_file(dir / "short.bin", record.substr(0, 3000));
    const fs::path bad[] = {dir / "short.bin"};
    CHECK_THROWS_WITH_AS(load_cifar10_bin(bad), doctest::Contains("truncated record"), DataFormatError);
  }
  SUBCASE("label byte above 9") {
    std::string r = record;
    r[0] = 12;
    atomic_write_file(dir / "label.bin", r);
    const fs::path bad[] = {dir / "label.bin"};
    CHECK_THROWS_AS(load_cifar10_bin(bad), DataFormatError);
  }
}

TEST_CASE("stratified subsets") {
  const Dataset ds = balanced(30, 1);
  SUBCASE("n = size is a permutation") {
    auto idx = subset_indices(ds, ds.size(), 3);
    std::sort(idx.begin(), idx.end());
    for (std::size_t i = 0; i < idx.size(); ++i) CHECK(idx[i] == i);
  }
  SUBCASE("equal class counts and seed determinism") {
    const auto idx = subset_indices(ds, 100, 4);
    std::map<int, int> per_class;
    for (std::size_t i : idx) ++per_class[ds.labels[i]];
    for (int c = 0; c < 10; ++c) CHECK(per_class[c] == 10);
    CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == 100);
    CHECK(subset_indices(ds, 100, 4) == idx);
    CHECK(subset_indices(ds, 100, 5) != idx);
  }
  SUBCASE("remainder and short classes") {
    Dataset skewed = ds;
    for (auto& l : skewed.labels) l = l == 9 ? 0 : l;  // class 9 empty
    const auto idx = subset_indices(skewed, 95, 6);
    CHECK(idx.size() == 95);
    CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == 95);
  }
  SUBCASE("size bounds") {
    CHECK_THROWS(subset_indices(ds, 0, 1));
    CHECK_THROWS(subset_indices(ds, ds.size() + 1, 1));
  }
}

TEST_CASE("holdout split is disjoint and covering") {
  const Dataset ds = balanced(20, 2);
  const Split s = holdout_split(ds, 50, 9);
  CHECK(s.test.size() == 50);
  CHECK(s.train.size() == 150);
  std::map<int, int> per_class;
  for (int l : s.test.labels) ++per_class[l];
  for (int c = 0; c < 10; ++c) CHECK(per_class[c] == 5);
  CHECK_THROWS(holdout_split(ds, ds.size(), 1));
}

TEST_CASE("minibatches cover each epoch once and reshuffle per epoch") {
  const Dataset ds = balanced(5, 3);
  const auto e0 = batches(ds, 8, 1, 0);
  const auto e1 = batches(ds, 8, 1, 1);
  CHECK(e0.size() == 7);
  CHECK(e0.back().size() == 2);
  std::vector<std::size_t> flat;
  for (const auto& b : e0) flat.insert(flat.end(), b.begin(), b.end());
  std::sort(flat.begin(), flat.end());
  for (std::size_t i = 0; i < flat.size(); ++i) CHECK(flat[i] == i);
  CHECK(e0 != e1);
  CHECK(batches(ds, 8, 1, 0) == e0);
}

TEST_CASE("bundled MNIST digits") {
  const fs::path dir = BSWITCH_DATA_DIR;
  const Dataset ds = load_mnist_idx(dir / "mnist-npm-images-idx3-ubyte", dir / "mnist-npm-labels-idx1-ubyte");
  CHECK(ds.size() == 10000);
  CHECK(ds.example_shape() == Shape{28, 28, 1});
  const auto idx = subset_indices(ds, 1000, 1);
  std::map<int, int> per_class;
  for (std::size_t i : idx) ++per_class[ds.labels[i]];
  for (int c = 0; c < 10; ++c) CHECK(per_class[c] == 100);
}
