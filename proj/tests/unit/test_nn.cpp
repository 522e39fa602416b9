#include <filesystem>
#include <fstream>

#include "bswitch/container.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bswitch;
using namespace bswitch::testing;

namespace {

Tensor mnist_like_input(std::uint64_t seed) { return random_tensor({1, 28, 28, 1}, seed, 0.0, 1.0); }

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "bswitch_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("mnist preset architecture") {
  const Sequential m = preset_mnist_cnn(1);
  CHECK(infer(m, mnist_like_input(2)).shape == Shape{1, 10});
  CHECK(m.layer_count() == 10);
  CHECK(default_split_index(m) == 9);
  CHECK(m.layer_output_shape(7) == Shape{200});
  // 320 + 9248 + 18496 + 36928 + 1024*200+200 + 2010
  CHECK(m.parameter_count() == 320 + 9248 + 18496 + 36928 + 205000 + 2010);
}

TEST_CASE("initialisation is a function of the seed") {
  CHECK(preset_mnist_cnn(5) == preset_mnist_cnn(5));
  CHECK_FALSE(preset_mnist_cnn(5).params() == preset_mnist_cnn(6).params());
}

TEST_CASE("infer mode is deterministic") {
  const Sequential m = preset_mnist_cnn(3);
  const Tensor x = mnist_like_input(4);
  CHECK(infer(m, x) == infer(m, x));
}

TEST_CASE("train mode with rate-0 dropout equals infer mode") {
  const Sequential m({6, 6, 1},
                     {layer::Conv{2, 3}, layer::Flatten{}, layer::Dense{4}, layer::Dropout{0.0},
                      layer::Dense{10, Activation::kNone}},
                     8);
  const Tensor x = random_tensor({3, 6, 6, 1}, 9);
  Rng rng(1);
  Tape tape;
  CHECK(forward(m, tape, tape.constant(x), Mode::kTrain, &rng).value() == infer(m, x));
}

TEST_CASE("zero input propagates biases as a loop oracle predicts") {
  const Tensor w1 = random_tensor({5, 4}, 1), b1 = random_tensor({4}, 2);
  const Tensor w2 = random_tensor({4, 3}, 3), b2 = random_tensor({3}, 4);
  const Sequential m({5}, {layer::Dense{4, Activation::kRelu}, layer::Dense{3, Activation::kNone}},
                     std::vector<LayerParams>{{w1, b1}, {w2, b2}});
  std::vector<double> expected(3);
  for (std::size_t k = 0; k < 3; ++k) {
    double z = b2.values[k];
    for (std::size_t j = 0; j < 4; ++j) z += std::max(0.0, b1.values[j]) * w2.values[j * 3 + k];
    expected[k] = z;
  }
  const Tensor logits = infer(m, Tensor({1, 5}, 0.0));
  for (std::size_t k = 0; k < 3; ++k) CHECK(logits.values[k] == doctest::Approx(expected[k]).epsilon(1e-14));
}

TEST_CASE("full mnist loss gradients match central finite differences") {
  const Sequential model = preset_mnist_cnn(17);
  const Tensor x = mnist_like_input(18);
  const int label[] = {3};

  SUBCASE("input, 20 random pixels") {
    const auto f = [&](Tape& tape, Var in) {
      return cross_entropy(forward(model, tape, in, Mode::kInfer, nullptr), label);
    };
    const GradCheck r = check_gradient(f, x, 20, 5);
    CHECK(r.probes == 20);
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("parameters of every trainable layer") {
    for (std::size_t layer_i = 0; layer_i < model.layer_count(); ++layer_i) {
      if (!has_parameters(model.layers()[layer_i])) continue;
      for (const bool weight : {true, false}) {
        CAPTURE(layer_i);
        CAPTURE(weight);
        const auto f = [&](Tape& tape, Var p) {
          auto pv = bind_parameters(tape, model, false);
          (weight ? pv[layer_i].weight : pv[layer_i].bias) = p;
          return cross_entropy(forward(model, pv, tape.constant(x), Mode::kInfer, nullptr), label);
        };
        const auto& lp = model.params()[layer_i];
        // Biases start at zero; probe at a perturbed point so relus are not all pinned.
        Tensor at = weight ? lp.weight : random_tensor(lp.bias.shape, layer_i, -0.05, 0.05);
        const GradCheck r = check_gradient(f, at, 20, layer_i);
        CHECK(r.max_relative_error < 1e-4);
      }
    }
  }
}

TEST_CASE("momentum SGD matches a hand-computed oracle") {
  // Two examples, scalar input, two classes: logits = x*w + b.
  Dataset ds;
  ds.images = Tensor({2, 1, 1, 1}, {0.5, -1.5});
  ds.labels = {1, 0};
  const Tensor w0({1, 2}, {0.3, -0.2});
  const Tensor b0({2}, {0.1, 0.0});
  const Sequential m({1, 1, 1}, {layer::Flatten{}, layer::Dense{2, Activation::kNone}},
                     std::vector<LayerParams>{{}, {w0, b0}});
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.momentum = 0.9;
  cfg.batch_size = 2;
  cfg.epochs = 3;
  cfg.seed = 4;
  const TrainResult r = train_sgd(m, ds, cfg);

  double w[2] = {0.3, -0.2}, b[2] = {0.1, 0.0}, vw[2] = {0, 0}, vb[2] = {0, 0};
  for (int step = 0; step < 3; ++step) {
    double gw[2] = {0, 0}, gb[2] = {0, 0};
    for (int n = 0; n < 2; ++n) {
      const double x = ds.images.values[n];
      const double z0 = x * w[0] + b[0], z1 = x * w[1] + b[1];
      const double p1 = 1.0 / (1.0 + std::exp(z0 - z1));
      const double p[2] = {1.0 - p1, p1};
      for (int k = 0; k < 2; ++k) {
        const double d = (p[k] - (ds.labels[n] == k ? 1.0 : 0.0)) / 2.0;
        gw[k] += x * d;
        gb[k] += d;
      }
    }
    for (int k = 0; k < 2; ++k) {
      vw[k] = 0.9 * vw[k] + gw[k];
      vb[k] = 0.9 * vb[k] + gb[k];
      w[k] -= 0.5 * vw[k];
      b[k] -= 0.5 * vb[k];
    }
  }
  const auto& p = r.model.params()[1];
  for (int k = 0; k < 2; ++k) {
    CHECK(p.weight.values[k] == doctest::Approx(w[k]).epsilon(1e-13));
    CHECK(p.bias.values[k] == doctest::Approx(b[k]).epsilon(1e-13));
  }
}

TEST_CASE("a single example is memorised") {
  Dataset one = toy_dataset(1, 3);
  const Sequential m({6, 6, 1}, {layer::Flatten{}, layer::Dense{16}, layer::Dense{10, Activation::kNone}}, 2);
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.epochs = 200;
  cfg.seed = 1;
  const TrainResult r = train_sgd(m, one, cfg);
  REQUIRE(r.trace.size() == 200);
  CHECK(r.trace.back().mean_loss < 0.01);
}

TEST_CASE("training is bitwise reproducible and learns the toy rule") {
  const Dataset ds = toy_dataset(400, 5);
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 4;
  cfg.seed = 12;
  const TrainResult a = train_sgd(small_cnn(1), ds, cfg);
  const TrainResult b = train_sgd(small_cnn(1), ds, cfg);
  CHECK(a.model == b.model);
  CHECK(a.trace == b.trace);
  CHECK(a.trace.back().mean_loss < a.trace.front().mean_loss);
  cfg.seed = 13;
  CHECK_FALSE(train_sgd(small_cnn(1), ds, cfg).model == a.model);
}

TEST_CASE("accuracy of a constant predictor on a balanced set is 0.1") {
  Dataset ds;
  ds.images = random_tensor({50, 1, 1, 2}, 1);
  for (int i = 0; i < 50; ++i) ds.labels.push_back(i % 10);
  Tensor bias({10}, 0.0);
  bias.values[3] = 1.0;
  const Sequential m({1, 1, 2}, {layer::Flatten{}, layer::Dense{10, Activation::kNone}},
                     std::vector<LayerParams>{{}, {Tensor({2, 10}, 0.0), bias}});
  CHECK(accuracy(m, ds) == 0.1);
}

TEST_CASE("split and merge") {
  const Sequential m = preset_mnist_cnn(21);
  const std::size_t split = default_split_index(m);
  const auto [lower, upper] = split_model(m, split);
  CHECK(lower.output_shape() == Shape{200});
  CHECK(upper.input_shape() == Shape{200});
  const Tensor x = random_tensor({3, 28, 28, 1}, 22, 0.0, 1.0);
  CHECK(infer(upper, infer(lower, x)) == infer(m, x));
  CHECK(merge_models(lower, upper) == m);
  CHECK_THROWS(split_model(m, 0));
  CHECK_THROWS(split_model(m, m.layer_count()));
  CHECK_THROWS(merge_models(upper, lower));
}

TEST_CASE("argmax breaks ties by first index") {
  const double row[] = {1.0, 3.0, 3.0, 0.0};
  CHECK(argmax(row) == 1);
}

TEST_CASE("model persistence round trip") {
  const Sequential m = preset_mnist_cnn(31);
  const auto path = temp_path("model.bsw");
  save_model(path, m, {{"note", "unit"}});
  CHECK(load_model(path) == m);
  const Container c = read_container(path);
  CHECK(c.kind == "sequential");
  CHECK(c.meta.at("note") == "unit");

  SUBCASE("truncated file is rejected") {
    const std::string bytes = read_file(path);
    atomic_write_file(path, bytes.substr(0, bytes.size() - 8));
    CHECK_THROWS_AS(load_model(path), ContainerError);
  }
  SUBCASE("bad magic is rejected") {
    std::string bytes = read_file(path);
    bytes[0] = 'X';
    atomic_write_file(path, bytes);
    CHECK_THROWS_AS(load_model(path), ContainerError);
  }
}

TEST_CASE("container encoding is little-endian and self-describing") {
  Container c;
  c.kind = "probe";
  c.tensors.push_back({"t", Tensor({2}, {1.0, -2.5})});
  const std::string bytes = encode_container(c);
  CHECK(bytes.substr(0, 4) == "BSW1");
  const Container back = decode_container(bytes);
  CHECK(back.kind == "probe");
  CHECK(back.tensor("t") == c.tensors[0].tensor);
  CHECK_THROWS(back.tensor("missing"));
  // The last 8 bytes are -2.5 as an IEEE-754 double, least significant byte first.
  const unsigned char tail[8] = {0, 0, 0, 0, 0, 0, 0x04, 0xC0};
  CHECK(std::equal(tail, tail + 8, reinterpret_cast<const unsigned char*>(bytes.data() + bytes.size() - 8)));
}
