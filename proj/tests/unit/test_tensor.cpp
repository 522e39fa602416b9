#include "doctest.h"
#include "support.hpp"

using namespace bswitch;
using namespace bswitch::testing;

namespace {

// Direct nested-loop convolution, NHWC input, [k,k,Cin,Cout] kernels, valid padding.
Tensor conv_oracle(const Tensor& x, const Tensor& w, std::size_t stride) {
  const std::size_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
  const std::size_t K = w.shape[0], F = w.shape[3];
  const std::size_t OH = (H - K) / stride + 1, OW = (W - K) / stride + 1;
  Tensor out({N, OH, OW, F});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox)
        for (std::size_t f = 0; f < F; ++f) {
          double acc = 0.0;
          for (std::size_t ky = 0; ky < K; ++ky)
            for (std::size_t kx = 0; kx < K; ++kx)
              for (std::size_t c = 0; c < C; ++c) {
                acc += x.values[((n * H + oy * stride + ky) * W + ox * stride + kx) * C + c] *
                       w.values[((ky * K + kx) * C + c) * F + f];
              }
          out.values[((n * OH + oy) * OW + ox) * F + f] = acc;
        }
  return out;
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("relu and softmax on fixed inputs") {
  Tape tape;
  CHECK(relu(tape.constant(Tensor({3}, {-1.0, 0.0, 2.0}))).value().values == std::vector<double>{0.0, 0.0, 2.0});
  CHECK(softmax(tape.constant(Tensor({2}, {0.0, 0.0}))).value().values == std::vector<double>{0.5, 0.5});
}

TEST_CASE("d/dx of x*x at 3 is 6") {
  Tape tape;
  const Var x = tape.variable(Tensor::scalar(3.0));
  const GradientMap g = backward(tape, mul(x, x));
  CHECK(g.at(x).item() == 6.0);
}

TEST_CASE("relu gradient is zero at zero") {
  Tape tape;
  const Var x = tape.variable(Tensor({3}, {-1.0, 0.0, 2.0}));
  const GradientMap g = backward(tape, sum(relu(x)));
  CHECK(g.at(x).values == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("conv2d matches a nested-loop oracle") {
  SUBCASE("5x5 input, 3x3 kernel, hand-computed entries") {
    Tensor x({1, 5, 5, 1});
    for (std::size_t i = 0; i < 25; ++i) x.values[i] = static_cast<double>(i);
    Tensor w({3, 3, 1, 1}, {1, 0, -1, 2, 0, -2, 1, 0, -1});
    Tape tape;
    const Tensor y = conv2d(tape.constant(x), tape.constant(w), 1, Padding::kValid).value();
    CHECK(y.shape == Shape{1, 3, 3, 1});
    // Horizontal Sobel on a ramp with unit x-slope: (1+2+1) * (-2) everywhere.
    for (double v : y.values) CHECK(v == -8.0);
    CHECK(y == conv_oracle(x, w, 1));
  }
  SUBCASE("random multi-channel, stride 2") {
    const Tensor x = random_tensor({2, 7, 7, 3}, 11);
    const Tensor w = random_tensor({3, 3, 3, 4}, 12);
    Tape tape;
    const Tensor y = conv2d(tape.constant(x), tape.constant(w), 2, Padding::kValid).value();
    const Tensor ref = conv_oracle(x, w, 2);
    REQUIRE(y.shape == ref.shape);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.values[i] == doctest::Approx(ref.values[i]).epsilon(1e-12));
  }
}

TEST_CASE("same padding keeps the spatial extent at stride 1") {
  CHECK(conv_output_extent(28, 3, 1, Padding::kSame) == 28);
  CHECK(conv_output_extent(28, 3, 1, Padding::kValid) == 26);
  CHECK(conv_output_extent(7, 3, 2, Padding::kValid) == 3);
}

TEST_CASE("maxpool keeps the first maximum on ties") {
  Tape tape;
  const Var x = tape.variable(Tensor({1, 2, 2, 1}, {5.0, 5.0, 5.0, 1.0}));
  const Var y = maxpool2d(x, 2);
  CHECK(y.value().values == std::vector<double>{5.0});
  CHECK(backward(tape, sum(y)).at(x).values == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("dropout") {
  const Tensor x = random_tensor({4, 50}, 3);
  SUBCASE("rate 0 is the identity") {
    Rng rng(1);
    Tape tape;
    CHECK(dropout(tape.constant(x), 0.0, rng).value() == x);
  }
  SUBCASE("same stream, same mask") {
    Rng a(9), b(9);
    Tape tape;
    const Tensor first = dropout(tape.constant(x), 0.5, a).value();
    CHECK(dropout(tape.constant(x), 0.5, b).value() == first);
  }
  SUBCASE("kept entries are rescaled by 1/(1-rate)") {
    Rng rng(2);
    Tape tape;
    const Tensor y = dropout(tape.constant(x), 0.25, rng).value();
    std::size_t kept = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (y.values[i] != 0.0) {
        CHECK(y.values[i] == doctest::Approx(x.values[i] / 0.75).epsilon(1e-15));
        ++kept;
      }
    }
    CHECK(kept > 100);
    CHECK(kept < 200);
  }
  SUBCASE("invalid rate") {
    Rng rng(0);
    Tape tape;
    CHECK_THROWS_AS(dropout(tape.constant(x), 1.0, rng), std::invalid_argument);
  }
}

TEST_CASE("cross-entropy gradient on a random 10-logit instance, rel error < 1e-6") {
  const Tensor logits = random_tensor({1, 10}, 21, -3.0, 3.0);
  const int label[] = {4};
  const auto f = [&](Tape&, Var z) { return cross_entropy(z, label); };
  const GradCheck r = check_gradient(f, logits, 10, 0);
  CHECK(r.max_relative_error < 1e-6);
}

TEST_CASE("every primitive matches central finite differences") {
  const Tensor a = random_tensor({3, 4}, 1);
  const Tensor b = random_tensor({3, 4}, 2);
  const Tensor m = random_tensor({4, 5}, 3);
  const Tensor bias = random_tensor({4}, 4);
  const Tensor img = random_tensor({2, 6, 6, 2}, 5);
  const Tensor ker = random_tensor({3, 3, 2, 3}, 6);
  const int labels[] = {1, 3, 0};

  std::vector<std::pair<const char*, std::pair<ScalarFn, Tensor>>> cases;
  const auto add_case = [&](const char* name, ScalarFn f, const Tensor& at) { cases.push_back({name, {f, at}}); };
  add_case("add", [&](Tape& t, Var x) { return weighted_sum(t, add(x, t.constant(b)), 7); }, a);
  add_case("sub rhs", [&](Tape& t, Var x) { return weighted_sum(t, sub(t.constant(a), x), 7); }, b);
  add_case("mul", [&](Tape& t, Var x) { return weighted_sum(t, mul(x, t.constant(b)), 7); }, a);
  add_case("mul self", [&](Tape& t, Var x) { return weighted_sum(t, mul(x, x), 7); }, a);
  add_case("scalar_mul", [&](Tape& t, Var x) { return weighted_sum(t, scalar_mul(x, -2.5), 7); }, a);
  add_case("matmul lhs", [&](Tape& t, Var x) { return weighted_sum(t, matmul(x, t.constant(m)), 8); }, a);
  add_case("matmul rhs", [&](Tape& t, Var x) { return weighted_sum(t, matmul(t.constant(a), x), 8); }, m);
  add_case("add_bias x", [&](Tape& t, Var x) { return weighted_sum(t, add_bias(x, t.constant(bias)), 9); }, a);
  add_case("add_bias b", [&](Tape& t, Var x) { return weighted_sum(t, add_bias(t.constant(a), x), 9); }, bias);
  add_case("conv2d input", [&](Tape& t, Var x) {
    return weighted_sum(t, conv2d(x, t.constant(ker), 1, Padding::kValid), 10);
  }, img);
  add_case("conv2d kernel", [&](Tape& t, Var x) {
    return weighted_sum(t, conv2d(t.constant(img), x, 1, Padding::kValid), 10);
  }, ker);
  add_case("conv2d same/stride 2", [&](Tape& t, Var x) {
    return weighted_sum(t, conv2d(x, t.constant(ker), 2, Padding::kSame), 10);
  }, img);
  add_case("maxpool2d", [&](Tape& t, Var x) { return weighted_sum(t, maxpool2d(x, 2), 11); }, img);
  add_case("relu", [&](Tape& t, Var x) { return weighted_sum(t, relu(x), 12); }, a);
  add_case("softmax", [&](Tape& t, Var x) { return weighted_sum(t, softmax(x), 13); }, a);
  add_case("cross_entropy", [&](Tape&, Var x) { return cross_entropy(x, labels); }, a);
  add_case("l2_norm_sq", [&](Tape&, Var x) { return l2_norm_sq(x); }, a);
  add_case("sum", [&](Tape&, Var x) { return sum(x); }, a);
  add_case("reshape", [&](Tape& t, Var x) { return weighted_sum(t, reshape(x, {2, 6}), 14); }, a);
  add_case("target_margin", [&](Tape&, Var x) { return target_margin(reshape(x, {1, 12}), 5); }, a);
  add_case("clamp_min", [&](Tape& t, Var x) { return weighted_sum(t, clamp_min(x, 0.1), 15); }, a);
  add_case("dropout (fixed mask)", [&](Tape& t, Var x) {
    Rng rng(77);
    return weighted_sum(t, dropout(x, 0.5, rng), 16);
  }, a);

  for (const auto& [name, fc] : cases) {
    CAPTURE(name);
    const GradCheck r = check_gradient(fc.first, fc.second, 24, 99);
    CHECK(r.probes >= std::min<std::size_t>(20, fc.second.size()));
    CHECK(r.max_relative_error < kGradTol);
  }
}

TEST_CASE("backward requires a single-element output") {
  Tape tape;
  const Var x = tape.variable(random_tensor({3}, 1));
  CHECK_THROWS(backward(tape, relu(x)));
}

TEST_CASE("tracked inputs that do not reach the output get zero gradients") {
  Tape tape;
  const Var x = tape.variable(random_tensor({3}, 1));
  const Var unused = tape.variable(random_tensor({2}, 2));
  const GradientMap g = backward(tape, sum(x));
  REQUIRE(g.contains(unused));
  CHECK(g.at(unused).values == std::vector<double>{0.0, 0.0});
}

TEST_CASE("shape mismatches are rejected") {
  Tape tape;
  CHECK_THROWS_AS(add(tape.constant(Tensor({2})), tape.constant(Tensor({3}))), ShapeError);
  CHECK_THROWS_AS(matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))), ShapeError);
  CHECK_THROWS_AS(reshape(tape.constant(Tensor({2, 3})), {4}), ShapeError);
}
