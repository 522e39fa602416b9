#pragma once

// Dense float64 tensors and a tape for reverse-mode differentiation.
//
// A Tape owns every value computed through it. Operations take and return
// `Var` handles; a Var is tracked when it is a tracked leaf (`Tape::variable`)
// or depends on one. `backward` walks the tape once in reverse and returns a
// gradient for every tracked node recorded up to the output.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bswitch/rng.hpp"

namespace bswitch {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised by any operation whose operand shapes do not fit together.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Tensor {
  Shape shape;
  std::vector<double> values;  // row-major

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> v);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  double item() const;

  /// Same values under a new shape with equal element count.
  Tensor reshaped(Shape s) const;
  /// Prepends a batch axis of size one.
  Tensor batched() const;

  bool operator==(const Tensor&) const = default;
};

enum class Padding { kValid, kSame };

class Tape;
class GradientMap;
class Var;
GradientMap backward(const Tape& tape, Var output);

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool tracked() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Propagates `grad_out` into the gradients of the node's inputs. `grads_in[i]`
/// is null when input i is not tracked.
using BackwardFn =
    std::function<void(const Tape& tape, const Tensor& grad_out, std::span<Tensor* const> grads_in)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Leaf that receives a gradient.
  Var variable(Tensor value);
  /// Leaf that never receives a gradient.
  Var constant(Tensor value);

  /// Records an operation result. The node is tracked iff an input is.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool tracked(std::size_t id) const { return nodes_.at(id).tracked; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class GradientMap;
  friend GradientMap backward(const Tape&, Var);

  struct Node {
    Tensor value;
    bool tracked = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

class GradientMap {
 public:
  bool contains(Var v) const;
  /// Gradient of `v`; throws std::out_of_range when v is untracked.
  const Tensor& at(Var v) const;
  const Tensor* find(Var v) const;
  std::size_t tracked_count() const;

 private:
  friend GradientMap backward(const Tape&, Var);
  const Tape* tape_ = nullptr;
  std::vector<std::optional<Tensor>> grads_;
};

/// Reverse pass from a shape-[1] output. Every tracked node up to `output`
/// gets exactly one gradient tensor, zeros when it does not reach `output`.
GradientMap backward(const Tape& tape, Var output);

// ---- primitive operations --------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scalar_mul(Var a, double s);
/// [m,k] x [k,n] -> [m,n]
Var matmul(Var a, Var b);
/// Adds a bias of shape [n] to every row of a tensor whose last axis is n.
Var add_bias(Var x, Var bias);
/// NHWC input [N,H,W,C], kernels [kh,kw,C,O] -> [N,OH,OW,O].
Var conv2d(Var input, Var kernels, std::size_t stride, Padding padding);
/// Non-overlapping window x window pooling over [N,H,W,C]; trailing rows and
/// columns that do not fill a window are dropped.
Var maxpool2d(Var input, std::size_t window);
Var relu(Var x);
/// Inverted dropout: survivors are scaled by 1/(1-rate).
Var dropout(Var x, double rate, Rng& rng);
/// Softmax over the last axis.
Var softmax(Var x);
/// Mean cross-entropy of logits [N,K] against integer labels (size N).
Var cross_entropy(Var logits, std::span<const int> labels);
/// Sum of squares, shape [1].
Var l2_norm_sq(Var x);
Var sum(Var x);
Var reshape(Var x, Shape shape);
/// max_{i != target} z_i - z_target for logits of shape [K] or [1,K].
Var target_margin(Var logits, int target);
/// Elementwise max(x, floor); gradient passes only where x > floor.
Var clamp_min(Var x, double floor);

/// Output spatial extent of a convolution along one axis.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               Padding padding);

}  // namespace bswitch
