#include "bswitch/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace bswitch {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using ConstMapRowMat = Eigen::Map<const RowMat>;

[[noreturn]] void shape_error(std::string_view op, const Shape& a, const Shape& b,
                              std::string_view detail = {}) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << to_string(a) << " and " << to_string(b);
  if (!detail.empty()) os << " (" << detail << ")";
  throw ShapeError(os.str());
}

[[noreturn]] void shape_error(std::string_view op, const Shape& a, std::string_view detail) {
  std::ostringstream os;
  os << op << ": invalid shape " << to_string(a) << " (" << detail << ")";
  throw ShapeError(os.str());
}

Tape& same_tape(std::string_view op, Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands belong to different tapes");
  }
  return *a.tape();
}

Tape& tape_of(std::string_view op, Var a) {
  if (a.tape() == nullptr) throw std::invalid_argument(std::string(op) + ": unbound Var");
  return *a.tape();
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (dst == nullptr) return;
  for (std::size_t i = 0; i < src.size(); ++i) dst->values[i] += src.values[i];
}

struct ConvGeometry {
  std::size_t batch, in_h, in_w, in_c;
  std::size_t k_h, k_w, out_c;
  std::size_t out_h, out_w;
  std::size_t stride;
  std::size_t pad_top, pad_left;

  std::size_t patch() const { return k_h * k_w * in_c; }
  std::size_t positions() const { return out_h * out_w; }
};

std::size_t same_padding_before(std::size_t in, std::size_t kernel, std::size_t stride) {
  const std::size_t out = (in + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + kernel;
  return needed > in ? (needed - in) / 2 : 0;
}

// Gathers receptive fields of sample `n` into rows of `cols` [P, K].
void im2col(const ConvGeometry& g, const double* input, RowMat& cols) {
  cols.resize(static_cast<Eigen::Index>(g.positions()), static_cast<Eigen::Index>(g.patch()));
  const std::size_t c = g.in_c;
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      double* row = cols.data() + (oy * g.out_w + ox) * g.patch();
      for (std::size_t ky = 0; ky < g.k_h; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                        static_cast<std::ptrdiff_t>(g.pad_top);
        for (std::size_t kx = 0; kx < g.k_w; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                          static_cast<std::ptrdiff_t>(g.pad_left);
          double* dst = row + (ky * g.k_w + kx) * c;
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
              ix >= static_cast<std::ptrdiff_t>(g.in_w)) {
            std::fill(dst, dst + c, 0.0);
          } else {
            const double* src = input + (static_cast<std::size_t>(iy) * g.in_w +
                                         static_cast<std::size_t>(ix)) * c;
            std::copy(src, src + c, dst);
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const RowMat& cols, double* grad_input) {
  const std::size_t c = g.in_c;
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      const double* row = cols.data() + (oy * g.out_w + ox) * g.patch();
      for (std::size_t ky = 0; ky < g.k_h; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                        static_cast<std::ptrdiff_t>(g.pad_top);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
        for (std::size_t kx = 0; kx < g.k_w; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                          static_cast<std::ptrdiff_t>(g.pad_left);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
          const double* src = row + (ky * g.k_w + kx) * c;
          double* dst = grad_input + (static_cast<std::size_t>(iy) * g.in_w +
                                      static_cast<std::size_t>(ix)) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
      }
    }
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), values(numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  if (numel(shape) != values.size()) {
    throw ShapeError("Tensor: shape " + to_string(shape) + " holds " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
}

double Tensor::item() const {
  if (values.size() != 1) shape_error("item", shape, "expected a single element");
  return values[0];
}

Tensor Tensor::reshaped(Shape s) const {
  if (numel(s) != values.size()) shape_error("reshape", shape, s);
  return Tensor(std::move(s), values);
}

Tensor Tensor::batched() const {
  Shape s;
  s.reserve(shape.size() + 1);
  s.push_back(1);
  s.insert(s.end(), shape.begin(), shape.end());
  return Tensor(std::move(s), values);
}

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw std::invalid_argument("Var: unbound handle");
  return tape_->value(id_);
}

bool Var::tracked() const { return tape_ != nullptr && tape_->tracked(id_); }

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), true, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), false, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.tape() != this) throw std::invalid_argument("Tape::record: input from another tape");
    node.inputs.push_back(in.id());
    node.tracked = node.tracked || nodes_[in.id()].tracked;
  }
  if (node.tracked) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

bool GradientMap::contains(Var v) const { return find(v) != nullptr; }

const Tensor* GradientMap::find(Var v) const {
  if (v.tape() != tape_ || v.id() >= grads_.size() || !grads_[v.id()]) return nullptr;
  return &*grads_[v.id()];
}

const Tensor& GradientMap::at(Var v) const {
  const Tensor* g = find(v);
  if (g == nullptr) throw std::out_of_range("GradientMap: no gradient for node " +
                                           std::to_string(v.id()));
  return *g;
}

std::size_t GradientMap::tracked_count() const {
  return static_cast<std::size_t>(
      std::count_if(grads_.begin(), grads_.end(), [](const auto& g) { return g.has_value(); }));
}

GradientMap backward(const Tape& tape, Var output) {
  if (output.tape() != &tape) throw std::invalid_argument("backward: output not on this tape");
  if (output.shape() != Shape{1}) {
    shape_error("backward", output.shape(), "output must have shape [1]");
  }
  GradientMap map;
  map.tape_ = &tape;
  map.grads_.resize(output.id() + 1);
  if (!tape.tracked(output.id())) {
    return map;
  }
  map.grads_[output.id()] = Tensor({1}, 1.0);

  std::vector<Tensor*> input_grads;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    const Tape::Node& node = tape.nodes_[i];
    if (!node.tracked || !map.grads_[i] || !node.backward) continue;
    input_grads.clear();
    for (std::size_t in : node.inputs) {
      if (!tape.nodes_[in].tracked) {
        input_grads.push_back(nullptr);
        continue;
      }
      if (!map.grads_[in]) map.grads_[in] = Tensor(tape.nodes_[in].value.shape, 0.0);
      input_grads.push_back(&*map.grads_[in]);
    }
    node.backward(tape, *map.grads_[i], input_grads);
  }
  for (std::size_t i = 0; i <= output.id(); ++i) {
    if (tape.nodes_[i].tracked && !map.grads_[i]) {
      map.grads_[i] = Tensor(tape.nodes_[i].value.shape, 0.0);
    }
  }
  return map;
}

// ---- elementwise -----------------------------------------------------------

Var add(Var a, Var b) {
  Tape& tape = same_tape("add", a, b);
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += bv[i];
  return tape.record(std::move(out), {a, b},
                     [](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                       accumulate(gi[0], g);
                       accumulate(gi[1], g);
                     });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape("sub", a, b);
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= bv[i];
  return tape.record(std::move(out), {a, b},
                     [](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                       accumulate(gi[0], g);
                       if (gi[1]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gi[1]->values[i] -= g.values[i];
                       }
                     });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape("mul", a, b);
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b},
                     [ia, ib](const Tape& t, const Tensor& g, std::span<Tensor* const> gi) {
                       const auto& av = t.value(ia).values;
                       const auto& bv = t.value(ib).values;
                       if (gi[0]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gi[0]->values[i] += g.values[i] * bv[i];
                       }
                       if (gi[1]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gi[1]->values[i] += g.values[i] * av[i];
                       }
                     });
}

Var scalar_mul(Var a, double s) {
  Tape& tape = tape_of("scalar_mul", a);
  Tensor out = a.value();
  for (double& v : out.values) v *= s;
  return tape.record(std::move(out), {a},
                     [s](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0]->values[i] += s * g.values[i];
                     });
}

Var relu(Var x) {
  Tape& tape = tape_of("relu", x);
  Tensor out = x.value();
  for (double& v : out.values) v = v > 0.0 ? v : 0.0;
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x},
                     [ix](const Tape& t, const Tensor& g, std::span<Tensor* const> gi) {
                       const auto& xv = t.value(ix).values;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (xv[i] > 0.0) gi[0]->values[i] += g.values[i];
                       }
                     });
}

Var clamp_min(Var x, double floor) {
  Tape& tape = tape_of("clamp_min", x);
  Tensor out = x.value();
  for (double& v : out.values) v = std::max(v, floor);
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x},
                     [ix, floor](const Tape& t, const Tensor& g, std::span<Tensor* const> gi) {
                       const auto& xv = t.value(ix).values;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (xv[i] > floor) gi[0]->values[i] += g.values[i];
                       }
                     });
}

Var dropout(Var x, double rate, Rng& rng) {
  Tape& tape = tape_of("dropout", x);
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) {
    return tape.record(x.value(), {x}, [](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
      accumulate(gi[0], g);
    });
  }
  const double keep_scale = 1.0 / (1.0 - rate);
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> mask(x.value().size());
  for (double& m : mask) m = keep(rng) ? keep_scale : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= mask[i];
  return tape.record(std::move(out), {x},
                     [mask = std::move(mask)](const Tape&, const Tensor& g,
                                              std::span<Tensor* const> gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0]->values[i] += g.values[i] * mask[i];
                     });
}

// ---- reductions and reshapes ----------------------------------------------

Var sum(Var x) {
  Tape& tape = tape_of("sum", x);
  const auto& xv = x.value().values;
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  return tape.record(Tensor::scalar(total), {x},
                     [](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                       for (double& v : gi[0]->values) v += g.values[0];
                     });
}

Var l2_norm_sq(Var x) {
  Tape& tape = tape_of("l2_norm_sq", x);
  double total = 0.0;
  for (double v : x.value().values) total += v * v;
  const std::size_t ix = x.id();
  return tape.record(Tensor::scalar(total), {x},
                     [ix](const Tape& t, const Tensor& g, std::span<Tensor* const> gi) {
                       const auto& xv = t.value(ix).values;
                       for (std::size_t i = 0; i < xv.size(); ++i) {
                         gi[0]->values[i] += 2.0 * xv[i] * g.values[0];
                       }
                     });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of("reshape", x);
  if (numel(shape) != x.value().size()) shape_error("reshape", x.shape(), shape);
  return tape.record(Tensor(std::move(shape), x.value().values), {x},
                     [](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                       accumulate(gi[0], g);
                     });
}

// ---- linear algebra --------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& tape = same_tape("matmul", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) shape_error("matmul", sa, sb);
  const auto m = static_cast<Eigen::Index>(sa[0]);
  const auto k = static_cast<Eigen::Index>(sa[1]);
  const auto n = static_cast<Eigen::Index>(sb[1]);
  Tensor out({sa[0], sb[1]});
  MapRowMat(out.values.data(), m, n).noalias() =
      ConstMapRowMat(a.value().values.data(), m, k) * ConstMapRowMat(b.value().values.data(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(
      std::move(out), {a, b},
      [ia, ib, m, k, n](const Tape& t, const Tensor& g, std::span<Tensor* const> gi) {
        ConstMapRowMat gm(g.values.data(), m, n);
        if (gi[0]) {
          MapRowMat(gi[0]->values.data(), m, k).noalias() +=
              gm * ConstMapRowMat(t.value(ib).values.data(), k, n).transpose();
        }
        if (gi[1]) {
          MapRowMat(gi[1]->values.data(), k, n).noalias() +=
              ConstMapRowMat(t.value(ia).values.data(), m, k).transpose() * gm;
        }
      });
}

Var add_bias(Var x, Var bias) {
  Tape& tape = same_tape("add_bias", x, bias);
  const Shape& sx = x.shape();
  const Shape& sb = bias.shape();
  if (sb.size() != 1 || sx.empty() || sx.back() != sb[0]) shape_error("add_bias", sx, sb);
  const std::size_t n = sb[0];
  Tensor out = x.value();
  const auto& bv = bias.value().values;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += bv[i % n];
  return tape.record(std::move(out), {x, bias},
                     [n](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                       accumulate(gi[0], g);
                       if (gi[1]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gi[1]->values[i % n] += g.values[i];
                       }
                     });
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               Padding padding) {
  if (stride == 0) throw std::invalid_argument("conv: stride must be positive");
  if (padding == Padding::kSame) return (in + stride - 1) / stride;
  if (in < kernel) return 0;
  return (in - kernel) / stride + 1;
}

Var conv2d(Var input, Var kernels, std::size_t stride, Padding padding) {
  Tape& tape = same_tape("conv2d", input, kernels);
  const Shape& si = input.shape();
  const Shape& sk = kernels.shape();
  if (si.size() != 4 || sk.size() != 4 || si[3] != sk[2]) shape_error("conv2d", si, sk);
  if (stride == 0) shape_error("conv2d", si, sk, "stride must be positive");
  ConvGeometry g{};
  g.batch = si[0];
  g.in_h = si[1];
  g.in_w = si[2];
  g.in_c = si[3];
  g.k_h = sk[0];
  g.k_w = sk[1];
  g.out_c = sk[3];
  g.stride = stride;
  g.out_h = conv_output_extent(g.in_h, g.k_h, stride, padding);
  g.out_w = conv_output_extent(g.in_w, g.k_w, stride, padding);
  if (g.out_h == 0 || g.out_w == 0) shape_error("conv2d", si, sk, "kernel larger than input");
  if (padding == Padding::kSame) {
    g.pad_top = same_padding_before(g.in_h, g.k_h, stride);
    g.pad_left = same_padding_before(g.in_w, g.k_w, stride);
  }

  const auto P = static_cast<Eigen::Index>(g.positions());
  const auto K = static_cast<Eigen::Index>(g.patch());
  const auto O = static_cast<Eigen::Index>(g.out_c);
  const std::size_t in_stride = g.in_h * g.in_w * g.in_c;
  const std::size_t out_stride = g.positions() * g.out_c;

  Tensor out({g.batch, g.out_h, g.out_w, g.out_c});
  {
    ConstMapRowMat w(kernels.value().values.data(), K, O);
    const double* x = input.value().values.data();
    RowMat cols;
    for (std::size_t n = 0; n < g.batch; ++n) {
      im2col(g, x + n * in_stride, cols);
      MapRowMat(out.values.data() + n * out_stride, P, O).noalias() = cols * w;
    }
  }
  const std::size_t ii = input.id(), ik = kernels.id();
  return tape.record(
      std::move(out), {input, kernels},
      [g, ii, ik, P, K, O, in_stride, out_stride](const Tape& t, const Tensor& grad,
                                                  std::span<Tensor* const> gi) {
        const double* x = t.value(ii).values.data();
        ConstMapRowMat w(t.value(ik).values.data(), K, O);
        RowMat cols;
        RowMat dcols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          ConstMapRowMat gout(grad.values.data() + n * out_stride, P, O);
          if (gi[1]) {
            im2col(g, x + n * in_stride, cols);
            MapRowMat(gi[1]->values.data(), K, O).noalias() += cols.transpose() * gout;
          }
          if (gi[0]) {
            dcols.noalias() = gout * w.transpose();
            col2im_add(g, dcols, gi[0]->values.data() + n * in_stride);
          }
        }
      });
}

Var maxpool2d(Var input, std::size_t window) {
  Tape& tape = tape_of("maxpool2d", input);
  const Shape& si = input.shape();
  if (si.size() != 4) shape_error("maxpool2d", si, "expected [N,H,W,C]");
  if (window == 0 || si[1] < window || si[2] < window) {
    shape_error("maxpool2d", si, "window " + std::to_string(window) + " does not fit");
  }
  const std::size_t N = si[0], H = si[1], W = si[2], C = si[3];
  const std::size_t OH = H / window, OW = W / window;
  Tensor out({N, OH, OW, C});
  std::vector<std::size_t> argmax(out.size());
  const auto& xv = input.value().values;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        for (std::size_t c = 0; c < C; ++c) {
          std::size_t best = 0;
          double best_v = -std::numeric_limits<double>::infinity();
          // Row-major scan; strict > keeps the first maximum on ties.
          for (std::size_t ky = 0; ky < window; ++ky) {
            for (std::size_t kx = 0; kx < window; ++kx) {
              const std::size_t idx =
                  ((n * H + oy * window + ky) * W + ox * window + kx) * C + c;
              if (xv[idx] > best_v) {
                best_v = xv[idx];
                best = idx;
              }
            }
          }
          const std::size_t o = ((n * OH + oy) * OW + ox) * C + c;
          out.values[o] = best_v;
          argmax[o] = best;
        }
      }
    }
  }
  return tape.record(std::move(out), {input},
                     [argmax = std::move(argmax)](const Tape&, const Tensor& g,
                                                  std::span<Tensor* const> gi) {
                       for (std::size_t o = 0; o < g.size(); ++o) gi[0]->values[argmax[o]] += g.values[o];
                     });
}

// ---- classification heads ---------------------------------------------------

Var softmax(Var x) {
  Tape& tape = tape_of("softmax", x);
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) shape_error("softmax", s, "empty last axis");
  const std::size_t k = s.back();
  const std::size_t rows = x.value().size() / k;
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.values.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) row[j] /= z;
  }
  Tensor y = out;
  return tape.record(std::move(out), {x},
                     [y = std::move(y), k, rows](const Tape&, const Tensor& g,
                                                 std::span<Tensor* const> gi) {
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* yr = y.values.data() + r * k;
                         const double* gr = g.values.data() + r * k;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < k; ++j) dot += gr[j] * yr[j];
                         for (std::size_t j = 0; j < k; ++j) {
                           gi[0]->values[r * k + j] += yr[j] * (gr[j] - dot);
                         }
                       }
                     });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& tape = tape_of("cross_entropy", logits);
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size() || s[1] == 0) {
    shape_error("cross_entropy", s, Shape{labels.size()}, "logits [N,K] vs N labels");
  }
  const std::size_t n = s[0], k = s[1];
  std::vector<double> probs(logits.value().values);
  std::vector<int> lab(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= k) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(lab[r]) +
                                  " outside [0, " + std::to_string(k) + ")");
    }
    double* row = probs.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    loss += log_z - row[lab[r]];
    for (std::size_t j = 0; j < k; ++j) row[j] = std::exp(row[j] - log_z);
  }
  loss /= static_cast<double>(n);
  return tape.record(Tensor::scalar(loss), {logits},
                     [probs = std::move(probs), lab = std::move(lab), n, k](
                         const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                       const double scale = g.values[0] / static_cast<double>(n);
                       for (std::size_t r = 0; r < n; ++r) {
                         for (std::size_t j = 0; j < k; ++j) {
                           const double onehot = static_cast<int>(j) == lab[r] ? 1.0 : 0.0;
                           gi[0]->values[r * k + j] += scale * (probs[r * k + j] - onehot);
                         }
                       }
                     });
}

Var target_margin(Var logits, int target) {
  Tape& tape = tape_of("target_margin", logits);
  const Shape& s = logits.shape();
  const std::size_t k = logits.value().size();
  const bool vector_like = s.size() == 1 || (s.size() == 2 && s[0] == 1);
  if (!vector_like || k < 2) shape_error("target_margin", s, "expected [K] or [1,K] with K >= 2");
  if (target < 0 || static_cast<std::size_t>(target) >= k) {
    throw std::invalid_argument("target_margin: target " + std::to_string(target) +
                                " outside [0, " + std::to_string(k) + ")");
  }
  const auto t = static_cast<std::size_t>(target);
  const auto& z = logits.value().values;
  std::size_t other = t == 0 ? 1 : 0;
  for (std::size_t j = 0; j < k; ++j) {
    if (j != t && z[j] > z[other]) other = j;
  }
  return tape.record(Tensor::scalar(z[other] - z[t]), {logits},
                     [t, other](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                       gi[0]->values[other] += g.values[0];
                       gi[0]->values[t] -= g.values[0];
                     });
}

}  // namespace bswitch
