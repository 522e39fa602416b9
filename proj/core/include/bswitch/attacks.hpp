#pragma once

// Targeted FGSM and Carlini-Wagner (L2) attacks. Both talk to the target only
// through GradientQuery, which performs one forward+backward under one fresh
// stochastic draw of the model per call.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "bswitch/nn.hpp"
#include "bswitch/stochastic.hpp"
#include "bswitch/tensor.hpp"

namespace bswitch {

/// Non-owning handle to a regular, SAP or switching classifier.
class ModelRef {
 public:
  enum class Kind { kRegular, kSap, kSwitching };

  ModelRef(const Sequential& model) : target_(&model) {}  // NOLINT(google-explicit-constructor)
  ModelRef(const SapModel& model) : target_(&model) {}  // NOLINT(google-explicit-constructor)
  ModelRef(const SwitchingModel& model) : target_(&model) {}  // NOLINT(google-explicit-constructor)

  Kind kind() const { return static_cast<Kind>(target_.index()); }
  bool stochastic() const { return kind() != Kind::kRegular; }
  std::string_view name() const;
  const Shape& input_shape() const;

  struct Evaluation {
    Var logits;
    std::optional<ChannelDraw> draw;  // switching targets only
  };
  /// Infer-mode logits under one draw from `stream`. `channel_override` pins
  /// the channel of a switching target and is ignored otherwise.
  Evaluation forward(Tape& tape, Var x, ChannelSelector& stream,
                     std::optional<std::size_t> channel_override = std::nullopt) const;
  /// Logits of a batch [N,...] under one draw per call.
  Tensor logits(const Tensor& batch, ChannelSelector& stream) const;

 private:
  std::variant<const Sequential*, const SapModel*, const SwitchingModel*> target_;
};

/// Scalar attack loss assembled on the tape from the tracked input and logits.
using QueryLoss = std::function<Var(Var input, Var logits)>;

/// Cross-entropy toward `target` (descending it moves toward the target).
QueryLoss targeted_cross_entropy(int target);
/// ||input - original||^2 + c * max(max_{i!=t} Z_i - Z_t, -kappa).
QueryLoss cw_objective(const Tensor& original, double c, double kappa, int target);

struct QueryResult {
  Tensor gradient;  // same shape as the queried input
  Tensor logits;    // [1,K] under the same draw
  double loss = 0.0;
  std::optional<ChannelDraw> draw;
};

class GradientQuery {
 public:
  GradientQuery(ModelRef model, std::uint64_t seed) : model_(model), stream_(seed) {}

  /// Gradient of `loss` at `x` (one example, no batch axis).
  QueryResult input_gradient(const Tensor& x, const QueryLoss& loss);

  ModelRef model() const { return model_; }
  std::uint64_t query_count() const { return queries_; }
  /// Pins the active channel of a switching target for subsequent queries.
  void set_channel_override(std::optional<std::size_t> channel) { override_ = channel; }
  ChannelSelector& stream() { return stream_; }

 private:
  ModelRef model_;
  ChannelSelector stream_;
  std::optional<std::size_t> override_;
  std::uint64_t queries_ = 0;
};

struct FgsmConfig {
  double epsilon = 0.1;
  int target = 0;
  void validate() const;
};

struct CwConfig {
  double kappa = 0.0;
  std::size_t descent_steps = 100;
  double step_size = 0.1;
  std::size_t binary_search_steps = 10;
  double c_init = 1.0;
  double c_max = 1e3;
  int target = 0;
  void validate() const;
};

struct AttackResult {
  Tensor x_adv;
  double l2 = 0.0;
  double c_final = 0.0;       // CW only
  bool craft_success = false;  // fooled the draw it was crafted against
  std::uint64_t queries = 0;
};

/// x' = clip(x - eps * sign(grad CE(F(x), t)), 0, 1) with sign(0) = 0; one query.
AttackResult fgsm(GradientQuery& query, const Tensor& x, const FgsmConfig& config);

/// Projected gradient descent on the CW objective with a binary search over c.
/// Issues exactly binary_search_steps * descent_steps queries.
AttackResult cw(GradientQuery& query, const Tensor& x, const CwConfig& config);

using AttackConfig = std::variant<FgsmConfig, CwConfig>;

/// Attacks every example with its own target; example i uses the query
/// stream derive_seed(seed, i), so results do not depend on `workers`.
std::vector<AttackResult> attack_all(ModelRef model, std::span<const Tensor> examples,
                                     std::span<const int> targets, const AttackConfig& config,
                                     std::uint64_t seed, std::size_t workers = 1);

double l2_distance(const Tensor& a, const Tensor& b);

}  // namespace bswitch
