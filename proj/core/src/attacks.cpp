#include "bswitch/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

namespace bswitch {

std::string_view ModelRef::name() const {
  switch (kind()) {
    case Kind::kRegular: return "regular";
    case Kind::kSap: return "sap";
    case Kind::kSwitching: return "switching";
  }
  return "unknown";
}

const Shape& ModelRef::input_shape() const {
  switch (kind()) {
    case Kind::kRegular: return std::get<0>(target_)->input_shape();
    case Kind::kSap: return std::get<1>(target_)->base.input_shape();
    case Kind::kSwitching: return std::get<2>(target_)->channel(0).input_shape();
  }
  throw std::logic_error("ModelRef: bad kind");
}

ModelRef::Evaluation ModelRef::forward(Tape& tape, Var x, ChannelSelector& stream,
                                       std::optional<std::size_t> channel_override) const {
  switch (kind()) {
    case Kind::kRegular:
      return {bswitch::forward(*std::get<0>(target_), tape, x, Mode::kInfer, nullptr), std::nullopt};
    case Kind::kSap:
      return {sap_forward(*std::get<1>(target_), tape, x, Mode::kInfer, stream.engine(), nullptr),
              std::nullopt};
    case Kind::kSwitching: {
      auto out = bswitch::forward(*std::get<2>(target_), tape, x, Mode::kInfer, stream, nullptr,
                                  channel_override);
      return {out.logits, out.draw};
    }
  }
  throw std::logic_error("ModelRef: bad kind");
}

Tensor ModelRef::logits(const Tensor& batch, ChannelSelector& stream) const {
  Tape tape;
  return forward(tape, tape.constant(batch), stream).logits.value();
}

QueryLoss targeted_cross_entropy(int target) {
  return [target](Var, Var logits) {
    const int labels[] = {target};
    return cross_entropy(logits, labels);
  };
}

QueryLoss cw_objective(const Tensor& original, double c, double kappa, int target) {
  return [original, c, kappa, target](Var input, Var logits) {
    Tape& tape = *input.tape();
    Var delta = sub(input, tape.constant(original.reshaped(input.shape())));
    Var f = clamp_min(target_margin(logits, target), -kappa);
    return add(l2_norm_sq(delta), scalar_mul(f, c));
  };
}

QueryResult GradientQuery::input_gradient(const Tensor& x, const QueryLoss& loss) {
  if (x.shape != model_.input_shape()) {
    throw ShapeError("input_gradient: input " + to_string(x.shape) + " but model expects " +
                     to_string(model_.input_shape()));
  }
  ++queries_;
  Tape tape;
  Var input = tape.variable(x.batched());
  auto eval = model_.forward(tape, input, stream_, override_);
  Var objective = loss(input, eval.logits);
  const GradientMap grads = backward(tape, objective);
  return QueryResult{grads.at(input).reshaped(x.shape), eval.logits.value(), objective.value().item(),
                     eval.draw};
}

void FgsmConfig::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("FgsmConfig: epsilon must be > 0");
}

void CwConfig::validate() const {
  if (!(kappa >= 0.0)) throw std::invalid_argument("CwConfig: kappa must be >= 0");
  if (descent_steps == 0 || binary_search_steps == 0) {
    throw std::invalid_argument("CwConfig: descent and binary-search step counts must be positive");
  }
  if (!(step_size > 0.0) || !(c_init > 0.0) || !(c_max >= c_init)) {
    throw std::invalid_argument("CwConfig: need step_size > 0 and 0 < c_init <= c_max");
  }
}

double l2_distance(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("l2_distance: " + to_string(a.shape) + " vs " + to_string(b.shape));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

namespace {

bool predicts_with_margin(std::span<const double> logits, int target, double kappa) {
  if (argmax(logits) != target) return false;
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (static_cast<int>(j) != target) best_other = std::max(best_other, logits[j]);
  }
  return logits[static_cast<std::size_t>(target)] - best_other >= kappa;
}

void check_target(int target, std::size_t classes) {
  if (target < 0 || static_cast<std::size_t>(target) >= classes) {
    throw std::invalid_argument("attack: target class " + std::to_string(target) + " out of range");
  }
}

}  // namespace

AttackResult fgsm(GradientQuery& query, const Tensor& x, const FgsmConfig& config) {
  config.validate();
  const std::uint64_t queries_before = query.query_count();
  ChannelSelector replay = query.stream();
  const QueryResult q = query.input_gradient(x, targeted_cross_entropy(config.target));
  AttackResult result;
  result.x_adv = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double g = q.gradient.values[i];
    const double sign = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
    result.x_adv.values[i] = std::clamp(x.values[i] - config.epsilon * sign, 0.0, 1.0);
  }
  result.l2 = l2_distance(result.x_adv, x);
  // Re-evaluate under the crafting-time draw by replaying the stream state.
  Tape tape;
  auto eval = query.model().forward(tape, tape.constant(result.x_adv.batched()), replay, q.draw ?
      std::optional<std::size_t>(q.draw->channel_index) : std::nullopt);
  result.craft_success = argmax(eval.logits.value().values) == config.target;
  result.queries = query.query_count() - queries_before;
  return result;
}

AttackResult cw(GradientQuery& query, const Tensor& x, const CwConfig& config) {
  config.validate();
  const std::uint64_t queries_before = query.query_count();

  double low = 0.0;
  double high = std::numeric_limits<double>::infinity();
  double c = config.c_init;

  AttackResult result;
  double best_l2 = std::numeric_limits<double>::infinity();
  Tensor last = x;
  double best_c = c;

  for (std::size_t round = 0; round < config.binary_search_steps; ++round) {
    const QueryLoss objective = cw_objective(x, c, config.kappa, config.target);
    Tensor current = x;
    bool round_success = false;
    for (std::size_t step = 0; step < config.descent_steps; ++step) {
      const QueryResult q = query.input_gradient(current, objective);
      check_target(config.target, q.logits.size());
      if (predicts_with_margin(q.logits.values, config.target, config.kappa)) {
        round_success = true;
        const double l2 = l2_distance(current, x);
        if (l2 < best_l2) {
          best_l2 = l2;
          result.x_adv = current;
          best_c = c;
        }
      }
      for (std::size_t i = 0; i < current.size(); ++i) {
        current.values[i] =
            std::clamp(current.values[i] - config.step_size * q.gradient.values[i], 0.0, 1.0);
      }
    }
    last = std::move(current);
    if (round_success) {
      high = std::min(high, c);
    } else {
      low = std::max(low, c);
    }
    c = std::isfinite(high) ? 0.5 * (low + high) : std::min(10.0 * c, config.c_max);
  }

  result.craft_success = std::isfinite(best_l2);
  if (!result.craft_success) {
    result.x_adv = std::move(last);
    best_c = c;
  }
  result.l2 = l2_distance(result.x_adv, x);
  result.c_final = best_c;
  result.queries = query.query_count() - queries_before;
  return result;
}

std::vector<AttackResult> attack_all(ModelRef model, std::span<const Tensor> examples,
                                     std::span<const int> targets, const AttackConfig& config,
                                     std::uint64_t seed, std::size_t workers) {
  if (examples.size() != targets.size()) {
    throw std::invalid_argument("attack_all: " + std::to_string(examples.size()) + " examples but " +
                                std::to_string(targets.size()) + " targets");
  }
  std::vector<AttackResult> results(examples.size());
  auto run_one = [&](std::size_t i) {
    GradientQuery query(model, derive_seed(seed, i));
    if (const auto* f = std::get_if<FgsmConfig>(&config)) {
      FgsmConfig cfg = *f;
      cfg.target = targets[i];
      results[i] = fgsm(query, examples[i], cfg);
    } else {
      CwConfig cfg = std::get<CwConfig>(config);
      cfg.target = targets[i];
      results[i] = cw(query, examples[i], cfg);
    }
  };

  workers = std::max<std::size_t>(1, std::min(workers, examples.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < examples.size(); ++i) run_one(i);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < examples.size(); i = next++) {
          try {
            run_one(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
  return results;
}

}  // namespace bswitch
