#include "bswitch/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace bswitch {

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, end);
}

EvalReport fooling_ratio(ModelRef model, std::span<const AttackResult> results,
                         std::span<const int> targets, std::uint64_t eval_seed,
                         std::size_t samples_per_example) {
  if (results.empty()) throw std::invalid_argument("fooling_ratio: no adversarial examples");
  if (results.size() != targets.size()) {
    throw std::invalid_argument("fooling_ratio: results and targets are not aligned");
  }
  if (samples_per_example == 0) throw std::invalid_argument("fooling_ratio: samples_per_example must be >= 1");
  EvalReport report;
  report.model_id = std::string(model.name());
  report.n_examples = results.size();
  report.eval_samples_per_example = samples_per_example;
  report.eval_seed = eval_seed;
  double l2_sum = 0.0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    ChannelSelector stream(derive_seed(eval_seed, i));
    const Tensor batch = results[i].x_adv.batched();
    std::size_t hits = 0;
    for (std::size_t s = 0; s < samples_per_example; ++s) {
      hits += argmax(model.logits(batch, stream).values) == targets[i];
    }
    report.fooled += 2 * hits > samples_per_example;
    l2_sum += results[i].l2;
  }
  report.fooling_ratio = static_cast<double>(report.fooled) / static_cast<double>(results.size());
  report.mean_l2 = l2_sum / static_cast<double>(results.size());
  return report;
}

double model_accuracy(ModelRef model, const Dataset& dataset, std::uint64_t seed) {
  if (dataset.size() == 0) throw std::invalid_argument("model_accuracy: empty dataset");
  if (model.kind() == ModelRef::Kind::kRegular) {
    ChannelSelector unused(seed);
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 250;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < dataset.size(); start += kChunk) {
      idx.resize(std::min(kChunk, dataset.size() - start));
      std::iota(idx.begin(), idx.end(), start);
      const auto pred = argmax_rows(model.logits(dataset.gather_images(idx), unused));
      for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == dataset.labels[idx[k]];
    }
    return static_cast<double>(correct) / static_cast<double>(dataset.size());
  }
  ChannelSelector stream(seed);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    correct += argmax(model.logits(dataset.example(i).batched(), stream).values) == dataset.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

std::vector<int> random_targets(std::span<const int> labels, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(0, kNumClasses - 2);
  std::vector<int> out;
  out.reserve(labels.size());
  for (int label : labels) {
    const int t = pick(rng);
    out.push_back(t >= label ? t + 1 : t);
  }
  return out;
}

// ---- gradient distributions -------------------------------------------------------------

std::size_t GradientHistogram::distinct_values() const {
  return std::set<double>(samples.begin(), samples.end()).size();
}

double GradientHistogram::variance() const {
  if (samples.empty()) return 0.0;
  // Shifted by the first sample so identical samples give exactly zero.
  const double shift = samples.front();
  const auto n = static_cast<double>(samples.size());
  double s1 = 0.0, s2 = 0.0;
  for (double v : samples) {
    s1 += v - shift;
    s2 += (v - shift) * (v - shift);
  }
  return std::max(0.0, (s2 - s1 * s1 / n) / n);
}

std::size_t GradientHistogram::occupied_bins() const {
  return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }));
}

std::vector<GradientHistogram> sample_gradient_distribution(ModelRef model, const Tensor& x, int target,
                                                            std::size_t n_samples,
                                                            std::span<const std::size_t> pixels,
                                                            std::uint64_t seed, std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("sample_gradient_distribution: bins must be >= 1");
  for (std::size_t p : pixels) {
    if (p >= x.size()) {
      throw std::out_of_range("sample_gradient_distribution: pixel " + std::to_string(p) +
                              " outside input of " + std::to_string(x.size()) + " values");
    }
  }
  std::vector<GradientHistogram> out(pixels.size());
  for (std::size_t k = 0; k < pixels.size(); ++k) {
    out[k].pixel = pixels[k];
    out[k].samples.reserve(n_samples);
  }
  GradientQuery query(model, seed);
  const QueryLoss objective = cw_objective(x, 1.0, 0.0, target);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const QueryResult q = query.input_gradient(x, objective);
    for (std::size_t k = 0; k < pixels.size(); ++k) out[k].samples.push_back(q.gradient.values[pixels[k]]);
  }
  for (auto& h : out) {
    if (h.samples.empty()) continue;
    const auto [lo_it, hi_it] = std::minmax_element(h.samples.begin(), h.samples.end());
    const double lo = *lo_it, hi = *hi_it;
    if (lo == hi) {
      h.bin_edges = {lo, hi};
      h.counts = {h.samples.size()};
      continue;
    }
    h.bin_edges.resize(bins + 1);
    for (std::size_t b = 0; b <= bins; ++b) {
      h.bin_edges[b] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins);
    }
    h.bin_edges.back() = hi;
    h.counts.assign(bins, 0);
    for (double v : h.samples) {
      auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
      ++h.counts[std::min(b, bins - 1)];
    }
  }
  return out;
}

// ---- channel sweep ---------------------------------------------------------------------

SweepResult channel_sweep(std::span<const std::size_t> channel_counts, const SweepSetup& setup) {
  if (setup.train == nullptr || setup.test == nullptr) {
    throw std::invalid_argument("channel_sweep: train and test sets are required");
  }
  SweepResult result;
  for (std::size_t k : channel_counts) {
    if (k == 0 || k > setup.pool.size()) {
      throw std::invalid_argument("channel_sweep: k=" + std::to_string(k) + " but the submodel pool holds " +
                                  std::to_string(setup.pool.size()));
    }
    SwitchingModel built = build_switching(setup.pool.first(k), setup.split_index, setup.upper_seed,
                                           setup.selector_seed);
    Phase2Result trained = train_phase2(std::move(built), *setup.train, setup.phase2);
    const SwitchingModel& model = trained.model;

    SweepRow row;
    row.channels = k;
    row.attacks = attack_all(model, setup.attack_examples, setup.attack_targets, setup.cw,
                             setup.attack_seed, setup.workers);
    row.report = fooling_ratio(model, row.attacks, setup.attack_targets, setup.eval_seed,
                               setup.samples_per_example);
    row.report.model_id = "switching-k" + std::to_string(k);
    row.report.attack_id = "cw";
    row.report.attack_param = setup.cw.kappa;
    row.report.attack_seed = setup.attack_seed;
    row.report.test_accuracy = model_accuracy(model, *setup.test, setup.eval_seed);
    result.rows.push_back(std::move(row));
    result.models.push_back(std::move(trained.model));
  }
  return result;
}

// ---- CSV ------------------------------------------------------------------------------------

std::string csv_comment_block(const Metadata& meta) {
  std::string out;
  for (const auto& [key, value] : meta) out += "# " + key + "=" + value + "\n";
  return out;
}

std::string report_csv(std::span<const EvalReport> reports, const Metadata& meta) {
  std::string out = csv_comment_block(meta);
  out += "model,attack,epsilon_or_kappa,fooling_ratio,mean_l2,test_accuracy,n,seed\n";
  for (const auto& r : reports) {
    out += r.model_id + "," + r.attack_id + "," + format_double(r.attack_param) + "," +
           format_double(r.fooling_ratio) + "," + format_double(r.mean_l2) + "," +
           format_double(r.test_accuracy) + "," + std::to_string(r.n_examples) + "," +
           std::to_string(r.attack_seed) + "\n";
  }
  return out;
}

std::string gradient_csv(std::span<const GradientHistogram> histograms, const Metadata& meta) {
  std::string out = csv_comment_block(meta);
  out += "pixel,sample_index,value\n";
  for (const auto& h : histograms) {
    for (std::size_t s = 0; s < h.samples.size(); ++s) {
      out += std::to_string(h.pixel) + "," + std::to_string(s) + "," + format_double(h.samples[s]) + "\n";
    }
  }
  return out;
}

std::string sweep_csv(std::span<const SweepRow> rows, const Metadata& meta) {
  std::string out = csv_comment_block(meta);
  out += "k,fooling_ratio,mean_l2,test_accuracy,n,seed\n";
  for (const auto& row : rows) {
    out += std::to_string(row.channels) + "," + format_double(row.report.fooling_ratio) + "," +
           format_double(row.report.mean_l2) + "," + format_double(row.report.test_accuracy) + "," +
           std::to_string(row.report.n_examples) + "," + std::to_string(row.report.attack_seed) + "\n";
  }
  return out;
}

}  // namespace bswitch
