#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dapper/analyzer.hpp"
#include "dapper/traffic_synth.hpp"

namespace dapper {

enum class ProblemClass { sender, receiver, network, sender_network, receiver_network };
constexpr std::size_t kProblemClassCount = 5;

std::string_view to_string(ProblemClass c) noexcept;
std::optional<ProblemClass> problem_class_from_string(std::string_view s) noexcept;
Category category_of(ProblemClass c) noexcept;
const std::vector<ProblemClass>& all_problem_classes();

/// Problem parameters drawn per trial.
struct TrialRanges {
  Duration delay_min = 15 * kMillisecond;
  Duration delay_max = 40 * kMillisecond;
  std::vector<std::uint32_t> rcvbuf_segments = {2, 3, 4};
  std::vector<double> loss_rates = {0.01, 0.02, 0.05, 0.10};
};

struct EvalConfig {
  std::size_t trials = 100;
  std::uint64_t seed = 1;
  std::vector<ProblemClass> classes = all_problem_classes();
  // Pins the loss rate of every network-bearing class.
  std::optional<double> loss_rate;
  ScenarioConfig base;
  TrialRanges ranges;
  AnalyzerConfig analyzer;
  // 0 picks the hardware concurrency.
  unsigned threads = 0;
};

/// Seeded scenario for one trial of a class. Deterministic in (seed, class, trial).
ScenarioConfig make_trial_scenario(const EvalConfig& cfg, ProblemClass cls, std::size_t trial);

struct TrialResult {
  ProblemClass cls = ProblemClass::sender;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  Category expected = Category::none;
  Category reported = Category::none;
  LabelSet dominant;
  bool detected = false;
  bool exact = false;
  bool completed = false;
  // Injected loss rate, 0 when no network problem.
  double loss_rate = 0.0;
  std::size_t random_drops = 0;
  FractionReport fractions;
};

/// Simulates and analyzes one scenario and scores it against its ground truth.
TrialResult run_trial(const ScenarioConfig& scenario, const AnalyzerConfig& acfg);

struct ClassSummary {
  ProblemClass cls = ProblemClass::sender;
  std::size_t trials = 0;
  std::size_t detected = 0;
  std::size_t exact = 0;

  double tpr() const noexcept;
  double accuracy() const noexcept;
};

struct EvalResult {
  std::vector<ClassSummary> summaries;
  std::vector<TrialResult> trials;
};

EvalResult evaluate(const EvalConfig& cfg);

struct SeverityPoint {
  double loss_rate = 0.0;
  ClassSummary summary;
};

/// Network class accuracy at each fixed loss rate.
std::vector<SeverityPoint> severity_sweep(const EvalConfig& cfg, const std::vector<double>& rates);

void write_table(std::ostream& os, const EvalResult& r);
void write_csv(std::ostream& os, const EvalResult& r);
nlohmann::json to_json(const EvalResult& r);

}  // namespace dapper
