#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dapper/metrics.hpp"

namespace dapper {

enum class Label { sender, receiver, network };
constexpr std::size_t kLabelCount = 3;

enum class Category { none, sender, receiver, network, sender_network, receiver_network };
constexpr std::size_t kCategoryCount = 6;

std::string_view to_string(Label l) noexcept;
std::string_view to_string(Category c) noexcept;
std::optional<Category> category_from_string(std::string_view s) noexcept;

struct LabelSet {
  bool sender = false;
  bool receiver = false;
  bool network = false;

  bool empty() const noexcept { return !sender && !receiver && !network; }
  bool has(Label l) const noexcept;
  void set(Label l, bool v = true) noexcept;
  friend bool operator==(const LabelSet&, const LabelSet&) = default;
};

/// Labels a category stands for.
LabelSet labels_of(Category c) noexcept;

struct Evidence {
  std::string heuristic;
  std::optional<Label> label;
  double value = 0.0;
  double bound = 0.0;
  std::string comparison;
};

struct Verdict {
  Timestamp start = 0;
  Timestamp end = 0;
  bool indeterminate = false;
  LabelSet labels;
  std::vector<Evidence> evidence;
  Category category = Category::none;
};

struct DiagnosisConfig {
  Duration reaction_threshold = 1 * kMillisecond;
  std::optional<Duration> expected_rtt;
  double rtt_inflation_factor = 2.0;
  double growth_ratio = 1.8;
  std::uint32_t growth_rounds = 2;
  double sub_mss_fraction = 0.5;
  // Flight within this fraction of a bound counts as using it.
  double binding_slack = 0.9;
  // Share of a window's samples that must satisfy a window bound.
  double binding_fraction = 0.5;
  // Share of samples that must underuse the send window ("consistently").
  double underuse_fraction = 0.75;
  double delayed_ack_epsilon = 0.1;
  double loss_ratio_tolerance = 0.1;
  double multiplicative_decrease = 0.5;
  Duration min_window = 100 * kMillisecond;
  double window_srtt_multiple = 2.0;
  // A label is dominant for a flow when it covers at least this share of
  // the classified time.
  double dominant_fraction = 0.05;
  // Windows citing a loss that left cwnd below rwnd after which network is
  // reported regardless of its time share. 0 disables.
  std::size_t dominant_loss_windows = 1;
};

struct SlowStartResult {
  bool detected = false;
  bool insufficient = false;
};

/// Exponential growth over the last growth_rounds round pairs.
SlowStartResult detect_slow_start(std::span<const std::uint64_t> round_flights,
                                  const DiagnosisConfig& cfg);

struct LossObservation {
  LossKind kind = LossKind::fast_retransmit;
  std::uint64_t cwnd_after = 0;
  std::uint64_t rwnd = 0;
};

/// Aggregates of one observation window.
struct WindowSnapshot {
  Timestamp start = 0;
  Timestamp end = 0;
  std::uint64_t data_packets = 0;
  std::uint64_t sub_mss_packets = 0;
  std::uint64_t acks = 0;

  // Samples of (flight, inferred_cwnd, effective_rwnd) taken at each new
  // segment once both windows are known.
  std::uint64_t samples = 0;
  std::uint64_t network_binding = 0;
  std::uint64_t receiver_binding = 0;
  std::uint64_t underuse = 0;
  RunningMean flight;
  RunningMean cwnd;
  RunningMean rwnd;

  RunningMean reaction;
  RunningMean rtt;
  RunningMean dequeued;
  Duration min_rtt = 0;

  std::vector<LossObservation> losses;
  // (f1, f2) of loss epochs completed in the window.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> completed_losses;

  std::vector<std::uint64_t> round_flights;
  bool restart = false;
};

/// Records one (flight, cwnd, rwnd) observation into a snapshot.
void add_window_sample(WindowSnapshot& w, std::uint64_t flight, std::uint64_t cwnd,
                       std::uint64_t rwnd, bool post_loss, bool restart,
                       const DiagnosisConfig& cfg);

Verdict classify_window(const WindowSnapshot& w, const DiagnosisConfig& cfg);

struct FractionReport {
  bool empty = true;
  std::size_t classified_windows = 0;
  std::size_t indeterminate_windows = 0;
  double classified_time = 0.0;
  std::size_t network_loss_windows = 0;
  std::array<double, kCategoryCount> fractions{};
  std::array<double, kLabelCount> label_fractions{};
  LabelSet dominant;
  Category dominant_category = Category::none;
};

FractionReport aggregate_report(std::span<const Verdict> verdicts, const DiagnosisConfig& cfg);

/// Maps a label set to one category; sender+receiver is resolved by the
/// larger weight, ties going to receiver.
Category category_for(LabelSet labels, double sender_weight, double receiver_weight) noexcept;

/// Builds per-window snapshots from the metrics engine's event stream.
class WindowTracker {
 public:
  explicit WindowTracker(DiagnosisConfig cfg = {}) : cfg_(std::move(cfg)) {}

  /// Feeds one processed packet. Returns a verdict when the packet closes
  /// the current window.
  std::optional<Verdict> observe(const FlowState& state, const PacketRecord& pkt,
                                 std::span<const UpdateEvent> events);

  /// Closes the open window, if any.
  std::optional<Verdict> flush(const FlowState& state);

  Duration window_length(const FlowState& state) const noexcept;
  const WindowSnapshot& current() const noexcept { return win_; }

 private:
  std::optional<Verdict> close(const FlowState& state, Timestamp end);

  DiagnosisConfig cfg_;
  WindowSnapshot win_;
  bool open_ = false;
};

nlohmann::json to_json(const Evidence& e);
nlohmann::json to_json(const Verdict& v);
nlohmann::json to_json(const FractionReport& r);

}  // namespace dapper
