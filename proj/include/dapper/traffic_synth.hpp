#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "dapper/diagnosis.hpp"
#include "dapper/packet.hpp"

namespace dapper {

enum class SenderProblemKind { none, per_packet_delay, sub_mss };
enum class ReceiverProblemKind { none, small_rcvbuf, delayed_ack };

struct SenderProblem {
  SenderProblemKind kind = SenderProblemKind::none;
  // per_packet_delay: mean gap between application writes of one segment.
  Duration delay = 0;
  // Uniform jitter as a fraction of delay.
  double jitter = 0.25;
  // sub_mss: largest write the application hands to TCP.
  std::uint32_t max_segment = 0;
};

struct ReceiverProblem {
  ReceiverProblemKind kind = ReceiverProblemKind::none;
  std::uint32_t rcvbuf = 0;
  std::uint32_t ack_every = 2;
  Duration ack_timeout = 40 * kMillisecond;
};

struct GilbertElliotConfig {
  double loss_rate = 0.05;
  Duration bad_duration = 2 * kSecond;
  Duration good_duration = 8 * kSecond;
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  std::uint64_t file_size = 1 << 20;
  double link_bw = 1e6;
  Duration rtt = 50 * kMillisecond;
  std::uint16_t mss = 1460;
  std::uint32_t iw = 10;
  double C = 0.5;
  SenderProblem sender;
  ReceiverProblem receiver;
  std::optional<GilbertElliotConfig> network;

  std::uint32_t default_rcvbuf = 1 << 20;
  std::uint32_t queue_bytes = 64 * 1024;
  Duration rto_initial = 1 * kSecond;
  Duration rto_min = 200 * kMillisecond;
  Duration rto_max = 60 * kSecond;
  Duration reaction_min = 10 * kMicrosecond;
  Duration reaction_max = 50 * kMicrosecond;
  Duration max_sim_time = 600 * kSecond;
  std::uint8_t server_wscale = 7;
  std::uint32_t request_bytes = 64;
};

/// Throws std::invalid_argument for out-of-range parameters.
void validate(const ScenarioConfig& cfg);

enum class LossEventKind { random_drop, queue_drop, fast_retransmit, timeout };

struct LossEvent {
  Timestamp time = 0;
  LossEventKind kind = LossEventKind::random_drop;
};

struct CwndPoint {
  Timestamp time = 0;
  std::uint64_t cwnd = 0;
};

struct GroundTruth {
  LabelSet labels;
  std::vector<CwndPoint> cwnd_trace;
  std::uint16_t true_mss = 0;
  std::uint8_t true_wscale = 0;
  std::vector<LossEvent> loss_events;
  // Bad-state spans of the loss channel that overlap the run.
  std::vector<std::pair<Timestamp, Timestamp>> bad_intervals;
  bool timed_out = false;
  Timestamp completion_time = 0;
  std::uint64_t bytes_acked = 0;
  std::uint64_t max_advertised_window = 0;

  /// True cwnd in effect at time t (last trace point at or before t).
  std::uint64_t cwnd_at(Timestamp t) const;
  bool has_drops() const;
};

struct SimulationResult {
  // Packets as seen at the sender's edge, in timestamp order.
  std::vector<PacketRecord> packets;
  GroundTruth truth;
};

/// Runs one scenario to completion or max_sim_time.
SimulationResult simulate(const ScenarioConfig& cfg);

struct GeState {
  bool bad = false;
  Duration remaining = 0;
};

struct GeStep {
  GeState next;
  bool drop = false;
};

/// Advances the channel by `elapsed` (switching state whenever the dwell
/// time runs out) and decides the fate of one packet.
GeStep gilbert_elliot_step(GeState state, Duration elapsed, std::mt19937_64& rng,
                            const GilbertElliotConfig& cfg);

/// Random starting point within one good+bad cycle.
GeState gilbert_elliot_initial(std::mt19937_64& rng, const GilbertElliotConfig& cfg);

/// Smallest shift that fits the buffer into the 16-bit window field.
std::uint8_t wscale_for_buffer(std::uint64_t rcvbuf) noexcept;

nlohmann::json to_json(const ScenarioConfig& cfg);
ScenarioConfig scenario_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GroundTruth& t);
std::string_view to_string(LossEventKind k) noexcept;

}  // namespace dapper
