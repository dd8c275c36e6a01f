#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <string_view>
#include <vector>

#include "dapper/flow_table.hpp"
#include "dapper/packet.hpp"

namespace dapper {

// 32-bit serial-number comparisons (RFC 1982 style).
constexpr bool seq_lt(std::uint32_t a, std::uint32_t b) noexcept {
  return static_cast<std::int32_t>(a - b) < 0;
}
constexpr bool seq_leq(std::uint32_t a, std::uint32_t b) noexcept {
  return static_cast<std::int32_t>(a - b) <= 0;
}
constexpr bool seq_gt(std::uint32_t a, std::uint32_t b) noexcept { return seq_lt(b, a); }
constexpr bool seq_geq(std::uint32_t a, std::uint32_t b) noexcept { return seq_leq(b, a); }

struct MetricsConfig {
  // Multiplicative decrease applied on the first fast retransmit of a recovery.
  double multiplicative_decrease = 0.5;
  // Window restored after a timeout, in segments.
  std::uint32_t initial_window_segments = 10;
  Duration rto_min = 200 * kMillisecond;
  // 0 means unbounded.
  std::size_t rtt_queue_capacity = 0;
  bool rttvar_enabled = true;
  std::uint32_t dupack_threshold = 3;
  // Flight during fast recovery counts segments the receiver already holds
  // out of order, so it does not raise the window estimate.
  bool hold_cwnd_in_recovery = true;
  std::size_t round_history = 8;
  // Data-plane direction test: compare addresses only, as the register
  // pipeline does with its sender-IP register.
  bool match_sender_by_ip_only = false;
  // Segment size assumed before any MSS is known.
  std::uint16_t fallback_mss = 1460;
  // Midstream role election freezes after this many data packets.
  std::uint32_t role_freeze_packets = 10;

  static MetricsConfig hardware_emulation();
};

struct RttEntry {
  std::uint32_t seq_end = 0;
  Timestamp sent_at = 0;
};

/// Outstanding (sequence, time) samples awaiting acknowledgment, strictly
/// increasing in seq_end.
class RttQueue {
 public:
  explicit RttQueue(std::size_t capacity = 0) : capacity_(capacity) {}

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  bool has_room() const noexcept { return capacity_ == 0 || entries_.size() < capacity_; }
  const std::deque<RttEntry>& entries() const noexcept { return entries_; }

  /// Appends when there is room and seq_end extends the queue.
  bool push(std::uint32_t seq_end, Timestamp sent_at);

  /// Drops every entry whose segment ends inside (start, end].
  std::size_t invalidate(std::uint32_t start, std::uint32_t end);

  struct Popped {
    std::size_t count = 0;
    std::optional<RttEntry> latest;
  };
  /// Removes every entry with seq_end <= ack.
  Popped pop_acked(std::uint32_t ack);

  void clear() noexcept { entries_.clear(); }

 private:
  std::size_t capacity_;
  std::deque<RttEntry> entries_;
};

struct SrttState {
  Duration srtt = 0;
  Duration rttvar = 0;
  Duration rto = 0;
  std::uint64_t samples = 0;

  friend bool operator==(const SrttState&, const SrttState&) = default;
};

struct KarnConfig {
  Duration rto_min = 200 * kMillisecond;
  bool rttvar_enabled = true;
};

/// One smoothed-RTT step with alpha = 1/8, beta = 1/4 and
/// rto = srtt + 4 * rttvar (2 * srtt without rttvar), floored at rto_min.
SrttState karn_update(const SrttState& state, Duration measurement, const KarnConfig& cfg);

struct RunningMean {
  double mean = 0.0;
  std::uint64_t count = 0;

  void add(double x) noexcept {
    ++count;
    mean += (x - mean) / static_cast<double>(count);
  }
};

enum class OptionSource { none, handshake, midstream };

enum class LossKind { fast_retransmit, timeout };

struct LossEpoch {
  Timestamp at = 0;
  LossKind kind = LossKind::fast_retransmit;
  std::uint64_t cwnd_before = 0;
  std::uint64_t cwnd_after = 0;
  // Flight before the loss (f1) and in the first round after recovery (f2).
  std::uint64_t flight_before = 0;
  std::uint64_t flight_after = 0;
  bool completed = false;
  Timestamp completed_at = 0;
};

enum class UpdateEvent {
  SynOptions,
  NewSegment,
  FlightIncrease,
  CwndRaise,
  RttEnqueue,
  ReactionSample,
  SubMssSegment,
  Retransmission,
  FastRetransmit,
  TimeoutRetransmit,
  CwndDecrease,
  CwndReset,
  NewAck,
  RttSample,
  DupAck,
  StaleAck,
  WindowUpdate,
  RecoveryExit,
  RoundComplete,
  LossEpochComplete,
  SenderPureAck,
  ReceiverData,
  Ignored,
};

std::string_view to_string(UpdateEvent e) noexcept;

struct FlowState {
  // Role election.
  std::optional<Direction> sender_dir;
  std::uint32_t sender_ip = 0;
  std::uint16_t sender_port = 0;
  std::uint32_t receiver_ip = 0;
  std::uint16_t receiver_port = 0;
  bool role_frozen = false;
  bool handshake_seen = false;
  std::uint32_t role_data_packets = 0;
  std::uint64_t role_bytes[2] = {0, 0};

  // Counters.
  std::uint64_t packets_seen = 0;
  std::uint64_t pkts_sent = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t pkts_acked = 0;
  std::uint64_t acks_received = 0;
  std::uint64_t sender_pure_acks = 0;
  std::uint64_t receiver_data_packets = 0;
  std::uint64_t receiver_bytes = 0;
  std::uint64_t stale_acks = 0;
  std::uint64_t sub_mss_segments = 0;
  std::uint64_t sack_blocks_seen = 0;
  std::uint64_t max_payload = 0;

  // Sequence space.
  bool seq_initialized = false;
  bool flight_known = false;
  std::uint32_t highest_sent_seq = 0;
  std::uint32_t highest_acked = 0;
  std::uint64_t flight_size = 0;
  std::uint64_t max_flight = 0;
  std::uint64_t inferred_cwnd = 0;

  // Constants.
  std::uint16_t mss = 0;
  OptionSource mss_source = OptionSource::none;
  std::uint8_t wscale = 0;
  OptionSource wscale_source = OptionSource::none;
  std::optional<TcpOptions> syn_options;
  std::optional<TcpOptions> synack_options;

  // Receive window.
  bool rwnd_known = false;
  std::uint16_t last_raw_rwnd = 0;
  std::uint64_t last_effective_rwnd = 0;
  std::uint64_t max_effective_rwnd = 0;

  // Loss state.
  std::uint32_t dup_ack_count = 0;
  bool in_fast_recovery = false;
  std::uint32_t recovery_end_seq = 0;
  bool in_timeout_recovery = false;
  std::uint32_t timeout_recovery_end = 0;
  std::uint64_t retx_total = 0;
  std::uint64_t retx_fast = 0;
  std::uint64_t retx_timeout = 0;
  bool retx_pending = false;
  std::uint32_t retx_low = 0;
  std::uint32_t retx_high = 0;
  // Pre-loss ceiling; while inferred_cwnd sits below it the flow is in a
  // post-loss epoch.
  std::uint64_t loss_cwnd_ceiling = 0;
  std::vector<LossEpoch> losses;
  bool f2_pending = false;
  std::uint32_t f2_round_end = 0;
  std::uint64_t f2_max_flight = 0;

  // RTT.
  SrttState rtt;
  RttQueue rtt_queue;
  Duration min_rtt = 0;
  Duration last_rtt = 0;
  Timestamp last_ack_time = 0;

  // Receiver-side and reaction statistics.
  Timestamp last_new_ack_time = 0;
  bool awaiting_reaction = false;
  Duration last_reaction = 0;
  RunningMean reaction;
  RunningMean dequeued_per_ack;
  std::size_t last_dequeued = 0;

  // Per-round flight maxima.
  bool round_active = false;
  std::uint32_t round_end_seq = 0;
  std::uint64_t round_max_flight = 0;
  std::deque<std::uint64_t> round_flights;

  // Midstream lower bound on the receiver's window scale.
  std::uint8_t wscale_lower_bound = 0;

  // Rounds left in a slow-start restart after a timeout.
  std::uint32_t slow_start_restart_rounds = 0;

  Timestamp init_time = 0;
  Timestamp update_time = 0;

  bool in_post_loss_epoch() const noexcept { return inferred_cwnd < loss_cwnd_ceiling; }
  std::uint16_t segment_size(const MetricsConfig& cfg) const noexcept {
    return mss != 0 ? mss : cfg.fallback_mss;
  }
};

FlowState make_flow_state(const MetricsConfig& cfg);

/// Applies one packet. Exactly one of the data, retransmission, new-ACK and
/// duplicate-ACK paths runs for packets that carry sequence information.
std::vector<UpdateEvent> process_packet(FlowState& state, const PacketRecord& pkt,
                                        Direction direction, const MetricsConfig& cfg);

/// In-window test against [highest_acked - W, highest_sent + W] with
/// W = max(largest effective RWND seen, inferred CWND). ACK numbers of
/// receiver packets are tested against the same window.
bool sanity_check(const FlowState& state, const PacketRecord& pkt, bool from_sender);

/// True when pkt originates at the elected sender.
std::optional<bool> is_from_sender(const FlowState& state, const PacketRecord& pkt,
                                   Direction direction, const MetricsConfig& cfg);

/// Smallest shift s in [0, 14] with raw_rwnd << s >= flight. nullopt for a
/// zero window.
std::optional<std::uint8_t> infer_wscale(std::uint64_t flight_size, std::uint16_t raw_rwnd);

}  // namespace dapper
