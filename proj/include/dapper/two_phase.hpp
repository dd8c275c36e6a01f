#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>

#include <json.hpp>

#include "dapper/metrics.hpp"

namespace dapper {

/// Phase-1 register block: init_time, bytes_sent, update_time.
struct Phase1State {
  bool started = false;
  Timestamp init_time = 0;
  std::uint64_t bytes_sent = 0;
  Timestamp update_time = 0;
};

/// Three 32-bit registers.
constexpr std::size_t kPhase1RegisterBytes = 12;
/// MSS (16 bits) and window scale (8 bits) retained from the handshake.
constexpr std::size_t kCachedOptionBytes = 3;

#pragma pack(push, 1)
/// Phase-2 register block as laid out in the data plane: sixteen 32-bit
/// registers plus the two handshake constants. The sanity latch rides in
/// the top bit of dup_acks.
struct Phase2Registers {
  std::uint32_t sender_ip;
  std::uint32_t highest_sent_seq;
  std::uint32_t highest_acked;
  std::uint32_t pkts_sent;
  std::uint32_t bytes_sent;
  std::uint32_t inferred_cwnd;
  std::uint32_t raw_rwnd;
  std::uint32_t dup_acks;
  std::uint32_t retx;
  std::uint32_t srtt_us;
  std::uint32_t rttvar_us;
  std::uint32_t rtt_seq;
  std::uint32_t rtt_time_us;
  std::uint32_t rtt_samples;
  std::uint32_t last_ack_time_us;
  std::uint32_t reaction_sum_us;
  std::uint16_t mss;
  std::uint8_t wscale;
};
#pragma pack(pop)

constexpr std::size_t kPhase2RegisterBytes = sizeof(Phase2Registers);
static_assert(kPhase2RegisterBytes == 67);

constexpr std::uint32_t kSanityBit = 0x8000'0000u;

/// Truncates a flow's state into its register image.
Phase2Registers pack_registers(const FlowState& state, bool sanity_ok);

/// Bytes of per-flow register payload in phase 1.
constexpr std::size_t phase1_bytes(bool cache_options) noexcept {
  return kPhase1RegisterBytes + (cache_options ? kCachedOptionBytes : 0);
}

/// Total register payload for n flows, a troubled share of which holds
/// phase-2 state in addition to the phase-1 block.
double two_phase_payload(std::size_t flows, double troubled_fraction, bool cache_options);
double single_phase_payload(std::size_t flows);

/// Adds sender-direction payload and advances update_time.
void phase1_update(Phase1State& state, const PacketRecord& pkt, bool sender_direction);

enum class OptionMode { cached, midstream };

struct TwoPhaseConfig {
  // Required; no default is implied.
  double badness_rate_bps = 0.0;
  Duration min_age = 1 * kSecond;
  std::uint64_t min_bytes = 10 * 1460;
  OptionMode option_mode = OptionMode::midstream;
  Duration scan_interval = 100 * kMillisecond;
};

struct BadnessResult {
  bool troubled = false;
  bool insufficient = false;
  double rate_bps = 0.0;
};

/// rate = 8 * bytes / (update_time - init_time); troubled iff rate is
/// strictly below the threshold once the age and size guards pass.
BadnessResult badness(const Phase1State& state, double threshold_bps, Timestamp now,
                      const TwoPhaseConfig& cfg);

/// Constants seen in the handshake, kept while the flow is in phase 1.
struct OptionCache {
  std::optional<TcpOptions> syn;
  std::optional<TcpOptions> synack;
  std::optional<std::uint32_t> synack_src;

  bool complete() const noexcept { return syn.has_value() && synack.has_value(); }
  void observe(const PacketRecord& pkt);
};

struct PromotionRecord {
  Timestamp promoted_at = 0;
  OptionMode option_source = OptionMode::midstream;
  double rate_bps = 0.0;
  double threshold_bps = 0.0;
  bool forced = false;
};

/// A connection under two-phase monitoring.
struct TwoPhaseFlow {
  Phase1State phase1;
  OptionCache cache;
  std::optional<FlowState> phase2;
  std::optional<PromotionRecord> promotion;

  bool promoted() const noexcept { return phase2.has_value(); }
};

/// Allocates phase-2 state. Cached mode seeds MSS and window scale from the
/// retained handshake; midstream mode leaves them to be inferred from the
/// packets that follow. Returns false when already promoted.
bool promote(TwoPhaseFlow& flow, OptionMode mode, Timestamp now, const MetricsConfig& mcfg,
             double rate_bps = 0.0, double threshold_bps = 0.0, bool forced = false);

nlohmann::json to_json(const PromotionRecord& r);

}  // namespace dapper
