#include "dapper/two_phase.hpp"

#include <algorithm>

namespace dapper {

namespace {

std::uint32_t us32(Duration d) {
  return static_cast<std::uint32_t>(static_cast<std::uint64_t>(d / kMicrosecond));
}

}  // namespace

Phase2Registers pack_registers(const FlowState& s, bool sanity_ok) {
  Phase2Registers r{};
  r.sender_ip = s.sender_ip;
  r.highest_sent_seq = s.highest_sent_seq;
  r.highest_acked = s.highest_acked;
  r.pkts_sent = static_cast<std::uint32_t>(s.pkts_sent);
  r.bytes_sent = static_cast<std::uint32_t>(s.bytes_sent);
  r.inferred_cwnd = static_cast<std::uint32_t>(s.inferred_cwnd);
  r.raw_rwnd = s.last_raw_rwnd;
  r.dup_acks = (s.dup_ack_count & ~kSanityBit) | (sanity_ok ? 0u : kSanityBit);
  r.retx = static_cast<std::uint32_t>(s.retx_total);
  r.srtt_us = us32(s.rtt.srtt);
  r.rttvar_us = us32(s.rtt.rttvar);
  if (!s.rtt_queue.empty()) {
    r.rtt_seq = s.rtt_queue.entries().back().seq_end;
    r.rtt_time_us = us32(s.rtt_queue.entries().back().sent_at);
  }
  r.rtt_samples = static_cast<std::uint32_t>(s.rtt.samples);
  r.last_ack_time_us = us32(s.last_new_ack_time);
  r.reaction_sum_us = us32(static_cast<Duration>(s.reaction.mean *
                                                 static_cast<double>(s.reaction.count)));
  r.mss = s.mss;
  r.wscale = s.wscale;
  return r;
}

double two_phase_payload(std::size_t flows, double troubled_fraction, bool cache_options) {
  const auto n = static_cast<double>(flows);
  return n * static_cast<double>(phase1_bytes(cache_options)) +
         n * troubled_fraction * static_cast<double>(kPhase2RegisterBytes);
}

double single_phase_payload(std::size_t flows) {
  return static_cast<double>(flows) * static_cast<double>(kPhase2RegisterBytes);
}

void phase1_update(Phase1State& s, const PacketRecord& pkt, bool sender_direction) {
  if (!s.started) {
    s.started = true;
    s.init_time = pkt.timestamp;
  }
  if (sender_direction) s.bytes_sent += pkt.payload_len;
  s.update_time = std::max(pkt.timestamp, s.init_time);
}

BadnessResult badness(const Phase1State& s, double threshold_bps, Timestamp now,
                      const TwoPhaseConfig& cfg) {
  BadnessResult r;
  const Duration elapsed = s.update_time - s.init_time;
  if (!s.started || elapsed <= 0) {
    r.insufficient = true;
    return r;
  }
  r.rate_bps = 8.0 * static_cast<double>(s.bytes_sent) * static_cast<double>(kSecond) /
               static_cast<double>(elapsed);
  if (now - s.init_time < cfg.min_age || s.bytes_sent < cfg.min_bytes) {
    r.insufficient = true;
    return r;
  }
  r.troubled = r.rate_bps < threshold_bps;
  return r;
}

void OptionCache::observe(const PacketRecord& pkt) {
  if (!pkt.flags.syn) return;
  if (pkt.flags.ack) {
    synack = pkt.options;
    synack_src = pkt.src_ip;
  } else {
    syn = pkt.options;
  }
}

bool promote(TwoPhaseFlow& flow, OptionMode mode, Timestamp now, const MetricsConfig& mcfg,
             double rate_bps, double threshold_bps, bool forced) {
  if (flow.promoted()) return false;
  FlowState st = make_flow_state(mcfg);
  OptionMode source = OptionMode::midstream;
  if (mode == OptionMode::cached && flow.cache.complete()) {
    source = OptionMode::cached;
    const TcpOptions& syn = *flow.cache.syn;
    const TcpOptions& synack = *flow.cache.synack;
    st.syn_options = syn;
    st.synack_options = synack;
    std::optional<std::uint16_t> mss;
    for (const TcpOptions* o : {&syn, &synack}) {
      if (o->mss && *o->mss > 0) mss = mss ? std::min(*mss, *o->mss) : *o->mss;
    }
    if (mss) {
      st.mss = *mss;
      st.mss_source = OptionSource::handshake;
    }
    st.wscale = syn.wscale && synack.wscale ? *syn.wscale : 0;
    st.wscale_source = OptionSource::handshake;
  }
  st.init_time = now;
  st.update_time = now;
  flow.phase2 = std::move(st);
  flow.promotion = PromotionRecord{now, source, rate_bps, threshold_bps, forced};
  return true;
}

nlohmann::json to_json(const PromotionRecord& r) {
  return {{"promoted_at", r.promoted_at},
          {"option_source", r.option_source == OptionMode::cached ? "cached" : "midstream"},
          {"rate_bps", r.rate_bps},
          {"threshold_bps", r.threshold_bps},
          {"forced", r.forced}};
}

}  // namespace dapper
