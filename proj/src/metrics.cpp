#include "dapper/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace dapper {

MetricsConfig MetricsConfig::hardware_emulation() {
  MetricsConfig cfg;
  cfg.rtt_queue_capacity = 1;
  cfg.rttvar_enabled = false;
  cfg.match_sender_by_ip_only = true;
  return cfg;
}

bool RttQueue::push(std::uint32_t seq_end, Timestamp sent_at) {
  if (!has_room()) return false;
  if (!entries_.empty() && seq_leq(seq_end, entries_.back().seq_end)) return false;
  entries_.push_back({seq_end, sent_at});
  return true;
}

std::size_t RttQueue::invalidate(std::uint32_t start, std::uint32_t end) {
  const auto before = entries_.size();
  std::erase_if(entries_, [&](const RttEntry& e) {
    return seq_gt(e.seq_end, start) && seq_leq(e.seq_end, end);
  });
  return before - entries_.size();
}

RttQueue::Popped RttQueue::pop_acked(std::uint32_t ack) {
  Popped out;
  while (!entries_.empty() && seq_leq(entries_.front().seq_end, ack)) {
    out.latest = entries_.front();
    entries_.pop_front();
    ++out.count;
  }
  return out;
}

SrttState karn_update(const SrttState& s, Duration m, const KarnConfig& cfg) {
  SrttState out = s;
  if (s.samples == 0) {
    out.srtt = m;
    out.rttvar = cfg.rttvar_enabled ? m / 2 : 0;
  } else {
    if (cfg.rttvar_enabled) {
      const Duration diff = s.srtt > m ? s.srtt - m : m - s.srtt;
      out.rttvar = (3 * s.rttvar + diff) / 4;
    }
    out.srtt = (7 * s.srtt + m) / 8;
  }
  out.rto = cfg.rttvar_enabled ? out.srtt + 4 * out.rttvar : 2 * out.srtt;
  out.rto = std::max(out.rto, cfg.rto_min);
  ++out.samples;
  return out;
}

std::string_view to_string(UpdateEvent e) noexcept {
  switch (e) {
    case UpdateEvent::SynOptions: return "SynOptions";
    case UpdateEvent::NewSegment: return "NewSegment";
    case UpdateEvent::FlightIncrease: return "FlightIncrease";
    case UpdateEvent::CwndRaise: return "CwndRaise";
    case UpdateEvent::RttEnqueue: return "RttEnqueue";
    case UpdateEvent::ReactionSample: return "ReactionSample";
    case UpdateEvent::SubMssSegment: return "SubMssSegment";
    case UpdateEvent::Retransmission: return "Retransmission";
    case UpdateEvent::FastRetransmit: return "FastRetransmit";
    case UpdateEvent::TimeoutRetransmit: return "TimeoutRetransmit";
    case UpdateEvent::CwndDecrease: return "CwndDecrease";
    case UpdateEvent::CwndReset: return "CwndReset";
    case UpdateEvent::NewAck: return "NewAck";
    case UpdateEvent::RttSample: return "RttSample";
    case UpdateEvent::DupAck: return "DupAck";
    case UpdateEvent::StaleAck: return "StaleAck";
    case UpdateEvent::WindowUpdate: return "WindowUpdate";
    case UpdateEvent::RecoveryExit: return "RecoveryExit";
    case UpdateEvent::RoundComplete: return "RoundComplete";
    case UpdateEvent::LossEpochComplete: return "LossEpochComplete";
    case UpdateEvent::SenderPureAck: return "SenderPureAck";
    case UpdateEvent::ReceiverData: return "ReceiverData";
    case UpdateEvent::Ignored: return "Ignored";
  }
  return "?";
}

FlowState make_flow_state(const MetricsConfig& cfg) {
  FlowState s;
  s.rtt_queue = RttQueue(cfg.rtt_queue_capacity);
  return s;
}

std::optional<std::uint8_t> infer_wscale(std::uint64_t flight_size, std::uint16_t raw_rwnd) {
  if (raw_rwnd == 0) return std::nullopt;
  std::uint8_t shift = 0;
  while (shift < kMaxWindowScale && (std::uint64_t{raw_rwnd} << shift) < flight_size) ++shift;
  return shift;
}

std::optional<bool> is_from_sender(const FlowState& s, const PacketRecord& pkt, Direction direction,
                                   const MetricsConfig& cfg) {
  if (!s.sender_dir) return std::nullopt;
  if (cfg.match_sender_by_ip_only && pkt.src_ip != pkt.dst_ip) {
    if (pkt.src_ip == s.sender_ip) return true;
    if (pkt.dst_ip == s.sender_ip) return false;
    return std::nullopt;
  }
  return direction == *s.sender_dir;
}

bool sanity_check(const FlowState& s, const PacketRecord& pkt, bool from_sender) {
  if (!s.seq_initialized) return true;
  if (!from_sender && !pkt.flags.ack) return true;
  std::uint64_t window = std::max(s.max_effective_rwnd, s.inferred_cwnd);
  if (window == 0) window = 65535;
  const auto w = static_cast<std::uint32_t>(std::min<std::uint64_t>(window, 0x3fffffff));
  const std::uint32_t lo = s.highest_acked - w;
  const std::uint32_t hi = s.highest_sent_seq + w;
  const std::uint32_t v = from_sender ? pkt.seq : pkt.ack;
  return seq_geq(v, lo) && seq_leq(v, hi);
}

namespace {

Direction opposite(Direction d) {
  return d == Direction::forward ? Direction::reverse : Direction::forward;
}

class Processor {
 public:
  Processor(FlowState& s, const PacketRecord& p, Direction d, const MetricsConfig& c)
      : s_(s), pkt_(p), dir_(d), cfg_(c) {}

  std::vector<UpdateEvent> run() {
    if (s_.packets_seen == 0) s_.init_time = pkt_.timestamp;
    ++s_.packets_seen;
    s_.update_time = pkt_.timestamp;
    s_.sack_blocks_seen += pkt_.options.sack_blocks;

    if (pkt_.flags.syn) {
      handshake();
      return std::move(ev_);
    }
    if (pkt_.flags.rst) {
      ev_.push_back(UpdateEvent::Ignored);
      return std::move(ev_);
    }
    if (!s_.role_frozen) elect_role();
    const auto from_sender = is_from_sender(s_, pkt_, dir_, cfg_);
    if (!from_sender) {
      ev_.push_back(UpdateEvent::Ignored);
      return std::move(ev_);
    }
    if (*from_sender) {
      sender_packet();
    } else {
      receiver_packet();
    }
    return std::move(ev_);
  }

 private:
  void set_sender(Direction d, std::uint32_t ip, std::uint16_t port, std::uint32_t peer_ip,
                  std::uint16_t peer_port) {
    s_.sender_dir = d;
    s_.sender_ip = ip;
    s_.sender_port = port;
    s_.receiver_ip = peer_ip;
    s_.receiver_port = peer_port;
  }

  void handshake() {
    s_.handshake_seen = true;
    s_.role_frozen = true;
    if (!pkt_.flags.ack) {
      s_.syn_options = pkt_.options;
      set_sender(opposite(dir_), pkt_.dst_ip, pkt_.dst_port, pkt_.src_ip, pkt_.src_port);
    } else {
      s_.synack_options = pkt_.options;
      set_sender(dir_, pkt_.src_ip, pkt_.src_port, pkt_.dst_ip, pkt_.dst_port);
      s_.highest_sent_seq = pkt_.seq + 1;
      s_.highest_acked = pkt_.seq + 1;
      s_.flight_size = 0;
      s_.seq_initialized = true;
      s_.flight_known = true;
    }
    apply_handshake_constants();
    ev_.push_back(UpdateEvent::SynOptions);
  }

  void apply_handshake_constants() {
    const TcpOptions* syn = s_.syn_options ? &*s_.syn_options : nullptr;
    const TcpOptions* synack = s_.synack_options ? &*s_.synack_options : nullptr;
    std::optional<std::uint16_t> mss;
    for (const TcpOptions* o : {syn, synack}) {
      if (o && o->mss && *o->mss > 0) mss = mss ? std::min(*mss, *o->mss) : *o->mss;
    }
    if (mss) {
      s_.mss = *mss;
      s_.mss_source = OptionSource::handshake;
    }
    if (syn && synack) {
      // The SYN comes from the client, which is the receiving end.
      s_.wscale = syn->wscale && synack->wscale ? *syn->wscale : 0;
      s_.wscale_source = OptionSource::handshake;
    }
  }

  void elect_role() {
    if (pkt_.payload_len > 0) {
      const int d = dir_ == Direction::forward ? 0 : 1;
      s_.role_bytes[d] += pkt_.payload_len;
      ++s_.role_data_packets;
      const Direction leader =
          s_.role_bytes[0] >= s_.role_bytes[1] ? Direction::forward : Direction::reverse;
      if (!s_.sender_dir || *s_.sender_dir != leader) {
        const bool pkt_from_leader = leader == dir_;
        if (pkt_from_leader) {
          set_sender(leader, pkt_.src_ip, pkt_.src_port, pkt_.dst_ip, pkt_.dst_port);
        } else {
          set_sender(leader, pkt_.dst_ip, pkt_.dst_port, pkt_.src_ip, pkt_.src_port);
        }
        reset_sequence_state();
      }
      if (s_.role_data_packets >= cfg_.role_freeze_packets) s_.role_frozen = true;
    }
  }

  void reset_sequence_state() {
    s_.seq_initialized = false;
    s_.flight_known = false;
    s_.flight_size = 0;
    s_.max_flight = 0;
    s_.inferred_cwnd = 0;
    s_.rtt_queue.clear();
    s_.round_active = false;
    s_.round_flights.clear();
    s_.dup_ack_count = 0;
  }

  std::uint64_t flight() const {
    return static_cast<std::uint32_t>(s_.highest_sent_seq - s_.highest_acked);
  }

  void sender_packet() {
    if (pkt_.payload_len == 0) {
      ++s_.sender_pure_acks;
      ev_.push_back(UpdateEvent::SenderPureAck);
      return;
    }
    const std::uint32_t start = pkt_.seq;
    const std::uint32_t end = pkt_.seq + pkt_.payload_len;
    if (!s_.seq_initialized) {
      s_.highest_sent_seq = start;
      s_.highest_acked = start;
      s_.seq_initialized = true;
      s_.flight_known = false;
    }
    if (seq_geq(start, s_.highest_sent_seq)) {
      new_segment(end);
    } else {
      retransmission(start, end);
      if (seq_gt(end, s_.highest_sent_seq)) {
        s_.highest_sent_seq = end;
        s_.flight_size = flight();
      }
    }
  }

  void new_segment(std::uint32_t end) {
    ++s_.pkts_sent;
    s_.bytes_sent += pkt_.payload_len;
    s_.max_payload = std::max<std::uint64_t>(s_.max_payload, pkt_.payload_len);
    if (s_.mss_source != OptionSource::handshake && pkt_.payload_len > s_.mss) {
      s_.mss = static_cast<std::uint16_t>(std::min<std::uint32_t>(pkt_.payload_len, 0xffff));
      s_.mss_source = OptionSource::midstream;
    }
    ev_.push_back(UpdateEvent::NewSegment);

    const std::uint64_t prev = s_.flight_size;
    s_.highest_sent_seq = end;
    s_.flight_size = flight();
    if (s_.flight_size > prev) ev_.push_back(UpdateEvent::FlightIncrease);

    if (s_.flight_known) {
      s_.max_flight = std::max(s_.max_flight, s_.flight_size);
      if (s_.flight_size > s_.inferred_cwnd &&
          !(s_.in_fast_recovery && cfg_.hold_cwnd_in_recovery)) {
        s_.inferred_cwnd = s_.flight_size;
        ev_.push_back(UpdateEvent::CwndRaise);
      }
      if (!s_.round_active) {
        s_.round_active = true;
        s_.round_end_seq = s_.highest_sent_seq;
        s_.round_max_flight = s_.flight_size;
      } else {
        s_.round_max_flight = std::max(s_.round_max_flight, s_.flight_size);
      }
      if (s_.f2_pending) s_.f2_max_flight = std::max(s_.f2_max_flight, s_.flight_size);
      if (s_.wscale_source != OptionSource::handshake && s_.rwnd_known) {
        if (const auto lb = infer_wscale(s_.flight_size, s_.last_raw_rwnd)) {
          s_.wscale_lower_bound = std::max(s_.wscale_lower_bound, *lb);
          s_.wscale = s_.wscale_lower_bound;
          s_.wscale_source = OptionSource::midstream;
          s_.last_effective_rwnd = effective_rwnd(s_.last_raw_rwnd, s_.wscale);
          s_.max_effective_rwnd = std::max(s_.max_effective_rwnd, s_.last_effective_rwnd);
        }
      }
    }

    if (s_.rtt_queue.has_room() && s_.rtt_queue.push(end, pkt_.timestamp)) {
      ev_.push_back(UpdateEvent::RttEnqueue);
    }

    if (s_.awaiting_reaction && !s_.in_fast_recovery) {
      s_.last_reaction = pkt_.timestamp - s_.last_new_ack_time;
      s_.reaction.add(static_cast<double>(s_.last_reaction));
      s_.awaiting_reaction = false;
      ev_.push_back(UpdateEvent::ReactionSample);
    }

    if (s_.mss != 0 && pkt_.payload_len < s_.mss) {
      ++s_.sub_mss_segments;
      ev_.push_back(UpdateEvent::SubMssSegment);
    }
  }

  // Outstanding data when the loss is detected; dup ACKs do not shrink it.
  std::uint64_t pre_loss_flight() const { return s_.flight_size; }

  void retransmission(std::uint32_t start, std::uint32_t end) {
    ++s_.retx_total;
    ev_.push_back(UpdateEvent::Retransmission);

    s_.rtt_queue.invalidate(start, end);
    if (!s_.retx_pending) {
      s_.retx_pending = true;
      s_.retx_low = start;
      s_.retx_high = end;
    } else {
      if (seq_lt(start, s_.retx_low)) s_.retx_low = start;
      if (seq_gt(end, s_.retx_high)) s_.retx_high = end;
    }

    const bool recent_ack = s_.rtt.rto == 0 || pkt_.timestamp - s_.last_ack_time < s_.rtt.rto;
    const bool fast =
        s_.dup_ack_count >= cfg_.dupack_threshold || (s_.in_fast_recovery && recent_ack);
    const std::uint64_t before = s_.inferred_cwnd;
    if (fast) {
      ++s_.retx_fast;
      ev_.push_back(UpdateEvent::FastRetransmit);
      if (!s_.in_fast_recovery) {
        s_.inferred_cwnd = static_cast<std::uint64_t>(
            std::floor(cfg_.multiplicative_decrease * static_cast<double>(s_.inferred_cwnd)));
        ev_.push_back(UpdateEvent::CwndDecrease);
        s_.in_fast_recovery = true;
        s_.recovery_end_seq = s_.highest_sent_seq;
        s_.loss_cwnd_ceiling = before;
        s_.slow_start_restart_rounds = 0;
        LossEpoch loss;
        loss.at = pkt_.timestamp;
        loss.kind = LossKind::fast_retransmit;
        loss.cwnd_before = before;
        loss.cwnd_after = s_.inferred_cwnd;
        loss.flight_before = pre_loss_flight();
        s_.losses.push_back(loss);
        s_.f2_pending = false;
      }
      return;
    }

    ++s_.retx_timeout;
    ev_.push_back(UpdateEvent::TimeoutRetransmit);
    s_.in_fast_recovery = false;
    s_.dup_ack_count = 0;
    if (s_.in_timeout_recovery && seq_lt(start, s_.timeout_recovery_end)) return;
    s_.inferred_cwnd = std::uint64_t{cfg_.initial_window_segments} * s_.segment_size(cfg_);
    ev_.push_back(UpdateEvent::CwndReset);
    s_.in_timeout_recovery = true;
    s_.timeout_recovery_end = s_.highest_sent_seq;
    s_.loss_cwnd_ceiling = before;
    // Linear growth from one segment regains the reset window within IW rounds.
    s_.slow_start_restart_rounds = cfg_.initial_window_segments;
    s_.f2_pending = false;
    LossEpoch loss;
    loss.at = pkt_.timestamp;
    loss.kind = LossKind::timeout;
    loss.cwnd_before = before;
    loss.cwnd_after = s_.inferred_cwnd;
    loss.flight_before = pre_loss_flight();
    loss.completed = true;
    loss.completed_at = pkt_.timestamp;
    s_.losses.push_back(loss);
  }

  void update_rwnd() {
    s_.last_raw_rwnd = pkt_.raw_window;
    s_.last_effective_rwnd = effective_rwnd(pkt_.raw_window, s_.wscale);
    s_.max_effective_rwnd = std::max(s_.max_effective_rwnd, s_.last_effective_rwnd);
    s_.rwnd_known = true;
  }

  void receiver_packet() {
    if (pkt_.payload_len > 0) {
      ++s_.receiver_data_packets;
      s_.receiver_bytes += pkt_.payload_len;
      ev_.push_back(UpdateEvent::ReceiverData);
    }
    if (!pkt_.flags.ack) return;
    ++s_.acks_received;
    s_.last_ack_time = pkt_.timestamp;
    if (!s_.seq_initialized) {
      update_rwnd();
      return;
    }
    std::uint32_t ack = pkt_.ack;
    if (seq_gt(ack, s_.highest_sent_seq)) ack = s_.highest_sent_seq;

    if (!s_.flight_known) {
      // First ACK after a midstream start anchors the cumulative point.
      s_.highest_acked = ack;
      s_.flight_known = true;
      s_.flight_size = flight();
      s_.rtt_queue.pop_acked(ack);
      s_.last_new_ack_time = pkt_.timestamp;
      update_rwnd();
      return;
    }

    const bool window_changed = s_.rwnd_known && pkt_.raw_window != s_.last_raw_rwnd;
    if (seq_gt(ack, s_.highest_acked)) {
      new_ack(ack);
    } else if (ack == s_.highest_acked) {
      if (pkt_.payload_len == 0 && !window_changed && s_.flight_size > 0 && !pkt_.flags.fin) {
        ++s_.dup_ack_count;
        ev_.push_back(UpdateEvent::DupAck);
      } else {
        s_.dup_ack_count = 0;
        if (window_changed) ev_.push_back(UpdateEvent::WindowUpdate);
      }
    } else {
      ++s_.stale_acks;
      s_.dup_ack_count = 0;
      ev_.push_back(UpdateEvent::StaleAck);
      return;
    }
    update_rwnd();
  }

  void new_ack(std::uint32_t ack) {
    ++s_.pkts_acked;
    s_.highest_acked = ack;
    s_.flight_size = flight();
    s_.dup_ack_count = 0;
    s_.last_new_ack_time = pkt_.timestamp;
    s_.awaiting_reaction = true;
    ev_.push_back(UpdateEvent::NewAck);

    if (s_.in_fast_recovery && seq_geq(ack, s_.recovery_end_seq)) {
      s_.in_fast_recovery = false;
      ev_.push_back(UpdateEvent::RecoveryExit);
      if (!s_.losses.empty() && s_.losses.back().kind == LossKind::fast_retransmit &&
          !s_.losses.back().completed) {
        s_.f2_pending = true;
        s_.f2_round_end = s_.highest_sent_seq;
        s_.f2_max_flight = s_.flight_size;
      }
    }
    if (s_.in_timeout_recovery && seq_geq(ack, s_.timeout_recovery_end)) {
      s_.in_timeout_recovery = false;
    }

    const bool covers_retx = s_.retx_pending && seq_gt(ack, s_.retx_low);
    const auto popped = s_.rtt_queue.pop_acked(ack);
    s_.last_dequeued = covers_retx ? 0 : popped.count;
    if (covers_retx) {
      if (seq_geq(ack, s_.retx_high)) s_.retx_pending = false;
    } else if (popped.count > 0 && popped.latest) {
      const Duration m = pkt_.timestamp - popped.latest->sent_at;
      if (m > 0) {
        s_.rtt = karn_update(s_.rtt, m, KarnConfig{cfg_.rto_min, cfg_.rttvar_enabled});
        s_.last_rtt = m;
        s_.min_rtt = s_.min_rtt == 0 ? m : std::min(s_.min_rtt, m);
        s_.dequeued_per_ack.add(static_cast<double>(popped.count));
        ev_.push_back(UpdateEvent::RttSample);
      }
    }

    if (s_.round_active && seq_geq(ack, s_.round_end_seq)) {
      s_.round_flights.push_back(s_.round_max_flight);
      while (s_.round_flights.size() > cfg_.round_history) s_.round_flights.pop_front();
      ev_.push_back(UpdateEvent::RoundComplete);
      if (s_.slow_start_restart_rounds > 0) --s_.slow_start_restart_rounds;
      s_.round_end_seq = s_.highest_sent_seq;
      s_.round_max_flight = s_.flight_size;
      s_.round_active = s_.flight_size > 0;
    }

    if (s_.f2_pending && seq_geq(ack, s_.f2_round_end)) {
      auto& loss = s_.losses.back();
      loss.flight_after = s_.f2_max_flight;
      loss.completed = true;
      loss.completed_at = pkt_.timestamp;
      s_.f2_pending = false;
      ev_.push_back(UpdateEvent::LossEpochComplete);
    }
  }


  FlowState& s_;
  const PacketRecord& pkt_;
  Direction dir_;
  const MetricsConfig& cfg_;
  std::vector<UpdateEvent> ev_;
};

}  // namespace

std::vector<UpdateEvent> process_packet(FlowState& state, const PacketRecord& pkt,
                                        Direction direction, const MetricsConfig& cfg) {
  return Processor(state, pkt, direction, cfg).run();
}

}  // namespace dapper
