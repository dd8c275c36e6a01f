#include "dapper/traffic_synth.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <queue>
#include <set>
#include <stdexcept>

namespace dapper {

std::string_view to_string(LossEventKind k) noexcept {
  switch (k) {
    case LossEventKind::random_drop: return "random_drop";
    case LossEventKind::queue_drop: return "queue_drop";
    case LossEventKind::fast_retransmit: return "fast_retransmit";
    case LossEventKind::timeout: return "timeout";
  }
  return "?";
}

std::uint64_t GroundTruth::cwnd_at(Timestamp t) const {
  auto it = std::upper_bound(cwnd_trace.begin(), cwnd_trace.end(), t,
                             [](Timestamp v, const CwndPoint& p) { return v < p.time; });
  if (it == cwnd_trace.begin()) return cwnd_trace.empty() ? 0 : cwnd_trace.front().cwnd;
  return std::prev(it)->cwnd;
}

bool GroundTruth::has_drops() const {
  return std::any_of(loss_events.begin(), loss_events.end(), [](const LossEvent& e) {
    return e.kind == LossEventKind::random_drop || e.kind == LossEventKind::queue_drop;
  });
}

std::uint8_t wscale_for_buffer(std::uint64_t rcvbuf) noexcept {
  std::uint8_t s = 0;
  while (s < kMaxWindowScale && (rcvbuf >> s) > 0xffff) ++s;
  return s;
}

void validate(const ScenarioConfig& c) {
  const auto bad = [](const char* what) { throw std::invalid_argument(what); };
  if (c.file_size == 0) bad("file_size must be positive");
  if (!(c.link_bw > 0)) bad("link_bw must be positive");
  if (c.rtt <= 0) bad("rtt must be positive");
  if (c.mss < 64) bad("mss must be at least 64");
  if (c.iw == 0) bad("iw must be positive");
  if (!(c.C > 0 && c.C < 1)) bad("C must lie in (0, 1)");
  if (c.queue_bytes < 1500u) bad("queue_bytes must hold one packet");
  if (c.reaction_min < 0 || c.reaction_max < c.reaction_min) bad("bad reaction range");
  if (c.max_sim_time <= 0) bad("max_sim_time must be positive");
  if (c.sender.kind == SenderProblemKind::per_packet_delay && c.sender.delay <= 0) {
    bad("per_packet_delay needs a positive delay");
  }
  if (c.sender.jitter < 0 || c.sender.jitter >= 1) bad("jitter must lie in [0, 1)");
  if (c.sender.kind == SenderProblemKind::sub_mss &&
      (c.sender.max_segment == 0 || c.sender.max_segment >= c.mss)) {
    bad("sub_mss needs 0 < max_segment < mss");
  }
  if (c.receiver.kind == ReceiverProblemKind::small_rcvbuf && c.receiver.rcvbuf < c.mss) {
    bad("small_rcvbuf must hold one segment");
  }
  if (c.receiver.kind == ReceiverProblemKind::delayed_ack &&
      (c.receiver.ack_every < 2 || c.receiver.ack_timeout <= 0)) {
    bad("delayed_ack needs ack_every >= 2 and a positive timeout");
  }
  if (c.network) {
    if (c.network->loss_rate < 0 || c.network->loss_rate > 1) bad("loss_rate must lie in [0, 1]");
    if (c.network->bad_duration <= 0 || c.network->good_duration <= 0) {
      bad("loss channel durations must be positive");
    }
  }
}

GeState gilbert_elliot_initial(std::mt19937_64& rng, const GilbertElliotConfig& cfg) {
  const Duration cycle = cfg.bad_duration + cfg.good_duration;
  std::uniform_int_distribution<Duration> pick(0, cycle - 1);
  const Duration phase = pick(rng);
  if (phase < cfg.bad_duration) return {true, cfg.bad_duration - phase};
  return {false, cycle - phase};
}

GeStep gilbert_elliot_step(GeState s, Duration elapsed, std::mt19937_64& rng,
                           const GilbertElliotConfig& cfg) {
  while (elapsed >= s.remaining) {
    elapsed -= s.remaining;
    s.bad = !s.bad;
    s.remaining = s.bad ? cfg.bad_duration : cfg.good_duration;
  }
  s.remaining -= elapsed;
  GeStep out{s, false};
  if (s.bad) {
    std::bernoulli_distribution coin(cfg.loss_rate);
    out.drop = coin(rng);
  }
  return out;
}

namespace {

constexpr std::uint32_t kServerIp = 0x0a000101;  // 10.0.1.1
constexpr std::uint32_t kClientIp = 0x0a000002;  // 10.0.0.2
constexpr std::uint16_t kServerPort = 80;
constexpr std::uint32_t kHeaderBytes = 40;

Duration to_us(Duration d) { return (d / kMicrosecond) * kMicrosecond; }

struct Segment {
  std::uint64_t rel_seq = 0;
  std::uint32_t len = 0;
  bool fin = false;
  bool syn = false;
  PacketRecord rec;
};

class Simulation {
 public:
  explicit Simulation(const ScenarioConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
    validate(cfg_);
    prop_ = to_us(cfg_.rtt / 2);
    server_isn_ = static_cast<std::uint32_t>(rng_());
    client_isn_ = static_cast<std::uint32_t>(rng_());
    client_port_ = static_cast<std::uint16_t>(32768 + rng_() % 28000);
    rcvbuf_ = cfg_.receiver.kind == ReceiverProblemKind::small_rcvbuf ? cfg_.receiver.rcvbuf
                                                                      : cfg_.default_rcvbuf;
    client_ws_ = wscale_for_buffer(rcvbuf_);
    seg_cap_ = cfg_.sender.kind == SenderProblemKind::sub_mss ? cfg_.sender.max_segment
                                                              : cfg_.mss;
    cwnd_ = std::uint64_t{cfg_.iw} * cfg_.mss;
    ssthresh_ = std::numeric_limits<std::uint32_t>::max();
    rto_ = cfg_.rto_initial;
    if (cfg_.network) ge_ = gilbert_elliot_initial(rng_, *cfg_.network);
    ge_initial_ = ge_;

    truth_.true_mss = cfg_.mss;
    truth_.true_wscale = client_ws_;
    truth_.labels.sender = cfg_.sender.kind != SenderProblemKind::none;
    truth_.labels.receiver = cfg_.receiver.kind != ReceiverProblemKind::none;
    truth_.labels.network = cfg_.network.has_value();
  }

  SimulationResult run() {
    record_cwnd(0);
    at(0, [this] { client_send_syn(); });
    while (!events_.empty()) {
      Event e = events_.top();
      events_.pop();
      if (e.time > cfg_.max_sim_time) {
        truth_.timed_out = true;
        break;
      }
      now_ = e.time;
      e.fn();
    }
    if (!done_) truth_.timed_out = true;
    truth_.bytes_acked = snd_una_;
    fill_bad_intervals();
    std::stable_sort(packets_.begin(), packets_.end(),
                     [](const PacketRecord& a, const PacketRecord& b) {
                       return a.timestamp < b.timestamp;
                     });
    return {std::move(packets_), std::move(truth_)};
  }

 private:
  struct Event {
    Timestamp time;
    std::uint64_t order;
    std::function<void()> fn;
    bool operator<(const Event& o) const {
      return time != o.time ? time > o.time : order > o.order;
    }
  };

  void at(Timestamp t, std::function<void()> fn) {
    events_.push({t, order_++, std::move(fn)});
  }

  Duration reaction() {
    std::uniform_int_distribution<Duration> d(cfg_.reaction_min / kMicrosecond,
                                              cfg_.reaction_max / kMicrosecond);
    return d(rng_) * kMicrosecond;
  }

  void record_cwnd(Timestamp t) {
    if (!truth_.cwnd_trace.empty() && truth_.cwnd_trace.back().cwnd == cwnd_) return;
    truth_.cwnd_trace.push_back({t, cwnd_});
  }

  // ---- wire helpers -------------------------------------------------------

  std::uint32_t server_wire_seq(std::uint64_t rel) const {
    return server_isn_ + 1 + static_cast<std::uint32_t>(rel);
  }

  PacketRecord server_packet(Timestamp t) const {
    PacketRecord r;
    r.timestamp = t;
    r.src_ip = kServerIp;
    r.dst_ip = kClientIp;
    r.src_port = kServerPort;
    r.dst_port = client_port_;
    r.flags.ack = true;
    r.ack = client_isn_ + 1 + client_sent_;
    r.raw_window = 512;
    return r;
  }

  PacketRecord client_packet() const {
    PacketRecord r;
    r.src_ip = kClientIp;
    r.dst_ip = kServerIp;
    r.src_port = client_port_;
    r.dst_port = kServerPort;
    return r;
  }

  std::uint32_t wire_bytes(const PacketRecord& r) const {
    return kHeaderBytes + r.payload_len +
           static_cast<std::uint32_t>(encode_tcp_options(r.options).size());
  }

  // ---- server -> client link ---------------------------------------------

  void server_emit(Segment seg) {
    normalize_header_lengths(seg.rec);
    packets_.push_back(seg.rec);
    if (seg.len > 0 && cfg_.network) {
      const GeStep step = gilbert_elliot_step(ge_, now_ - ge_clock_, rng_, *cfg_.network);
      ge_ = step.next;
      ge_clock_ = now_;
      if (step.drop) {
        truth_.loss_events.push_back({seg.rec.timestamp, LossEventKind::random_drop});
        return;
      }
    }
    const Timestamp t = seg.rec.timestamp;
    while (!link_queue_.empty() && link_queue_.front().first <= t) {
      queued_bytes_ -= link_queue_.front().second;
      link_queue_.pop_front();
    }
    const std::uint32_t size = wire_bytes(seg.rec);
    if (queued_bytes_ + size > cfg_.queue_bytes) {
      truth_.loss_events.push_back({t, LossEventKind::queue_drop});
      return;
    }
    const auto ser = to_us(static_cast<Duration>(
        std::llround(static_cast<double>(size) * 8.0 * static_cast<double>(kSecond) /
                     cfg_.link_bw)));
    const Timestamp depart = std::max(t, link_free_at_) + std::max<Duration>(ser, kMicrosecond);
    link_free_at_ = depart;
    link_queue_.emplace_back(depart, size);
    queued_bytes_ += size;
    at(depart + prop_, [this, seg] { client_receive(seg); });
  }

  // ---- client --------------------------------------------------------------

  void client_send_syn() {
    PacketRecord r = client_packet();
    r.flags.syn = true;
    r.seq = client_isn_;
    r.raw_window = static_cast<std::uint16_t>(std::min<std::uint32_t>(rcvbuf_, 0xffff));
    r.options.mss = cfg_.mss;
    r.options.wscale = client_ws_;
    r.options.sack_permitted = true;
    to_server(r);
  }

  void to_server(PacketRecord r) {
    at(now_ + prop_, [this, r]() mutable {
      r.timestamp = now_;
      normalize_header_lengths(r);
      packets_.push_back(r);
      server_receive(r);
    });
  }

  std::uint16_t client_window() {
    std::uint64_t ooo = 0;
    for (const auto& [s, e] : ooo_) ooo += e - s;
    const std::uint64_t free = rcvbuf_ > ooo ? rcvbuf_ - ooo : 0;
    const std::uint64_t keep = right_edge_ > rcv_nxt_ ? right_edge_ - rcv_nxt_ : 0;
    const std::uint64_t wnd = std::max(free, keep);
    const auto raw = static_cast<std::uint16_t>(std::min<std::uint64_t>(wnd >> client_ws_, 0xffff));
    right_edge_ = std::max(right_edge_, rcv_nxt_ + (std::uint64_t{raw} << client_ws_));
    return raw;
  }

  void client_ack(bool fin = false) {
    ++delack_gen_;
    delack_pending_ = 0;
    PacketRecord r = client_packet();
    r.flags.ack = true;
    r.seq = client_isn_ + 1 + client_sent_;
    r.ack = server_wire_seq(rcv_nxt_) + (fin_received_ ? 1 : 0);
    r.raw_window = client_window();
    if (fin) {
      r.flags.fin = true;
      client_fin_sent_ = true;
    }
    to_server(r);
  }

  void client_receive(const Segment& seg) {
    if (seg.syn) {
      // SYN-ACK: complete the handshake with the request.
      PacketRecord r = client_packet();
      r.flags.ack = true;
      r.flags.psh = true;
      r.seq = client_isn_ + 1;
      r.ack = server_isn_ + 1;
      r.payload_len = cfg_.request_bytes;
      r.raw_window = client_window();
      client_sent_ = cfg_.request_bytes;
      to_server(r);
      return;
    }
    if (seg.fin) {
      if (seg.rel_seq == rcv_nxt_ && !fin_received_) {
        fin_received_ = true;
        client_ack(true);
      } else {
        client_ack(client_fin_sent_);
      }
      return;
    }
    const std::uint64_t end = seg.rel_seq + seg.len;
    bool immediate = true;
    if (seg.rel_seq == rcv_nxt_) {
      const bool had_gap = !ooo_.empty();
      rcv_nxt_ = end;
      for (auto it = ooo_.begin(); it != ooo_.end() && it->first <= rcv_nxt_;) {
        rcv_nxt_ = std::max(rcv_nxt_, it->second);
        it = ooo_.erase(it);
      }
      immediate = had_gap || cfg_.receiver.kind != ReceiverProblemKind::delayed_ack;
    } else if (seg.rel_seq > rcv_nxt_) {
      if (end <= rcv_nxt_ + rcvbuf_) {
        auto& slot = ooo_[seg.rel_seq];
        slot = std::max<std::uint64_t>(slot, end);
      }
    }
    if (immediate) {
      client_ack();
      return;
    }
    if (++delack_pending_ >= cfg_.receiver.ack_every) {
      client_ack();
      return;
    }
    if (delack_pending_ == 1) {
      const std::uint64_t gen = delack_gen_;
      at(now_ + to_us(cfg_.receiver.ack_timeout), [this, gen] {
        if (gen == delack_gen_ && delack_pending_ > 0) client_ack();
      });
    }
  }

  // ---- server ----------------------------------------------------------------

  std::uint64_t flight() const { return snd_max_ - snd_una_; }

  void server_receive(const PacketRecord& r) {
    if (r.flags.syn) {
      at(now_ + reaction(), [this] {
        PacketRecord s = server_packet(now_);
        s.flags.syn = true;
        s.seq = server_isn_;
        s.ack = client_isn_ + 1;
        s.raw_window = 0xffff;
        s.options.mss = cfg_.mss;
        s.options.wscale = cfg_.server_wscale;
        s.options.sack_permitted = true;
        Segment seg;
        seg.syn = true;
        seg.rec = s;
        server_emit(seg);
      });
      return;
    }
    if (!handshake_done_) {
      handshake_done_ = true;
      peer_wnd_ = std::uint64_t{r.raw_window} << client_ws_;
      start_application();
      return;
    }
    if (r.flags.fin) {
      // Client's FIN: acknowledge it and finish.
      at(now_ + reaction(), [this] {
        PacketRecord s = server_packet(now_);
        s.seq = server_wire_seq(data_end() + 1);
        s.ack = client_isn_ + 1 + client_sent_ + 1;
        Segment seg;
        seg.rec = s;
        server_emit(seg);
        done_ = true;
      });
      return;
    }
    on_ack(r);
  }

  std::uint64_t data_end() const { return cfg_.file_size; }

  void start_application() {
    switch (cfg_.sender.kind) {
      case SenderProblemKind::per_packet_delay: at(now_ + app_gap(), [this] { app_write(); }); break;
      default: app_end_ = data_end(); break;
    }
    schedule_send();
  }

  Duration app_gap() {
    const double j = cfg_.sender.jitter;
    std::uniform_real_distribution<double> u(1.0 - j, 1.0 + j);
    return std::max<Duration>(kMicrosecond,
                              to_us(static_cast<Duration>(static_cast<double>(cfg_.sender.delay) *
                                                          u(rng_))));
  }

  void app_write() {
    app_end_ = std::min<std::uint64_t>(data_end(), app_end_ + cfg_.mss);
    schedule_send();
    if (app_end_ < data_end()) at(now_ + app_gap(), [this] { app_write(); });
  }

  void schedule_send() {
    if (send_scheduled_) return;
    send_scheduled_ = true;
    at(now_ + reaction(), [this] {
      send_scheduled_ = false;
      try_send();
    });
  }

  void arm_rto() {
    rto_running_ = true;
    const std::uint64_t gen = ++rto_gen_;
    at(now_ + rto_, [this, gen] {
      if (gen == rto_gen_) on_rto();
    });
  }

  void stop_rto() {
    rto_running_ = false;
    ++rto_gen_;
  }

  void emit_data(std::uint64_t rel, std::uint32_t len, Timestamp t) {
    PacketRecord s = server_packet(t);
    s.seq = server_wire_seq(rel);
    s.payload_len = len;
    Segment seg;
    seg.rel_seq = rel;
    seg.len = len;
    seg.rec = s;
    server_emit(seg);
  }

  void try_send() {
    Timestamp t = now_;
    const std::uint64_t wnd = std::min(cwnd_, peer_wnd_);
    bool sent_any = false;
    while (true) {
      std::uint32_t len = 0;
      const bool retx = snd_nxt_ < snd_max_;
      if (retx) {
        len = static_cast<std::uint32_t>(std::min<std::uint64_t>(seg_cap_, snd_max_ - snd_nxt_));
      } else {
        len = static_cast<std::uint32_t>(std::min<std::uint64_t>(seg_cap_, app_end_ - snd_nxt_));
      }
      if (len == 0) break;
      if (snd_nxt_ + len - snd_una_ > wnd) break;
      emit_data(snd_nxt_, len, t);
      if (!retx && !timing_) {
        timing_ = true;
        timed_end_ = snd_nxt_ + len;
        timed_at_ = t;
      }
      snd_nxt_ += len;
      snd_max_ = std::max(snd_max_, snd_nxt_);
      sent_any = true;
      t += kMicrosecond;
    }
    if (sent_any && !rto_running_) arm_rto();
    maybe_send_fin(t);
  }

  void maybe_send_fin(Timestamp t) {
    if (fin_sent_ || snd_una_ < data_end()) return;
    fin_sent_ = true;
    truth_.completion_time = now_;
    PacketRecord s = server_packet(t);
    s.flags.fin = true;
    s.seq = server_wire_seq(data_end());
    Segment seg;
    seg.rel_seq = data_end();
    seg.fin = true;
    seg.rec = s;
    server_emit(seg);
  }

  void update_rtt(Duration m) {
    if (!have_rtt_) {
      srtt_ = m;
      rttvar_ = m / 2;
      have_rtt_ = true;
    } else {
      const Duration diff = srtt_ > m ? srtt_ - m : m - srtt_;
      rttvar_ = (3 * rttvar_ + diff) / 4;
      srtt_ = (7 * srtt_ + m) / 8;
    }
    rto_ = std::clamp(srtt_ + std::max<Duration>(kMicrosecond, 4 * rttvar_), cfg_.rto_min,
                      cfg_.rto_max);
  }

  void retransmit_head() {
    const auto len =
        static_cast<std::uint32_t>(std::min<std::uint64_t>(seg_cap_, snd_max_ - snd_una_));
    if (len == 0) return;
    emit_data(snd_una_, len, now_);
    timing_ = false;
  }

  void on_ack(const PacketRecord& r) {
    const std::uint32_t base = server_wire_seq(snd_una_);
    const auto delta = static_cast<std::int32_t>(r.ack - base);
    const std::uint64_t prev_wnd = peer_wnd_;
    peer_wnd_ = std::uint64_t{r.raw_window} << client_ws_;
    truth_.max_advertised_window = std::max(truth_.max_advertised_window, peer_wnd_);
    if (fin_sent_ && delta > 0 && snd_una_ + static_cast<std::uint64_t>(delta) > data_end()) {
      snd_una_ = data_end();
      stop_rto();
      return;
    }
    if (delta > 0) {
      const std::uint64_t ack = snd_una_ + static_cast<std::uint64_t>(delta);
      const std::uint64_t acked = ack - snd_una_;
      const std::uint64_t flight_before = flight();
      if (timing_ && ack >= timed_end_) {
        update_rtt(now_ - timed_at_);
        timing_ = false;
      }
      dupacks_ = 0;
      if (in_recovery_) {
        if (ack >= recover_) {
          in_recovery_ = false;
          cwnd_ = ssthresh_;
        } else {
          snd_una_ = ack;
          cwnd_ = cwnd_ > acked ? cwnd_ - acked : 0;
          cwnd_ = std::max<std::uint64_t>(cwnd_ + cfg_.mss, cfg_.mss);
          record_cwnd(now_);
          retransmit_head();
          arm_rto();
          schedule_send();
          return;
        }
      } else if (flight_before + cfg_.mss > cwnd_) {
        if (cwnd_ < ssthresh_) {
          cwnd_ += std::min<std::uint64_t>(acked, cfg_.mss);
        } else {
          cwnd_ += std::max<std::uint64_t>(1, std::uint64_t{cfg_.mss} * cfg_.mss / cwnd_);
        }
      }
      record_cwnd(now_);
      snd_una_ = ack;
      if (snd_nxt_ < snd_una_) snd_nxt_ = snd_una_;
      if (have_rtt_) {
        rto_ = std::clamp(srtt_ + std::max<Duration>(kMicrosecond, 4 * rttvar_), cfg_.rto_min,
                          cfg_.rto_max);
      }
      if (flight() > 0) {
        arm_rto();
      } else {
        stop_rto();
      }
      schedule_send();
      return;
    }
    if (delta == 0 && flight() > 0 && r.payload_len == 0 && peer_wnd_ == prev_wnd) {
      ++dupacks_;
      if (dupacks_ == 3 && !in_recovery_ && snd_una_ >= recover_) {
        ssthresh_ = std::max<std::uint64_t>(flight() / 2, 2 * std::uint64_t{cfg_.mss});
        recover_ = snd_max_;
        in_recovery_ = true;
        truth_.loss_events.push_back({now_, LossEventKind::fast_retransmit});
        retransmit_head();
        cwnd_ = ssthresh_ + 3 * std::uint64_t{cfg_.mss};
        record_cwnd(now_);
      } else if (in_recovery_ && dupacks_ > 3) {
        cwnd_ += cfg_.mss;
        record_cwnd(now_);
        schedule_send();
      }
    } else if (peer_wnd_ != prev_wnd) {
      schedule_send();
    }
  }

  void on_rto() {
    rto_running_ = false;
    if (flight() == 0) return;
    truth_.loss_events.push_back({now_, LossEventKind::timeout});
    ssthresh_ = std::max<std::uint64_t>(flight() / 2, 2 * std::uint64_t{cfg_.mss});
    cwnd_ = cfg_.mss;
    record_cwnd(now_);
    recover_ = snd_max_;
    in_recovery_ = false;
    dupacks_ = 0;
    timing_ = false;
    snd_nxt_ = snd_una_;
    rto_ = std::min(rto_ * 2, cfg_.rto_max);
    arm_rto();
    at(now_ + reaction(), [this] { try_send(); });
  }

  void fill_bad_intervals() {
    if (!cfg_.network) return;
    const Timestamp horizon = std::max(now_, truth_.completion_time);
    GeState s = ge_initial_;
    Timestamp t = 0;
    while (t <= horizon) {
      const Timestamp end = t + s.remaining;
      if (s.bad) truth_.bad_intervals.emplace_back(t, end);
      t = end;
      s.bad = !s.bad;
      s.remaining = s.bad ? cfg_.network->bad_duration : cfg_.network->good_duration;
    }
  }

  ScenarioConfig cfg_;
  std::mt19937_64 rng_;
  std::priority_queue<Event> events_;
  std::uint64_t order_ = 0;
  Timestamp now_ = 0;
  Duration prop_ = 0;

  std::vector<PacketRecord> packets_;
  GroundTruth truth_;

  std::uint32_t server_isn_ = 0;
  std::uint32_t client_isn_ = 0;
  std::uint16_t client_port_ = 0;

  // Link.
  std::deque<std::pair<Timestamp, std::uint32_t>> link_queue_;
  std::uint64_t queued_bytes_ = 0;
  Timestamp link_free_at_ = 0;
  GeState ge_;
  GeState ge_initial_;
  Timestamp ge_clock_ = 0;

  // Client.
  std::uint64_t rcvbuf_ = 0;
  std::uint8_t client_ws_ = 0;
  std::uint64_t rcv_nxt_ = 0;
  std::uint64_t right_edge_ = 0;
  std::map<std::uint64_t, std::uint64_t> ooo_;
  std::uint32_t client_sent_ = 0;
  std::uint32_t delack_pending_ = 0;
  std::uint64_t delack_gen_ = 0;
  bool fin_received_ = false;
  bool client_fin_sent_ = false;

  // Server.
  bool handshake_done_ = false;
  std::uint32_t seg_cap_ = 0;
  std::uint64_t app_end_ = 0;
  std::uint64_t snd_una_ = 0;
  std::uint64_t snd_nxt_ = 0;
  std::uint64_t snd_max_ = 0;
  std::uint64_t cwnd_ = 0;
  std::uint64_t ssthresh_ = 0;
  std::uint64_t peer_wnd_ = 0;
  std::uint32_t dupacks_ = 0;
  bool in_recovery_ = false;
  std::uint64_t recover_ = 0;
  bool timing_ = false;
  std::uint64_t timed_end_ = 0;
  Timestamp timed_at_ = 0;
  bool have_rtt_ = false;
  Duration srtt_ = 0;
  Duration rttvar_ = 0;
  Duration rto_ = 0;
  std::uint64_t rto_gen_ = 0;
  bool rto_running_ = false;
  bool send_scheduled_ = false;
  bool fin_sent_ = false;
  bool done_ = false;
};

}  // namespace

SimulationResult simulate(const ScenarioConfig& cfg) { return Simulation(cfg).run(); }

// ---- JSON ---------------------------------------------------------------------

namespace {

double ms(Duration d) { return static_cast<double>(d) / static_cast<double>(kMillisecond); }
Duration from_ms(double v) { return static_cast<Duration>(std::llround(v * kMillisecond)); }

}  // namespace

nlohmann::json to_json(const ScenarioConfig& c) {
  nlohmann::json j = {{"seed", c.seed},
                      {"file_size", c.file_size},
                      {"link_bw", c.link_bw},
                      {"rtt_ms", ms(c.rtt)},
                      {"mss", c.mss},
                      {"iw", c.iw},
                      {"C", c.C},
                      {"default_rcvbuf", c.default_rcvbuf},
                      {"queue_bytes", c.queue_bytes},
                      {"max_sim_time_ms", ms(c.max_sim_time)}};
  switch (c.sender.kind) {
    case SenderProblemKind::none: j["sender_problem"] = {{"kind", "none"}}; break;
    case SenderProblemKind::per_packet_delay:
      j["sender_problem"] = {
          {"kind", "per_packet_delay"}, {"delay_ms", ms(c.sender.delay)}, {"jitter", c.sender.jitter}};
      break;
    case SenderProblemKind::sub_mss:
      j["sender_problem"] = {{"kind", "sub_mss"}, {"max_segment", c.sender.max_segment}};
      break;
  }
  switch (c.receiver.kind) {
    case ReceiverProblemKind::none: j["receiver_problem"] = {{"kind", "none"}}; break;
    case ReceiverProblemKind::small_rcvbuf:
      j["receiver_problem"] = {{"kind", "small_rcvbuf"}, {"rcvbuf", c.receiver.rcvbuf}};
      break;
    case ReceiverProblemKind::delayed_ack:
      j["receiver_problem"] = {{"kind", "delayed_ack"},
                               {"ack_every", c.receiver.ack_every},
                               {"timeout_ms", ms(c.receiver.ack_timeout)}};
      break;
  }
  if (c.network) {
    j["network_problem"] = {{"kind", "gilbert_elliot"},
                            {"loss_rate", c.network->loss_rate},
                            {"bad_ms", ms(c.network->bad_duration)},
                            {"good_ms", ms(c.network->good_duration)}};
  } else {
    j["network_problem"] = {{"kind", "none"}};
  }
  return j;
}

ScenarioConfig scenario_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "seed",        "file_size",       "link_bw",        "rtt_ms",          "mss",
      "iw",          "C",               "default_rcvbuf", "queue_bytes",     "max_sim_time_ms",
      "sender_problem", "receiver_problem", "network_problem"};
  if (!j.is_object()) throw std::invalid_argument("scenario must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw std::invalid_argument("unknown scenario key: " + it.key());
  }
  ScenarioConfig c;
  c.seed = j.value("seed", c.seed);
  c.file_size = j.value("file_size", c.file_size);
  c.link_bw = j.value("link_bw", c.link_bw);
  if (j.contains("rtt_ms")) c.rtt = from_ms(j.at("rtt_ms").get<double>());
  c.mss = j.value("mss", c.mss);
  c.iw = j.value("iw", c.iw);
  c.C = j.value("C", c.C);
  c.default_rcvbuf = j.value("default_rcvbuf", c.default_rcvbuf);
  c.queue_bytes = j.value("queue_bytes", c.queue_bytes);
  if (j.contains("max_sim_time_ms")) c.max_sim_time = from_ms(j.at("max_sim_time_ms").get<double>());
  if (j.contains("sender_problem")) {
    const auto& s = j.at("sender_problem");
    const std::string kind = s.value("kind", "none");
    if (kind == "per_packet_delay") {
      c.sender.kind = SenderProblemKind::per_packet_delay;
      c.sender.delay = from_ms(s.at("delay_ms").get<double>());
      c.sender.jitter = s.value("jitter", c.sender.jitter);
    } else if (kind == "sub_mss") {
      c.sender.kind = SenderProblemKind::sub_mss;
      c.sender.max_segment = s.at("max_segment").get<std::uint32_t>();
    } else if (kind != "none") {
      throw std::invalid_argument("unknown sender_problem kind: " + kind);
    }
  }
  if (j.contains("receiver_problem")) {
    const auto& r = j.at("receiver_problem");
    const std::string kind = r.value("kind", "none");
    if (kind == "small_rcvbuf") {
      c.receiver.kind = ReceiverProblemKind::small_rcvbuf;
      c.receiver.rcvbuf = r.at("rcvbuf").get<std::uint32_t>();
    } else if (kind == "delayed_ack") {
      c.receiver.kind = ReceiverProblemKind::delayed_ack;
      c.receiver.ack_every = r.value("ack_every", c.receiver.ack_every);
      if (r.contains("timeout_ms")) c.receiver.ack_timeout = from_ms(r.at("timeout_ms").get<double>());
    } else if (kind != "none") {
      throw std::invalid_argument("unknown receiver_problem kind: " + kind);
    }
  }
  if (j.contains("network_problem")) {
    const auto& n = j.at("network_problem");
    const std::string kind = n.value("kind", "none");
    if (kind == "gilbert_elliot") {
      GilbertElliotConfig g;
      g.loss_rate = n.value("loss_rate", g.loss_rate);
      if (n.contains("bad_ms")) g.bad_duration = from_ms(n.at("bad_ms").get<double>());
      if (n.contains("good_ms")) g.good_duration = from_ms(n.at("good_ms").get<double>());
      c.network = g;
    } else if (kind != "none") {
      throw std::invalid_argument("unknown network_problem kind: " + kind);
    }
  }
  validate(c);
  return c;
}

nlohmann::json to_json(const GroundTruth& t) {
  nlohmann::json labels = nlohmann::json::array();
  for (std::size_t i = 0; i < kLabelCount; ++i) {
    if (t.labels.has(static_cast<Label>(i))) labels.push_back(to_string(static_cast<Label>(i)));
  }
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& e : t.loss_events) losses.push_back({{"t", e.time}, {"kind", to_string(e.kind)}});
  nlohmann::json bad = nlohmann::json::array();
  for (const auto& [a, b] : t.bad_intervals) bad.push_back({a, b});
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& p : t.cwnd_trace) trace.push_back({p.time, p.cwnd});
  return {{"labels", labels},
          {"true_mss", t.true_mss},
          {"true_wscale", t.true_wscale},
          {"timed_out", t.timed_out},
          {"completion_time", t.completion_time},
          {"bytes_acked", t.bytes_acked},
          {"max_advertised_window", t.max_advertised_window},
          {"loss_events", losses},
          {"bad_intervals", bad},
          {"cwnd_trace", trace}};
}

}  // namespace dapper
