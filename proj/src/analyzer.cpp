#include "dapper/analyzer.hpp"

#include <algorithm>

namespace dapper {

AnalyzerConfig AnalyzerConfig::for_mode(TableMode mode) {
  AnalyzerConfig cfg;
  cfg.table.mode = mode;
  if (mode == TableMode::hardware_emu) cfg.metrics = MetricsConfig::hardware_emulation();
  return cfg;
}

Analyzer::Analyzer(AnalyzerConfig cfg) : cfg_(std::move(cfg)), table_(cfg_.table) {
  table_.on_evict([this](Table::Slot& s) { finalize(s, false, true); });
}

bool Analyzer::forced(const CanonicalKey& key) const {
  return std::find(cfg_.forced_promotions.begin(), cfg_.forced_promotions.end(), key) !=
         cfg_.forced_promotions.end();
}

void Analyzer::init_record(Table::Slot& slot, const CanonicalKey& key, Timestamp now) {
  FlowRecord& f = slot.payload;
  f = FlowRecord{};
  f.key = key;
  f.last_key = key;
  f.keys_observed = 1;
  f.windows.emplace(cfg_.diagnosis);
  ++flows_created_;
  if (!cfg_.two_phase) {
    f.tp.phase2 = make_flow_state(cfg_.metrics);
    ++phase2_flows_;
  } else if (forced(key)) {
    promote(f.tp, cfg_.phase.option_mode, now, cfg_.metrics, 0.0, cfg_.phase.badness_rate_bps,
            true);
    ++phase2_flows_;
  }
  live_.insert(&slot);
}

void Analyzer::ingest(const PacketRecord& pkt) {
  ++packets_;
  if (!scan_started_) {
    scan_started_ = true;
    next_scan_ = pkt.timestamp + cfg_.phase.scan_interval;
  }
  if (pkt.timestamp >= next_scan_) {
    scan(pkt.timestamp);
    next_scan_ = pkt.timestamp + cfg_.phase.scan_interval;
  }

  const auto [key, dir] = canonicalize(pkt);
  auto lk = table_.lookup_or_insert(key, pkt.timestamp);
  Table::Slot& slot = *lk.slot;
  if (lk.fresh) {
    init_record(slot, key, pkt.timestamp);
  } else if (table_.mode() == TableMode::hardware_emu && pkt.flags.syn && !pkt.flags.ack &&
             slot.payload.packets > 0) {
    // A new handshake takes the slot over.
    finalize(slot, true, false);
    table_.reset_slot(slot, pkt.timestamp);
    init_record(slot, key, pkt.timestamp);
  }
  FlowRecord& f = slot.payload;
  if (!(f.last_key == key)) {
    ++f.keys_observed;
    f.last_key = key;
  }
  ++f.packets;

  if (f.tp.promoted()) {
    apply_phase2(slot, pkt, dir);
  } else {
    if (cfg_.phase.option_mode == OptionMode::cached) f.tp.cache.observe(pkt);
    // Payload counts toward the sender unless the handshake names the other side.
    const bool sender_side = !f.tp.cache.synack_src || pkt.src_ip == *f.tp.cache.synack_src;
    phase1_update(f.tp.phase1, pkt, sender_side);
  }

  const int d = dir == Direction::forward ? 0 : 1;
  if (pkt.flags.fin) f.fin[d] = true;
  if ((pkt.flags.rst || (f.fin[0] && f.fin[1])) && !f.release_at) {
    Duration rto = cfg_.metrics.rto_min;
    if (f.tp.phase2) rto = std::max(rto, f.tp.phase2->rtt.rto);
    f.release_at = pkt.timestamp + 2 * rto;
  }
}

void Analyzer::apply_phase2(Table::Slot& slot, const PacketRecord& pkt, Direction dir) {
  FlowRecord& f = slot.payload;
  FlowState& st = *f.tp.phase2;
  if (table_.mode() == TableMode::hardware_emu && st.sender_dir && !pkt.flags.syn) {
    const auto from_sender = is_from_sender(st, pkt, dir, cfg_.metrics);
    if (!from_sender || !sanity_check(st, pkt, *from_sender)) {
      slot.sanity_ok = false;
      ++f.ignored;
      return;
    }
  }
  const auto events = process_packet(st, pkt, dir, cfg_.metrics);
  if (auto v = f.windows->observe(st, pkt, events)) {
    f.verdicts.push_back(std::move(*v));
  }
}

void Analyzer::scan(Timestamp now) {
  std::vector<Table::Slot*> expired;
  for (Table::Slot* s : live_) {
    FlowRecord& f = s->payload;
    if (f.release_at && now >= *f.release_at) {
      expired.push_back(s);
      continue;
    }
    if (cfg_.two_phase && !f.tp.promoted()) {
      const BadnessResult b =
          badness(f.tp.phase1, cfg_.phase.badness_rate_bps, now, cfg_.phase);
      if (b.troubled) {
        promote(f.tp, cfg_.phase.option_mode, now, cfg_.metrics, b.rate_bps,
                cfg_.phase.badness_rate_bps, false);
        ++phase2_flows_;
      }
    }
  }
  // Release in a fixed order so reports do not depend on hash-set layout.
  std::sort(expired.begin(), expired.end(), [](const Table::Slot* a, const Table::Slot* b) {
    return a->payload.tp.phase1.init_time != b->payload.tp.phase1.init_time
               ? a->payload.tp.phase1.init_time < b->payload.tp.phase1.init_time
               : a->index < b->index;
  });
  for (Table::Slot* s : expired) {
    const CanonicalKey key = s->payload.key;
    finalize(*s, false, true);
    table_.erase(key);
  }
}

void Analyzer::finalize(Table::Slot& slot, bool replaced, bool released) {
  FlowRecord& f = slot.payload;
  live_.erase(&slot);
  FlowReport r;
  r.key = f.key;
  r.slot_index = slot.index;
  r.keys_observed = f.keys_observed;
  r.sanity_ok = slot.sanity_ok;
  r.replaced = replaced;
  r.released = released;
  r.packets = f.packets;
  r.ignored_packets = f.ignored;
  r.phase1 = f.tp.phase1;
  r.promotion = f.tp.promotion;
  if (f.tp.phase2) {
    if (auto v = f.windows->flush(*f.tp.phase2)) f.verdicts.push_back(std::move(*v));
    r.state = *f.tp.phase2;
  }
  r.fractions = aggregate_report(f.verdicts, cfg_.diagnosis);
  if (cfg_.keep_verdicts) r.verdicts = std::move(f.verdicts);
  done_.push_back(std::move(r));
}

AnalysisResult Analyzer::finish() {
  std::vector<Table::Slot*> rest(live_.begin(), live_.end());
  std::sort(rest.begin(), rest.end(), [](const Table::Slot* a, const Table::Slot* b) {
    return a->payload.tp.phase1.init_time != b->payload.tp.phase1.init_time
               ? a->payload.tp.phase1.init_time < b->payload.tp.phase1.init_time
               : a->index < b->index;
  });
  for (Table::Slot* s : rest) finalize(*s, false, false);

  AnalysisResult out;
  out.packets = packets_;
  out.accounting.flows_tracked = flows_created_;
  out.accounting.phase1_bytes =
      cfg_.two_phase
          ? flows_created_ * phase1_bytes(cfg_.phase.option_mode == OptionMode::cached)
          : 0;
  out.accounting.phase2_bytes = phase2_flows_ * kPhase2RegisterBytes;
  out.accounting.evictions = table_.evictions();
  if (table_.mode() == TableMode::software) {
    out.accounting.collisions_detected = table_.chained_collisions();
  } else {
    out.accounting.collisions_detected = static_cast<std::size_t>(
        std::count_if(done_.begin(), done_.end(), [](const FlowReport& f) {
          return !f.sanity_ok || f.replaced;
        }));
  }
  out.flows = std::move(done_);
  done_.clear();
  return out;
}

// ---- JSON ---------------------------------------------------------------------

nlohmann::json to_json(const CanonicalKey& k) {
  return {{"ip_a", format_ipv4(k.ip_a)},
          {"port_a", k.port_a},
          {"ip_b", format_ipv4(k.ip_b)},
          {"port_b", k.port_b}};
}

namespace {

double ms(Duration d) { return static_cast<double>(d) / static_cast<double>(kMillisecond); }

std::string_view source_name(OptionSource s) {
  switch (s) {
    case OptionSource::none: return "none";
    case OptionSource::handshake: return "handshake";
    case OptionSource::midstream: return "midstream";
  }
  return "?";
}

nlohmann::json state_json(const FlowState& s) {
  nlohmann::json j;
  j["sender"] = s.sender_dir ? nlohmann::json{{"ip", format_ipv4(s.sender_ip)},
                                              {"port", s.sender_port}}
                             : nlohmann::json();
  j["handshake_seen"] = s.handshake_seen;
  j["counters"] = {{"packets_seen", s.packets_seen},
                   {"pkts_sent", s.pkts_sent},
                   {"bytes_sent", s.bytes_sent},
                   {"pkts_acked", s.pkts_acked},
                   {"acks_received", s.acks_received},
                   {"stale_acks", s.stale_acks},
                   {"sub_mss_segments", s.sub_mss_segments},
                   {"sack_blocks_seen", s.sack_blocks_seen}};
  j["rtt"] = {{"srtt_ms", ms(s.rtt.srtt)},
              {"rttvar_ms", ms(s.rtt.rttvar)},
              {"rto_ms", ms(s.rtt.rto)},
              {"min_rtt_ms", ms(s.min_rtt)},
              {"samples", s.rtt.samples}};
  j["inferred_cwnd"] = s.inferred_cwnd;
  j["effective_rwnd"] = s.last_effective_rwnd;
  j["max_effective_rwnd"] = s.max_effective_rwnd;
  j["flight"] = {{"current", s.flight_size}, {"max", s.max_flight}};
  j["retx"] = {{"total", s.retx_total}, {"fast", s.retx_fast}, {"timeout", s.retx_timeout}};
  j["loss_rate"] = s.pkts_sent + s.retx_total == 0
                       ? 0.0
                       : static_cast<double>(s.retx_total) /
                             static_cast<double>(s.pkts_sent + s.retx_total);
  j["delayed_ack_mean"] = s.dequeued_per_ack.mean;
  j["reaction_mean_ms"] = s.reaction.mean / static_cast<double>(kMillisecond);
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& l : s.losses) {
    losses.push_back({{"at", l.at},
                      {"kind", l.kind == LossKind::timeout ? "timeout" : "fast_retransmit"},
                      {"cwnd_before", l.cwnd_before},
                      {"cwnd_after", l.cwnd_after},
                      {"flight_before", l.flight_before},
                      {"flight_after", l.flight_after},
                      {"completed", l.completed}});
  }
  j["losses"] = losses;
  j["mss"] = {{"value", s.mss}, {"source", source_name(s.mss_source)}};
  j["wscale"] = {{"value", s.wscale}, {"source", source_name(s.wscale_source)}};
  return j;
}

}  // namespace

nlohmann::json to_json(const FlowReport& f) {
  nlohmann::json j;
  j["key"] = to_json(f.key);
  j["slot"] = f.slot_index;
  j["keys_observed"] = f.keys_observed;
  j["sanity_ok"] = f.sanity_ok;
  j["replaced"] = f.replaced;
  j["released"] = f.released;
  j["packets"] = f.packets;
  j["ignored_packets"] = f.ignored_packets;
  j["phase_history"] = {
      {"phase1",
       {{"init_time", f.phase1.init_time},
        {"bytes_sent", f.phase1.bytes_sent},
        {"update_time", f.phase1.update_time}}},
      {"promotion", f.promotion ? to_json(*f.promotion) : nlohmann::json()}};
  j["metrics"] = f.state ? state_json(*f.state) : nlohmann::json();
  j["diagnosis"] = to_json(f.fractions);
  return j;
}

nlohmann::json to_json(const TableAccounting& a) {
  return {{"flows_tracked", a.flows_tracked},
          {"phase1_bytes", a.phase1_bytes},
          {"phase2_bytes", a.phase2_bytes},
          {"evictions", a.evictions},
          {"collisions_detected", a.collisions_detected}};
}

nlohmann::json report_json(const AnalysisResult& r, const AnalyzerConfig& cfg) {
  nlohmann::json flows = nlohmann::json::array();
  for (const auto& f : r.flows) flows.push_back(to_json(f));
  return {{"schema_version", kReportSchemaVersion},
          {"mode", cfg.table.mode == TableMode::software ? "software" : "hardware-emu"},
          {"two_phase", cfg.two_phase},
          {"table_size", cfg.table.table_size},
          {"packets", r.packets},
          {"accounting", to_json(r.accounting)},
          {"flows", flows}};
}

}  // namespace dapper
