#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "dapper/flow_table.hpp"
#include "dapper/traffic_synth.hpp"
#include "dapper/two_phase.hpp"

using namespace dapper;

namespace {

PacketRecord pkt(Timestamp t, std::uint32_t payload) {
  PacketRecord p;
  p.timestamp = t;
  p.payload_len = payload;
  p.flags.ack = true;
  return p;
}

Phase1State aged(std::uint64_t bytes, Duration span) {
  Phase1State s;
  phase1_update(s, pkt(0, 0), true);
  s.bytes_sent = bytes;
  s.update_time = span;
  return s;
}

}  // namespace

TEST_CASE("phase 1: first packet") {
  Phase1State s;
  phase1_update(s, pkt(7 * kMillisecond, 1460), true);
  CHECK(s.init_time == 7 * kMillisecond);
  CHECK(s.update_time == 7 * kMillisecond);
  CHECK(s.bytes_sent == 1460);
}

TEST_CASE("phase 1: ack-only and receiver packets") {
  Phase1State s;
  phase1_update(s, pkt(0, 1460), true);
  phase1_update(s, pkt(5, 0), true);
  CHECK(s.bytes_sent == 1460);
  CHECK(s.update_time == 5);
  phase1_update(s, pkt(9, 500), false);
  CHECK(s.bytes_sent == 1460);
  CHECK(s.update_time == 9);
}

TEST_CASE("register payload sizes") {
  CHECK(kPhase1RegisterBytes == 12);
  CHECK(phase1_bytes(false) == 12);
  CHECK(phase1_bytes(true) == 15);
  CHECK(phase1_bytes(true) <= 16);
  CHECK(kPhase2RegisterBytes == 67);
  CHECK(sizeof(Phase2Registers) == 67);
}

TEST_CASE("population accounting") {
  // 10,000 flows, 10% troubled: 120,000 + 67,000 bytes against 670,000.
  CHECK(two_phase_payload(10000, 0.1, false) == doctest::Approx(187000.0));
  CHECK(single_phase_payload(10000) == doctest::Approx(670000.0));
  const double saving = 1.0 - two_phase_payload(10000, 0.1, false) / single_phase_payload(10000);
  CHECK(saving == doctest::Approx(0.7209).epsilon(1e-3));
  CHECK(saving >= 0.70);
  CHECK(two_phase_payload(10000, 0.2, true) == doctest::Approx(10000 * 15 + 2000 * 67));
}

TEST_CASE("badness: 1 Mbps against 5 Mbps") {
  const TwoPhaseConfig cfg;
  const auto r = badness(aged(125000, kSecond), 5e6, kSecond, cfg);
  CHECK(r.rate_bps == doctest::Approx(1e6));
  CHECK(r.troubled);
  CHECK_FALSE(r.insufficient);
  CHECK_FALSE(badness(aged(1250000, kSecond), 5e6, kSecond, cfg).troubled);
}

TEST_CASE("badness: young flow is never troubled") {
  const TwoPhaseConfig cfg;
  const auto r = badness(aged(125000, 100 * kMillisecond), 1e9, 100 * kMillisecond, cfg);
  CHECK_FALSE(r.troubled);
  CHECK(r.insufficient);
}

TEST_CASE("badness: rate at the threshold is healthy") {
  const TwoPhaseConfig cfg;
  const auto r = badness(aged(125000, kSecond), 1e6, kSecond, cfg);
  CHECK(r.rate_bps == doctest::Approx(1e6));
  CHECK_FALSE(r.troubled);
}

TEST_CASE("badness: guards") {
  TwoPhaseConfig cfg;
  CHECK(badness(Phase1State{}, 5e6, kSecond, cfg).insufficient);
  // Too few bytes to judge.
  CHECK(badness(aged(1000, 2 * kSecond), 5e6, 2 * kSecond, cfg).insufficient);
}

TEST_CASE("register packing") {
  FlowState s;
  s.sender_ip = 0x0a000001;
  s.inferred_cwnd = 14600;
  s.rtt.srtt = 50 * kMillisecond;
  s.dup_ack_count = 2;
  s.mss = 1460;
  s.wscale = 7;
  const auto ok = pack_registers(s, true);
  CHECK(ok.sender_ip == 0x0a000001);
  CHECK(ok.inferred_cwnd == 14600);
  CHECK(ok.srtt_us == 50000);
  CHECK(ok.dup_acks == 2);
  CHECK(ok.mss == 1460);
  CHECK(ok.wscale == 7);
  const auto bad = pack_registers(s, false);
  CHECK((bad.dup_acks & kSanityBit) != 0);
  CHECK((bad.dup_acks & ~kSanityBit) == 2);
}

TEST_CASE("cached promotion takes the handshake constants") {
  TwoPhaseFlow f;
  PacketRecord syn = pkt(0, 0);
  syn.flags = {};
  syn.flags.syn = true;
  syn.src_ip = 2;
  syn.options.mss = 1400;
  syn.options.wscale = 5;
  PacketRecord sa = syn;
  sa.flags.ack = true;
  sa.src_ip = 1;
  sa.options.mss = 1460;
  sa.options.wscale = 7;
  f.cache.observe(syn);
  f.cache.observe(sa);
  f.cache.observe(pkt(1, 100));
  REQUIRE(f.cache.complete());
  CHECK(f.cache.synack_src == 1u);
  CHECK(promote(f, OptionMode::cached, 42, {}));
  REQUIRE(f.phase2);
  CHECK(f.phase2->mss == 1400);
  CHECK(f.phase2->mss_source == OptionSource::handshake);
  CHECK(f.phase2->wscale == 5);
  CHECK(f.promotion->option_source == OptionMode::cached);
  CHECK(f.promotion->promoted_at == 42);
}

TEST_CASE("cached mode without a handshake falls back to midstream") {
  TwoPhaseFlow f;
  CHECK(promote(f, OptionMode::cached, 0, {}));
  CHECK(f.promotion->option_source == OptionMode::midstream);
  CHECK(f.phase2->mss_source == OptionSource::none);
}

TEST_CASE("promotion is idempotent and keeps the phase 1 record") {
  TwoPhaseFlow f;
  phase1_update(f.phase1, pkt(0, 5000), true);
  phase1_update(f.phase1, pkt(kSecond, 5000), true);
  CHECK(promote(f, OptionMode::midstream, kSecond, {}, 123.0, 5e6));
  CHECK(f.phase2->bytes_sent == 0);
  CHECK(f.phase2->pkts_sent == 0);
  CHECK(f.phase1.bytes_sent == 10000);
  f.phase2->bytes_sent = 77;
  CHECK_FALSE(promote(f, OptionMode::midstream, 2 * kSecond, {}));
  CHECK(f.phase2->bytes_sent == 77);
  CHECK(f.promotion->promoted_at == kSecond);
  CHECK(f.promotion->rate_bps == doctest::Approx(123.0));
}

TEST_CASE("midstream promotion converges on the true constants") {
  ScenarioConfig cfg;
  cfg.file_size = 256 * 1024;
  cfg.sender.kind = SenderProblemKind::sub_mss;
  cfg.sender.max_segment = 700;
  const auto sim = simulate(cfg);
  ScenarioConfig full;
  full.file_size = 256 * 1024;
  const auto healthy = simulate(full);
  const auto& trace = healthy.packets;
  const MetricsConfig mc;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    TwoPhaseFlow f;
    const std::size_t start = 20 + rng() % (trace.size() / 2);
    for (std::size_t i = 0; i < start; ++i) f.cache.observe(trace[i]);
    promote(f, OptionMode::midstream, trace[start].timestamp, mc);
    std::uint8_t last_ws = 0;
    bool full_seen = false;
    for (std::size_t i = start; i < trace.size(); ++i) {
      const auto& p = trace[i];
      process_packet(*f.phase2, p, canonicalize(p.src_ip, p.dst_ip, p.src_port, p.dst_port).second,
                     mc);
      const FlowState& s = *f.phase2;
      if (p.payload_len == full.mss) full_seen = true;
      if (full_seen && s.sender_dir) REQUIRE(s.mss == full.mss);
      REQUIRE(s.mss <= full.mss);
      REQUIRE(s.wscale_lower_bound <= healthy.truth.true_wscale);
      REQUIRE(s.wscale_lower_bound >= last_ws);
      last_ws = s.wscale_lower_bound;
    }
    CHECK(full_seen);
  }
  // Sub-MSS writes keep the midstream estimate below the negotiated value.
  TwoPhaseFlow f;
  promote(f, OptionMode::midstream, sim.packets[10].timestamp, mc);
  for (std::size_t i = 10; i < sim.packets.size(); ++i) {
    const auto& p = sim.packets[i];
    process_packet(*f.phase2, p, canonicalize(p.src_ip, p.dst_ip, p.src_port, p.dst_port).second,
                   mc);
  }
  CHECK(f.phase2->mss == 700);
  CHECK(f.phase2->mss < sim.truth.true_mss);
}

TEST_CASE("promotion record serializes") {
  const auto j = to_json(PromotionRecord{5, OptionMode::cached, 1.0, 2.0, true});
  CHECK(j["promoted_at"] == 5);
  CHECK(j["option_source"] == "cached");
  CHECK(j["forced"] == true);
}
