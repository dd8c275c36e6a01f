// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include <sys/mman.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dapper/analyzer.hpp"
#include "dapper/evaluate.hpp"
#include "dapper/flow_table.hpp"
#include "dapper/metrics.hpp"
#include "dapper/packet.hpp"
#include "dapper/traffic_synth.hpp"
#include "dapper/two_phase.hpp"

using namespace dapper;

namespace {

// Pinned tolerances.
constexpr double kMinTpr = 0.90;
constexpr double kMinAccuracy = 0.88;
constexpr double kMaxEvalSeconds = 300.0;
constexpr std::size_t kEvalTrials = 100;
constexpr std::size_t kLossFreeRuns = 50;
constexpr std::size_t kKarnFlows = 20;
constexpr std::size_t kCollisionKeys = 10000;
constexpr std::size_t kCollisionTable = std::size_t{1} << 18;
constexpr std::size_t kCollisionReps = 20000;
constexpr double kCollisionSigmas = 3.0;
constexpr std::size_t kPhase2MaxBytes = 67;
constexpr std::size_t kPhase1MaxBytes = 16;
constexpr std::size_t kPopulation = 10000;
constexpr double kTroubled = 0.10;
constexpr double kMinReduction = 0.70;
constexpr std::size_t kMidstreamFlows = 50;
constexpr std::size_t kSymmetryTuples = 1000000;
constexpr std::size_t kFuzzBuffers = 100000;
constexpr std::size_t kFuzzMaxLen = 40;

int failures = 0;

void report(int n, bool ok, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Direction dir_of(const PacketRecord& p) {
  return canonicalize(p.src_ip, p.dst_ip, p.src_port, p.dst_port).second;
}

// 1 ------------------------------------------------------------------------

void diagnosis_accuracy() {
  EvalConfig cfg;
  cfg.trials = kEvalTrials;
  const auto t0 = std::chrono::steady_clock::now();
  const EvalResult r = evaluate(cfg);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = secs < kMaxEvalSeconds;
  std::string detail;
  for (const auto& s : r.summaries) {
    ok = ok && s.tpr() >= kMinTpr && s.accuracy() >= kMinAccuracy;
    detail += fmt("%s tpr=%.2f acc=%.2f; ", std::string(to_string(s.cls)).c_str(), s.tpr(),
                  s.accuracy());
  }
  detail += fmt("%.1fs", secs);
  report(1, ok, detail);
}

// 2 ------------------------------------------------------------------------

void severity_monotonicity() {
  EvalConfig cfg;
  cfg.trials = kEvalTrials;
  const auto pts = severity_sweep(cfg, {0.01, 0.02, 0.05, 0.10});
  bool ok = true;
  std::string detail;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i > 0 && pts[i].summary.accuracy() < pts[i - 1].summary.accuracy()) ok = false;
    detail += fmt("%.0f%%:%.2f ", 100 * pts[i].loss_rate, pts[i].summary.accuracy());
  }
  report(2, ok, detail);
}

// 3 ------------------------------------------------------------------------

void cwnd_lower_bound() {
  std::size_t samples = 0, above = 0, not_max = 0, lossy = 0;
  for (std::size_t i = 0; i < kLossFreeRuns; ++i) {
    ScenarioConfig c;
    c.seed = 1000 + i;
    // Deep queue so the bottleneck never drops.
    c.queue_bytes = 16 << 20;
    const auto sim = simulate(c);
    if (sim.truth.has_drops()) {
      ++lossy;
      continue;
    }
    const MetricsConfig mc;
    FlowState st = make_flow_state(mc);
    std::uint64_t running = 0;
    for (const auto& p : sim.packets) {
      process_packet(st, p, dir_of(p), mc);
      running = std::max(running, st.flight_size);
      ++samples;
      if (st.inferred_cwnd > sim.truth.cwnd_at(p.timestamp)) ++above;
      if (st.inferred_cwnd != running) ++not_max;
    }
  }
  report(3, lossy == 0 && above == 0 && not_max == 0,
         fmt("%zu runs, %zu samples, inferred>true: %zu, !=running max: %zu, lossy runs: %zu",
             kLossFreeRuns, samples, above, not_max, lossy));
}

// 4 ------------------------------------------------------------------------

struct Script {
  static constexpr std::uint32_t mss = 1460;
  MetricsConfig cfg;
  FlowState st = make_flow_state(cfg);
  std::uint32_t isn = 7000;

  PacketRecord base(bool server, Timestamp t) const {
    PacketRecord p;
    p.timestamp = t;
    p.src_ip = server ? 1 : 2;
    p.dst_ip = server ? 2 : 1;
    p.src_port = server ? 80 : 5555;
    p.dst_port = server ? 5555 : 80;
    p.flags.ack = true;
    p.raw_window = 65535;
    return p;
  }
  void feed(const PacketRecord& p) { process_packet(st, p, dir_of(p), cfg); }
  void handshake() {
    PacketRecord syn = base(false, 0);
    syn.flags = {};
    syn.flags.syn = true;
    syn.options.mss = mss;
    syn.options.wscale = 7;
    feed(syn);
    PacketRecord sa = base(true, 1);
    sa.flags.syn = true;
    sa.seq = isn;
    sa.options.mss = mss;
    sa.options.wscale = 7;
    feed(sa);
  }
  void send(std::uint32_t seg, Timestamp t) {
    PacketRecord p = base(true, t);
    p.seq = isn + 1 + seg * mss;
    p.payload_len = mss;
    feed(p);
  }
  void sends(std::uint32_t first, std::uint32_t n, Timestamp t) {
    for (std::uint32_t i = 0; i < n; ++i) send(first + i, t);
  }
  void ack(std::uint32_t segs, Timestamp t) {
    PacketRecord p = base(false, t);
    p.ack = isn + 1 + segs * mss;
    feed(p);
  }
};

void algorithm_one() {
  constexpr std::uint64_t M = Script::mss;
  std::string detail;
  bool ok = true;
  const auto expect = [&](const char* what, std::uint64_t got, std::uint64_t want) {
    if (got != want) ok = false;
    detail += fmt("%s=%llu/%llu ", what, static_cast<unsigned long long>(got / M),
                  static_cast<unsigned long long>(want / M));
  };
  {
    Script s;
    s.handshake();
    s.sends(0, 10, 10 * kMillisecond);
    s.ack(2, 60 * kMillisecond);
    s.sends(10, 4, 61 * kMillisecond);
    expect("raise", s.st.inferred_cwnd, 12 * M);
    for (int i = 0; i < 3; ++i) s.ack(2, (62 + i) * kMillisecond);
    s.send(2, 66 * kMillisecond);
    expect("decrease", s.st.inferred_cwnd, 6 * M);
    s.ack(4, 110 * kMillisecond);
    s.send(4, 111 * kMillisecond);
    expect("second-retx", s.st.inferred_cwnd, 6 * M);
    if (s.st.retx_fast != 2 || s.st.losses.size() != 1) ok = false;
  }
  {
    Script s;
    s.handshake();
    s.sends(0, 20, 10 * kMillisecond);
    s.ack(5, 60 * kMillisecond);
    s.send(5, 3 * kSecond);
    expect("timeout", s.st.inferred_cwnd, 10 * M);
    if (s.st.retx_timeout != 1) ok = false;
  }
  detail += "(segments got/want, C=0.5, IW=10)";
  report(4, ok, detail);
}

// 5 ------------------------------------------------------------------------

struct KarnStep {
  Duration m, srtt, rto;
  friend bool operator==(const KarnStep&, const KarnStep&) = default;
};

// Offline match of sends to ACKs over the whole trace. A new cumulative ACK
// yields a sample from the latest segment it completes, unless any
// retransmitted range is still unacknowledged beneath it.
std::vector<KarnStep> karn_oracle(const std::vector<PacketRecord>& trace, Duration rto_min) {
  std::vector<KarnStep> out;
  std::uint32_t server = 0;
  std::uint16_t server_port = 0;
  bool started = false;
  std::uint32_t high = 0, cum = 0;
  std::deque<std::pair<std::uint32_t, Timestamp>> sends;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> retx;
  Duration srtt = 0, var = 0;
  bool first = true;
  for (const auto& p : trace) {
    if (p.flags.syn && p.flags.ack) {
      server = p.src_ip;
      server_port = p.src_port;
      high = cum = p.seq + 1;
      started = true;
      continue;
    }
    if (!started || p.flags.syn || p.flags.rst) continue;
    if (p.src_ip == server && p.src_port == server_port) {
      if (p.payload_len == 0) continue;
      const std::uint32_t end = p.seq + p.payload_len;
      if (seq_geq(p.seq, high)) {
        sends.emplace_back(end, p.timestamp);
        high = end;
      } else {
        retx.emplace_back(p.seq, end);
        std::erase_if(sends, [&](const auto& s) { return seq_gt(s.first, p.seq) && seq_leq(s.first, end); });
        if (seq_gt(end, high)) high = end;
      }
      continue;
    }
    if (!p.flags.ack) continue;
    std::uint32_t a = seq_gt(p.ack, high) ? high : p.ack;
    if (!seq_gt(a, cum)) continue;
    const bool ambiguous = std::any_of(retx.begin(), retx.end(), [&](const auto& r) {
      return seq_gt(r.second, cum) && seq_lt(r.first, a);
    });
    std::optional<Timestamp> sent;
    while (!sends.empty() && seq_leq(sends.front().first, a)) {
      sent = sends.front().second;
      sends.pop_front();
    }
    cum = a;
    std::erase_if(retx, [&](const auto& r) { return seq_leq(r.second, cum); });
    if (ambiguous || !sent || p.timestamp - *sent <= 0) continue;
    const Duration m = p.timestamp - *sent;
    if (first) {
      srtt = m;
      var = m / 2;
      first = false;
    } else {
      var = (3 * var + (srtt > m ? srtt - m : m - srtt)) / 4;
      srtt = (7 * srtt + m) / 8;
    }
    out.push_back({m, srtt, std::max(srtt + 4 * var, rto_min)});
  }
  return out;
}

struct EngineRun {
  std::vector<KarnStep> steps;
  std::vector<std::pair<Timestamp, Duration>> srtt_at;
};

EngineRun engine_samples(const std::vector<PacketRecord>& trace, const MetricsConfig& mc) {
  EngineRun r;
  FlowState st = make_flow_state(mc);
  for (const auto& p : trace) {
    const auto ev = process_packet(st, p, dir_of(p), mc);
    if (std::find(ev.begin(), ev.end(), UpdateEvent::RttSample) != ev.end()) {
      r.steps.push_back({st.last_rtt, st.rtt.srtt, st.rtt.rto});
      r.srtt_at.emplace_back(p.timestamp, st.rtt.srtt);
    }
  }
  return r;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void karn_equivalence() {
  std::size_t mismatched = 0, total = 0, with_retx = 0;
  // Upper bounds of sample-count buckets for the bounded-queue error curve.
  const std::vector<std::size_t> edges = {4, 16, 64, 256, SIZE_MAX};
  std::vector<std::vector<double>> err(edges.size());
  for (std::size_t i = 0; i < kKarnFlows; ++i) {
    ScenarioConfig c;
    c.seed = 2000 + i;
    c.file_size = 512 * 1024;
    if (i % 2) c.network = GilbertElliotConfig{0.05};
    if (i % 4 == 3) {
      c.receiver.kind = ReceiverProblemKind::delayed_ack;
    }
    const auto sim = simulate(c);
    MetricsConfig unbounded;
    const EngineRun eng = engine_samples(sim.packets, unbounded);
    const auto oracle = karn_oracle(sim.packets, unbounded.rto_min);
    total += oracle.size();
    if (eng.steps != oracle) ++mismatched;
    if (!sim.truth.loss_events.empty()) ++with_retx;

    MetricsConfig one;
    one.rtt_queue_capacity = 1;
    const EngineRun b = engine_samples(sim.packets, one);
    // Reference: unbounded SRTT in effect at each bounded sample.
    std::size_t j = 0;
    for (std::size_t k = 0; k < b.srtt_at.size(); ++k) {
      const Timestamp t = b.srtt_at[k].first;
      while (j + 1 < eng.srtt_at.size() && eng.srtt_at[j + 1].first <= t) ++j;
      if (eng.srtt_at.empty() || eng.srtt_at[j].first > t) continue;
      const double ref = static_cast<double>(eng.srtt_at[j].second);
      const double e = std::abs(static_cast<double>(b.srtt_at[k].second) - ref) / ref;
      const std::size_t count = k + 1;
      for (std::size_t bi = 0; bi < edges.size(); ++bi) {
        if (count <= edges[bi]) {
          err[bi].push_back(e);
          break;
        }
      }
    }
  }
  bool monotone = true;
  double prev = 1e300;
  std::string curve;
  std::size_t lo = 1;
  for (std::size_t bi = 0; bi < edges.size(); ++bi) {
    if (err[bi].empty()) continue;
    const double m = median(err[bi]);
    if (m > prev) monotone = false;
    prev = m;
    curve += edges[bi] == SIZE_MAX ? fmt("%zu+:%.4f ", lo, m) : fmt("%zu-%zu:%.4f ", lo, edges[bi], m);
    lo = edges[bi] + 1;
  }
  report(5, mismatched == 0 && monotone,
         fmt("%zu flows (%zu lossy), %zu oracle samples, mismatched flows: %zu; "
             "capacity-1 median rel. SRTT error by samples: %s",
             kKarnFlows, with_retx, total, mismatched, curve.c_str()));
}

// 6 ------------------------------------------------------------------------

void collision_model() {
  std::mt19937_64 rng(6);
  std::vector<std::uint8_t> occ(kCollisionTable, 0);
  std::vector<std::size_t> used;
  used.reserve(kCollisionKeys);
  std::size_t hits = 0;
  const auto key = [&] {
    return canonicalize(static_cast<std::uint32_t>(rng()), static_cast<std::uint32_t>(rng()),
                        static_cast<std::uint16_t>(rng()), static_cast<std::uint16_t>(rng()))
        .first;
  };
  for (std::size_t r = 0; r < kCollisionReps; ++r) {
    for (std::size_t i : used) occ[i] = 0;
    used.clear();
    for (std::size_t i = 0; i + 1 < kCollisionKeys; ++i) {
      const std::size_t idx = hash_index(key(), kCollisionTable);
      occ[idx] = 1;
      used.push_back(idx);
    }
    hits += occ[hash_index(key(), kCollisionTable)];
  }
  const double p = expected_collision_probability(kCollisionKeys, kCollisionTable);
  const double emp = static_cast<double>(hits) / static_cast<double>(kCollisionReps);
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(kCollisionReps));
  report(6, std::abs(emp - p) <= kCollisionSigmas * sigma && p < 0.04,
         fmt("empirical %.4f vs model %.4f (sigma %.4f, %zu reps)", emp, p, sigma,
             kCollisionReps));
}

// 7 ------------------------------------------------------------------------

void state_accounting() {
  // Population of short synthetic connections; every tenth one is forced
  // into phase 2.
  AnalyzerConfig cfg;
  cfg.two_phase = true;
  cfg.phase.badness_rate_bps = 1.0;
  std::vector<PacketRecord> pkts;
  for (std::size_t i = 0; i < kPopulation; ++i) {
    const std::uint32_t client = 0x0b000000u + static_cast<std::uint32_t>(i);
    const std::uint32_t server = 0x0a000001u;
    if (i % static_cast<std::size_t>(1 / kTroubled) == 0) {
      cfg.forced_promotions.push_back(canonicalize(server, client, 80, 40000).first);
    }
    for (int k = 0; k < 3; ++k) {
      PacketRecord p;
      p.timestamp = static_cast<Timestamp>(i * 10 + k) * kMicrosecond;
      const bool from_server = k != 1;
      p.src_ip = from_server ? server : client;
      p.dst_ip = from_server ? client : server;
      p.src_port = from_server ? 80 : 40000;
      p.dst_port = from_server ? 40000 : 80;
      p.seq = 1000 + static_cast<std::uint32_t>(k) * 1460;
      p.ack = 1;
      p.flags.ack = true;
      p.payload_len = from_server ? 1460 : 0;
      p.raw_window = 65535;
      pkts.push_back(p);
    }
  }
  Analyzer an(cfg);
  for (const auto& p : pkts) an.ingest(p);
  const auto res = an.finish();
  const double two = static_cast<double>(res.accounting.phase1_bytes + res.accounting.phase2_bytes);
  const double single = static_cast<double>(kPopulation * kPhase2RegisterBytes);
  const double reduction = 1.0 - two / single;
  const bool ok = kPhase2RegisterBytes <= kPhase2MaxBytes &&
                  phase1_bytes(false) <= kPhase1MaxBytes && phase1_bytes(true) <= kPhase1MaxBytes &&
                  res.accounting.flows_tracked == kPopulation && reduction >= kMinReduction;
  report(7, ok,
         fmt("phase2 %zu B, phase1 %zu B (%zu B with cached options); %zu flows: %.0f B vs %.0f B "
             "single-phase, reduction %.1f%% (model %.1f%%)",
             kPhase2RegisterBytes, phase1_bytes(false), phase1_bytes(true),
             res.accounting.flows_tracked, two, single, 100 * reduction,
             100 * (1 - two_phase_payload(kPopulation, kTroubled, false) /
                            single_phase_payload(kPopulation))));
}

// 8 ------------------------------------------------------------------------

void midstream_inference() {
  std::size_t bad_mss = 0, over = 0, decreasing = 0, never_full = 0;
  double pre_err = 0.0;
  std::size_t pre_n = 0;
  std::mt19937_64 rng(8);
  for (std::size_t i = 0; i < kMidstreamFlows; ++i) {
    ScenarioConfig c;
    c.seed = 3000 + i;
    c.file_size = 512 * 1024;
    if (i % 3 == 1) c.network = GilbertElliotConfig{0.02};
    if (i % 3 == 2) {
      c.receiver.kind = ReceiverProblemKind::small_rcvbuf;
      c.receiver.rcvbuf = 4 * 1460;
    }
    const auto sim = simulate(c);
    const std::size_t start = 10 + rng() % (sim.packets.size() / 2);
    TwoPhaseFlow f;
    const MetricsConfig mc;
    promote(f, OptionMode::midstream, sim.packets[start].timestamp, mc);
    FlowState& st = *f.phase2;
    bool full = false;
    std::uint8_t last = 0;
    for (std::size_t k = start; k < sim.packets.size(); ++k) {
      const auto& p = sim.packets[k];
      process_packet(st, p, dir_of(p), mc);
      if (st.sender_dir && p.src_ip == st.sender_ip && p.payload_len == sim.truth.true_mss) full = true;
      if (st.mss != 0 && !full) {
        pre_err += std::abs(static_cast<double>(st.mss) - sim.truth.true_mss) / sim.truth.true_mss;
        ++pre_n;
      }
      if (full && st.mss != sim.truth.true_mss) ++bad_mss;
      if (st.wscale_lower_bound > sim.truth.true_wscale) ++over;
      if (st.wscale_lower_bound < last) ++decreasing;
      last = st.wscale_lower_bound;
    }
    if (!full) ++never_full;
  }
  report(8, bad_mss == 0 && over == 0 && decreasing == 0 && never_full == 0,
         fmt("%zu flows; mss errors after first full segment: %zu (mean rel. error before: %.3f); "
             "wscale bound above truth: %zu, decreases: %zu",
             kMidstreamFlows, bad_mss, pre_n ? pre_err / static_cast<double>(pre_n) : 0.0, over,
             decreasing));
}

// 9 ------------------------------------------------------------------------

void hash_symmetry() {
  std::mt19937_64 rng(9);
  std::size_t violations = 0;
  for (std::size_t i = 0; i < kSymmetryTuples; ++i) {
    const auto s = static_cast<std::uint32_t>(rng()), d = static_cast<std::uint32_t>(rng());
    const auto sp = static_cast<std::uint16_t>(rng()), dp = static_cast<std::uint16_t>(rng());
    const auto f = canonicalize(s, d, sp, dp).first;
    const auto r = canonicalize(d, s, dp, sp).first;
    if (key_crc32(f) != key_crc32(r) || hash_index(f, kCollisionTable) != hash_index(r, kCollisionTable)) {
      ++violations;
    }
  }
  report(9, violations == 0, fmt("%zu tuples, %zu violations", kSymmetryTuples, violations));
}

// 10 -----------------------------------------------------------------------

void option_fuzz() {
  // Each buffer ends flush against an inaccessible page, so any read past
  // its end faults.
  const std::size_t page = static_cast<std::size_t>(::sysconf(_SC_PAGESIZE));
  void* mem = ::mmap(nullptr, 2 * page, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
  if (mem == MAP_FAILED || ::mprotect(static_cast<std::uint8_t*>(mem) + page, page, PROT_NONE) != 0) {
    report(10, false, "guard page setup failed");
    return;
  }
  auto* edge = static_cast<std::uint8_t*>(mem) + page;
  std::mt19937_64 rng(10);
  std::size_t malformed = 0, with_mss = 0, bad_scale = 0;
  for (std::size_t i = 0; i < kFuzzBuffers; ++i) {
    const std::size_t n = rng() % (kFuzzMaxLen + 1);
    std::uint8_t* buf = edge - n;
    for (std::size_t k = 0; k < n; ++k) {
      // Bias toward known kinds so deep paths are reached.
      const auto r = rng();
      buf[k] = r % 3 == 0 ? static_cast<std::uint8_t>((r >> 8) % 9) : static_cast<std::uint8_t>(r >> 16);
    }
    const TcpOptions o = parse_tcp_options({buf, n});
    malformed += o.malformed;
    with_mss += o.mss.has_value();
    if (o.wscale && *o.wscale > kMaxWindowScale) ++bad_scale;
  }
  ::munmap(mem, 2 * page);
  report(10, bad_scale == 0,
         fmt("%zu buffers <= %zu B against a guard page, no fault; malformed %zu, mss decoded %zu",
             kFuzzBuffers, kFuzzMaxLen, malformed, with_mss));
}

}  // namespace

int main() {
  diagnosis_accuracy();
  severity_monotonicity();
  cwnd_lower_bound();
  algorithm_one();
  karn_equivalence();
  collision_model();
  state_accounting();
  midstream_inference();
  hash_symmetry();
  option_fuzz();
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
