#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dapper/analyzer.hpp"
#include "dapper/evaluate.hpp"
#include "dapper/packet.hpp"
#include "dapper/traffic_synth.hpp"

namespace {

using namespace dapper;

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitConfig = 3;

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Duration from_ms(double ms) {
  return static_cast<Duration>(ms * static_cast<double>(kMillisecond));
}

// "a.b.c.d:p-e.f.g.h:q"
CanonicalKey parse_tuple(const std::string& text) {
  const auto dash = text.find('-');
  if (dash == std::string::npos) throw ConfigError("bad tuple '" + text + "'");
  auto endpoint = [&](const std::string& s) -> std::pair<std::uint32_t, std::uint16_t> {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos) throw ConfigError("bad endpoint '" + s + "'");
    const auto ip = parse_ipv4(s.substr(0, colon));
    unsigned long port = 0;
    try {
      port = std::stoul(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad port in '" + s + "'");
    }
    if (!ip || port > 65535) throw ConfigError("bad endpoint '" + s + "'");
    return {*ip, static_cast<std::uint16_t>(port)};
  };
  const auto [ia, pa] = endpoint(text.substr(0, dash));
  const auto [ib, pb] = endpoint(text.substr(dash + 1));
  return canonicalize(ia, ib, pa, pb).first;
}

std::vector<PacketRecord> load_packets(const std::string& pcap, const std::string& events) {
  try {
    if (!pcap.empty()) {
      PcapReadResult r = parse_pcap_file(pcap);
      if (!r.warning.empty()) std::cerr << "warning: " << r.warning << '\n';
      return std::move(r.packets);
    }
    std::ifstream in(events);
    if (!in) throw InputError("cannot open " + events);
    return read_events(in);
  } catch (const IngestError& e) {
    throw InputError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("events: ") + e.what());
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  return out;
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    open_out(path) << text;
  }
}

// ---- analyze ---------------------------------------------------------------

struct AnalyzeOpts {
  std::string pcap, events, report, verdicts;
  std::string mode = "software";
  bool two_phase = false;
  double badness_rate = 0.0;
  std::size_t table_size = std::size_t{1} << 18;
  std::size_t max_flows = 0;
  std::string option_mode = "midstream";
  std::vector<std::string> force;
  std::optional<std::size_t> rtt_queue;
  std::optional<bool> rttvar;
  double decrease = 0.5;
  std::uint32_t iw = 10;
  double rto_min_ms = 200.0;
  DiagnosisConfig diag;
  double reaction_ms = 1.0;
  std::optional<double> expected_rtt_ms;
  double min_window_ms = 100.0;
};

void add_analyze(CLI::App& app, AnalyzeOpts& o) {
  auto* src = app.add_option("--pcap", o.pcap, "pcap capture to analyze");
  auto* ev = app.add_option("--events", o.events, "newline-delimited JSON packet events");
  src->excludes(ev);
  app.add_option("--mode", o.mode, "software | hardware-emu")
      ->check(CLI::IsMember({"software", "hardware-emu"}));
  app.add_flag("--two-phase", o.two_phase, "lightweight detection before full diagnosis");
  app.add_option("--badness-rate", o.badness_rate, "phase-1 rate threshold in bit/s");
  app.add_option("--table-size", o.table_size, "flow table slots (power of two)");
  app.add_option("--max-flows", o.max_flows, "software-mode capacity, 0 for unbounded");
  app.add_option("--option-mode", o.option_mode, "cached | midstream")
      ->check(CLI::IsMember({"cached", "midstream"}));
  app.add_option("--force-promote", o.force, "promote a tuple ip:port-ip:port on sight");
  app.add_option("--rtt-queue", o.rtt_queue, "RTT tuple queue capacity, 0 for unbounded");
  app.add_option("--rttvar", o.rttvar, "track RTT variance (true|false)");
  app.add_option("--decrease", o.decrease, "window decrease factor on fast retransmit");
  app.add_option("--initial-window", o.iw, "segments restored after a timeout");
  app.add_option("--rto-min-ms", o.rto_min_ms, "RTO floor");
  app.add_option("--reaction-ms", o.reaction_ms, "sender reaction-time threshold");
  app.add_option("--expected-rtt-ms", o.expected_rtt_ms, "RTT baseline instead of min RTT");
  app.add_option("--rtt-inflation", o.diag.rtt_inflation_factor, "RTT inflation factor");
  app.add_option("--binding-slack", o.diag.binding_slack, "flight share that counts as binding");
  app.add_option("--binding-fraction", o.diag.binding_fraction,
                 "sample share needed for a window bound");
  app.add_option("--underuse-fraction", o.diag.underuse_fraction,
                 "sample share needed for sender underuse");
  app.add_option("--sub-mss-fraction", o.diag.sub_mss_fraction, "sub-MSS segment share");
  app.add_option("--growth-ratio", o.diag.growth_ratio, "per-round slow-start growth");
  app.add_option("--min-window-ms", o.min_window_ms, "shortest diagnosis window");
  app.add_option("--dominant-fraction", o.diag.dominant_fraction,
                 "time share for a dominant label");
  app.add_option("--dominant-loss-windows", o.diag.dominant_loss_windows,
                 "network-loss windows that report network, 0 to disable");
  app.add_option("--report", o.report, "report path (default stdout)");
  app.add_option("--verdicts", o.verdicts, "per-window verdicts as NDJSON");
}

AnalyzerConfig analyzer_config(const AnalyzeOpts& o) {
  const TableMode mode = o.mode == "software" ? TableMode::software : TableMode::hardware_emu;
  AnalyzerConfig cfg = AnalyzerConfig::for_mode(mode);
  if (!is_power_of_two(o.table_size)) throw ConfigError("--table-size must be a power of two");
  cfg.table.table_size = o.table_size;
  cfg.table.max_flows = o.max_flows;
  if (o.rtt_queue) cfg.metrics.rtt_queue_capacity = *o.rtt_queue;
  if (o.rttvar) cfg.metrics.rttvar_enabled = *o.rttvar;
  if (o.decrease <= 0.0 || o.decrease >= 1.0) throw ConfigError("--decrease must be in (0,1)");
  if (o.iw == 0) throw ConfigError("--initial-window must be positive");
  cfg.metrics.multiplicative_decrease = o.decrease;
  cfg.metrics.initial_window_segments = o.iw;
  cfg.metrics.rto_min = from_ms(o.rto_min_ms);
  cfg.diagnosis = o.diag;
  cfg.diagnosis.multiplicative_decrease = o.decrease;
  cfg.diagnosis.reaction_threshold = from_ms(o.reaction_ms);
  cfg.diagnosis.min_window = from_ms(o.min_window_ms);
  if (o.expected_rtt_ms) cfg.diagnosis.expected_rtt = from_ms(*o.expected_rtt_ms);
  cfg.two_phase = o.two_phase;
  if (o.two_phase && o.badness_rate <= 0.0) {
    throw ConfigError("--two-phase requires a positive --badness-rate");
  }
  cfg.phase.badness_rate_bps = o.badness_rate;
  cfg.phase.option_mode = o.option_mode == "cached" ? OptionMode::cached : OptionMode::midstream;
  for (const auto& t : o.force) cfg.forced_promotions.push_back(parse_tuple(t));
  cfg.keep_verdicts = !o.verdicts.empty();
  return cfg;
}

int run_analyze(const AnalyzeOpts& o) {
  if (o.pcap.empty() && o.events.empty()) throw ConfigError("one of --pcap or --events is required");
  const AnalyzerConfig cfg = analyzer_config(o);
  const auto packets = load_packets(o.pcap, o.events);
  // The streaming pipeline expects capture order.
  if (!std::is_sorted(packets.begin(), packets.end(),
                      [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; })) {
    std::cerr << "warning: packets out of timestamp order\n";
  }
  Analyzer an(cfg);
  for (const auto& p : packets) an.ingest(p);
  const AnalysisResult res = an.finish();
  emit(o.report, report_json(res, cfg).dump(2) + "\n");
  if (!o.verdicts.empty()) {
    std::ostringstream ss;
    for (const auto& f : res.flows) {
      for (const auto& v : f.verdicts) {
        nlohmann::json j = to_json(v);
        j["key"] = to_json(f.key);
        ss << j.dump() << '\n';
      }
    }
    emit(o.verdicts, ss.str());
  }
  return kExitOk;
}

// ---- simulate --------------------------------------------------------------

struct SimulateOpts {
  std::string scenario, out, pcap, truth;
  std::optional<std::uint64_t> seed;
};

int run_simulate(const SimulateOpts& o) {
  ScenarioConfig cfg;
  if (!o.scenario.empty()) {
    std::ifstream in(o.scenario);
    if (!in) throw InputError("cannot open " + o.scenario);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("scenario: ") + e.what());
    }
    try {
      cfg = scenario_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("scenario: ") + e.what());
    }
  }
  if (o.seed) cfg.seed = *o.seed;
  try {
    validate(cfg);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const SimulationResult sim = simulate(cfg);
  if (!o.out.empty()) {
    std::ostringstream ss;
    write_events(ss, sim.packets);
    emit(o.out, ss.str());
  }
  if (!o.pcap.empty()) {
    std::ofstream out(o.pcap, std::ios::binary);
    if (!out) throw InputError("cannot write " + o.pcap);
    write_pcap(out, sim.packets);
  }
  if (!o.truth.empty()) emit(o.truth, to_json(sim.truth).dump(2) + "\n");
  std::cerr << sim.packets.size() << " packets, completion "
            << static_cast<double>(sim.truth.completion_time) / static_cast<double>(kSecond)
            << " s" << (sim.truth.timed_out ? " (timed out)" : "") << '\n';
  return kExitOk;
}

// ---- evaluate --------------------------------------------------------------

struct EvaluateOpts {
  std::size_t trials = 100;
  std::string problems = "sender,receiver,network,sender+network,receiver+network";
  std::uint64_t seed = 1;
  std::string out, csv, json;
  unsigned threads = 0;
  std::optional<double> loss_rate;
  bool sweep = false;
};

int run_evaluate(const EvaluateOpts& o) {
  if (o.trials == 0) throw ConfigError("--trials must be at least 1");
  EvalConfig cfg;
  cfg.trials = o.trials;
  cfg.seed = o.seed;
  cfg.threads = o.threads;
  cfg.loss_rate = o.loss_rate;
  cfg.classes.clear();
  std::stringstream ss(o.problems);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto c = problem_class_from_string(item);
    if (!c) throw ConfigError("unknown problem class '" + item + "'");
    cfg.classes.push_back(*c);
  }
  if (cfg.classes.empty()) throw ConfigError("--problems is empty");

  const EvalResult res = evaluate(cfg);
  std::ostringstream table;
  write_table(table, res);
  if (o.sweep) {
    table << "\nnetwork accuracy by loss rate\n" << std::fixed << std::setprecision(1);
    for (const auto& p : severity_sweep(cfg, cfg.ranges.loss_rates)) {
      table << std::setw(8) << 100.0 * p.loss_rate << '%' << std::setw(8)
            << 100.0 * p.summary.accuracy() << "%\n";
    }
  }
  std::cout << table.str();
  if (!o.out.empty()) emit(o.out, table.str());
  if (!o.csv.empty()) {
    std::ostringstream c;
    write_csv(c, res);
    emit(o.csv, c.str());
  }
  if (!o.json.empty()) emit(o.json, to_json(res).dump(2) + "\n");
  return kExitOk;
}

// ---- report ----------------------------------------------------------------

struct ReportOpts {
  std::string in, out;
  bool fractions = false;
};

int run_report(const ReportOpts& o) {
  std::ifstream in(o.in);
  if (!in) throw InputError("cannot open " + o.in);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("report: ") + e.what());
  }
  if (!doc.contains("flows") || !doc["flows"].is_array()) throw InputError("report: no flows");
  if (!o.fractions) {
    nlohmann::json s = {{"flows", doc["flows"].size()},
                        {"accounting", doc.value("accounting", nlohmann::json::object())}};
    emit(o.out, s.dump(2) + "\n");
    return kExitOk;
  }
  // Per category: sorted fractions with their empirical CDF value.
  nlohmann::json cdf = nlohmann::json::object();
  for (std::size_t c = 0; c < kCategoryCount; ++c) {
    const std::string name(to_string(static_cast<Category>(c)));
    std::vector<double> xs;
    for (const auto& f : doc["flows"]) {
      const auto& d = f.at("diagnosis");
      if (d.value("empty", true)) continue;
      xs.push_back(d.at("fractions").value(name, 0.0));
    }
    std::sort(xs.begin(), xs.end());
    nlohmann::json pts = nlohmann::json::array();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      pts.push_back({xs[i], static_cast<double>(i + 1) / static_cast<double>(xs.size())});
    }
    cdf[name] = pts;
  }
  emit(o.out, nlohmann::json{{"cdf", cdf}}.dump(2) + "\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Passive TCP bottleneck diagnosis"};
  app.require_subcommand(1);

  AnalyzeOpts ao;
  add_analyze(*app.add_subcommand("analyze", "diagnose connections in a trace"), ao);

  SimulateOpts so;
  auto* sim = app.add_subcommand("simulate", "generate a labeled synthetic transfer");
  sim->add_option("--scenario", so.scenario, "scenario JSON (defaults when omitted)");
  sim->add_option("--out", so.out, "packet events (NDJSON)");
  sim->add_option("--pcap", so.pcap, "pcap output");
  sim->add_option("--truth", so.truth, "ground truth JSON");
  sim->add_option("--seed", so.seed, "override the scenario seed");

  EvaluateOpts eo;
  auto* ev = app.add_subcommand("evaluate", "accuracy over seeded synthetic trials");
  ev->add_option("--trials", eo.trials, "trials per problem class");
  ev->add_option("--problems", eo.problems, "comma-separated problem classes");
  ev->add_option("--seed", eo.seed, "base seed");
  ev->add_option("--out", eo.out, "accuracy table");
  ev->add_option("--csv", eo.csv, "accuracy table as CSV");
  ev->add_option("--json", eo.json, "per-trial results");
  ev->add_option("--threads", eo.threads, "worker threads, 0 for all cores");
  ev->add_option("--loss-rate", eo.loss_rate, "fix the loss rate of network classes");
  ev->add_flag("--sweep", eo.sweep, "network accuracy at each loss rate");

  ReportOpts ro;
  auto* rep = app.add_subcommand("report", "summarize an analysis report");
  rep->add_option("--in", ro.in, "report produced by analyze")->required();
  rep->add_option("--out", ro.out, "output path (default stdout)");
  rep->add_flag("--fractions", ro.fractions, "per-category fraction CDF points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (app.got_subcommand("analyze")) return run_analyze(ao);
    if (app.got_subcommand("simulate")) return run_simulate(so);
    if (app.got_subcommand("evaluate")) return run_evaluate(eo);
    if (app.got_subcommand("report")) return run_report(ro);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}
