#include "dapper/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <iomanip>
#include <thread>

namespace dapper {

namespace {

constexpr std::uint64_t splitmix(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

bool has_sender(ProblemClass c) {
  return c == ProblemClass::sender || c == ProblemClass::sender_network;
}
bool has_receiver(ProblemClass c) {
  return c == ProblemClass::receiver || c == ProblemClass::receiver_network;
}
bool has_network(ProblemClass c) {
  return c == ProblemClass::network || c == ProblemClass::sender_network ||
         c == ProblemClass::receiver_network;
}

template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

std::string_view to_string(ProblemClass c) noexcept {
  switch (c) {
    case ProblemClass::sender: return "sender";
    case ProblemClass::receiver: return "receiver";
    case ProblemClass::network: return "network";
    case ProblemClass::sender_network: return "sender+network";
    case ProblemClass::receiver_network: return "receiver+network";
  }
  return "?";
}

std::optional<ProblemClass> problem_class_from_string(std::string_view s) noexcept {
  for (ProblemClass c : all_problem_classes()) {
    if (s == to_string(c)) return c;
  }
  if (s == "sender-network" || s == "sender_network") return ProblemClass::sender_network;
  if (s == "receiver-network" || s == "receiver_network") return ProblemClass::receiver_network;
  return std::nullopt;
}

Category category_of(ProblemClass c) noexcept {
  switch (c) {
    case ProblemClass::sender: return Category::sender;
    case ProblemClass::receiver: return Category::receiver;
    case ProblemClass::network: return Category::network;
    case ProblemClass::sender_network: return Category::sender_network;
    case ProblemClass::receiver_network: return Category::receiver_network;
  }
  return Category::none;
}

const std::vector<ProblemClass>& all_problem_classes() {
  static const std::vector<ProblemClass> all = {
      ProblemClass::sender, ProblemClass::receiver, ProblemClass::network,
      ProblemClass::sender_network, ProblemClass::receiver_network};
  return all;
}

ScenarioConfig make_trial_scenario(const EvalConfig& cfg, ProblemClass cls, std::size_t trial) {
  ScenarioConfig s = cfg.base;
  s.seed = splitmix(splitmix(cfg.seed) ^ (static_cast<std::uint64_t>(cls) << 32) ^ trial);
  std::mt19937_64 rng(splitmix(s.seed));
  s.sender = {};
  s.receiver = {};
  s.network.reset();
  if (has_sender(cls)) {
    std::uniform_int_distribution<Duration> d(cfg.ranges.delay_min, cfg.ranges.delay_max);
    s.sender.kind = SenderProblemKind::per_packet_delay;
    s.sender.delay = d(rng);
  }
  if (has_receiver(cls)) {
    std::uniform_int_distribution<std::size_t> pick(0, cfg.ranges.rcvbuf_segments.size() - 1);
    s.receiver.kind = ReceiverProblemKind::small_rcvbuf;
    s.receiver.rcvbuf = cfg.ranges.rcvbuf_segments[pick(rng)] * s.mss;
  }
  if (has_network(cls)) {
    GilbertElliotConfig ge;
    if (cfg.loss_rate) {
      ge.loss_rate = *cfg.loss_rate;
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, cfg.ranges.loss_rates.size() - 1);
      ge.loss_rate = cfg.ranges.loss_rates[pick(rng)];
    }
    s.network = ge;
  }
  return s;
}

TrialResult run_trial(const ScenarioConfig& scenario, const AnalyzerConfig& acfg) {
  const SimulationResult sim = simulate(scenario);
  AnalyzerConfig cfg = acfg;
  cfg.keep_verdicts = false;
  Analyzer an(cfg);
  for (const auto& p : sim.packets) an.ingest(p);
  AnalysisResult res = an.finish();

  TrialResult t;
  t.seed = scenario.seed;
  t.completed = !sim.truth.timed_out;
  if (scenario.network) t.loss_rate = scenario.network->loss_rate;
  t.random_drops = static_cast<std::size_t>(
      std::count_if(sim.truth.loss_events.begin(), sim.truth.loss_events.end(),
                    [](const LossEvent& e) { return e.kind == LossEventKind::random_drop; }));
  t.expected = category_for(sim.truth.labels, 1.0, 1.0);
  // The monitored connection is the one carrying the most packets.
  const FlowReport* best = nullptr;
  for (const auto& f : res.flows) {
    if (!best || f.packets > best->packets) best = &f;
  }
  if (best) {
    t.fractions = best->fractions;
    t.dominant = best->fractions.dominant;
    t.reported = best->fractions.dominant_category;
  }
  t.detected = true;
  for (std::size_t i = 0; i < kLabelCount; ++i) {
    const auto l = static_cast<Label>(i);
    if (sim.truth.labels.has(l) && !t.dominant.has(l)) t.detected = false;
  }
  t.exact = t.reported == t.expected;
  return t;
}

double ClassSummary::tpr() const noexcept {
  return trials == 0 ? 0.0 : static_cast<double>(detected) / static_cast<double>(trials);
}

double ClassSummary::accuracy() const noexcept {
  return trials == 0 ? 0.0 : static_cast<double>(exact) / static_cast<double>(trials);
}

EvalResult evaluate(const EvalConfig& cfg) {
  EvalResult out;
  const std::size_t n = cfg.classes.size() * cfg.trials;
  out.trials.resize(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    const ProblemClass cls = cfg.classes[i / cfg.trials];
    const std::size_t trial = i % cfg.trials;
    TrialResult t = run_trial(make_trial_scenario(cfg, cls, trial), cfg.analyzer);
    t.cls = cls;
    t.trial = trial;
    out.trials[i] = std::move(t);
  });
  for (ProblemClass cls : cfg.classes) {
    ClassSummary s;
    s.cls = cls;
    for (const auto& t : out.trials) {
      if (t.cls != cls) continue;
      ++s.trials;
      s.detected += t.detected;
      s.exact += t.exact;
    }
    out.summaries.push_back(s);
  }
  return out;
}

std::vector<SeverityPoint> severity_sweep(const EvalConfig& cfg,
                                          const std::vector<double>& rates) {
  std::vector<SeverityPoint> out;
  for (double r : rates) {
    EvalConfig c = cfg;
    c.classes = {ProblemClass::network};
    c.loss_rate = r;
    const EvalResult res = evaluate(c);
    out.push_back({r, res.summaries.front()});
  }
  return out;
}

void write_table(std::ostream& os, const EvalResult& r) {
  os << std::left << std::setw(18) << "problem" << std::right << std::setw(8) << "trials"
     << std::setw(8) << "TPR" << std::setw(10) << "accuracy" << '\n';
  for (const auto& s : r.summaries) {
    os << std::left << std::setw(18) << to_string(s.cls) << std::right << std::setw(8)
       << s.trials << std::fixed << std::setprecision(1) << std::setw(7) << 100.0 * s.tpr()
       << '%' << std::setw(9) << 100.0 * s.accuracy() << "%\n";
  }
  os.unsetf(std::ios::floatfield);
}

void write_csv(std::ostream& os, const EvalResult& r) {
  os << "problem,trials,detected,exact,tpr,accuracy\n";
  for (const auto& s : r.summaries) {
    os << to_string(s.cls) << ',' << s.trials << ',' << s.detected << ',' << s.exact << ','
       << s.tpr() << ',' << s.accuracy() << '\n';
  }
}

nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : r.summaries) {
    rows.push_back({{"problem", to_string(s.cls)},
                    {"trials", s.trials},
                    {"tpr", s.tpr()},
                    {"accuracy", s.accuracy()}});
  }
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : r.trials) {
    trials.push_back({{"problem", to_string(t.cls)},
                      {"trial", t.trial},
                      {"seed", t.seed},
                      {"expected", to_string(t.expected)},
                      {"reported", to_string(t.reported)},
                      {"detected", t.detected},
                      {"exact", t.exact},
                      {"completed", t.completed},
                      {"loss_rate", t.loss_rate},
                      {"random_drops", t.random_drops},
                      {"fractions", to_json(t.fractions)}});
  }
  return {{"schema_version", kReportSchemaVersion}, {"classes", rows}, {"trials", trials}};
}

}  // namespace dapper
