#pragma once

#include <cstddef>
#include <optional>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "dapper/diagnosis.hpp"
#include "dapper/flow_table.hpp"
#include "dapper/metrics.hpp"
#include "dapper/two_phase.hpp"

namespace dapper {

inline constexpr int kReportSchemaVersion = 1;

struct AnalyzerConfig {
  TableConfig table;
  MetricsConfig metrics;
  DiagnosisConfig diagnosis;
  bool two_phase = false;
  TwoPhaseConfig phase;
  // Connections promoted on first sight regardless of rate.
  std::vector<CanonicalKey> forced_promotions;
  bool keep_verdicts = true;

  /// Software defaults or the hardware-emulation profile.
  static AnalyzerConfig for_mode(TableMode mode);
};

struct FlowReport {
  CanonicalKey key;
  std::size_t slot_index = 0;
  // Distinct keys that touched the slot (hardware emulation only).
  std::size_t keys_observed = 1;
  bool sanity_ok = true;
  bool replaced = false;
  bool released = false;
  std::uint64_t packets = 0;
  std::uint64_t ignored_packets = 0;
  Phase1State phase1;
  std::optional<PromotionRecord> promotion;
  std::optional<FlowState> state;
  std::vector<Verdict> verdicts;
  FractionReport fractions;
};

struct AnalysisResult {
  std::vector<FlowReport> flows;
  TableAccounting accounting;
  std::uint64_t packets = 0;
};

/// Streams packets through the flow table, metrics engine, windowed
/// diagnosis and (optionally) two-phase monitoring.
class Analyzer {
 public:
  explicit Analyzer(AnalyzerConfig cfg);

  void ingest(const PacketRecord& pkt);
  AnalysisResult finish();

  const AnalyzerConfig& config() const noexcept { return cfg_; }

 private:
  struct FlowRecord {
    CanonicalKey key;
    CanonicalKey last_key;
    std::size_t keys_observed = 0;
    std::uint64_t packets = 0;
    std::uint64_t ignored = 0;
    TwoPhaseFlow tp;
    std::optional<WindowTracker> windows;
    std::vector<Verdict> verdicts;
    bool fin[2] = {false, false};
    std::optional<Timestamp> release_at;
    bool sanity_ok = true;
  };
  using Table = FlowTable<FlowRecord>;

  void init_record(Table::Slot& slot, const CanonicalKey& key, Timestamp now);
  void apply_phase2(Table::Slot& slot, const PacketRecord& pkt, Direction dir);
  void scan(Timestamp now);
  void finalize(Table::Slot& slot, bool replaced, bool released);
  bool forced(const CanonicalKey& key) const;

  AnalyzerConfig cfg_;
  Table table_;
  std::unordered_set<Table::Slot*> live_;
  std::vector<FlowReport> done_;
  Timestamp next_scan_ = 0;
  bool scan_started_ = false;
  std::uint64_t packets_ = 0;
  std::size_t flows_created_ = 0;
  std::size_t phase2_flows_ = 0;
};

nlohmann::json to_json(const CanonicalKey& key);
nlohmann::json to_json(const FlowReport& f);
nlohmann::json to_json(const TableAccounting& a);
/// Whole report document, schema-versioned.
nlohmann::json report_json(const AnalysisResult& r, const AnalyzerConfig& cfg);

}  // namespace dapper
