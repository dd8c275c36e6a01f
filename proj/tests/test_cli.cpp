#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dapper/packet.hpp"

namespace fs = std::filesystem;

namespace {

// Scratch directory for one run, removed at exit.
struct Workspace {
  fs::path path = fs::temp_directory_path() / ("dapper_cli_" + std::to_string(::getpid()));
  Workspace() { fs::create_directories(path); }
  ~Workspace() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
} workspace;

const fs::path& dir() { return workspace.path; }

std::string at(const std::string& name) { return (dir() / name).string(); }

int sh(const std::string& args) {
  const std::string cmd = std::string(DAPPER_BIN) + " " + args + " >" + at("stdout") + " 2>" + at("stderr");
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

nlohmann::json load(const std::string& path) {
  std::ifstream in(path);
  return nlohmann::json::parse(in);
}

void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

}  // namespace

TEST_CASE("simulate then analyze") {
  REQUIRE(sh("simulate --out " + at("a.ndjson") + " --truth " + at("a_truth.json") + " --pcap " +
             at("a.pcap")) == 0);
  CHECK(sh("analyze --events " + at("a.ndjson") + " --report " + at("a.json")) == 0);
  const auto j = load(at("a.json"));
  CHECK(j["schema_version"] == 1);
  CHECK(j["flows"].size() == 1);
  CHECK(sh("analyze --pcap " + at("a.pcap") + " --report " + at("a_pcap.json")) == 0);
  CHECK(load(at("a_pcap.json"))["flows"][0]["metrics"]["counters"] ==
        j["flows"][0]["metrics"]["counters"]);
  CHECK(sh("report --in " + at("a.json") + " --fractions") == 0);
}

TEST_CASE("receiver-limited scenario end to end") {
  write(at("rcv.json"),
        R"({"seed": 3, "file_size": 262144, "receiver_problem": {"kind": "small_rcvbuf", "rcvbuf": 4380}})");
  REQUIRE(sh("simulate --scenario " + at("rcv.json") + " --out " + at("rcv.ndjson")) == 0);
  REQUIRE(sh("analyze --events " + at("rcv.ndjson") + " --report " + at("rcv_report.json")) == 0);
  const auto j = load(at("rcv_report.json"));
  CHECK(j["flows"][0]["diagnosis"]["dominant_category"] == "receiver");
}

TEST_CASE("hardware emulation flag") {
  REQUIRE(sh("simulate --out " + at("h.ndjson")) == 0);
  REQUIRE(sh("analyze --mode hardware-emu --table-size 1024 --events " + at("h.ndjson") +
             " --report " + at("h.json")) == 0);
  const auto j = load(at("h.json"));
  CHECK(j["mode"] == "hardware-emu");
  CHECK(j["flows"][0]["sanity_ok"] == true);
}

TEST_CASE("two-phase flags") {
  REQUIRE(sh("simulate --out " + at("t.ndjson")) == 0);
  CHECK(sh("analyze --two-phase --badness-rate 5000000 --events " + at("t.ndjson") +
           " --report " + at("t.json")) == 0);
  // The default 1 Mbps transfer is slower than the threshold.
  CHECK_FALSE(load(at("t.json"))["flows"][0]["phase_history"]["promotion"].is_null());
  CHECK(sh("analyze --two-phase --events " + at("t.ndjson")) == 3);
}

TEST_CASE("empty input gives an empty report") {
  write(at("empty.ndjson"), "");
  CHECK(sh("analyze --events " + at("empty.ndjson") + " --report " + at("empty.json")) == 0);
  const auto j = load(at("empty.json"));
  CHECK(j["flows"].empty());
  CHECK(j["packets"] == 0);
}

TEST_CASE("input errors exit with 2") {
  CHECK(sh("analyze --pcap " + at("missing.pcap")) == 2);
  CHECK(sh("analyze --events " + at("missing.ndjson")) == 2);
  write(at("garbage.pcap"), "this is not a capture file at all");
  CHECK(sh("analyze --pcap " + at("garbage.pcap")) == 2);
  write(at("garbage.ndjson"), "{not json\n");
  CHECK(sh("analyze --events " + at("garbage.ndjson")) == 2);
  CHECK(sh("report --in " + at("missing.json")) == 2);
  write(at("bad_scenario.json"), "[1, 2");
  CHECK(sh("simulate --scenario " + at("bad_scenario.json")) == 2);
}

TEST_CASE("config errors exit with 3") {
  REQUIRE(sh("simulate --out " + at("c.ndjson")) == 0);
  const std::string ev = " --events " + at("c.ndjson");
  CHECK(sh("analyze --table-size 1000" + ev) == 3);
  CHECK(sh("analyze --mode turbo" + ev) == 3);
  CHECK(sh("analyze --force-promote nonsense" + ev) == 3);
  CHECK(sh("analyze --pcap a --events b") == 3);
  CHECK(sh("evaluate --trials 0") == 3);
  CHECK(sh("evaluate --trials 1 --problems bogus") == 3);
  CHECK(sh("frobnicate") == 3);
  write(at("neg.json"), R"({"file_size": 0})");
  CHECK(sh("simulate --scenario " + at("neg.json")) == 3);
  write(at("typo.json"), R"({"receiver": {"kind": "small_rcvbuf", "rcvbuf": 4380}})");
  CHECK(sh("simulate --scenario " + at("typo.json")) == 3);
}

TEST_CASE("evaluate writes table, csv and json") {
  CHECK(sh("evaluate --trials 2 --problems receiver,network --csv " + at("e.csv") + " --json " +
           at("e.json")) == 0);
  const auto j = load(at("e.json"));
  CHECK(j["classes"].size() == 2);
  CHECK(j["trials"].size() == 4);
  std::ifstream csv(at("e.csv"));
  std::string header;
  std::getline(csv, header);
  CHECK(header == "problem,trials,detected,exact,tpr,accuracy");
}

TEST_CASE("exit codes are stable across runs") {
  for (int i = 0; i < 3; ++i) {
    CHECK(sh("analyze --pcap " + at("missing.pcap")) == 2);
    CHECK(sh("analyze --table-size 3 --events " + at("c.ndjson")) == 3);
  }
}
