#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace dapper {

/// Nanoseconds since the capture epoch.
using Timestamp = std::int64_t;
/// Nanoseconds.
using Duration = std::int64_t;

constexpr Duration kMicrosecond = 1'000;
constexpr Duration kMillisecond = 1'000'000;
constexpr Duration kSecond = 1'000'000'000;

constexpr std::uint8_t kMaxWindowScale = 14;

struct TcpFlags {
  bool syn = false;
  bool ack = false;
  bool fin = false;
  bool rst = false;
  bool psh = false;

  friend bool operator==(const TcpFlags&, const TcpFlags&) = default;
};

struct TcpTimestamps {
  std::uint32_t tsval = 0;
  std::uint32_t tsecr = 0;

  friend bool operator==(const TcpTimestamps&, const TcpTimestamps&) = default;
};

struct TcpOptions {
  std::optional<std::uint16_t> mss;
  std::optional<std::uint8_t> wscale;
  bool sack_permitted = false;
  std::optional<TcpTimestamps> timestamps;
  // SACK blocks are counted, never interpreted.
  std::uint8_t sack_blocks = 0;
  // Set when a wscale above 14 was seen and clamped.
  bool wscale_clamped = false;
  bool malformed = false;

  friend bool operator==(const TcpOptions&, const TcpOptions&) = default;
};

struct PacketRecord {
  Timestamp timestamp = 0;
  std::uint32_t src_ip = 0;
  std::uint32_t dst_ip = 0;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint32_t seq = 0;
  std::uint32_t ack = 0;
  TcpFlags flags;
  std::uint16_t raw_window = 0;
  std::uint32_t payload_len = 0;
  TcpOptions options;
  // Header geometry as captured; payload_len + ip_header_len +
  // tcp_header_len == ip_total_len.
  std::uint16_t ip_total_len = 0;
  std::uint8_t ip_header_len = 20;
  std::uint8_t tcp_header_len = 20;

  bool has_payload() const noexcept { return payload_len > 0; }

  friend bool operator==(const PacketRecord&, const PacketRecord&) = default;
};

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Walks the kind/length TLVs that follow the fixed 20-byte TCP header.
/// Never reads outside `bytes`; on a bad length the result is marked
/// malformed and keeps whatever was decoded before the fault.
TcpOptions parse_tcp_options(std::span<const std::uint8_t> bytes) noexcept;

/// Serializes options as a TLV block padded with NOPs to a 4-byte multiple.
std::vector<std::uint8_t> encode_tcp_options(const TcpOptions& opts);

/// raw_window << scale, scale clamped to 14. Kept off the per-packet
/// register path; callers query both values and shift here.
std::uint64_t effective_rwnd(std::uint16_t raw_window, std::uint8_t scale) noexcept;

enum class SkipReason { not_ipv4, not_tcp, malformed };

/// Decodes one Ethernet frame. Returns nullopt (and the reason) for frames
/// that are not TCP over IPv4.
std::optional<PacketRecord> parse_ethernet_frame(std::span<const std::uint8_t> frame,
                                                 Timestamp ts, SkipReason* reason = nullptr);

/// Builds an Ethernet/IPv4/TCP frame (zero payload bytes) for a record.
std::vector<std::uint8_t> build_ethernet_frame(const PacketRecord& rec);

/// Fills tcp_header_len / ip_total_len from options and payload_len.
void normalize_header_lengths(PacketRecord& rec);

struct PcapReadResult {
  std::vector<PacketRecord> packets;
  std::size_t skipped = 0;
  bool truncated = false;
  std::string warning;
  bool nanosecond_magic = false;
};

/// Throws IngestError for a malformed global header or a non-Ethernet link.
PcapReadResult parse_pcap_stream(std::span<const std::uint8_t> bytes);
PcapReadResult parse_pcap_file(const std::string& path);

/// Writes a little-endian pcap (nanosecond magic when `nanosecond`).
void write_pcap(std::ostream& out, std::span<const PacketRecord> packets, bool nanosecond = true);

// Canonical event format: one JSON object per line.
nlohmann::json to_json(const PacketRecord& rec);
PacketRecord packet_from_json(const nlohmann::json& j);
void write_events(std::ostream& out, std::span<const PacketRecord> packets);
/// Throws IngestError on an unparsable line.
std::vector<PacketRecord> read_events(std::istream& in);

std::string format_ipv4(std::uint32_t addr);
std::optional<std::uint32_t> parse_ipv4(const std::string& text);

}  // namespace dapper
