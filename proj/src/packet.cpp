#include "dapper/packet.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace dapper {

namespace {

constexpr std::uint8_t kOptEol = 0;
constexpr std::uint8_t kOptNop = 1;
constexpr std::uint8_t kOptMss = 2;
constexpr std::uint8_t kOptWscale = 3;
constexpr std::uint8_t kOptSackPermitted = 4;
constexpr std::uint8_t kOptSack = 5;
constexpr std::uint8_t kOptTimestamps = 8;

constexpr std::uint32_t kPcapMagicMicro = 0xa1b2c3d4;
constexpr std::uint32_t kPcapMagicNano = 0xa1b23c4d;
constexpr std::uint32_t kLinkEthernet = 1;
constexpr std::size_t kPcapGlobalHeader = 24;
constexpr std::size_t kPcapRecordHeader = 16;
constexpr std::size_t kEthernetHeader = 14;
constexpr std::uint16_t kEtherTypeIpv4 = 0x0800;
constexpr std::uint8_t kIpProtoTcp = 6;

std::uint16_t be16(const std::uint8_t* p) { return static_cast<std::uint16_t>((p[0] << 8) | p[1]); }

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

std::uint32_t le32(const std::uint8_t* p) {
  return (std::uint32_t{p[3]} << 24) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[1]} << 8) |
         std::uint32_t{p[0]};
}

void put16(std::vector<std::uint8_t>& v, std::uint16_t x) {
  v.push_back(static_cast<std::uint8_t>(x >> 8));
  v.push_back(static_cast<std::uint8_t>(x));
}

void put32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  put16(v, static_cast<std::uint16_t>(x >> 16));
  put16(v, static_cast<std::uint16_t>(x));
}

void put_le32(std::ostream& out, std::uint32_t x) {
  const std::array<char, 4> b{static_cast<char>(x), static_cast<char>(x >> 8),
                              static_cast<char>(x >> 16), static_cast<char>(x >> 24)};
  out.write(b.data(), b.size());
}

void put_le16(std::ostream& out, std::uint16_t x) {
  const std::array<char, 2> b{static_cast<char>(x), static_cast<char>(x >> 8)};
  out.write(b.data(), b.size());
}

}  // namespace

TcpOptions parse_tcp_options(std::span<const std::uint8_t> bytes) noexcept {
  TcpOptions opts;
  std::size_t i = 0;
  while (i < bytes.size()) {
    const std::uint8_t kind = bytes[i];
    if (kind == kOptEol) break;
    if (kind == kOptNop) {
      ++i;
      continue;
    }
    if (i + 1 >= bytes.size()) {
      opts.malformed = true;
      break;
    }
    const std::uint8_t len = bytes[i + 1];
    if (len < 2 || i + len > bytes.size()) {
      opts.malformed = true;
      break;
    }
    const std::uint8_t* body = bytes.data() + i + 2;
    switch (kind) {
      case kOptMss:
        if (len == 4) {
          opts.mss = be16(body);
        } else {
          opts.malformed = true;
        }
        break;
      case kOptWscale:
        if (len == 3) {
          std::uint8_t shift = body[0];
          if (shift > kMaxWindowScale) {
            shift = kMaxWindowScale;
            opts.wscale_clamped = true;
          }
          opts.wscale = shift;
        } else {
          opts.malformed = true;
        }
        break;
      case kOptSackPermitted:
        if (len == 2) {
          opts.sack_permitted = true;
        } else {
          opts.malformed = true;
        }
        break;
      case kOptSack:
        opts.sack_blocks = static_cast<std::uint8_t>(opts.sack_blocks + (len - 2) / 8);
        break;
      case kOptTimestamps:
        if (len == 10) {
          opts.timestamps = TcpTimestamps{be32(body), be32(body + 4)};
        } else {
          opts.malformed = true;
        }
        break;
      default:
        break;
    }
    if (opts.malformed) break;
    i += len;
  }
  return opts;
}

std::vector<std::uint8_t> encode_tcp_options(const TcpOptions& opts) {
  std::vector<std::uint8_t> out;
  if (opts.mss) {
    out.insert(out.end(), {kOptMss, 4});
    put16(out, *opts.mss);
  }
  if (opts.sack_permitted) {
    out.insert(out.end(), {kOptNop, kOptNop, kOptSackPermitted, 2});
  }
  if (opts.timestamps) {
    out.insert(out.end(), {kOptNop, kOptNop, kOptTimestamps, 10});
    put32(out, opts.timestamps->tsval);
    put32(out, opts.timestamps->tsecr);
  }
  if (opts.wscale) {
    out.insert(out.end(), {kOptNop, kOptWscale, 3, *opts.wscale});
  }
  while (out.size() % 4 != 0) out.push_back(kOptNop);
  return out;
}

std::uint64_t effective_rwnd(std::uint16_t raw_window, std::uint8_t scale) noexcept {
  return std::uint64_t{raw_window} << std::min(scale, kMaxWindowScale);
}

void normalize_header_lengths(PacketRecord& rec) {
  rec.ip_header_len = 20;
  rec.tcp_header_len = static_cast<std::uint8_t>(20 + encode_tcp_options(rec.options).size());
  rec.ip_total_len =
      static_cast<std::uint16_t>(rec.ip_header_len + rec.tcp_header_len + rec.payload_len);
}

std::optional<PacketRecord> parse_ethernet_frame(std::span<const std::uint8_t> frame, Timestamp ts,
                                                 SkipReason* reason) {
  auto skip = [&](SkipReason r) -> std::optional<PacketRecord> {
    if (reason) *reason = r;
    return std::nullopt;
  };
  if (frame.size() < kEthernetHeader) return skip(SkipReason::malformed);
  if (be16(frame.data() + 12) != kEtherTypeIpv4) return skip(SkipReason::not_ipv4);
  const auto ip = frame.subspan(kEthernetHeader);
  if (ip.size() < 20 || (ip[0] >> 4) != 4) return skip(SkipReason::not_ipv4);
  const std::size_t ihl = std::size_t{ip[0] & 0x0fu} * 4;
  if (ihl < 20 || ip.size() < ihl) return skip(SkipReason::malformed);
  if (ip[9] != kIpProtoTcp) return skip(SkipReason::not_tcp);
  const std::uint16_t total_len = be16(ip.data() + 2);
  const auto tcp = ip.subspan(ihl);
  if (tcp.size() < 20) return skip(SkipReason::malformed);
  const std::size_t thl = static_cast<std::size_t>(tcp[12] >> 4) * 4;
  if (thl < 20 || tcp.size() < thl || total_len < ihl + thl) return skip(SkipReason::malformed);

  PacketRecord rec;
  rec.timestamp = ts;
  rec.src_ip = be32(ip.data() + 12);
  rec.dst_ip = be32(ip.data() + 16);
  rec.src_port = be16(tcp.data());
  rec.dst_port = be16(tcp.data() + 2);
  rec.seq = be32(tcp.data() + 4);
  rec.ack = be32(tcp.data() + 8);
  const std::uint8_t flags = tcp[13];
  rec.flags.fin = flags & 0x01;
  rec.flags.syn = flags & 0x02;
  rec.flags.rst = flags & 0x04;
  rec.flags.psh = flags & 0x08;
  rec.flags.ack = flags & 0x10;
  rec.raw_window = be16(tcp.data() + 14);
  rec.options = parse_tcp_options(tcp.subspan(20, thl - 20));
  rec.ip_total_len = total_len;
  rec.ip_header_len = static_cast<std::uint8_t>(ihl);
  rec.tcp_header_len = static_cast<std::uint8_t>(thl);
  rec.payload_len = static_cast<std::uint32_t>(total_len - ihl - thl);
  return rec;
}

std::vector<std::uint8_t> build_ethernet_frame(const PacketRecord& rec) {
  const auto opts = encode_tcp_options(rec.options);
  const std::size_t thl = 20 + opts.size();
  const auto total = static_cast<std::uint16_t>(20 + thl + rec.payload_len);
  std::vector<std::uint8_t> f;
  f.reserve(kEthernetHeader + total);
  // Locally administered MACs; the analyzer never looks at them.
  f.insert(f.end(), {0x02, 0, 0, 0, 0, 2, 0x02, 0, 0, 0, 0, 1});
  put16(f, kEtherTypeIpv4);
  f.insert(f.end(), {0x45, 0});
  put16(f, total);
  f.insert(f.end(), {0, 0, 0x40, 0, 64, kIpProtoTcp, 0, 0});
  put32(f, rec.src_ip);
  put32(f, rec.dst_ip);
  put16(f, rec.src_port);
  put16(f, rec.dst_port);
  put32(f, rec.seq);
  put32(f, rec.ack);
  std::uint8_t flags = 0;
  if (rec.flags.fin) flags |= 0x01;
  if (rec.flags.syn) flags |= 0x02;
  if (rec.flags.rst) flags |= 0x04;
  if (rec.flags.psh) flags |= 0x08;
  if (rec.flags.ack) flags |= 0x10;
  f.push_back(static_cast<std::uint8_t>((thl / 4) << 4));
  f.push_back(flags);
  put16(f, rec.raw_window);
  f.insert(f.end(), {0, 0, 0, 0});
  f.insert(f.end(), opts.begin(), opts.end());
  f.resize(f.size() + rec.payload_len, 0);
  return f;
}

PcapReadResult parse_pcap_stream(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPcapGlobalHeader) throw IngestError("pcap: truncated global header");
  const std::uint32_t magic_le = le32(bytes.data());
  const std::uint32_t magic_be = be32(bytes.data());
  bool swapped = false;
  bool nano = false;
  if (magic_le == kPcapMagicMicro || magic_le == kPcapMagicNano) {
    nano = magic_le == kPcapMagicNano;
  } else if (magic_be == kPcapMagicMicro || magic_be == kPcapMagicNano) {
    swapped = true;
    nano = magic_be == kPcapMagicNano;
  } else {
    throw IngestError("pcap: bad magic number");
  }
  auto rd32 = [&](std::size_t off) { return swapped ? be32(bytes.data() + off) : le32(bytes.data() + off); };
  const std::uint32_t linktype = rd32(20);
  if (linktype != kLinkEthernet) {
    throw IngestError("pcap: unsupported link type " + std::to_string(linktype));
  }

  PcapReadResult result;
  result.nanosecond_magic = nano;
  std::size_t off = kPcapGlobalHeader;
  while (off < bytes.size()) {
    if (bytes.size() - off < kPcapRecordHeader) {
      result.truncated = true;
      break;
    }
    const std::uint32_t sec = rd32(off);
    const std::uint32_t frac = rd32(off + 4);
    const std::uint32_t caplen = rd32(off + 8);
    off += kPcapRecordHeader;
    if (caplen > bytes.size() - off) {
      result.truncated = true;
      break;
    }
    const Timestamp ts = Timestamp{sec} * kSecond + (nano ? Timestamp{frac} : Timestamp{frac} * kMicrosecond);
    if (auto rec = parse_ethernet_frame(bytes.subspan(off, caplen), ts)) {
      result.packets.push_back(std::move(*rec));
    } else {
      ++result.skipped;
    }
    off += caplen;
  }
  if (result.truncated) {
    result.warning = "pcap: truncated record after " + std::to_string(result.packets.size()) +
                     " packets";
  }
  return result;
}

PcapReadResult parse_pcap_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open " + path);
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), {}};
  return parse_pcap_stream(bytes);
}

void write_pcap(std::ostream& out, std::span<const PacketRecord> packets, bool nanosecond) {
  put_le32(out, nanosecond ? kPcapMagicNano : kPcapMagicMicro);
  put_le16(out, 2);
  put_le16(out, 4);
  put_le32(out, 0);
  put_le32(out, 0);
  put_le32(out, 65535);
  put_le32(out, kLinkEthernet);
  for (const auto& rec : packets) {
    const auto frame = build_ethernet_frame(rec);
    const auto sec = static_cast<std::uint32_t>(rec.timestamp / kSecond);
    const Timestamp sub = rec.timestamp % kSecond;
    put_le32(out, sec);
    put_le32(out, static_cast<std::uint32_t>(nanosecond ? sub : sub / kMicrosecond));
    put_le32(out, static_cast<std::uint32_t>(frame.size()));
    put_le32(out, static_cast<std::uint32_t>(frame.size()));
    out.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(frame.size()));
  }
}

std::string format_ipv4(std::uint32_t a) {
  return std::to_string(a >> 24) + "." + std::to_string((a >> 16) & 0xff) + "." +
         std::to_string((a >> 8) & 0xff) + "." + std::to_string(a & 0xff);
}

std::optional<std::uint32_t> parse_ipv4(const std::string& text) {
  std::uint32_t out = 0;
  int parts = 0;
  std::size_t i = 0;
  while (parts < 4) {
    if (i >= text.size() || text[i] < '0' || text[i] > '9') return std::nullopt;
    unsigned v = 0;
    std::size_t digits = 0;
    while (i < text.size() && text[i] >= '0' && text[i] <= '9' && digits < 4) {
      v = v * 10 + static_cast<unsigned>(text[i] - '0');
      ++i;
      ++digits;
    }
    if (v > 255) return std::nullopt;
    out = (out << 8) | v;
    ++parts;
    if (parts < 4) {
      if (i >= text.size() || text[i] != '.') return std::nullopt;
      ++i;
    }
  }
  if (i != text.size()) return std::nullopt;
  return out;
}

nlohmann::json to_json(const PacketRecord& r) {
  nlohmann::json opts = nlohmann::json::object();
  if (r.options.mss) opts["mss"] = *r.options.mss;
  if (r.options.wscale) opts["wscale"] = *r.options.wscale;
  if (r.options.sack_permitted) opts["sack_permitted"] = true;
  if (r.options.timestamps) opts["timestamps"] = {r.options.timestamps->tsval, r.options.timestamps->tsecr};
  if (r.options.sack_blocks) opts["sack_blocks"] = r.options.sack_blocks;
  if (r.options.wscale_clamped) opts["wscale_clamped"] = true;
  if (r.options.malformed) opts["malformed"] = true;
  std::string flags;
  if (r.flags.syn) flags += 'S';
  if (r.flags.ack) flags += 'A';
  if (r.flags.fin) flags += 'F';
  if (r.flags.rst) flags += 'R';
  if (r.flags.psh) flags += 'P';
  return nlohmann::json{{"ts", r.timestamp},
                        {"src", format_ipv4(r.src_ip)},
                        {"dst", format_ipv4(r.dst_ip)},
                        {"sport", r.src_port},
                        {"dport", r.dst_port},
                        {"seq", r.seq},
                        {"ack", r.ack},
                        {"flags", flags},
                        {"win", r.raw_window},
                        {"len", r.payload_len},
                        {"opts", opts},
                        {"ip_len", r.ip_total_len},
                        {"ihl", r.ip_header_len},
                        {"thl", r.tcp_header_len}};
}

PacketRecord packet_from_json(const nlohmann::json& j) {
  PacketRecord r;
  r.timestamp = j.at("ts").get<Timestamp>();
  const auto src = parse_ipv4(j.at("src").get<std::string>());
  const auto dst = parse_ipv4(j.at("dst").get<std::string>());
  if (!src || !dst) throw IngestError("event: bad IPv4 address");
  r.src_ip = *src;
  r.dst_ip = *dst;
  r.src_port = j.at("sport").get<std::uint16_t>();
  r.dst_port = j.at("dport").get<std::uint16_t>();
  r.seq = j.at("seq").get<std::uint32_t>();
  r.ack = j.at("ack").get<std::uint32_t>();
  for (char c : j.at("flags").get<std::string>()) {
    switch (c) {
      case 'S': r.flags.syn = true; break;
      case 'A': r.flags.ack = true; break;
      case 'F': r.flags.fin = true; break;
      case 'R': r.flags.rst = true; break;
      case 'P': r.flags.psh = true; break;
      default: throw IngestError(std::string("event: unknown flag ") + c);
    }
  }
  r.raw_window = j.at("win").get<std::uint16_t>();
  r.payload_len = j.at("len").get<std::uint32_t>();
  if (const auto it = j.find("opts"); it != j.end()) {
    const auto& o = *it;
    if (o.contains("mss")) r.options.mss = o["mss"].get<std::uint16_t>();
    if (o.contains("wscale")) r.options.wscale = o["wscale"].get<std::uint8_t>();
    r.options.sack_permitted = o.value("sack_permitted", false);
    if (o.contains("timestamps")) {
      r.options.timestamps = TcpTimestamps{o["timestamps"][0].get<std::uint32_t>(),
                                           o["timestamps"][1].get<std::uint32_t>()};
    }
    r.options.sack_blocks = o.value("sack_blocks", std::uint8_t{0});
    r.options.wscale_clamped = o.value("wscale_clamped", false);
    r.options.malformed = o.value("malformed", false);
  }
  if (j.contains("ip_len")) {
    r.ip_total_len = j["ip_len"].get<std::uint16_t>();
    r.ip_header_len = j.value("ihl", std::uint8_t{20});
    r.tcp_header_len = j.value("thl", std::uint8_t{20});
  } else {
    normalize_header_lengths(r);
  }
  return r;
}

void write_events(std::ostream& out, std::span<const PacketRecord> packets) {
  for (const auto& p : packets) out << to_json(p).dump() << '\n';
}

std::vector<PacketRecord> read_events(std::istream& in) {
  std::vector<PacketRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(packet_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw IngestError("events line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dapper
