#include "dapper/flow_table.hpp"

#include <cmath>

#include <zlib.h>

namespace dapper {

std::array<std::uint8_t, 12> CanonicalKey::bytes() const noexcept {
  return {static_cast<std::uint8_t>(ip_a >> 24), static_cast<std::uint8_t>(ip_a >> 16),
          static_cast<std::uint8_t>(ip_a >> 8),  static_cast<std::uint8_t>(ip_a),
          static_cast<std::uint8_t>(ip_b >> 24), static_cast<std::uint8_t>(ip_b >> 16),
          static_cast<std::uint8_t>(ip_b >> 8),  static_cast<std::uint8_t>(ip_b),
          static_cast<std::uint8_t>(port_a >> 8), static_cast<std::uint8_t>(port_a),
          static_cast<std::uint8_t>(port_b >> 8), static_cast<std::uint8_t>(port_b)};
}

std::pair<CanonicalKey, Direction> canonicalize(std::uint32_t src_ip, std::uint32_t dst_ip,
                                                std::uint16_t src_port,
                                                std::uint16_t dst_port) noexcept {
  const bool forward = src_ip != dst_ip ? src_ip > dst_ip : src_port >= dst_port;
  if (forward) return {CanonicalKey{src_ip, dst_ip, src_port, dst_port}, Direction::forward};
  return {CanonicalKey{dst_ip, src_ip, dst_port, src_port}, Direction::reverse};
}

std::uint32_t key_crc32(const CanonicalKey& key) noexcept {
  const auto b = key.bytes();
  return static_cast<std::uint32_t>(::crc32(0L, b.data(), static_cast<uInt>(b.size())));
}

std::size_t hash_index(const CanonicalKey& key, std::size_t table_size) {
  if (!is_power_of_two(table_size)) {
    throw std::invalid_argument("hash_index: table size must be a power of two >= 2");
  }
  return static_cast<std::size_t>(key_crc32(key)) & (table_size - 1);
}

double expected_collision_probability(std::size_t flows, std::size_t table_size) {
  if (flows == 0 || table_size == 0) return 0.0;
  const double n = static_cast<double>(table_size);
  return 1.0 - std::pow(1.0 - 1.0 / n, static_cast<double>(flows - 1));
}

}  // namespace dapper
